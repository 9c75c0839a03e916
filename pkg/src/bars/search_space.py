"""The two-level search space: supernet, cell template, genotype and decoding.

A network is a full-precision stem, ``num_stages`` stages of normal cells
separated by reduction cells, and a pooled linear classifier.  Each cell is a
DAG over ``nodes_per_cell`` nodes; node 0 is a binary 1x1 preprocess of the
cell input and the last node plus a cell-level shortcut is the cell output.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .binarize import BinaryConvBN, shared_binary_conv_bn
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .relaxation import depth_aggregate, gumbel_max_sample, gumbel_softmax_sample, width_channel_counts, width_mask

KNOWN_OPS = ("bconv3x3", "skip", "none")
GENOTYPE_FORMAT_VERSION = 1


@dataclass
class SearchSpaceConfig:
    num_stages: int = 3
    cells_per_stage: int = 3
    nodes_per_cell: int = 5
    base_channels: tuple = (48, 96, 192)
    width_choices: tuple = (0.25, 0.5, 0.75, 1.0)
    op_set: tuple = KNOWN_OPS
    num_classes: int = 10
    image_size: int = 32
    in_channels: int = 3
    preprocess_kernel: int = 1
    flops_budget: float = float("inf")
    complexity_measure: str = "equivalent_ops"
    theta_over: float = 0.2
    theta_under: float = 0.0

    def __post_init__(self):
        self.base_channels = tuple(int(c) for c in self.base_channels)
        self.width_choices = tuple(float(r) for r in self.width_choices)
        self.op_set = tuple(self.op_set)
        self.flops_budget = float(self.flops_budget)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown search space key(s): {', '.join(unknown)}")
        return cls(**d)

    def validate(self):
        errors = []
        if self.num_stages < 1:
            errors.append("num_stages must be >= 1")
        if self.cells_per_stage < 0:
            errors.append("cells_per_stage must be >= 0")
        if self.nodes_per_cell < 2:
            errors.append("nodes_per_cell must be >= 2")
        if len(self.base_channels) != self.num_stages:
            errors.append(f"base_channels has {len(self.base_channels)} entries for {self.num_stages} stages")
        w = self.width_choices
        if not w or list(w) != sorted(w) or w[-1] != 1.0 or any(not 0 < r <= 1 for r in w):
            errors.append(f"width_choices must be ascending in (0, 1] and end at 1.0, got {list(w)}")
        for s, c in enumerate(self.base_channels):
            for r in w:
                if abs(r * c - round(r * c)) > 1e-9 or round(r * c) < 1:
                    errors.append(f"stage {s}: width {r} x {c} channels is not a positive integer")
        for s in range(1, len(self.base_channels)):
            if self.base_channels[s] != 2 * self.base_channels[s - 1]:
                errors.append(
                    f"stage {s}: base channels {self.base_channels[s]} must double stage {s - 1} "
                    f"({self.base_channels[s - 1]}) across the reduction cell"
                )
        if self.image_size % (2 ** max(self.num_stages - 1, 0)):
            errors.append(f"image_size {self.image_size} is not divisible by 2^{self.num_stages - 1}")
        bad_ops = [op for op in self.op_set if op not in KNOWN_OPS]
        if bad_ops or len(set(self.op_set)) != len(self.op_set):
            errors.append(f"op_set must be distinct ops from {KNOWN_OPS}, got {list(self.op_set)}")
        if self.preprocess_kernel not in (1, 3):
            errors.append("preprocess_kernel must be 1 or 3")
        if self.complexity_measure not in ("equivalent_ops", "flops"):
            errors.append("complexity_measure must be 'equivalent_ops' or 'flops'")
        if not self.flops_budget > 0:
            errors.append("flops_budget must be positive")
        if errors:
            raise ValueError("invalid search space: " + "; ".join(errors))
        return self

    # -- derived geometry -------------------------------------------------

    def edges(self):
        """Candidate edges (i, j), ordered by target node then source."""
        n = self.nodes_per_cell
        return [(i, j) for j in range(1, n) for i in range(j)]

    @property
    def num_cell_types(self):
        return self.num_stages + 1

    @property
    def reduction_type(self):
        return self.num_stages

    def stage_resolution(self, s):
        return self.image_size // (2**s)

    def width_counts(self, s):
        return width_channel_counts(self.base_channels[s], self.width_choices)

    def num_cells(self):
        return self.num_stages * self.cells_per_stage + (self.num_stages - 1)

    def fingerprint(self):
        keys = ("num_stages", "cells_per_stage", "nodes_per_cell", "base_channels",
                "width_choices", "op_set", "preprocess_kernel")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self):
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["width_choices"] = list(self.width_choices)
        d["op_set"] = list(self.op_set)
        return d


# ---------------------------------------------------------------------------
# genotype
# ---------------------------------------------------------------------------


@dataclass
class StageGene:
    topology: list
    width_index: int
    depth: int


@dataclass
class Genotype:
    stages: list
    reduction_topology: list
    fingerprint: str = ""
    format_version: int = GENOTYPE_FORMAT_VERSION

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "fingerprint": self.fingerprint,
            "stages": [
                {"topology": [list(e) for e in st.topology], "width_index": st.width_index, "depth": st.depth}
                for st in self.stages
            ],
            "reduction_topology": [list(e) for e in self.reduction_topology],
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("format_version", GENOTYPE_FORMAT_VERSION)
        if version != GENOTYPE_FORMAT_VERSION:
            raise ValueError(f"unsupported genotype format_version {version}")
        stages = [
            StageGene([tuple(e) for e in st["topology"]], int(st["width_index"]), int(st["depth"]))
            for st in d["stages"]
        ]
        return cls(stages, [tuple(e) for e in d["reduction_topology"]], d.get("fingerprint", ""), version)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.loads(f.read())

    def topology_map(self, cell_type):
        """{(i, j): op_name} for a normal stage index or ``"reduction"``."""
        topo = self.reduction_topology if cell_type == "reduction" else self.stages[cell_type].topology
        return {(int(i), int(j)): op for i, j, op in topo}


def _op_name(op, op_set):
    if isinstance(op, (int, np.integer)) and not isinstance(op, bool):
        return op_set[op] if 0 <= op < len(op_set) else None
    return op if op in op_set else None


def reachable_nodes(topology, n_nodes):
    """Nodes reachable from node 0 through non-none edges."""
    live = {0}
    for j in range(1, n_nodes):
        if any(topology.get((i, j), "none") != "none" for i in live if i < j):
            live.add(j)
    return live


def _reaches_output(topology, n_nodes):
    out = {n_nodes - 1}
    for i in range(n_nodes - 2, -1, -1):
        if any(topology.get((i, j), "none") != "none" for j in out if j > i):
            out.add(i)
    return out


@dataclass
class GenotypeReport:
    errors: list = field(default_factory=list)
    dead_nodes: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.errors


def validate_genotype(g, config):
    """Check a genotype against ``config``; never raises."""
    report = GenotypeReport()
    edges = set(config.edges())
    n = config.nodes_per_cell

    def check_topology(label, topo):
        seen = set()
        for entry in topo:
            try:
                i, j, op = entry
                i, j = int(i), int(j)
            except (TypeError, ValueError):
                report.errors.append(f"{label}: malformed edge {entry!r}")
                continue
            if (i, j) not in edges:
                report.errors.append(f"{label}: invalid edge ({i}, {j})")
            if (i, j) in seen:
                report.errors.append(f"{label}: duplicate edge ({i}, {j})")
            seen.add((i, j))
            if _op_name(op, config.op_set) is None:
                report.errors.append(f"{label}: invalid op id {op!r} on edge ({i}, {j})")
        named = {}
        for entry in topo:
            try:
                i, j, op = entry
                named[(int(i), int(j))] = _op_name(op, config.op_set) or "none"
            except (TypeError, ValueError):
                pass
        dead = sorted(set(range(n)) - (reachable_nodes(named, n) & _reaches_output(named, n)))
        if dead:
            report.dead_nodes[label] = dead

    try:
        if g.format_version != GENOTYPE_FORMAT_VERSION:
            report.errors.append(f"unsupported format_version {g.format_version}")
        if g.fingerprint and g.fingerprint != config.fingerprint():
            report.errors.append(f"config fingerprint mismatch ({g.fingerprint} != {config.fingerprint()})")
        if len(g.stages) != config.num_stages:
            report.errors.append(f"expected {config.num_stages} stages, got {len(g.stages)}")
        for s, st in enumerate(g.stages):
            if not 0 <= st.depth <= config.cells_per_stage:
                report.errors.append(f"stage {s}: depth out of range ({st.depth} not in 0..{config.cells_per_stage})")
            if not 0 <= st.width_index < len(config.width_choices):
                report.errors.append(f"stage {s}: width index out of range ({st.width_index})")
            check_topology(f"stage {s}", st.topology)
        check_topology("reduction", g.reduction_topology)
    except (AttributeError, TypeError) as exc:
        report.errors.append(f"malformed genotype: {exc}")
    return report


def normalize_genotype(g, config):
    """Genotype with op ids resolved to names and edges in canonical order."""
    order = {e: k for k, e in enumerate(config.edges())}

    def norm(topo):
        out = [(int(i), int(j), _op_name(op, config.op_set)) for i, j, op in topo]
        return sorted(out, key=lambda e: order[(e[0], e[1])])

    stages = [StageGene(norm(st.topology), st.width_index, st.depth) for st in g.stages]
    return Genotype(stages, norm(g.reduction_topology), g.fingerprint or config.fingerprint())


# ---------------------------------------------------------------------------
# architecture parameters and samples
# ---------------------------------------------------------------------------


@dataclass
class ArchSample:
    """Per-forward architecture decisions, each a simplex vector (last axis).

    ``micro`` [cell_types, edges, ops], ``width`` [stages, widths],
    ``path`` [stages, cells_per_stage + 1].
    """

    micro: Tensor
    width: Tensor
    path: Tensor


class ArchParams:
    """Logits for every architecture decision, initialized uniform (zeros)."""

    def __init__(self, config, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        e, k = len(config.edges()), len(config.op_set)
        self.config = config
        self.micro = Parameter(np.zeros((config.num_cell_types, e, k), dtype=dtype))
        self.width = Parameter(np.zeros((config.num_stages, len(config.width_choices)), dtype=dtype))
        self.path = Parameter(np.zeros((config.num_stages, config.cells_per_stage + 1), dtype=dtype))

    def parameters(self):
        return [self.micro, self.width, self.path]

    def named_parameters(self):
        return [("micro", self.micro), ("width", self.width), ("path", self.path)]

    def state_dict(self):
        return {f"alpha:{k}": p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        for k, p in self.named_parameters():
            arr = np.asarray(state[f"alpha:{k}"])
            if arr.shape != p.shape:
                raise ValueError(f"alpha {k}: shape {arr.shape} does not match search space {p.shape}")
            p.data[...] = arr

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def sample(self, tau, rng):
        """Relaxed Gumbel-softmax sample of every decision (fresh noise)."""
        return ArchSample(
            gumbel_softmax_sample(self.micro, tau, rng).m,
            gumbel_softmax_sample(self.width, tau, rng).m,
            gumbel_softmax_sample(self.path, tau, rng).m,
        )

    def hard_sample(self, rng):
        """One-hot categorical draws of every decision; returns (sample, genotype)."""
        micro, micro_idx = gumbel_max_sample(self.micro, rng)
        width, width_idx = gumbel_max_sample(self.width, rng)
        path, path_idx = gumbel_max_sample(self.path, rng)
        g = genotype_from_indices(self.config, micro_idx, width_idx, path_idx)
        dtype = self.micro.dtype
        return ArchSample(Tensor(micro.astype(dtype)), Tensor(width.astype(dtype)), Tensor(path.astype(dtype))), g

    def probabilities(self):
        def sm(a):
            z = a.data - a.data.max(axis=-1, keepdims=True)
            e = np.exp(z.astype(np.float64))
            return e / e.sum(axis=-1, keepdims=True)

        return {"micro": sm(self.micro), "width": sm(self.width), "path": sm(self.path)}


def genotype_from_indices(config, micro_idx, width_idx, path_idx):
    edges = config.edges()

    def topo(t):
        return [(i, j, config.op_set[int(micro_idx[t][e])]) for e, (i, j) in enumerate(edges)]

    stages = [StageGene(topo(s), int(width_idx[s]), int(path_idx[s])) for s in range(config.num_stages)]
    return Genotype(stages, topo(config.reduction_type), config.fingerprint())


def sample_from_genotype(g, config, dtype=None):
    """One-hot ArchSample that selects exactly the genotype's decisions."""
    dtype = dtype or ad.get_default_dtype()
    edges = config.edges()
    e_idx = {e: k for k, e in enumerate(edges)}
    none_k = config.op_set.index("none") if "none" in config.op_set else None
    micro = np.zeros((config.num_cell_types, len(edges), len(config.op_set)), dtype=dtype)

    def fill(t, topo):
        if none_k is not None:
            micro[t, :, none_k] = 1
        for i, j, op in topo:
            e = e_idx[(int(i), int(j))]
            micro[t, e, :] = 0
            micro[t, e, config.op_set.index(_op_name(op, config.op_set))] = 1

    for s, st in enumerate(g.stages):
        fill(s, st.topology)
    fill(config.reduction_type, g.reduction_topology)
    width = np.zeros((config.num_stages, len(config.width_choices)), dtype=dtype)
    path = np.zeros((config.num_stages, config.cells_per_stage + 1), dtype=dtype)
    for s, st in enumerate(g.stages):
        width[s, st.width_index] = 1
        path[s, st.depth] = 1
    return ArchSample(Tensor(micro), Tensor(width), Tensor(path))


# ---------------------------------------------------------------------------
# operations and cells
# ---------------------------------------------------------------------------


def _mask4(mask):
    return ad.reshape(mask, (1, mask.shape[0], 1, 1))


class ImprovedDownsample(Module):
    """Binary factorized reduce: two stride-2 binary 3x3 convs, concatenated.

    Branch A sees the input, branch B the input shifted by (+1, +1) with edge
    replication.  Each branch adds a 2x2 average-pool shortcut.  With
    ``c_out == 2 * c_in`` both branches produce ``c_in`` channels; narrower
    outputs take the leading channels of the concatenation.
    """

    def __init__(self, c_in, c_out, half=None, rng=None):
        half = c_in if half is None else half
        self.c_in, self.c_out, self.half = c_in, c_out, half
        self.a = min(c_out, half)
        self.b = c_out - self.a
        self.conv_a = BinaryConvBN(c_in, self.a, 3, 2, 1, rng)
        self.conv_b = BinaryConvBN(c_in, self.b, 3, 2, 1, rng) if self.b > 0 else None

    def forward(self, x, in_mask=None):
        x = ad.as_tensor(x)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"improved_downsample: spatial dims must be even, got {x.shape[2:]}")
        branch_a = ad.add(self.conv_a(x, in_mask), ad.fit_channels(ad.avgpool2x2(x), self.a))
        if self.conv_b is None:
            return branch_a
        xs = ad.spatial_shift(x, 1, 1)
        branch_b = ad.add(self.conv_b(xs, in_mask), ad.fit_channels(ad.avgpool2x2(xs), self.b))
        return ad.concat([branch_a, branch_b], axis=1)


def improved_downsample(x, block):
    """Apply an ``ImprovedDownsample`` block: [N, C, H, W] -> [N, 2C, H/2, W/2]."""
    return block(x)


def staggered_pool(x, c_out, half):
    """Parameter-free reduction: pooled input and pooled shifted input, concatenated."""
    a = min(c_out, half)
    b = c_out - a
    pa = ad.fit_channels(ad.avgpool2x2(x), a)
    if b == 0:
        return pa
    pb = ad.fit_channels(ad.avgpool2x2(ad.spatial_shift(x, 1, 1)), b)
    return ad.concat([pa, pb], axis=1)


class Cell(Module):
    """Normal or reduction cell.

    With ``topology=None`` the cell is a supernet cell holding every candidate
    op on every edge, mixed by per-edge weights at forward time.  With a
    topology ({(i, j): op_name}) it is a decoded cell holding only the chosen
    ops.  Edges leaving a node with no live input contribute nothing.
    """

    def __init__(self, config, c_in, c_out, reduction=False, topology=None, half=None, rng=None):
        rng = rng or np.random.default_rng(0)
        self.reduction = reduction
        self.c_in, self.c_out = c_in, c_out
        self.half = c_in if half is None else half
        self.op_set = config.op_set
        self.edges = config.edges()
        self.n_nodes = config.nodes_per_cell
        self.topology = None if topology is None else dict(topology)
        k = config.preprocess_kernel
        self.preprocess = BinaryConvBN(c_in, c_in, k, 1, k // 2, rng)
        self.ops = {}
        for i, j in self.edges:
            ops = config.op_set if topology is None else (self.topology.get((i, j), "none"),)
            if "bconv3x3" in ops:
                if reduction and i == 0:
                    self.ops[f"{i}_{j}"] = ImprovedDownsample(c_in, c_out, self.half, rng)
                else:
                    self.ops[f"{i}_{j}"] = BinaryConvBN(c_out, c_out, 3, 1, 1, rng)
        self.shortcut = BinaryConvBN(c_in, c_out, 3, 2, 1, rng) if reduction else None

    def _apply(self, op, i, j, h, mask_in, mask_out):
        geometry_change = self.reduction and i == 0
        if op == "bconv3x3":
            if geometry_change:
                return self.ops[f"{i}_{j}"](h, in_mask=mask_in)
            return ad.add(self.ops[f"{i}_{j}"](h, in_mask=mask_out), h)
        if op == "skip":
            return staggered_pool(h, self.c_out, self.half) if geometry_change else h
        raise ValueError(f"unknown op {op!r}")

    def _check_weights(self, w):
        if w.shape != (len(self.edges), len(self.op_set)):
            raise ValueError(f"cell: edge weights must have shape {(len(self.edges), len(self.op_set))}, got {w.shape}")
        d = w.data
        if np.any(d < -1e-5) or np.any(np.abs(d.sum(axis=1) - 1.0) > 1e-5):
            raise ValueError("cell: edge weights must lie on the probability simplex (tolerance 1e-5)")

    def forward(self, x, edge_weights=None, mask_in=None, mask_out=None):
        x = ad.as_tensor(x)
        if self.topology is None:
            if edge_weights is None:
                raise ValueError("supernet cell needs edge weights")
            edge_weights = ad.as_tensor(edge_weights)
            self._check_weights(edge_weights)
        n, _, h, w = x.shape
        out_hw = (h // 2, w // 2) if self.reduction else (h, w)
        node0 = self.preprocess(x, in_mask=mask_in)
        if mask_in is not None:
            node0 = ad.mul(node0, _mask4(mask_in))
        nodes, live = [node0], [True]
        shared = {}

        def needed(i, j):
            if self.topology is not None:
                return self.topology.get((i, j), "none") == "bconv3x3"
            if "bconv3x3" not in self.op_set:
                return False
            k = self.op_set.index("bconv3x3")
            return edge_weights.requires_grad or edge_weights.data[self.edges.index((i, j)), k] != 0

        def share_from(i):
            if self.reduction and i == 0:
                return
            js = [j for j in range(i + 1, self.n_nodes) if needed(i, j)]
            if len(js) > 1:
                outs = shared_binary_conv_bn(nodes[i], [self.ops[f"{i}_{j}"] for j in js], mask_out)
                shared.update({(i, j): ad.add(o, nodes[i]) for j, o in zip(js, outs)})

        share_from(0)
        for j in range(1, self.n_nodes):
            acc = None
            for i in range(j):
                if not live[i]:
                    continue
                e = self.edges.index((i, j))
                if self.topology is not None:
                    op = self.topology.get((i, j), "none")
                    if op == "none":
                        continue
                    term = shared.get((i, j)) if op == "bconv3x3" else None
                    if term is None:
                        term = self._apply(op, i, j, nodes[i], mask_in, mask_out)
                    acc = term if acc is None else ad.add(acc, term)
                    continue
                for k, op in enumerate(self.op_set):
                    if op == "none":
                        continue
                    if not edge_weights.requires_grad and edge_weights.data[e, k] == 0:
                        continue
                    y = shared.get((i, j)) if op == "bconv3x3" else None
                    if y is None:
                        y = self._apply(op, i, j, nodes[i], mask_in, mask_out)
                    term = ad.mul(y, ad.index(edge_weights, (e, k)))
                    acc = term if acc is None else ad.add(acc, term)
            if acc is None:
                live.append(False)
                nodes.append(Tensor(np.zeros((n, self.c_out) + out_hw, dtype=x.dtype)))
                continue
            if mask_out is not None:
                acc = ad.mul(acc, _mask4(mask_out))
            live.append(True)
            nodes.append(acc)
            share_from(j)
        if self.reduction:
            sc = self.shortcut(x, in_mask=mask_in)
            if mask_out is not None:
                sc = ad.mul(sc, _mask4(mask_out))
        else:
            sc = x
        if not live[-1]:
            return sc
        return ad.add(nodes[-1], sc)


def cell_forward(cell, x, edge_op_weights, mask_in=None, mask_out=None):
    return cell(x, edge_op_weights, mask_in, mask_out)


class Stage(Module):
    def __init__(self, cells):
        self.cells = list(cells)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class SuperNet(Module):
    """Over-parameterized network holding every candidate architecture.

    ``arch`` (the architecture logits) is deliberately not a submodule, so
    ``parameters()`` returns network weights only.
    """

    def __init__(self, config, rng=None):
        config.validate()
        rng = rng or np.random.default_rng(0)
        self.config = config
        c = config.base_channels
        self.stem = Conv2d(config.in_channels, c[0], 3, 1, 1, rng)
        self.stem_bn = BatchNorm2d(c[0])
        self.stages = []
        self.reductions = []
        for s in range(config.num_stages):
            if s > 0:
                self.reductions.append(Cell(config, c[s - 1], c[s], reduction=True, rng=rng))
            self.stages.append(Stage(Cell(config, c[s], c[s], rng=rng) for _ in range(config.cells_per_stage)))
        self.classifier = Linear(c[-1], config.num_classes, rng)
        self.arch = ArchParams(config)

    def forward(self, x, sample):
        cfg = self.config
        masks = [width_mask(sample.width[s], cfg.base_channels[s], cfg.width_choices) for s in range(cfg.num_stages)]
        h = self.stem_bn(self.stem(x))
        h = ad.mul(h, _mask4(masks[0]))
        for s in range(cfg.num_stages):
            if s > 0:
                h = self.reductions[s - 1](h, sample.micro[cfg.reduction_type], masks[s - 1], masks[s])
            path = sample.path[s]
            weights = sample.micro[s]
            if not path.requires_grad and np.count_nonzero(path.data) == 1:
                depth = int(np.argmax(path.data))
                for cell in self.stages[s].cells[:depth]:
                    h = cell(h, weights, masks[s], masks[s])
                continue
            ys = [h]
            for cell in self.stages[s].cells:
                ys.append(cell(ys[-1], weights, masks[s], masks[s]))
            h = depth_aggregate(path, ys)
        return self.classifier(ad.global_avgpool(h))


def build_supernet(config, rng=None):
    return SuperNet(config, rng)


class DerivedNet(Module):
    """A decoded genotype with pruned widths (channels physically removed)."""

    def __init__(self, config, genotype, rng=None, auxiliary=False):
        config.validate()
        report = validate_genotype(genotype, config)
        if not report.ok:
            raise ValueError("cannot decode genotype: " + "; ".join(report.errors))
        rng = rng or np.random.default_rng(0)
        g = normalize_genotype(genotype, config)
        self.config = config
        self.genotype = g
        self.widths = [config.width_counts(s)[st.width_index] for s, st in enumerate(g.stages)]
        self.depths = [st.depth for st in g.stages]
        self.stem = Conv2d(config.in_channels, self.widths[0], 3, 1, 1, rng)
        self.stem_bn = BatchNorm2d(self.widths[0])
        self.stages = []
        self.reductions = []
        red_topo = g.topology_map("reduction")
        for s in range(config.num_stages):
            if s > 0:
                try:
                    self.reductions.append(
                        Cell(config, self.widths[s - 1], self.widths[s], True, red_topo,
                             half=config.base_channels[s - 1], rng=rng)
                    )
                except ValueError as exc:
                    raise ValueError(f"decode failed at reduction cell before stage {s}: {exc}") from exc
            topo = g.topology_map(s)
            self.stages.append(Stage(Cell(config, self.widths[s], self.widths[s], False, topo, rng=rng)
                                     for _ in range(self.depths[s])))
        self.classifier = Linear(self.widths[-1], config.num_classes, rng)
        self.aux_classifier = None
        if auxiliary and config.num_stages >= 2:
            self.aux_classifier = Linear(self.widths[-2], config.num_classes, rng)

    def forward(self, x, return_aux=False):
        h = self.stem_bn(self.stem(x))
        aux_in = None
        for s in range(self.config.num_stages):
            if s > 0:
                if s == self.config.num_stages - 1:
                    aux_in = h
                h = self.reductions[s - 1](h)
            for cell in self.stages[s].cells:
                h = cell(h)
        logits = self.classifier(ad.global_avgpool(h))
        if return_aux:
            aux = None
            if self.aux_classifier is not None and aux_in is not None:
                aux = self.aux_classifier(ad.global_avgpool(aux_in))
            return logits, aux
        return logits

    def binary_layers(self):
        return [(name, m) for name, m in _named_modules(self) if isinstance(m, BinaryConvBN)]

    def export(self):
        """Freeze every binary conv into its packed XNOR form."""
        for _, m in self.binary_layers():
            m.export()
        return self

    @property
    def is_packed(self):
        layers = self.binary_layers()
        return bool(layers) and all(m.packed is not None for _, m in layers)


def _named_modules(module, prefix=""):
    yield prefix.rstrip("."), module
    for name, child in module._children():
        yield from _named_modules(child, f"{prefix}{name}.")


def decode(genotype, config, rng=None, auxiliary=False):
    return DerivedNet(config, genotype, rng, auxiliary)
