"""Complexity accounting and the regularizers of the architecture loss.

Counting conventions (applied uniformly so that BiOps/64 is a fair exchange
rate): a multiply-accumulate is 2 ops for both FLOPs and BiOps; a binary
conv adds 1 FLOP per output element for the scaling factor and 2 for its
batchnorm; elementwise adds cost 1 FLOP per element; a 2x2 average pool
costs 4 FLOPs per output element.  Architecture masks exist only during
search and are not counted.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BIOPS_PER_FLOP = 64


@dataclass(frozen=True)
class OpCost:
    flops: int = 0
    biops: int = 0

    def __add__(self, other):
        return OpCost(self.flops + other.flops, self.biops + other.biops)

    def __radd__(self, other):
        if other == 0:
            return self
        return self.__add__(other)

    @property
    def equivalent_ops(self):
        return equivalent_ops(self.flops, self.biops)


@dataclass(frozen=True)
class Geometry:
    """Input geometry of an op: channels in/out and input spatial size."""

    c_in: int
    c_out: int
    h: int
    w: int
    kernel: int = 3
    stride: int = 1

    @property
    def out_hw(self):
        pad = self.kernel // 2
        return ((self.h + 2 * pad - self.kernel) // self.stride + 1,
                (self.w + 2 * pad - self.kernel) // self.stride + 1)


def equivalent_ops(flops, biops):
    return flops + biops / BIOPS_PER_FLOP


def _scaled(c, r):
    return int(np.floor(c * r + 1e-9))


def op_cost(op_kind, geometry, width_fraction=1.0):
    """Cost of one primitive op; ``width_fraction`` scales both channel counts."""
    g = geometry
    c_in, c_out = _scaled(g.c_in, width_fraction), _scaled(g.c_out, width_fraction)
    ho, wo = g.out_hw
    if op_kind == "none":
        return OpCost()
    if op_kind == "bconv":
        return OpCost(3 * c_out * ho * wo, 2 * c_in * g.kernel**2 * c_out * ho * wo)
    if op_kind == "fpconv":
        return OpCost(2 * c_in * g.kernel**2 * c_out * ho * wo + 2 * c_out * ho * wo, 0)
    if op_kind == "add":
        return OpCost(c_out * g.h * g.w, 0)
    if op_kind == "avgpool2x2":
        return OpCost(4 * c_out * (g.h // 2) * (g.w // 2), 0)
    if op_kind == "global_avgpool":
        return OpCost(c_in * g.h * g.w, 0)
    if op_kind == "linear":
        return OpCost(2 * c_in * c_out + c_out, 0)
    raise ValueError(f"op_cost: unknown op kind {op_kind!r}")


# ---------------------------------------------------------------------------
# composite costs used by the table
# ---------------------------------------------------------------------------


def normal_edge_cost(op, c, h, w):
    """An edge inside a stage at width ``c``; includes accumulation into its node."""
    acc = op_cost("add", Geometry(c, c, h, w))
    if op == "bconv3x3":
        return op_cost("bconv", Geometry(c, c, h, w, 3, 1)) + op_cost("add", Geometry(c, c, h, w)) + acc
    if op == "skip":
        return acc
    return OpCost()


def _pool_shortcut_cost(n, h, w):
    return op_cost("avgpool2x2", Geometry(n, n, h, w))


def reduction_edge_cost(op, c_in, c_out, half, h, w):
    """An edge leaving node 0 of a reduction cell (input ``h`` x ``w``)."""
    a = min(c_out, half)
    b = c_out - a
    pooled = min(a, c_in) + min(b, c_in)
    acc = op_cost("add", Geometry(c_out, c_out, h // 2, w // 2))
    if op == "bconv3x3":
        cost = op_cost("bconv", Geometry(c_in, a, h, w, 3, 2)) + op_cost("bconv", Geometry(c_in, b, h, w, 3, 2))
        return cost + _pool_shortcut_cost(pooled, h, w) + op_cost("add", Geometry(pooled, pooled, h // 2, w // 2)) + acc
    if op == "skip":
        return _pool_shortcut_cost(pooled, h, w) + acc
    return OpCost()


def preprocess_cost(c, h, w, kernel):
    return op_cost("bconv", Geometry(c, c, h, w, kernel, 1))


def normal_shortcut_cost(c, h, w):
    return op_cost("add", Geometry(c, c, h, w))


def reduction_shortcut_cost(c_in, c_out, h, w):
    return op_cost("bconv", Geometry(c_in, c_out, h, w, 3, 2)) + op_cost("add", Geometry(c_out, c_out, h // 2, w // 2))


def stem_cost(in_channels, c, h, w):
    return op_cost("fpconv", Geometry(in_channels, c, h, w, 3, 1))


def head_cost(c, h, w, classes):
    return op_cost("global_avgpool", Geometry(c, c, h, w)) + op_cost("linear", Geometry(c, classes, 1, 1))


def _pair(cost):
    return np.array([cost.flops, cost.biops], dtype=np.float64)


class CostTable:
    """Cost of every (position, op, width) choice, as [..., 2] = (flops, biops).

    ``normal[s]``: edges [E, K, W, 2] and fixed (preprocess + shortcut) [W, 2].
    ``reduction[r]`` (between stage r and r+1): edges [E, K, Win, Wout, 2]
    and fixed [Win, Wout, 2].  ``stem`` and ``head`` are [W, 2].
    """

    def __init__(self, config):
        self.config = config
        cfg = config
        edges = cfg.edges()
        counts = [cfg.width_counts(s) for s in range(cfg.num_stages)]
        res = [cfg.stage_resolution(s) for s in range(cfg.num_stages)]
        nw = len(cfg.width_choices)
        self.stem = np.stack([_pair(stem_cost(cfg.in_channels, c, res[0], res[0])) for c in counts[0]])
        self.head = np.stack([_pair(head_cost(c, res[-1], res[-1], cfg.num_classes)) for c in counts[-1]])
        self.normal_edges, self.normal_fixed = [], []
        for s in range(cfg.num_stages):
            h = res[s]
            tab = np.zeros((len(edges), len(cfg.op_set), nw, 2))
            for e, _ in enumerate(edges):
                for k, op in enumerate(cfg.op_set):
                    for wi, c in enumerate(counts[s]):
                        tab[e, k, wi] = _pair(normal_edge_cost(op, c, h, h))
            self.normal_edges.append(tab)
            self.normal_fixed.append(np.stack([
                _pair(preprocess_cost(c, h, h, cfg.preprocess_kernel) + normal_shortcut_cost(c, h, h))
                for c in counts[s]
            ]))
        self.reduction_edges, self.reduction_fixed = [], []
        for r in range(cfg.num_stages - 1):
            h = res[r]
            half = cfg.base_channels[r]
            tab = np.zeros((len(edges), len(cfg.op_set), nw, nw, 2))
            fixed = np.zeros((nw, nw, 2))
            for wi, ci in enumerate(counts[r]):
                for wo, co in enumerate(counts[r + 1]):
                    for e, (i, _) in enumerate(edges):
                        for k, op in enumerate(cfg.op_set):
                            if i == 0:
                                cost = reduction_edge_cost(op, ci, co, half, h, h)
                            else:
                                cost = normal_edge_cost(op, co, h // 2, h // 2)
                            tab[e, k, wi, wo] = _pair(cost)
                    fixed[wi, wo] = _pair(preprocess_cost(ci, h, h, cfg.preprocess_kernel)
                                          + reduction_shortcut_cost(ci, co, h, h))
            self.reduction_edges.append(tab)
            self.reduction_fixed.append(fixed)


def _row(t):
    return ad.reshape(t, (1, t.shape[0]))


def expected_complexity(sample, table):
    """Expected (flops, biops) as a differentiable float64 Tensor of shape [2].

    Exact expectation when the decisions are independent and ``sample``
    holds their probabilities; with one-hot decisions it is the literal cost
    of that architecture.
    """
    cfg = table.config
    micro, width, path = (ad.as_tensor(t) for t in (sample.micro, sample.width, sample.path))
    ne, nk = len(cfg.edges()), len(cfg.op_set)
    nw = len(cfg.width_choices)
    total = ad.matmul(_row(width[0]), Tensor(table.stem))
    total = ad.add(total, ad.matmul(_row(width[cfg.num_stages - 1]), Tensor(table.head)))
    depth_values = Tensor(np.arange(cfg.cells_per_stage + 1, dtype=np.float64).reshape(-1, 1))
    for s in range(cfg.num_stages):
        mw = _row(width[s])
        per_op = ad.matmul(mw, Tensor(table.normal_edges[s].transpose(2, 0, 1, 3).reshape(nw, ne * nk * 2)))
        per_op = ad.reshape(per_op, (ne * nk, 2))
        cell = ad.matmul(ad.reshape(micro[s], (1, ne * nk)), per_op)
        cell = ad.add(cell, ad.matmul(mw, Tensor(table.normal_fixed[s])))
        n_cells = ad.matmul(_row(path[s]), depth_values)
        total = ad.add(total, ad.mul(cell, n_cells))
    for r in range(cfg.num_stages - 1):
        outer = ad.mul(ad.reshape(width[r], (nw, 1)), ad.reshape(width[r + 1], (1, nw)))
        outer = ad.reshape(outer, (1, nw * nw))
        edges = table.reduction_edges[r].transpose(2, 3, 0, 1, 4).reshape(nw * nw, ne * nk * 2)
        per_op = ad.reshape(ad.matmul(outer, Tensor(edges)), (ne * nk, 2))
        cell = ad.matmul(ad.reshape(micro[cfg.reduction_type], (1, ne * nk)), per_op)
        cell = ad.add(cell, ad.matmul(outer, Tensor(table.reduction_fixed[r].reshape(nw * nw, 2))))
        total = ad.add(total, cell)
    return ad.reshape(total, (2,))


def complexity_measure(cost, measure="equivalent_ops"):
    """Scalar Tensor: flops + biops/64, or flops alone."""
    cost = ad.as_tensor(cost)
    if measure == "flops":
        return ad.index(cost, 0)
    return ad.add(ad.index(cost, 0), ad.scale(ad.index(cost, 1), 1.0 / BIOPS_PER_FLOP))


def complexity_multiplier(cost, budget, theta_over=0.2, theta_under=0.0):
    """``(cost / budget) ** theta``; theta switches at ``cost >= budget``."""
    cost = ad.as_tensor(cost)
    if not budget > 0:
        raise ValueError("complexity_multiplier: budget must be positive")
    c = float(cost.item())
    if c < 0:
        raise ValueError("complexity_multiplier: cost must be non-negative")
    theta = theta_over if c >= budget else theta_under
    if np.isinf(budget) or theta == 0:
        return Tensor(np.array(1.0, dtype=cost.dtype))
    return ad.power(ad.scale(cost, 1.0 / budget), theta)


def entropy(logits):
    """Sum over decisions of H(softmax(logits)) along the last axis."""
    logits = ad.as_tensor(logits)
    logp = ad.log_softmax(logits, axis=-1)
    p = ad.softmax(logits, axis=-1)
    return ad.scale(ad.sum_(ad.mul(p, logp)), -1.0)


def entropy_reg(alpha_logits, lambda_ent):
    """``lambda_ent * sum of entropies`` over one or several logit tensors."""
    if isinstance(alpha_logits, (list, tuple)):
        terms = [entropy(a) for a in alpha_logits]
    else:
        terms = [entropy(alpha_logits)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, lambda_ent)


# ---------------------------------------------------------------------------
# decoded-network accounting
# ---------------------------------------------------------------------------


def network_cost(net):
    """Literal cost of a ``DerivedNet`` read off its constructed layers."""
    from .binarize import BinaryConvBN
    from .search_space import ImprovedDownsample

    cfg = net.config
    parts = {}

    def bconv(m, h, w):
        g = Geometry(m.c_in, m.c_out, h, w, m.conv.weight.shape[2], m.conv.stride)
        return op_cost("bconv", g)

    res = cfg.stage_resolution(0)
    stem_w = net.stem.weight.shape
    parts["stem"] = op_cost("fpconv", Geometry(stem_w[1], stem_w[0], res, res, stem_w[2], net.stem.stride))

    def cell_cost(cell, h):
        total = bconv(cell.preprocess, h, h)
        oh = h // 2 if cell.reduction else h
        for i, j in cell.edges:
            op = cell.topology.get((i, j), "none")
            if op == "none":
                continue
            acc = op_cost("add", Geometry(cell.c_out, cell.c_out, oh, oh))
            mod = cell.ops.get(f"{i}_{j}")
            if isinstance(mod, ImprovedDownsample):
                pooled = min(mod.a, mod.c_in) + min(mod.b, mod.c_in)
                total += bconv(mod.conv_a, h, h)
                if mod.conv_b is not None:
                    total += bconv(mod.conv_b, h, h)
                total += op_cost("avgpool2x2", Geometry(pooled, pooled, h, h))
                total += op_cost("add", Geometry(pooled, pooled, oh, oh)) + acc
            elif isinstance(mod, BinaryConvBN):
                total += bconv(mod, oh, oh) + op_cost("add", Geometry(mod.c_out, mod.c_out, oh, oh)) + acc
            elif cell.reduction and i == 0:
                a = min(cell.c_out, cell.half)
                pooled = min(a, cell.c_in) + min(cell.c_out - a, cell.c_in)
                total += op_cost("avgpool2x2", Geometry(pooled, pooled, h, h)) + acc
            else:
                total += acc
        if cell.reduction:
            total += bconv(cell.shortcut, h, h) + op_cost("add", Geometry(cell.c_out, cell.c_out, oh, oh))
        else:
            total += op_cost("add", Geometry(cell.c_out, cell.c_out, h, h))
        return total

    for s in range(cfg.num_stages):
        h = cfg.stage_resolution(s)
        if s > 0:
            parts[f"reduction{s - 1}"] = cell_cost(net.reductions[s - 1], cfg.stage_resolution(s - 1))
        for ci, cell in enumerate(net.stages[s].cells):
            parts[f"stage{s}.cell{ci}"] = cell_cost(cell, h)
    hl = cfg.stage_resolution(cfg.num_stages - 1)
    lw = net.classifier.weight.shape
    parts["head"] = op_cost("global_avgpool", Geometry(lw[1], lw[1], hl, hl)) + op_cost(
        "linear", Geometry(lw[1], lw[0], 1, 1)
    )
    return parts


def genotype_cost(genotype, config):
    """Per-component literal cost of a genotype, from closed-form geometry."""
    from .search_space import normalize_genotype

    g = normalize_genotype(genotype, config)
    cfg = config
    widths = [cfg.width_counts(s)[st.width_index] for s, st in enumerate(g.stages)]
    parts = {"stem": stem_cost(cfg.in_channels, widths[0], cfg.image_size, cfg.image_size)}
    red = g.topology_map("reduction")
    for s in range(cfg.num_stages):
        h = cfg.stage_resolution(s)
        if s > 0:
            hp = cfg.stage_resolution(s - 1)
            ci, co = widths[s - 1], widths[s]
            cost = preprocess_cost(ci, hp, hp, cfg.preprocess_kernel) + reduction_shortcut_cost(ci, co, hp, hp)
            for (i, j), op in red.items():
                if i == 0:
                    cost += reduction_edge_cost(op, ci, co, cfg.base_channels[s - 1], hp, hp)
                else:
                    cost += normal_edge_cost(op, co, h, h)
            parts[f"reduction{s - 1}"] = cost
        topo = g.topology_map(s)
        c = widths[s]
        for ci_ in range(g.stages[s].depth):
            cost = preprocess_cost(c, h, h, cfg.preprocess_kernel) + normal_shortcut_cost(c, h, h)
            for op in topo.values():
                cost += normal_edge_cost(op, c, h, h)
            parts[f"stage{s}.cell{ci_}"] = cost
    hl = cfg.stage_resolution(cfg.num_stages - 1)
    parts["head"] = head_cost(widths[-1], hl, hl, cfg.num_classes)
    return parts


def total_cost(parts):
    return sum(parts.values(), OpCost())


def count_parameters(genotype, config):
    """Closed-form trainable-parameter count of a decoded genotype."""
    from .search_space import normalize_genotype

    g = normalize_genotype(genotype, config)
    cfg = config
    widths = [cfg.width_counts(s)[st.width_index] for s, st in enumerate(g.stages)]
    kp = cfg.preprocess_kernel

    def bconv_bn(ci, co, k):
        return ci * co * k * k + 2 * co

    total = cfg.in_channels * widths[0] * 9 + 2 * widths[0]
    red = g.topology_map("reduction")
    for s in range(cfg.num_stages):
        c = widths[s]
        if s > 0:
            ci = widths[s - 1]
            half = cfg.base_channels[s - 1]
            total += bconv_bn(ci, ci, kp) + bconv_bn(ci, c, 3)
            for (i, _), op in red.items():
                if op != "bconv3x3":
                    continue
                if i == 0:
                    a = min(c, half)
                    total += bconv_bn(ci, a, 3) + (bconv_bn(ci, c - a, 3) if c > a else 0)
                else:
                    total += bconv_bn(c, c, 3)
        n_conv = sum(op == "bconv3x3" for op in g.topology_map(s).values())
        total += g.stages[s].depth * (bconv_bn(c, c, kp) + n_conv * bconv_bn(c, c, 3))
    total += widths[-1] * cfg.num_classes + cfg.num_classes
    return total
