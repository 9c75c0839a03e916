"""Search loop, derivation, final training and evaluation."""

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import augment, iterate_batches, normalize
from .objectives import (
    CostTable,
    complexity_measure,
    complexity_multiplier,
    entropy_reg,
    expected_complexity,
)
from .optim import Adam, cosine_lr
from .relaxation import ScheduleState
from .search_space import (
    ArchSample,
    DerivedNet,
    Genotype,
    SuperNet,
    _reaches_output,
    normalize_genotype,
    reachable_nodes,
    validate_genotype,
)

CHECKPOINT_VERSION = 1
TRAJECTORY_VERSION = 1


@dataclass
class SearchRunConfig:
    """Hyper-parameters of the bilevel search (``epochs`` includes warm-up)."""

    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 64
    w_lr: float = 3e-4
    w_weight_decay: float = 0.0
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    tau0: float = 1.0
    tau_decay: float = 0.9
    lambda0: float = -0.01
    lambda_step: float = 0.001
    derive_k: int = 8
    derive_batch_size: int = 256
    bn_recalibration_batches: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"search epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warm-up epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if self.batch_size < 1 or self.derive_k < 1:
            raise ValueError("batch_size and derive_k must be positive")
        return self

    def schedule(self, epoch):
        return ScheduleState(epoch, self.tau0, self.tau_decay, self.lambda0, self.lambda_step)


@dataclass
class TrainRunConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 2e-3
    weight_decay: float = 0.0
    augment: bool = True
    cutout: bool = False
    auxiliary_weight: float = 0.0

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"train epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("train batch_size must be positive")
        return self


class SearchAborted(RuntimeError):
    """A non-finite loss stopped the search; ``snapshot`` names the saved state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


def set_requires_grad(params, flag):
    for p in params:
        p.requires_grad = flag


def _inputs(images):
    return Tensor(normalize(images))


# ---------------------------------------------------------------------------
# trajectory bookkeeping
# ---------------------------------------------------------------------------


def decision_columns(config):
    cols = []
    for t in range(config.num_cell_types):
        tname = "red" if t == config.reduction_type else f"s{t}"
        for i, j in config.edges():
            cols += [f"p_micro_{tname}_e{i}{j}_{op}" for op in config.op_set]
    for s in range(config.num_stages):
        cols += [f"p_width_s{s}_{r:g}" for r in config.width_choices]
    for s in range(config.num_stages):
        cols += [f"p_depth_s{s}_d{d}" for d in range(config.cells_per_stage + 1)]
    return cols


BASE_COLUMNS = [
    "epoch", "phase", "train_loss", "val_loss", "tau", "lambda_ent", "lr_w",
    "exp_flops", "exp_biops", "exp_eq_ops", "mean_entropy", "shortcut_prob",
]


def trajectory_columns(config):
    return BASE_COLUMNS + decision_columns(config)


def _entropy_rows(p):
    return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)


def arch_summary(arch, table):
    """Deterministic statistics of the current architecture distribution."""
    cfg = arch.config
    probs = arch.probabilities()
    ents = np.concatenate([_entropy_rows(probs[k]).ravel() for k in ("micro", "width", "path")])
    shortcut = float(probs["micro"][..., cfg.op_set.index("skip")].mean()) if "skip" in cfg.op_set else 0.0
    smp = ArchSample(*(Tensor(probs[k]) for k in ("micro", "width", "path")))
    with ad.no_grad():
        cost = expected_complexity(smp, table).data
    flat = np.concatenate([probs[k].ravel() for k in ("micro", "width", "path")])
    return {
        "exp_flops": float(cost[0]),
        "exp_biops": float(cost[1]),
        "exp_eq_ops": float(cost[0] + cost[1] / 64.0),
        "mean_entropy": float(ents.mean()),
        "shortcut_prob": shortcut,
        "probs": [float(v) for v in flat],
    }


def trajectory_row(epoch, phase, train_loss, val_loss, sched, lr_w, summary):
    row = {
        "epoch": epoch, "phase": phase, "train_loss": float(train_loss), "val_loss": float(val_loss),
        "tau": float(sched.tau), "lambda_ent": float(sched.lambda_ent), "lr_w": float(lr_w),
    }
    row.update({k: summary[k] for k in ("exp_flops", "exp_biops", "exp_eq_ops", "mean_entropy", "shortcut_prob")})
    row["probs"] = list(summary["probs"])
    return row


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trajectory_csv(rows, config):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trajectory_columns(config))
    for r in rows:
        w.writerow([_fmt(r[c]) for c in BASE_COLUMNS] + [_fmt(v) for v in r["probs"]])
    return buf.getvalue()


def read_trajectory(path):
    """Rows of a trajectory CSV as dicts of floats (``phase`` stays a string)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (v if k == "phase" else float(v)) for k, v in r.items()})
    return out


# ---------------------------------------------------------------------------
# one step of each phase
# ---------------------------------------------------------------------------


def _check_finite(value, what, state, out_dir):
    if np.isfinite(value):
        return
    snapshot = None
    if out_dir is not None:
        snapshot = os.path.join(out_dir, "abort_snapshot.npz")
        save_checkpoint(snapshot, state)
    raise SearchAborted(f"non-finite {what} ({value}) at epoch {state.epoch}", snapshot)


def weight_step(net, arch, images, labels, tau, w_opt, rng):
    """Sample relaxed decisions and backpropagate the training loss (no update)."""
    arch.set_requires_grad(False)
    set_requires_grad(net.parameters(), True)
    net.train()
    smp = arch.sample(tau, rng)
    loss = ad.cross_entropy(net(_inputs(images), smp), labels)
    w_opt.zero_grad()
    loss.backward()
    return loss


def alpha_loss(net, arch, images, labels, sched, table, space, rng):
    """``L_val * complexity multiplier + entropy term`` on freshly sampled decisions."""
    smp = arch.sample(sched.tau, rng)
    l_val = ad.cross_entropy(net(_inputs(images), smp), labels)
    budget = space.flops_budget
    cost = complexity_measure(expected_complexity(smp, table), space.complexity_measure)
    mult = complexity_multiplier(cost, budget, space.theta_over, space.theta_under)
    ent = entropy_reg(arch.parameters(), sched.lambda_ent)
    return ad.add(ad.mul(l_val, mult), ent), l_val


def search_step(net, arch, train_batch, val_batch, sched, w_opt, a_opt, table, rng):
    """One weight update then one architecture update (first-order).

    Returns (train loss, validation loss) as floats.
    """
    space = arch.config
    loss_w = weight_step(net, arch, *train_batch, sched.tau, w_opt, rng)
    lw = float(loss_w.item())
    if np.isfinite(lw):
        w_opt.step()
    arch.set_requires_grad(True)
    set_requires_grad(net.parameters(), False)
    loss_a, l_val = alpha_loss(net, arch, *val_batch, sched, table, space, rng)
    lv = float(l_val.item())
    if np.isfinite(lv) and np.isfinite(float(loss_a.item())):
        a_opt.zero_grad()
        loss_a.backward()
        a_opt.step()
    set_requires_grad(net.parameters(), True)
    arch.set_requires_grad(False)
    return lw, lv


# ---------------------------------------------------------------------------
# the search run
# ---------------------------------------------------------------------------


@dataclass
class SearchState:
    space: object
    run: SearchRunConfig
    net: SuperNet
    w_opt: Adam
    a_opt: Adam
    rng: np.random.Generator
    epoch: int = 0
    trajectory: list = field(default_factory=list)
    best_val: float = math.inf
    seed: int = 0

    @property
    def arch(self):
        return self.net.arch


def init_search(space, run, seed=0):
    space.validate()
    run.validate()
    init_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    net = SuperNet(space, np.random.default_rng(init_seq))
    w_opt = Adam(net.parameters(), lr=run.w_lr, weight_decay=run.w_weight_decay)
    a_opt = Adam(net.arch.parameters(), lr=run.alpha_lr, weight_decay=run.alpha_weight_decay)
    net.arch.set_requires_grad(False)
    return SearchState(space, run, net, w_opt, a_opt, np.random.default_rng(run_seq), seed=seed)


def warmup(state, train, epochs=None):
    """Weight-only epochs with relaxed decisions sampled at the scheduled tau."""
    epochs = state.run.warmup_epochs if epochs is None else epochs
    losses = []
    for _ in range(epochs):
        losses.append(_warmup_epoch(state, train))
        state.epoch += 1
    return losses


def _warmup_epoch(state, train):
    run = state.run
    sched = run.schedule(state.epoch)
    state.w_opt.lr = cosine_lr(run.w_lr, state.epoch, run.epochs)
    total, count = 0.0, 0
    for xb, yb in iterate_batches(train, run.batch_size, state.rng):
        loss = weight_step(state.net, state.arch, xb, yb, sched.tau, state.w_opt, state.rng)
        lv = float(loss.item())
        _check_finite(lv, "warm-up loss", state, None)
        state.w_opt.step()
        total += lv * len(yb)
        count += len(yb)
    return total / count


def _search_epoch(state, train, val, table):
    run = state.run
    sched = run.schedule(state.epoch)
    state.w_opt.lr = cosine_lr(run.w_lr, state.epoch, run.epochs)
    t_total = v_total = 0.0
    count = 0
    batches = zip(iterate_batches(train, run.batch_size, state.rng), iterate_batches(val, run.batch_size, state.rng))
    for tb, vb in batches:
        lw, lv = search_step(state.net, state.arch, tb, vb, sched, state.w_opt, state.a_opt, table, state.rng)
        if not (np.isfinite(lw) and np.isfinite(lv)):
            _check_finite(lw if not np.isfinite(lw) else lv, "search loss", state, getattr(state, "out_dir", None))
        n = min(len(tb[1]), len(vb[1]))
        t_total += lw * n
        v_total += lv * n
        count += n
    return t_total / count, v_total / count


def run_search(state, train, val, out_dir=None, stop_after=None, log=None):
    """Warm-up then alternating search until ``run.epochs`` epochs are recorded.

    With ``out_dir`` the trajectory CSV, final logits and checkpoints
    (``checkpoints/last.npz`` and ``checkpoints/best.npz``) are written after
    every epoch.  ``stop_after`` ends the call after that many epochs of this
    invocation, leaving a resumable checkpoint behind.
    """
    run = state.run
    table = CostTable(state.space)
    state.out_dir = out_dir
    done = 0
    while state.epoch < run.epochs:
        if stop_after is not None and done >= stop_after:
            break
        e = state.epoch
        sched = run.schedule(e)
        lr_w = cosine_lr(run.w_lr, e, run.epochs)
        if e < run.warmup_epochs:
            train_loss, val_loss, phase = _warmup_epoch(state, train), math.nan, "warmup"
        else:
            (train_loss, val_loss), phase = _search_epoch(state, train, val, table), "search"
        state.trajectory.append(trajectory_row(e, phase, train_loss, val_loss, sched, lr_w, arch_summary(state.arch, table)))
        state.epoch += 1
        done += 1
        improved = np.isfinite(val_loss) and val_loss < state.best_val
        if improved:
            state.best_val = float(val_loss)
        if log is not None:
            log(f"epoch {e} [{phase}] train {train_loss:.4f} val {val_loss:.4f} "
                f"tau {sched.tau:.4f} eq_ops {state.trajectory[-1]['exp_eq_ops']:.0f}")
        if out_dir is not None:
            write_search_outputs(state, out_dir, improved)
    return state


def write_search_outputs(state, out_dir, improved=False):
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as fh:
        fh.write(trajectory_csv(state.trajectory, state.space))
    save_alpha(os.path.join(out_dir, "alpha_final.npz"), state.arch)
    last = os.path.join(out_dir, "checkpoints", "last.npz")
    save_checkpoint(last, state)
    best = os.path.join(out_dir, "checkpoints", "best.npz")
    if improved or not os.path.exists(best):
        save_checkpoint(best, state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not serializable: {type(o)}")


def save_alpha(path, arch):
    np.savez(path, **{k: v for k, v in arch.state_dict().items()},
             __config__=np.frombuffer(json.dumps(arch.config.to_dict()).encode(), dtype=np.uint8))


def load_alpha(path, arch):
    with np.load(path) as z:
        arch.load_state_dict({k: z[k] for k in z.files if k.startswith("alpha:")})
    return arch


def save_checkpoint(path, state):
    arrays = {}
    for k, v in state.net.state_dict().items():
        arrays[f"net/{k}"] = v
    for k, v in state.arch.state_dict().items():
        arrays[f"arch/{k}"] = v
    for k, v in state.w_opt.state_dict().items():
        arrays[f"optw/{k}"] = v
    for k, v in state.a_opt.state_dict().items():
        arrays[f"opta/{k}"] = v
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "seed": state.seed,
        "best_val": state.best_val,
        "rng": state.rng.bit_generator.state,
        "trajectory": state.trajectory,
        "space": state.space.to_dict(),
        "run": asdict(state.run),
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, default=_json_default).encode(), dtype=np.uint8)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def read_checkpoint_meta(path):
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return meta


def load_checkpoint(path, state):
    """Restore weights, logits, optimizer moments, schedule position and RNG."""
    meta = read_checkpoint_meta(path)
    with np.load(path) as z:
        def part(prefix):
            return {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}

        state.net.load_state_dict(part("net/"))
        state.arch.load_state_dict(part("arch/"))
        state.w_opt.load_state_dict(part("optw/"))
        state.a_opt.load_state_dict(part("opta/"))
    state.epoch = int(meta["epoch"])
    state.best_val = float(meta["best_val"])
    state.rng.bit_generator.state = meta["rng"]
    state.trajectory = meta["trajectory"]
    return state


# ---------------------------------------------------------------------------
# derive
# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    genotype: Genotype
    val_loss: float
    indices: dict


def supernet_loss(net, sample, dataset, batch_size=256):
    """Mean cross-entropy of the supernet under fixed decisions (eval-mode BN)."""
    net.eval()
    total, count = 0.0, 0
    with ad.no_grad():
        for xb, yb in iterate_batches(dataset, batch_size, shuffle=False):
            loss = ad.cross_entropy(net(_inputs(xb), sample), yb)
            total += float(loss.item()) * len(yb)
            count += len(yb)
    net.train()
    return total / count


def _recalibrate_bn(net, sample, dataset, batches, batch_size, rng):
    for m in net.modules():
        if hasattr(m, "running_mean"):
            m.running_mean[...] = 0
            m.running_var[...] = 1
    net.train()
    with ad.no_grad():
        for b, (xb, _) in enumerate(iterate_batches(dataset, batch_size, rng)):
            if b >= batches:
                break
            net(_inputs(xb), sample)


def derive(net, val, k=8, rng=None, batch_size=256, recalibrate=0, train=None):
    """Best of ``k`` Gumbel-max candidates by validation loss.

    Returns (genotype, candidates).  With ``k == 1`` the single sample is
    returned without evaluating it; its loss is reported as nan.
    """
    rng = rng or np.random.default_rng(0)
    arch = net.arch
    snapshot = net.state_dict() if recalibrate else None
    candidates = []
    for _ in range(k):
        smp, g = arch.hard_sample(rng)
        idx = {
            "micro": np.argmax(smp.micro.data, axis=-1).tolist(),
            "width": np.argmax(smp.width.data, axis=-1).tolist(),
            "path": np.argmax(smp.path.data, axis=-1).tolist(),
        }
        if k == 1:
            candidates.append(Candidate(g, math.nan, idx))
            break
        if recalibrate:
            _recalibrate_bn(net, smp, train if train is not None else val, recalibrate, batch_size, rng)
        loss = supernet_loss(net, smp, val, batch_size)
        if snapshot is not None:
            net.load_state_dict(snapshot)
        candidates.append(Candidate(g, loss, idx))
    if k == 1:
        return candidates[0].genotype, candidates
    losses = [c.val_loss if np.isfinite(c.val_loss) else math.inf for c in candidates]
    best = int(np.argmin(losses))
    return candidates[best].genotype, candidates


def candidates_csv(candidates, chosen):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate", "val_loss", "chosen", "width", "depth", "micro"])
    for i, c in enumerate(candidates):
        w.writerow([i, _fmt(float(c.val_loss)), int(i == chosen),
                    " ".join(map(str, c.indices["width"])),
                    " ".join(map(str, c.indices["path"])),
                    "|".join(" ".join(map(str, row)) for row in c.indices["micro"])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# pruning and final training
# ---------------------------------------------------------------------------


def prune_topology(topo, n_nodes):
    """Drop edges touching nodes unreachable from node 0 or unable to reach the output."""
    live = reachable_nodes(topo, n_nodes)
    useful = _reaches_output(topo, n_nodes)
    keep = live & useful if (n_nodes - 1) in live else set()
    return [(i, j, op) for (i, j), op in topo.items() if op != "none" and i in keep and j in keep]


def prune_genotype(genotype, config):
    report = validate_genotype(genotype, config)
    if not report.ok:
        raise ValueError("cannot prune invalid genotype: " + "; ".join(report.errors))
    g = normalize_genotype(genotype, config)
    n = config.nodes_per_cell
    order = {e: k for k, e in enumerate(config.edges())}

    def prune(topo):
        return sorted(prune_topology(dict(((i, j), op) for i, j, op in topo), n), key=lambda e: order[(e[0], e[1])])

    stages = [type(st)(prune(st.topology), st.width_index, st.depth) for st in g.stages]
    return Genotype(stages, prune(g.reduction_topology), g.fingerprint, g.format_version)


def transfer_weights(src, dst):
    """Copy every parameter and buffer whose name and shape exist in both modules."""
    s = src.state_dict()
    d = dst.state_dict()
    d.update({k: v for k, v in s.items() if k in d and np.shape(d[k]) == np.shape(v)})
    dst.load_state_dict(d)
    return dst


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy and mean cross-entropy with the model in eval mode."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("evaluate: empty split")
    model.eval()
    correct, total, count = 0, 0.0, 0
    with ad.no_grad():
        for xb, yb in iterate_batches(dataset, batch_size, shuffle=False):
            logits = model(_inputs(xb))
            loss = ad.cross_entropy(logits, yb)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            total += float(loss.item()) * len(yb)
            count += len(yb)
    return {"accuracy": correct / count, "loss": total / count}


def predict_logits(model, images, batch_size=256):
    model.eval()
    out = []
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(model(_inputs(images[lo : lo + batch_size])).data)
    return np.concatenate(out)


def train_final(genotype, space, run, train, test=None, seed=0, log=None):
    """Prune and decode ``genotype``, then train it from scratch.

    Returns (model, per-epoch log).  The model is left in eval mode and is
    not yet exported.
    """
    run.validate()
    pruned = prune_genotype(genotype, space)
    init_seq, run_seq = np.random.SeedSequence(seed).spawn(2)
    model = DerivedNet(space, pruned, np.random.default_rng(init_seq), auxiliary=run.auxiliary_weight > 0)
    rng = np.random.default_rng(run_seq)
    params = model.parameters()
    if not params:
        raise ValueError("decoded network has no trainable parameters")
    opt = Adam(params, lr=run.lr, weight_decay=run.weight_decay)
    history = []
    for epoch in range(run.epochs):
        opt.lr = cosine_lr(run.lr, epoch, run.epochs)
        model.train()
        total, correct, count = 0.0, 0, 0
        for xb, yb in iterate_batches(train, run.batch_size, rng):
            if run.augment:
                xb = augment(xb, rng, cutout=run.cutout)
            logits, aux = model(_inputs(xb), return_aux=True)
            loss = ad.cross_entropy(logits, yb)
            if aux is not None:
                loss = ad.add(loss, ad.scale(ad.cross_entropy(aux, yb), run.auxiliary_weight))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item()) * len(yb)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            count += len(yb)
        rec = {"epoch": epoch, "lr": opt.lr, "train_loss": total / count, "train_acc": correct / count}
        if test is not None:
            ev = evaluate(model, test)
            rec.update(test_loss=ev["loss"], test_acc=ev["accuracy"])
        history.append(rec)
        if log is not None:
            log(" ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in rec.items()))
    model.eval()
    return model, history
