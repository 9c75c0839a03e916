"""Command-line entry points: search, derive, train, eval, cost and report."""

import argparse
import contextlib
import csv
import json
import os
import sys

import numpy as np

from . import engine
from .config import load_config, load_datasets, resolve_seed, save_config, search_splits
from .export import MAGIC, load_model, save_model
from .objectives import count_parameters, genotype_cost, total_cost
from .search_space import DerivedNet, Genotype, SearchSpaceConfig, validate_genotype


class CommandError(Exception):
    """A user-facing failure; reported on stderr with a nonzero exit code."""


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _threads(cfg):
    if not cfg.deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _load_cfg(path, seed=None):
    if not path:
        raise CommandError("a --config file is required")
    if not os.path.isfile(path):
        raise CommandError(f"config file not found: {path}")
    try:
        cfg = load_config(path)
        resolve_seed(cfg, seed)
        return cfg.validate()
    except (ValueError, TypeError) as exc:
        raise CommandError(str(exc)) from None


def _load_genotype(path, space):
    if not os.path.isfile(path):
        raise CommandError(f"genotype file not found: {path}")
    g = Genotype.load(path)
    report = validate_genotype(g, space)
    if not report.ok:
        raise CommandError(f"{path}: " + "; ".join(report.errors))
    return g


def _derive_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def cmd_search(args):
    cfg = _load_cfg(args.config, args.seed)
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    cfg.out_dir = out
    save_config(os.path.join(out, "config.yaml"), cfg)
    train, _ = load_datasets(cfg.data, cfg.search_space.num_classes)
    tr, va = search_splits(train, cfg.data)
    with _threads(cfg):
        state = engine.init_search(cfg.search_space, cfg.search, cfg.seed)
        if args.resume:
            ckpt = os.path.join(out, "checkpoints", "last.npz")
            if not os.path.isfile(ckpt):
                raise CommandError(f"--resume: no checkpoint at {ckpt}")
            engine.load_checkpoint(ckpt, state)
            _log(f"resumed at epoch {state.epoch}")
        engine.run_search(state, tr, va, out_dir=out, stop_after=args.stop_after_epochs, log=_log)
    if state.epoch < cfg.search.epochs:
        _log(f"stopped after epoch {state.epoch - 1}; continue with --resume")
    else:
        _log(f"search finished: {os.path.join(out, 'alpha_final.npz')}")
    return 0


# ---------------------------------------------------------------------------
# derive
# ---------------------------------------------------------------------------


def cmd_derive(args):
    if not os.path.isfile(args.alpha):
        raise CommandError(f"alpha file not found: {args.alpha}")
    run_dir = os.path.dirname(os.path.abspath(args.alpha))
    cfg = _load_cfg(args.config or os.path.join(run_dir, "config.yaml"), args.seed)
    ckpt = args.checkpoint or os.path.join(run_dir, "checkpoints", "last.npz")
    if not os.path.isfile(ckpt):
        raise CommandError(f"supernet checkpoint not found: {ckpt}")
    train, _ = load_datasets(cfg.data, cfg.search_space.num_classes)
    tr, va = search_splits(train, cfg.data)
    k = args.k if args.k is not None else cfg.search.derive_k
    if k < 1:
        raise CommandError("--k must be at least 1")
    with _threads(cfg):
        state = engine.init_search(cfg.search_space, cfg.search, cfg.seed)
        engine.load_checkpoint(ckpt, state)
        engine.load_alpha(args.alpha, state.arch)
        genotype, cands = engine.derive(
            state.net, va, k, _derive_rng(cfg.seed), cfg.search.derive_batch_size,
            cfg.search.bn_recalibration_batches, tr,
        )
    genotype.save(args.out)
    chosen = next(i for i, c in enumerate(cands) if c.genotype == genotype)
    report = os.path.splitext(args.out)[0] + ".candidates.csv"
    with open(report, "w", newline="") as fh:
        fh.write(engine.candidates_csv(cands, chosen))
    _log(f"genotype written to {args.out}; candidates in {report}")
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = _load_cfg(args.config, args.seed)
    genotype = _load_genotype(args.genotype, cfg.search_space)
    out = args.out or os.path.join(cfg.out_dir, "final")
    os.makedirs(out, exist_ok=True)
    save_config(os.path.join(out, "config.yaml"), cfg)
    train, test = load_datasets(cfg.data, cfg.search_space.num_classes)
    with _threads(cfg):
        model, history = engine.train_final(genotype, cfg.search_space, cfg.train, train, test, cfg.seed, log=_log)
        dense = engine.evaluate(model, test)
        save_dense(os.path.join(out, "dense.npz"), model)
        model.export()
        packed = engine.evaluate(model, test)
    save_model(os.path.join(out, "model.bars"), model)
    model.genotype.save(os.path.join(out, "genotype.pruned.json"))
    with open(os.path.join(out, "train_log.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(history)
    metrics = {"dense": dense, "packed": packed, "parameters": model.num_parameters()}
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def save_dense(path, model):
    meta = {"genotype": model.genotype.to_dict(), "space": model.config.to_dict()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **model.state_dict())


def load_dense(path):
    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        space = SearchSpaceConfig.from_dict(meta["space"]).validate()
        model = DerivedNet(space, Genotype.from_dict(meta["genotype"]))
        model.load_state_dict({k: z[k] for k in z.files if k != "__meta__"})
    model.eval()
    return model


def load_any_model(path):
    if not os.path.isfile(path):
        raise CommandError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_model(path)
    return load_dense(path)


def cmd_eval(args):
    cfg = _load_cfg(args.config, args.seed)
    model = load_any_model(args.model)
    train, test = load_datasets(cfg.data, cfg.search_space.num_classes)
    split = {"test": test, "train": train}[args.split]
    with _threads(cfg):
        result = engine.evaluate(model, split)
    result["packed"] = bool(model.is_packed)
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def component_of(param_name):
    parts = param_name.split(".")
    if parts[0] in ("stem", "stem_bn"):
        return "stem"
    if parts[0] == "reductions":
        return f"reduction{parts[1]}"
    if parts[0] == "stages":
        return f"stage{parts[1]}.cell{parts[3]}"
    return "head"


def cost_table(genotype, space):
    """Rows (component, flops, biops, equivalent_ops, params) plus a total row."""
    parts = genotype_cost(genotype, space)
    net = DerivedNet(space, genotype)
    params = {}
    for name, p in net.named_parameters():
        key = component_of(name)
        params[key] = params.get(key, 0) + p.size
    rows = []
    for name, c in parts.items():
        rows.append({"component": name, "flops": int(c.flops), "biops": int(c.biops),
                     "equivalent_ops": c.flops + c.biops / 64.0, "params": int(params.get(name, 0))})
    total = total_cost(parts)
    rows.append({"component": "total", "flops": int(total.flops), "biops": int(total.biops),
                 "equivalent_ops": total.flops + total.biops / 64.0,
                 "params": int(count_parameters(genotype, space))})
    return rows


def format_cost_text(rows):
    head = f"{'component':<16}{'flops':>14}{'biops':>16}{'equivalent_ops':>18}{'params':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        if r["component"] == "total":
            lines.append("-" * len(head))
        lines.append(f"{r['component']:<16}{r['flops']:>14,}{r['biops']:>16,}{r['equivalent_ops']:>18,.2f}{r['params']:>10,}")
    return "\n".join(lines)


def cmd_cost(args):
    cfg = _load_cfg(args.config, None)
    genotype = _load_genotype(args.genotype, cfg.search_space)
    rows = cost_table(genotype, cfg.search_space)
    if args.format == "json":
        print(json.dumps({"components": rows[:-1], "total": rows[-1]}, indent=2))
    else:
        print(format_cost_text(rows))
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


REPORTS = {
    "entropy.csv": ["mean_entropy"],
    "shortcut.csv": ["shortcut_prob"],
    "complexity.csv": ["exp_flops", "exp_biops", "exp_eq_ops"],
}


def cmd_report(args):
    if not os.path.isfile(args.trajectory):
        raise CommandError(f"trajectory not found: {args.trajectory}")
    rows = engine.read_trajectory(args.trajectory)
    if not rows:
        raise CommandError(f"{args.trajectory}: trajectory is empty")
    out = args.out or os.path.dirname(os.path.abspath(args.trajectory))
    os.makedirs(out, exist_ok=True)
    for name, cols in REPORTS.items():
        with open(os.path.join(out, name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch"] + cols)
            for r in rows:
                w.writerow([int(r["epoch"])] + [repr(float(r[c])) for c in cols])
    _log(f"wrote {', '.join(REPORTS)} to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bars", description="Binary architecture search and packed inference.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the architecture search")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: out_dir from the config)")
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.npz")
    s.add_argument("--seed", type=int, help="overrides BARS_SEED and the config seed")
    s.add_argument("--stop-after-epochs", type=int, help="stop after this many epochs (resumable)")
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("derive", help="sample candidates and keep the best genotype")
    d.add_argument("--alpha", required=True, help="alpha_final.npz from a search run")
    d.add_argument("--k", type=int, default=None, help="number of candidates (default from config, 8)")
    d.add_argument("--out", required=True, help="genotype JSON to write")
    d.add_argument("--config", help="default: config.yaml next to the alpha file")
    d.add_argument("--checkpoint", help="default: checkpoints/last.npz next to the alpha file")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_derive)

    t = sub.add_parser("train", help="train a genotype from scratch and export it")
    t.add_argument("--genotype", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a packed model file or a dense checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", help="FLOPs / BiOps / equivalent ops of a genotype")
    c.add_argument("--genotype", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--format", choices=("text", "json"), default="text")
    c.set_defaults(func=cmd_cost)

    r = sub.add_parser("report", help="per-epoch CSV extracts of a trajectory")
    r.add_argument("--trajectory", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, engine.SearchAborted) as exc:
        _log(f"error: {exc}")
        return 2
    except (ValueError, KeyError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
