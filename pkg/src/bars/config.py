"""Run configuration: one YAML (or JSON) document covering every run setting."""

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .data import SplitSpec, load_cifar10, split_train_val, stratified_subset, synthetic_dataset
from .engine import SearchRunConfig, TrainRunConfig
from .search_space import SearchSpaceConfig

SEED_ENV = "BARS_SEED"


@dataclass
class DataConfig:
    """Where the images come from.

    ``dataset`` is ``synthetic`` or ``cifar10``.  For CIFAR-10 ``path`` is the
    directory with the binary batches; ``subset``/``test_subset`` take
    class-balanced subsets of the train/test files.  For synthetic data a
    held-out ``test_fraction`` is split off before the search halves.
    """

    dataset: str = "synthetic"
    path: str = None
    synthetic_n: int = 1000
    synthetic_seed: int = 0
    synthetic_noise: float = 0.12
    cache: str = None
    subset: int = None
    test_subset: int = None
    test_fraction: float = 0.2
    split_ratio: float = 0.5
    split_seed: int = 0

    def validate(self):
        if self.dataset not in ("synthetic", "cifar10"):
            raise ValueError(f"data.dataset must be 'synthetic' or 'cifar10', got {self.dataset!r}")
        if self.dataset == "cifar10" and not self.path:
            raise ValueError("data.path is required for cifar10")
        SplitSpec(self.split_ratio, self.split_seed)
        SplitSpec(1.0 - self.test_fraction, self.split_seed)
        return self


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/default"
    search_space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    search: SearchRunConfig = field(default_factory=SearchRunConfig)
    train: TrainRunConfig = field(default_factory=TrainRunConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.search_space.validate()
        self.search.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["search_space"] = self.search_space.to_dict()
        return d


_SECTIONS = {
    "search_space": SearchSpaceConfig,
    "search": SearchRunConfig,
    "train": TrainRunConfig,
    "data": DataConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        keys = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ValueError(f"unknown config key(s): {keys}")
    values = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        # YAML 1.1 reads "3e-4" as a string; coerce float-typed fields
        if isinstance(f.default, float) and isinstance(v, (int, str)) and not isinstance(v, bool):
            try:
                v = float(v)
            except ValueError:
                raise ValueError(f"{where + '.' if where else ''}{f.name}: expected a number, got {v!r}") from None
        values[f.name] = v
    return cls(**values)


def config_from_dict(d):
    d = dict(d or {})
    top = {k: v for k, v in d.items() if k not in _SECTIONS}
    cfg = _build(RunConfig, top, "")
    for name, cls in _SECTIONS.items():
        if name in d:
            setattr(cfg, name, _build(cls, d[name] or {}, name))
    return cfg


def load_config(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return config_from_dict(doc)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def save_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def resolve_seed(cfg, flag_seed=None, environ=None):
    """Seed precedence: command-line flag, then ``BARS_SEED``, then the config."""
    environ = os.environ if environ is None else environ
    if flag_seed is not None:
        cfg.seed = int(flag_seed)
    elif environ.get(SEED_ENV, "").strip():
        try:
            cfg.seed = int(environ[SEED_ENV])
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None
    return cfg


def tiny_config(**overrides):
    """The small desk-scale setup used by the smoke tests."""
    cfg = RunConfig(
        seed=0,
        out_dir="runs/tiny",
        search_space=SearchSpaceConfig(num_stages=2, cells_per_stage=2, base_channels=(8, 16), flops_budget=400000.0),
        search=SearchRunConfig(epochs=6, warmup_epochs=1, batch_size=64, w_lr=3e-3, alpha_lr=0.05),
        train=TrainRunConfig(epochs=20, batch_size=64),
        data=DataConfig(dataset="synthetic", synthetic_n=1000),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def load_datasets(data_cfg, num_classes=10):
    """(training set, held-out test set) as configured."""
    data_cfg.validate()
    if data_cfg.dataset == "cifar10":
        train = load_cifar10(data_cfg.path, train=True)
        test = load_cifar10(data_cfg.path, train=False)
        if data_cfg.subset:
            train = stratified_subset(train, data_cfg.subset, data_cfg.split_seed)
        if data_cfg.test_subset:
            test = stratified_subset(test, data_cfg.test_subset, data_cfg.split_seed)
        return train, test
    full = synthetic_dataset(data_cfg.synthetic_seed, data_cfg.synthetic_n, num_classes,
                             noise=data_cfg.synthetic_noise, cache=data_cfg.cache)
    return split_train_val(full, SplitSpec(1.0 - data_cfg.test_fraction, data_cfg.split_seed))


def search_splits(train, data_cfg):
    return split_train_val(train, SplitSpec(data_cfg.split_ratio, data_cfg.split_seed))
