"""scikit-learn style wrappers around the search and the final training."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import engine
from .data import Dataset, SplitSpec, split_train_val
from .export import save_model
from .search_space import Genotype, SearchSpaceConfig


def _space(search_space, n_classes, image_size):
    if isinstance(search_space, SearchSpaceConfig):
        d = search_space.to_dict()
    else:
        d = dict(search_space or {})
    d["num_classes"] = n_classes
    d["image_size"] = image_size
    return SearchSpaceConfig.from_dict(d).validate()


def _check_images(X, y=None):
    if y is None:
        X = check_array(X, allow_nd=True, dtype=np.float32)
    else:
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected images shaped [N, 3, H, H], got {X.shape}")
    return X if y is None else (X, y)


class BARSSearch(BaseEstimator):
    """Architecture search as an estimator: ``fit(X, y)`` finds a genotype.

    Parameters
    ----------
    search_space : dict or SearchSpaceConfig, optional
        Search-space settings; ``num_classes`` and ``image_size`` are taken
        from the data.
    epochs, warmup_epochs, batch_size, w_lr, alpha_lr :
        Search schedule (``epochs`` counts warm-up epochs too).
    derive_k : int
        Number of sampled candidates compared at the end.
    split_ratio : float
        Fraction of ``X`` used for weight updates; the rest drives the
        architecture updates and the candidate comparison.
    random_state : int

    Attributes
    ----------
    genotype_ : Genotype
    alpha_ : dict of ndarray
        Final architecture logits.
    trajectory_ : list of dict
        One record per epoch.
    candidates_ : list of engine.Candidate
    """

    def __init__(self, search_space=None, epochs=50, warmup_epochs=5, batch_size=64, w_lr=3e-4,
                 alpha_lr=3e-4, derive_k=8, split_ratio=0.5, random_state=0):
        self.search_space = search_space
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.w_lr = w_lr
        self.alpha_lr = alpha_lr
        self.derive_k = derive_k
        self.split_ratio = split_ratio
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_images(X, y)
        self.classes_ = unique_labels(y)
        yi = np.searchsorted(self.classes_, y)
        space = _space(self.search_space, len(self.classes_), X.shape[2])
        run = engine.SearchRunConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs,
                                     batch_size=self.batch_size, w_lr=self.w_lr, alpha_lr=self.alpha_lr,
                                     derive_k=self.derive_k)
        seed = int(self.random_state or 0)
        ds = Dataset(X, yi, len(self.classes_))
        train, val = split_train_val(ds, SplitSpec(self.split_ratio, seed))
        state = engine.init_search(space, run, seed)
        engine.run_search(state, train, val)
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
        self.genotype_, self.candidates_ = engine.derive(state.net, val, self.derive_k, rng)
        self.alpha_ = {k: p.data.copy() for k, p in state.arch.named_parameters()}
        self.trajectory_ = state.trajectory
        self.search_space_ = space
        return self


class BinaryNetClassifier(ClassifierMixin, BaseEstimator):
    """Train a decoded binary network from scratch.

    Parameters
    ----------
    genotype : Genotype or dict
        The architecture (for example ``BARSSearch().fit(X, y).genotype_``).
    search_space : dict or SearchSpaceConfig
        Must match the space the genotype was derived in.
    epochs, batch_size, lr, augment, cutout : training schedule.
    packed : bool
        Export to the XNOR/popcount form after training (predictions are
        then computed on packed bits).
    random_state : int
    """

    def __init__(self, genotype=None, search_space=None, epochs=20, batch_size=64, lr=2e-3, augment=True,
                 cutout=False, packed=True, random_state=0):
        self.genotype = genotype
        self.search_space = search_space
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.augment = augment
        self.cutout = cutout
        self.packed = packed
        self.random_state = random_state

    def fit(self, X, y):
        if self.genotype is None:
            raise ValueError("BinaryNetClassifier needs a genotype")
        X, y = _check_images(X, y)
        self.classes_ = unique_labels(y)
        yi = np.searchsorted(self.classes_, y)
        space = _space(self.search_space, len(self.classes_), X.shape[2])
        g = self.genotype if isinstance(self.genotype, Genotype) else Genotype.from_dict(self.genotype)
        run = engine.TrainRunConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                    augment=self.augment, cutout=self.cutout)
        self.model_, self.history_ = engine.train_final(g, space, run, Dataset(X, yi, len(self.classes_)),
                                                        seed=int(self.random_state or 0))
        if self.packed:
            self.model_.export()
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X)
        return engine.predict_logits(self.model_, X)

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def export(self, path):
        """Write the packed model file; exports first if needed."""
        check_is_fitted(self, "model_")
        if not self.model_.is_packed:
            self.model_.export()
        return save_model(path, self.model_)
