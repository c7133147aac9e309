"""scikit-learn style wrappers around the model, the augmentation pipeline and the search."""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import N_OPS, PreprocessConfig, apply_op
from .data import Dataset
from .model import TrainConfig, default_arch, evaluate, forward, init_model, predict, train
from .optim import PpoConfig
from .policy import PolicyParams, sample_ops
from .search import ProxySpec, SearchConfig, SearchData, run_search, train_shared


def check_images(X, min_side: int = 1) -> np.ndarray:
    """Validate an image batch: uint8, shape (N, H, W, C) with C in {1, 3}."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, H, W, C), got {X.shape}")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.integer) or X.min(initial=0) < 0 or X.max(initial=0) > 255:
            raise ValueError("images must be uint8 or integers in [0, 255]")
        X = X.astype(np.uint8)
    if X.shape[-1] not in (1, 3):
        raise ValueError("images must have 1 or 3 channels")
    if min(X.shape[1:3]) < min_side:
        raise ValueError(f"images must be at least {min_side} pixels on a side")
    return X


def _labels(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError("y must be a 1-d array with one label per image")
    classes, encoded = np.unique(y, return_inverse=True)
    return classes, encoded.astype(np.int64)


def _seed(random_state) -> int:
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None")


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Small numpy convnet trained with SGD, optionally under an augmentation policy."""

    def __init__(
        self,
        epochs: int = 20,
        batch_size: int = 16,
        lr_max: float = 0.05,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        policy: Optional[PolicyParams] = None,
        pad: int = 0,
        flip_prob: float = 0.5,
        cutout: int = 0,
        arch: Optional[str] = None,
        random_state: Optional[int] = None,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.policy = policy
        self.pad = pad
        self.flip_prob = flip_prob
        self.cutout = cutout
        self.arch = arch
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            preprocess=PreprocessConfig(flip_prob=self.flip_prob, pad=self.pad, cutout=self.cutout),
        )

    def fit(self, X, y):
        X = check_images(X)
        self.classes_, enc = _labels(y, len(X))
        h, w, c = X.shape[1:]
        arch = self.arch or default_arch(h, c, len(self.classes_))
        seed = _seed(self.random_state)
        model = init_model(arch, seed)
        data = Dataset(X, enc, len(self.classes_))
        self.model_, _ = train(model, data, self.policy, self._train_config(), np.random.default_rng([seed, 11]))
        self.n_features_in_ = h * w * c
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        logits = forward(self.model_, check_images(X))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[predict(self.model_, check_images(X))]


class PolicyAugmenter(TransformerMixin, BaseEstimator):
    """Apply one operation sampled from ``policy`` to each image (uniform when ``policy`` is None)."""

    def __init__(self, policy: Optional[PolicyParams] = None, fill: int = 128, random_state: Optional[int] = None):
        self.policy = policy
        self.fill = fill
        self.random_state = random_state

    def fit(self, X, y=None):
        check_images(X)
        self.policy_ = self.policy if self.policy is not None else PolicyParams.uniform(N_OPS)
        self.rng_ = np.random.default_rng([_seed(self.random_state), 13])
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = check_images(X)
        ops = sample_ops(self.policy_, self.rng_, len(X))
        self.last_ops_ = ops
        return np.stack([apply_op(img, int(k), self.rng_, self.fill) for img, k in zip(X, ops)]) if len(X) else X


class AWSPolicySearch(TransformerMixin, BaseEstimator):
    """Search an augmentation policy on (X, y); ``transform`` then augments images with it.

    A seeded ``validation_fraction`` of the data is held out as the reward set.
    """

    def __init__(
        self,
        n_early: int = 20,
        n_late: int = 3,
        t_max: int = 200,
        proxy: str = "P_AF",
        validation_fraction: float = 0.5,
        batch_size: int = 16,
        lr_max: float = 0.05,
        finetune_lr: Optional[float] = 0.01,
        pad: int = 0,
        flip_prob: float = 0.5,
        lr_theta: float = 0.1,
        random_state: Optional[int] = None,
    ):
        self.n_early = n_early
        self.n_late = n_late
        self.t_max = t_max
        self.proxy = proxy
        self.validation_fraction = validation_fraction
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.finetune_lr = finetune_lr
        self.pad = pad
        self.flip_prob = flip_prob
        self.lr_theta = lr_theta
        self.random_state = random_state

    def _search_config(self) -> SearchConfig:
        train_cfg = TrainConfig(
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            preprocess=PreprocessConfig(flip_prob=self.flip_prob, pad=self.pad, cutout=0),
        )
        return SearchConfig(
            n_early=self.n_early,
            n_late=self.n_late,
            t_max=self.t_max,
            proxy=ProxySpec(self.proxy),
            ppo=replace(PpoConfig(), lr_theta=self.lr_theta),
            train=train_cfg,
            seed=_seed(self.random_state),
            finetune_lr=self.finetune_lr,
        )

    def fit(self, X, y):
        X = check_images(X)
        classes, enc = _labels(y, len(X))
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        cfg = self._search_config()
        order = np.random.default_rng([cfg.seed, 17]).permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        val_idx, tr_idx = order[:n_val], order[n_val:]
        if len(tr_idx) == 0:
            raise ValueError("no training images left after the validation split")
        full = Dataset(X, enc, len(classes))
        data = SearchData(full.subset(tr_idx, "train"), full.subset(val_idx, "val"))
        shared = None
        if cfg.proxy.variant.needs_checkpoint:
            shared = train_shared(cfg, data, augmented=cfg.proxy.variant.value != "P_NF")
            self.shared_accuracy_ = evaluate(shared, data.val)
        self.policy_, self.records_ = run_search(cfg, data, omega_share=shared)
        self.shared_model_ = shared
        self.classes_ = classes
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        aug = PolicyAugmenter(self.policy_, random_state=self.random_state).fit(X)
        return aug.transform(X)
