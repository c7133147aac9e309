"""Augmentation policy search with augmentation-wise weight sharing."""
from .augment import ELEMENTS, N_ELEMENTS, N_OPS, AugmentElement, AugmentOp, Kind, PreprocessConfig, apply_op, decode_op
from .data import Dataset, SplitSpec, load_cifar_binary, split, synth_dataset
from .model import ModelState, TrainConfig, evaluate, init_model, train
from .optim import AdamState, BaselineState, PpoConfig, ppo_update
from .policy import PolicyParams, load_policy, probabilities, sample_ops, save_policy
from .search import Proxy, ProxySpec, SearchConfig, SearchData, compare_proxies, run_search, schedule_experiment

__version__ = "0.1.0"

__all__ = [
    "ELEMENTS",
    "N_ELEMENTS",
    "N_OPS",
    "AugmentElement",
    "AugmentOp",
    "Kind",
    "PreprocessConfig",
    "apply_op",
    "decode_op",
    "Dataset",
    "SplitSpec",
    "load_cifar_binary",
    "split",
    "synth_dataset",
    "ModelState",
    "TrainConfig",
    "evaluate",
    "init_model",
    "train",
    "AdamState",
    "BaselineState",
    "PpoConfig",
    "ppo_update",
    "PolicyParams",
    "load_policy",
    "probabilities",
    "sample_ops",
    "save_policy",
    "Proxy",
    "ProxySpec",
    "SearchConfig",
    "SearchData",
    "compare_proxies",
    "run_search",
    "schedule_experiment",
]
