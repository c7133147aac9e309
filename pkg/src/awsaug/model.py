"""A small hand-differentiated convnet with SGD/Nesterov training and checkpoints.

Architectures are described by a compact text descriptor, for example::

    input=16x16x3;conv3:8;relu;maxpool2;conv3:16;relu;maxpool2;dense:10

``conv<k>:<c>`` is a ``k x k`` same-padded convolution, ``maxpool<s>`` an
``s x s`` max pool (floor on odd sizes) and ``dense:<n>`` a fully connected
layer over the flattened input.  Parameters live in one flat float64 vector.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .augment import PreprocessConfig, augment_batch, DEFAULT_FILL
from .policy import PolicyParams, count_ops, sample_ops

CHECKPOINT_MAGIC = b"AWSCKPT1"
CHECKPOINT_VERSION = 1


def default_arch(size: int = 16, channels: int = 3, n_classes: int = 10) -> str:
    return (
        f"input={size}x{size}x{channels};conv3:8;relu;maxpool2;"
        f"conv3:16;relu;maxpool2;dense:{n_classes}"
    )


# ---------------------------------------------------------------------------
# layers


class _Layer:
    n_params = 0

    def bind(self, in_shape):
        self.in_shape = in_shape
        return in_shape

    def init(self, rng, out):
        pass


class _Conv(_Layer):
    def __init__(self, k, cout):
        self.k, self.cout = k, cout

    def bind(self, in_shape):
        h, w, cin = in_shape
        self.in_shape = in_shape
        self.cin = cin
        self.fan_in = self.k * self.k * cin
        self.n_params = self.fan_in * self.cout + self.cout
        return (h, w, self.cout)

    def split(self, params):
        w = params[: self.fan_in * self.cout].reshape(self.fan_in, self.cout)
        return w, params[self.fan_in * self.cout:]

    def init(self, rng, out):
        lim = math.sqrt(6.0 / self.fan_in)
        out[: self.fan_in * self.cout] = rng.uniform(-lim, lim, self.fan_in * self.cout)

    def forward(self, params, x):
        k, pad = self.k, self.k // 2
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        # (n, h, w, c, k, k) -> (n*h*w, k*k*c)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)
        wt, b = self.split(params)
        out = cols @ wt + b
        return out.reshape(n, h, w, self.cout), (cols, x.shape)

    def backward(self, params, cache, dout, grad):
        cols, (n, h, w, c) = cache
        k, pad = self.k, self.k // 2
        wt, _ = self.split(params)
        d2 = dout.reshape(-1, self.cout)
        grad[: self.fan_in * self.cout] = (cols.T @ d2).ravel()
        grad[self.fan_in * self.cout:] = d2.sum(axis=0)
        dcols = (d2 @ wt.T).reshape(n, h, w, k, k, c)
        dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w] += dcols[:, :, :, i, j]
        return dxp[:, pad:pad + h, pad:pad + w]


class _Relu(_Layer):
    def forward(self, params, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, params, cache, dout, grad):
        return dout * cache


class _MaxPool(_Layer):
    def __init__(self, s):
        self.s = s

    def bind(self, in_shape):
        h, w, c = in_shape
        self.in_shape = in_shape
        return (h // self.s, w // self.s, c)

    def forward(self, params, x):
        s = self.s
        n, h, w, c = x.shape
        ho, wo = h // s, w // s
        xc = x[:, : ho * s, : wo * s]
        blocks = xc.reshape(n, ho, s, wo, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, s * s)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, params, cache, dout, grad):
        arg, (n, h, w, c) = cache
        s = self.s
        ho, wo = h // s, w // s
        dblocks = np.zeros((n, ho, wo, c, s * s))
        np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros((n, h, w, c))
        dx[:, : ho * s, : wo * s] = (
            dblocks.reshape(n, ho, wo, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * s, wo * s, c)
        )
        return dx


class _Dense(_Layer):
    def __init__(self, nout):
        self.nout = nout

    def bind(self, in_shape):
        self.in_shape = in_shape
        self.nin = int(np.prod(in_shape))
        self.n_params = self.nin * self.nout + self.nout
        return (self.nout,)

    def split(self, params):
        w = params[: self.nin * self.nout].reshape(self.nin, self.nout)
        return w, params[self.nin * self.nout:]

    def init(self, rng, out):
        lim = math.sqrt(6.0 / self.nin)
        out[: self.nin * self.nout] = rng.uniform(-lim, lim, self.nin * self.nout)

    def forward(self, params, x):
        x2 = x.reshape(x.shape[0], -1)
        wt, b = self.split(params)
        return x2 @ wt + b, (x2, x.shape)

    def backward(self, params, cache, dout, grad):
        x2, shape = cache
        wt, _ = self.split(params)
        grad[: self.nin * self.nout] = (x2.T @ dout).ravel()
        grad[self.nin * self.nout:] = dout.sum(axis=0)
        return (dout @ wt.T).reshape(shape)


@dataclass(frozen=True)
class Arch:
    descriptor: str

    def __post_init__(self):
        self.layers  # validate eagerly

    @property
    def layers(self) -> list:
        return _parse_arch(self.descriptor)[1]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return _parse_arch(self.descriptor)[0]

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def n_outputs(self) -> int:
        return _parse_arch(self.descriptor)[2]


_ARCH_CACHE: dict = {}


def _parse_arch(desc: str):
    if desc in _ARCH_CACHE:
        return _ARCH_CACHE[desc]
    parts = [p.strip() for p in desc.split(";") if p.strip()]
    if not parts or not parts[0].startswith("input="):
        raise ValueError(f"architecture must start with input=HxWxC: {desc!r}")
    try:
        in_shape = tuple(int(v) for v in parts[0][len("input="):].split("x"))
    except ValueError:
        raise ValueError(f"bad input shape in {desc!r}") from None
    if len(in_shape) != 3:
        raise ValueError(f"bad input shape in {desc!r}")
    layers = []
    shape = in_shape
    for tok in parts[1:]:
        if tok == "relu":
            layer = _Relu()
        elif tok.startswith("maxpool"):
            layer = _MaxPool(int(tok[len("maxpool"):] or 2))
        elif tok.startswith("conv"):
            k, cout = tok[len("conv"):].split(":")
            layer = _Conv(int(k), int(cout))
        elif tok.startswith("dense:"):
            layer = _Dense(int(tok[len("dense:"):]))
        else:
            raise ValueError(f"unknown layer {tok!r}")
        if isinstance(layer, (_Conv, _MaxPool)) and len(shape) != 3:
            raise ValueError(f"layer {tok!r} needs a spatial input")
        shape = layer.bind(shape)
        layers.append(layer)
    if len(shape) != 1:
        raise ValueError("architecture must end with a dense layer")
    result = (in_shape, layers, shape[0])
    _ARCH_CACHE[desc] = result
    return result


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelState:
    """Network weights plus the (non-checkpointed) SGD momentum buffer."""

    arch: Arch
    params: np.ndarray
    rng_seed: int = 0
    velocity: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.params.shape != (self.arch.n_params,):
            raise ValueError(
                f"parameter vector has {self.params.size} entries, architecture needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(self.params)):
            raise ValueError("parameters must be finite")

    def copy(self) -> "ModelState":
        return replace(self, params=self.params.copy(), velocity=None)


def init_model(arch: Union[Arch, str], seed: int = 0) -> ModelState:
    """He-uniform weights, zero biases."""
    if isinstance(arch, str):
        arch = Arch(arch)
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.n_params)
    offset = 0
    for layer in arch.layers:
        layer.init(rng, params[offset:offset + layer.n_params])
        offset += layer.n_params
    return ModelState(arch, params, seed)


def standardize(images: np.ndarray) -> np.ndarray:
    """uint8 pixels map to [-1, 1]; float input passes through unchanged."""
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 127.5 - 1.0
    return np.asarray(images, dtype=np.float64)


def _check_batch(m: ModelState, x: np.ndarray) -> np.ndarray:
    x = standardize(x)
    if x.shape[1:] != m.arch.input_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match architecture input {m.arch.input_shape}")
    return x


def _forward(m: ModelState, x: np.ndarray, keep_cache: bool):
    caches = []
    offset = 0
    for layer in m.arch.layers:
        p = m.params[offset:offset + layer.n_params]
        x, cache = layer.forward(p, x)
        if keep_cache:
            caches.append(cache)
        offset += layer.n_params
    return x, caches


def forward(m: ModelState, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch of shape ``(N, H, W, C)``."""
    return _forward(m, _check_batch(m, batch), keep_cache=False)[0]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def loss_and_grad(
    m: ModelState, batch: np.ndarray, labels: np.ndarray, weight_decay: float = 0.0
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``weight_decay / 2 * ||params||^2`` and its gradient."""
    x = _check_batch(m, batch)
    logits, caches = _forward(m, x, keep_cache=True)
    loss, dout = softmax_cross_entropy(logits, np.asarray(labels))
    grad = np.zeros_like(m.params)
    offsets = np.cumsum([0] + [layer.n_params for layer in m.arch.layers])
    for i in range(len(m.arch.layers) - 1, -1, -1):
        layer = m.arch.layers[i]
        lo, hi = offsets[i], offsets[i + 1]
        dout = layer.backward(m.params[lo:hi], caches[i], dout, grad[lo:hi])
    if weight_decay:
        loss += 0.5 * weight_decay * float(m.params @ m.params)
        grad += weight_decay * m.params
    return loss, grad


def predict(m: ModelState, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [forward(m, images[i:i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(m: ModelState, data, batch_size: int = 500) -> float:
    """Fraction of argmax-correct predictions on clean images."""
    images, labels = _xy(data)
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(m, images, batch_size) == labels))


def _xy(data):
    if isinstance(data, tuple):
        return data
    return data.images, data.labels


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_max: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    eb_factor: int = 1
    preprocess: PreprocessConfig = PreprocessConfig(pad=2, cutout=0)
    fill: int = DEFAULT_FILL

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_max < 0:
            raise ValueError("epochs, batch_size and lr_max must be positive")
        if self.eb_factor < 1:
            raise ValueError("eb_factor must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def cosine_lr(lr_max: float, t: float, total: float) -> float:
    if total <= 0:
        return lr_max
    return lr_max * (1.0 + math.cos(math.pi * min(t, total) / total)) / 2.0


def iterations_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


@dataclass
class EpochResult:
    state: ModelState
    counts: Optional[np.ndarray]
    mean_loss: float
    steps: int


def sgd_nesterov_step(params, velocity, grad, lr, momentum):
    velocity = momentum * velocity + grad
    return params - lr * (grad + momentum * velocity), velocity


def run_epoch(
    m: ModelState,
    data,
    policy: Optional[PolicyParams],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
    total_epochs: Optional[int] = None,
    elements=None,
) -> EpochResult:
    """One pass of mini-batch SGD; returns the new state and sampled-op counts."""
    images, labels = _xy(data)
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    total_epochs = cfg.epochs if total_epochs is None else total_epochs
    iters = iterations_per_epoch(n, cfg.batch_size)
    params = m.params.copy()
    velocity = np.zeros_like(params) if m.velocity is None else m.velocity.copy()
    counts = np.zeros(policy.k, dtype=np.int64) if policy is not None else None
    aug_kw = {} if elements is None else {"elements": elements}
    order = rng.permutation(n)
    losses = []
    for it in range(iters):
        idx = order[it * cfg.batch_size:(it + 1) * cfg.batch_size]
        idx = np.tile(idx, cfg.eb_factor)
        op_ids = None
        if policy is not None:
            op_ids = sample_ops(policy, rng, len(idx))
            counts += count_ops(op_ids, policy.k)
        x = augment_batch(images[idx], op_ids, cfg.preprocess, rng, cfg.fill, **aug_kw)
        if cfg.schedule == "cosine":
            lr = cosine_lr(cfg.lr_max, epoch * iters + it, total_epochs * iters)
        else:
            lr = cfg.lr_max
        cur = replace(m, params=params, velocity=None)
        loss, grad = loss_and_grad(cur, x, labels[idx], cfg.weight_decay)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient during training")
        params, velocity = sgd_nesterov_step(params, velocity, grad, lr, cfg.momentum)
        losses.append(loss)
    state = replace(m, params=params, velocity=velocity)
    return EpochResult(state, counts, float(np.mean(losses)), iters)


def train_epoch(
    m: ModelState,
    data,
    policy: Optional[PolicyParams],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
    total_epochs: Optional[int] = None,
) -> ModelState:
    return run_epoch(m, data, policy, cfg, rng, epoch, total_epochs).state


def train(
    m: ModelState,
    data,
    policy: Optional[PolicyParams],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epochs: Optional[int] = None,
    policy_epochs: Optional[set] = None,
    elements=None,
) -> tuple[ModelState, Optional[np.ndarray]]:
    """Train for ``epochs`` (default ``cfg.epochs``) with the cosine clock over that span.

    ``policy_epochs`` restricts the augmentation policy to the listed epoch
    indices; other epochs use basic pre-processing only.
    """
    epochs = cfg.epochs if epochs is None else epochs
    counts = np.zeros(policy.k, dtype=np.int64) if policy is not None else None
    for e in range(epochs):
        active = policy if (policy_epochs is None or e in policy_epochs) else None
        res = run_epoch(m, data, active, cfg, rng, e, epochs, elements)
        m = res.state
        if res.counts is not None:
            counts += res.counts
    return replace(m, velocity=None), counts


# ---------------------------------------------------------------------------
# checkpoints


def atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_checkpoint(m: ModelState) -> bytes:
    meta = json.dumps({"arch": m.arch.descriptor, "seed": int(m.rng_seed)}, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            CHECKPOINT_MAGIC,
            bytes([CHECKPOINT_VERSION]),
            struct.pack("<I", len(meta)),
            meta,
            struct.pack("<Q", m.params.size),
            m.params.astype("<f8").tobytes(),
        ]
    )


def loads_checkpoint(blob: bytes, expected_arch: Optional[str] = None) -> ModelState:
    head = len(CHECKPOINT_MAGIC)
    if len(blob) < head + 1 + 4 or blob[:head] != CHECKPOINT_MAGIC:
        raise ValueError("corrupt checkpoint")
    if blob[head] != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version")
    pos = head + 1
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + meta_len + 8:
        raise ValueError("corrupt checkpoint")
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError("corrupt checkpoint") from None
    pos += meta_len
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) != pos + 8 * count:
        raise ValueError("corrupt checkpoint")
    arch = Arch(meta["arch"])
    if expected_arch is not None and arch.descriptor != expected_arch:
        raise ValueError(f"architecture mismatch: checkpoint has {arch.descriptor!r}")
    if arch.n_params != count:
        raise ValueError("corrupt checkpoint")
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return ModelState(arch, params, int(meta.get("seed", 0)))


def save_checkpoint(m: ModelState, path) -> None:
    atomic_write(path, dumps_checkpoint(m))


def load_checkpoint(path, expected_arch: Optional[str] = None) -> ModelState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    return loads_checkpoint(blob, expected_arch)
