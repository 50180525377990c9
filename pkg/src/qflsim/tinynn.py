"""Dense ReLU/softmax classifier with manual forward and backward passes.

Weights live in one flat float64 vector (all layer matrices then biases,
layer by layer) so quantization, transmission, and aggregation can treat
the model as a plain d-vector.  Local training keeps a full-precision
working copy but evaluates every gradient at stochastically quantized
weights, then clips the working copy back into the representable range.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .datasets import LabeledDataset
from .quantizer import QuantConfig, clip as clip_range, dequantize, quantize

CHECKPOINT_MAGIC = b"QFLW"
CHECKPOINT_VERSION = 1


class DimensionMismatchError(ValueError):
    pass


class EmptyShardError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    layer_dims: tuple[int, ...]
    weights: np.ndarray        # flat float64, matrices then biases per layer

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        expected = param_count(self.layer_dims)
        if self.weights.shape != (expected,):
            raise DimensionMismatchError(
                f"flat vector has {self.weights.shape}, expected ({expected},)")

    @property
    def dim(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class Minibatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.features) < 1:
            raise ValueError("minibatch must hold at least one sample")
        if len(self.features) != len(self.labels):
            raise DimensionMismatchError("features/labels length mismatch")


@dataclass(frozen=True)
class LocalTrainConfig:
    local_iters: int
    learning_rate: float
    batch_size: int
    quant: QuantConfig | None = None
    quantize_activations: bool = False   # nearest-grid hidden activations

    def __post_init__(self):
        if self.local_iters < 1:
            raise ValueError("local_iters must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.quantize_activations and self.quant is None:
            raise ValueError("quantize_activations requires a quant config")


def param_count(layer_dims) -> int:
    return sum(i * o + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def mac_count(layer_dims) -> int:
    """Multiply-accumulates of one forward pass on one sample."""
    return sum(i * o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def init_params(layer_dims, rng: np.random.Generator) -> ModelParams:
    """Uniform [-0.1, 0.1] init keeps weights clear of the clip boundary."""
    flat = rng.uniform(-0.1, 0.1, size=param_count(layer_dims))
    return ModelParams(layer_dims=tuple(layer_dims), weights=flat)


def _views(layer_dims, flat: np.ndarray):
    out, offset = [], 0
    for i, o in zip(layer_dims[:-1], layer_dims[1:]):
        w = flat[offset:offset + i * o].reshape(i, o)
        offset += i * o
        b = flat[offset:offset + o]
        offset += o
        out.append((w, b))
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def forward_loss(params: ModelParams, batch: Minibatch,
                 act_quant: QuantConfig | None = None):
    """Mean cross-entropy over the batch; cache feeds backward().

    act_quant snaps hidden activations to the nearest grid point
    (optional; gradients then flow straight through the rounding).
    """
    if batch.features.shape[1] != params.layer_dims[0]:
        raise DimensionMismatchError(
            f"input dim {batch.features.shape[1]} vs model {params.layer_dims[0]}")
    layers = _views(params.layer_dims, params.weights)
    acts = [np.asarray(batch.features, dtype=np.float64)]
    pre = []
    for idx, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        pre.append(z)
        if idx < len(layers) - 1:
            a = np.maximum(z, 0.0)
            if act_quant is not None:
                a = np.rint(clip_range(a, act_quant) * act_quant.gain) / act_quant.gain
            acts.append(a)
        else:
            acts.append(z)
    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(batch.labels)), batch.labels]
    loss = float(np.mean(log_norm - picked))
    cache = {"params": params, "acts": acts, "pre": pre,
             "probs": _softmax(logits)}
    return loss, cache


def backward(cache, batch: Minibatch) -> np.ndarray:
    """Exact gradient of the mean cross-entropy w.r.t. the flat weights."""
    params: ModelParams = cache["params"]
    layers = _views(params.layer_dims, params.weights)
    acts, pre = cache["acts"], cache["pre"]
    batch_size = len(batch.labels)
    delta = cache["probs"].copy()
    delta[np.arange(batch_size), batch.labels] -= 1.0
    delta /= batch_size
    grad = np.zeros_like(params.weights)
    grad_views = _views(params.layer_dims, grad)
    for idx in range(len(layers) - 1, -1, -1):
        gw, gb = grad_views[idx]
        gw[:] = acts[idx].T @ delta
        gb[:] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ layers[idx][0].T) * (pre[idx - 1] > 0.0)
    return grad


def _sample_batch(shard: LabeledDataset, batch_size: int,
                  rng: np.random.Generator) -> Minibatch:
    if batch_size >= len(shard):
        return Minibatch(features=shard.features, labels=shard.labels)
    idx = rng.choice(len(shard), size=batch_size, replace=False)
    return Minibatch(features=shard.features[idx], labels=shard.labels[idx])


def local_train(start: ModelParams, shard: LabeledDataset,
                cfg: LocalTrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Run local SGD steps and return the weight delta w_final - w_start.

    Each step draws a minibatch, quantizes the full-precision working
    copy, evaluates the gradient at the quantized weights, applies the
    update to the full-precision copy, then clips it into the quantizer
    range.  With quant=None the steps are plain SGD (no rounding, no
    clipping).  RNG consumption order per step is: batch indices, then
    rounding draws.
    """
    if len(shard) == 0:
        raise EmptyShardError("client shard holds no samples")
    work = start.weights.copy()
    for _ in range(cfg.local_iters):
        batch = _sample_batch(shard, cfg.batch_size, rng)
        if cfg.quant is not None:
            eval_w = dequantize(quantize(work, cfg.quant, rng))
        else:
            eval_w = work
        eval_params = ModelParams(layer_dims=start.layer_dims, weights=eval_w)
        _, cache = forward_loss(eval_params, batch,
                                act_quant=cfg.quant if cfg.quantize_activations else None)
        grad = backward(cache, batch)
        work -= cfg.learning_rate * grad
        if cfg.quant is not None:
            work = clip_range(work, cfg.quant)
    return work - start.weights


def evaluate(params: ModelParams, ds: LabeledDataset) -> tuple[float, float]:
    """(argmax accuracy, mean cross-entropy loss) over a dataset."""
    batch = Minibatch(features=ds.features, labels=ds.labels)
    loss, cache = forward_loss(params, batch)
    accuracy = float(np.mean(cache["probs"].argmax(axis=1) == ds.labels))
    return accuracy, loss


def save_checkpoint(path, params: ModelParams, bits: int | None) -> None:
    """Flat little-endian float64 checkpoint with a (dims, bits) header."""
    with open(str(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.layer_dims)))
        fh.write(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
        fh.write(struct.pack("<i", -1 if bits is None else bits))
        fh.write(params.weights.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, int | None]:
    with open(str(path), "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        version, n_dims = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
        bits, = struct.unpack("<i", fh.read(4))
        flat = np.frombuffer(fh.read(), dtype="<f8").copy()
    params = ModelParams(layer_dims=tuple(dims), weights=flat)
    return params, None if bits < 0 else bits
