"""
Masked Encoder Module
A miniature post-norm transformer encoder over L x D bit windows, trained from
scratch by sensor-wise masked reconstruction.

Everything is plain numpy in float64: forward pass, hand-derived backward pass,
focal loss, Adam and the checkpoint codec. Weights follow the y = x @ W.T
convention, so a matrix documented as d x D maps D inputs to d outputs.
"""

import itertools
import json
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from feature_encoding import ChannelStats, SequenceWindow, stats_from_dict, stats_to_dict
from sensor_model import DataError, HomeSchema, UnknownSensorError, build_schema


SEQ_LEN = 5
D_MODEL = 64
N_LAYERS = 2
N_HEADS = 4
HEAD_WIDTH = D_MODEL // N_HEADS
FFN_WIDTH = 2 * D_MODEL
LN_EPS = 1e-6
PROB_CLAMP = 1e-7
INIT_STD = 0.02
MASK_INIT = 0.5

CHECKPOINT_MAGIC = b"TURS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHI")

_GELU_C = math.sqrt(2.0 / math.pi)


class CheckpointError(DataError):
    pass


class StaleCacheError(DataError):
    pass


class TrainingDivergedError(DataError, RuntimeError):
    def __init__(self, epoch: int, batch: int, last_finite_loss: Optional[float]):
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch} (last finite loss: {last_finite_loss})"
        )
        self.epoch = epoch
        self.batch = batch
        self.last_finite_loss = last_finite_loss


LAYER_TENSORS = (
    "W_Q", "W_K", "W_V", "W_O",
    "attn_ln_gain", "attn_ln_bias",
    "W1", "b1", "W2", "b2",
    "ffn_ln_gain", "ffn_ln_bias",
)


def param_shapes(D: int) -> Dict[str, Tuple[int, ...]]:
    """Every learnable tensor and its shape, in declaration (checkpoint) order."""
    shapes: Dict[str, Tuple[int, ...]] = {
        "W_in": (D_MODEL, D),
        "b_in": (D_MODEL,),
        "P": (SEQ_LEN, D_MODEL),
        "mask_value": (1,),
    }
    for layer in range(N_LAYERS):
        prefix = f"layers.{layer}."
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[prefix + name] = (D_MODEL, D_MODEL)
        shapes[prefix + "attn_ln_gain"] = (D_MODEL,)
        shapes[prefix + "attn_ln_bias"] = (D_MODEL,)
        shapes[prefix + "W1"] = (FFN_WIDTH, D_MODEL)
        shapes[prefix + "b1"] = (FFN_WIDTH,)
        shapes[prefix + "W2"] = (D_MODEL, FFN_WIDTH)
        shapes[prefix + "b2"] = (D_MODEL,)
        shapes[prefix + "ffn_ln_gain"] = (D_MODEL,)
        shapes[prefix + "ffn_ln_bias"] = (D_MODEL,)
    shapes["W_out"] = (D, D_MODEL)
    shapes["b_out"] = (D,)
    return shapes


def count_parameters(D: int) -> int:
    """Closed form of sum(prod(shape)) over param_shapes(D)."""
    per_layer = 4 * D_MODEL * D_MODEL + 2 * D_MODEL + 2 * FFN_WIDTH * D_MODEL + FFN_WIDTH + D_MODEL + 2 * D_MODEL
    return 2 * D_MODEL * D + D_MODEL + SEQ_LEN * D_MODEL + 1 + N_LAYERS * per_layer + D


_versions = itertools.count(1)


@dataclass(eq=False)
class ModelParams:
    """
    Learnable tensors of the encoder. Treated as immutable: updates build a new
    instance, and every instance carries a fresh version so stale forward
    caches are detectable.
    """

    tensors: Dict[str, np.ndarray]
    version: int = field(default_factory=lambda: next(_versions))

    @property
    def D(self) -> int:
        return self.tensors["W_in"].shape[1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def evolve(self, tensors: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams({name: tensors[name] for name in self.tensors})

    def copy(self) -> "ModelParams":
        return self.evolve({k: v.copy() for k, v in self.tensors.items()})


Gradients = Dict[str, np.ndarray]


def init_params(schema: Union[HomeSchema, int], seed: int) -> ModelParams:
    """
    Fresh parameters: matrices and positional rows ~ N(0, 0.02^2), biases 0,
    layer-norm gains 1, mask value 0.5.
    """
    D = schema if isinstance(schema, int) else schema.D
    if D < 2:
        raise ValueError(f"the encoder needs D >= 2, got {D}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(D).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "mask_value":
            tensors[name] = np.full(shape, MASK_INIT)
        elif leaf.endswith("_gain"):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("W") or leaf == "P":
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(tensors)


def random_params(schema: Union[HomeSchema, int], seed: int, scale: float = 0.2) -> ModelParams:
    """Fresh parameters with N(0, scale^2) noise added to every tensor; used by gradient checks."""
    params = init_params(schema, seed)
    rng = np.random.default_rng([seed, 1])
    return params.evolve({name: t + rng.normal(0.0, scale, size=t.shape) for name, t in params.tensors.items()})


@dataclass(frozen=True)
class MaskSet:
    sensor_ids: Tuple[str, ...]

    def bit_mask(self, schema: HomeSchema) -> np.ndarray:
        return schema.bit_mask(self.sensor_ids)


def masked_input(x: np.ndarray, bit_mask: Optional[np.ndarray], mask_value: float) -> np.ndarray:
    """
    Replace masked bit columns in every row by mask_value.

    bit_mask is (D,) for all sequences or (B, D) per sequence; x is (L, D) or (B, L, D).
    """
    x = np.asarray(x, dtype=np.float64)
    if bit_mask is None:
        return x.copy()
    bit_mask = np.asarray(bit_mask, dtype=bool)
    if bit_mask.ndim == 2:
        bit_mask = bit_mask[:, None, :]
    return np.where(bit_mask, mask_value, x)


def apply_mask(window: Union[SequenceWindow, np.ndarray], mask: MaskSet, params: ModelParams, schema: HomeSchema) -> np.ndarray:
    """L x D real input: window bits with every masked sensor's bits set to mask_value."""
    rows = window.rows if isinstance(window, SequenceWindow) else window
    for sensor_id in mask.sensor_ids:
        if sensor_id not in schema:
            raise UnknownSensorError(f"mask names unknown sensor {sensor_id!r}")
    return masked_input(rows, mask.bit_mask(schema), float(params["mask_value"][0]))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (output, normalized pre-affine x_hat, 1/std)."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    x_hat = centered * inv_std
    return x_hat * gain + bias, x_hat, inv_std


def _layer_norm_backward(dy: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, gain: np.ndarray):
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * x_hat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dx_hat = dy * gain
    dx = inv_std * (
        dx_hat
        - dx_hat.mean(axis=-1, keepdims=True)
        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (z + 0.044715 * z ** 3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


def softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _split_heads(x: np.ndarray) -> np.ndarray:
    B, L, _ = x.shape
    return x.reshape(B, L, N_HEADS, HEAD_WIDTH).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, _, L, _ = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, D_MODEL)


def _dropout_mask(shape, rate: float, rng: Optional[np.random.Generator]) -> Optional[np.ndarray]:
    if rate <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


@dataclass
class LayerCache:
    h_in: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    A: np.ndarray
    C: np.ndarray
    attn_drop: Optional[np.ndarray]
    attn_xhat: np.ndarray
    attn_inv: np.ndarray
    h_mid: np.ndarray
    z1: np.ndarray
    g: np.ndarray
    ffn_drop: Optional[np.ndarray]
    ffn_xhat: np.ndarray
    ffn_inv: np.ndarray


@dataclass
class ForwardCache:
    version: int
    batched: bool
    u: np.ndarray
    bit_mask: Optional[np.ndarray]
    layers: List[LayerCache]
    h_out: np.ndarray

    @property
    def attention(self) -> List[np.ndarray]:
        """Per-layer (B, heads, L, L) attention weights."""
        return [lc.A for lc in self.layers]


def forward(
    params: ModelParams,
    x: np.ndarray,
    mask_positions: Optional[np.ndarray] = None,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, ForwardCache]:
    """
    Encoder forward pass.

    Args:
        params: Model parameters
        x: (L, D) or (B, L, D) input; bits, or reals already masked by apply_mask
        mask_positions: Optional (D,) or (B, D) boolean bit mask filled with mask_value here
        dropout_rate: Dropout probability after each sublayer; needs rng to take effect
        rng: Generator for dropout masks (recorded in the cache)

    Returns:
        (logits shaped like x, cache for backward)
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != SEQ_LEN or x.shape[2] != params.D:
        raise ValueError(f"input must be (B, {SEQ_LEN}, {params.D}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")

    bit_mask = None
    if mask_positions is not None:
        bit_mask = np.broadcast_to(np.asarray(mask_positions, dtype=bool), (x.shape[0], params.D))
    u = masked_input(x, bit_mask, float(params["mask_value"][0]))

    h = u @ params["W_in"].T + params["b_in"] + params["P"]
    scale = 1.0 / math.sqrt(HEAD_WIDTH)
    layer_caches = []
    for layer in range(N_LAYERS):
        p = f"layers.{layer}."
        Q = _split_heads(h @ params[p + "W_Q"].T)
        K = _split_heads(h @ params[p + "W_K"].T)
        V = _split_heads(h @ params[p + "W_V"].T)
        A = softmax(Q @ K.transpose(0, 1, 3, 2) * scale)
        C = _merge_heads(A @ V)
        O = C @ params[p + "W_O"].T
        attn_drop = _dropout_mask(O.shape, dropout_rate, rng)
        if attn_drop is not None:
            O = O * attn_drop
        h_mid, attn_xhat, attn_inv = layer_norm(h + O, params[p + "attn_ln_gain"], params[p + "attn_ln_bias"])

        z1 = h_mid @ params[p + "W1"].T + params[p + "b1"]
        g = gelu(z1)
        z2 = g @ params[p + "W2"].T + params[p + "b2"]
        ffn_drop = _dropout_mask(z2.shape, dropout_rate, rng)
        if ffn_drop is not None:
            z2 = z2 * ffn_drop
        h_next, ffn_xhat, ffn_inv = layer_norm(h_mid + z2, params[p + "ffn_ln_gain"], params[p + "ffn_ln_bias"])

        layer_caches.append(
            LayerCache(h, Q, K, V, A, C, attn_drop, attn_xhat, attn_inv, h_mid, z1, g, ffn_drop, ffn_xhat, ffn_inv)
        )
        h = h_next

    logits = h @ params["W_out"].T + params["b_out"]
    cache = ForwardCache(params.version, batched, u, bit_mask, layer_caches, h)
    return (logits if batched else logits[0]), cache


def _matmul_grad(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """dW for y = x @ W.T, summed over every leading axis."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> Gradients:
    """
    Exact gradients of a scalar objective given d objective / d logits.

    Raises:
        StaleCacheError: cache was produced by a different parameter version
    """
    if cache.version != params.version:
        raise StaleCacheError(
            f"forward cache belongs to parameter version {cache.version}, got version {params.version}"
        )
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if not cache.batched:
        dlogits = dlogits[None]

    grads: Gradients = {}
    grads["W_out"] = _matmul_grad(dlogits, cache.h_out)
    grads["b_out"] = dlogits.sum(axis=(0, 1))
    dh = dlogits @ params["W_out"]

    scale = 1.0 / math.sqrt(HEAD_WIDTH)
    for layer in reversed(range(N_LAYERS)):
        p = f"layers.{layer}."
        lc = cache.layers[layer]

        dr, grads[p + "ffn_ln_gain"], grads[p + "ffn_ln_bias"] = _layer_norm_backward(
            dh, lc.ffn_xhat, lc.ffn_inv, params[p + "ffn_ln_gain"]
        )
        dz2 = dr if lc.ffn_drop is None else dr * lc.ffn_drop
        grads[p + "W2"] = _matmul_grad(dz2, lc.g)
        grads[p + "b2"] = dz2.sum(axis=(0, 1))
        dz1 = (dz2 @ params[p + "W2"]) * _gelu_grad(lc.z1)
        grads[p + "W1"] = _matmul_grad(dz1, lc.h_mid)
        grads[p + "b1"] = dz1.sum(axis=(0, 1))
        dh_mid = dr + dz1 @ params[p + "W1"]

        dr, grads[p + "attn_ln_gain"], grads[p + "attn_ln_bias"] = _layer_norm_backward(
            dh_mid, lc.attn_xhat, lc.attn_inv, params[p + "attn_ln_gain"]
        )
        dO = dr if lc.attn_drop is None else dr * lc.attn_drop
        grads[p + "W_O"] = _matmul_grad(dO, lc.C)
        dC = _split_heads(dO @ params[p + "W_O"])
        dA = dC @ lc.V.transpose(0, 1, 3, 2)
        dV = lc.A.transpose(0, 1, 3, 2) @ dC
        dS = lc.A * (dA - (dA * lc.A).sum(axis=-1, keepdims=True)) * scale
        dQ = _merge_heads(dS @ lc.K)
        dK = _merge_heads(dS.transpose(0, 1, 3, 2) @ lc.Q)
        dV = _merge_heads(dV)
        grads[p + "W_Q"] = _matmul_grad(dQ, lc.h_in)
        grads[p + "W_K"] = _matmul_grad(dK, lc.h_in)
        grads[p + "W_V"] = _matmul_grad(dV, lc.h_in)
        dh = dr + dQ @ params[p + "W_Q"] + dK @ params[p + "W_K"] + dV @ params[p + "W_V"]

    grads["P"] = dh.sum(axis=0)
    grads["W_in"] = _matmul_grad(dh, cache.u)
    grads["b_in"] = dh.sum(axis=(0, 1))
    du = dh @ params["W_in"]
    if cache.bit_mask is None:
        grads["mask_value"] = np.zeros(1)
    else:
        grads["mask_value"] = np.array([(du * cache.bit_mask[:, None, :]).sum()])
    return {name: grads[name] for name in params.names()}


def focal_loss(
    logits: np.ndarray,
    target_bits: np.ndarray,
    masked_positions: np.ndarray,
    gamma: float,
) -> Tuple[float, np.ndarray]:
    """
    Focal loss on masked positions only.

    Each sequence contributes the mean of -(1 - p_t)^gamma * log(p_t) over its
    masked positions; the batch loss is the mean over sequences.

    Args:
        logits: (L, D) or (B, L, D)
        target_bits: Same shape as logits
        masked_positions: Boolean mask shaped like logits, or a per-sequence
            bit mask (D,) / (B, D) applied to every row
        gamma: Focusing exponent (>= 0); 0 gives binary cross-entropy

    Returns:
        (loss, d loss / d logits)
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    z = np.asarray(logits, dtype=np.float64)
    batched = z.ndim == 3
    if not batched:
        z = z[None]
    y = np.asarray(target_bits, dtype=np.float64).reshape(z.shape)
    mask = np.asarray(masked_positions, dtype=bool)
    if not batched and mask.shape == z.shape[1:]:
        mask = mask[None]
    elif mask.ndim == 1:
        mask = mask[None, None, :]
    elif mask.ndim == 2:
        mask = mask[:, None, :]
    mask = np.broadcast_to(mask, z.shape)

    counts = mask.sum(axis=(1, 2))
    if np.any(counts == 0):
        raise ValueError("focal loss needs at least one masked position per sequence")
    weights = mask / (counts[:, None, None] * z.shape[0])

    raw = sigmoid(z)
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (raw >= PROB_CLAMP) & (raw <= 1.0 - PROB_CLAMP)
    positive = y >= 0.5
    p_t = np.where(positive, p, 1.0 - p)
    log_pt = np.log(p_t)
    focus = (1.0 - p_t) ** gamma
    elementwise = -focus * log_pt
    loss = float((weights * elementwise).sum())

    if gamma == 0:
        dl_dpt = -1.0 / p_t
    else:
        dl_dpt = gamma * (1.0 - p_t) ** (gamma - 1.0) * log_pt - focus / p_t
    dpt_dz = np.where(positive, 1.0, -1.0) * p * (1.0 - p) * inside
    grad = weights * dl_dpt * dpt_dz
    return loss, (grad if batched else grad[0])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    p_mask: float = 0.15
    focal_gamma: float = 2.0
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p_mask < 1.0:
            raise ValueError(f"p_mask must lie in (0, 1), got {self.p_mask}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AdamMoments:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamMoments":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


def adam_step(
    params: ModelParams,
    grads: Gradients,
    moments: AdamMoments,
    config: TrainConfig,
    t: int,
) -> Tuple[ModelParams, AdamMoments]:
    """One bias-corrected Adam update; returns new params and moments."""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    step_size = config.learning_rate / bc1

    new_tensors, new_m, new_v = {}, {}, {}
    for name, value in params.tensors.items():
        g = grads[name]
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * (g * g)
        new_tensors[name] = value - step_size * m / (np.sqrt(v / bc2) + config.adam_epsilon)
        new_m[name], new_v[name] = m, v
    return params.evolve(new_tensors), AdamMoments(new_m, new_v)


def sample_sensor_masks(rng: np.random.Generator, n_sequences: int, n_sensors: int, p_mask: float) -> np.ndarray:
    """(n_sequences, n_sensors) boolean masks; empty rows are re-drawn."""
    masks = rng.random((n_sequences, n_sensors)) < p_mask
    empty = ~masks.any(axis=1)
    while empty.any():
        masks[empty] = rng.random((int(empty.sum()), n_sensors)) < p_mask
        empty = ~masks.any(axis=1)
    return masks


def sensor_bit_owner(schema: HomeSchema) -> np.ndarray:
    """(D,) index of the sensor owning each bit."""
    return np.repeat(np.arange(len(schema)), schema.bit_widths)


def _as_window_array(windows: Union[np.ndarray, Iterable[SequenceWindow]]) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows.astype(np.float64)
    rows = [w.rows for w in windows]
    if not rows:
        return np.zeros((0, SEQ_LEN, 0))
    return np.stack(rows).astype(np.float64)


def train(
    windows: Union[np.ndarray, Iterable[SequenceWindow]],
    schema: HomeSchema,
    config: TrainConfig,
    verbose: bool = True,
) -> Tuple[ModelParams, List[float]]:
    """
    Train the encoder by sensor-wise masked reconstruction.

    Args:
        windows: Training windows, as SequenceWindows or an (N, L, D) array
        schema: Bit layout of the windows
        config: Optimization settings

    Returns:
        (trained ModelParams, per-epoch mean loss)
    """
    X = _as_window_array(windows)
    if len(X) == 0:
        raise ValueError("training needs at least one window")
    if X.shape[1:] != (SEQ_LEN, schema.D):
        raise ValueError(f"windows must be ({SEQ_LEN}, {schema.D}), got {X.shape[1:]}")

    rng = np.random.default_rng(config.seed)
    params = init_params(schema, config.seed)
    moments = AdamMoments.zeros(params)
    owner = sensor_bit_owner(schema)
    curve: List[float] = []
    step = 0
    last_finite: Optional[float] = None

    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for batch_index, start in enumerate(range(0, len(X), config.batch_size)):
            batch = X[order[start:start + config.batch_size]]
            bit_mask = sample_sensor_masks(rng, len(batch), len(schema), config.p_mask)[:, owner]
            logits, cache = forward(params, batch, bit_mask, config.dropout_rate, rng)
            loss, dlogits = focal_loss(logits, batch, bit_mask, config.focal_gamma)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch + 1, batch_index, last_finite)
            last_finite = loss
            grads = backward(params, cache, dlogits)
            step += 1
            params, moments = adam_step(params, grads, moments, config, step)
            total += loss * len(batch)
        curve.append(total / len(X))
        if verbose:
            print(f"  epoch {epoch + 1:3d}/{config.epochs}  loss {curve[-1]:.5f}")
    return params, curve


def save_checkpoint(params: ModelParams, schema: HomeSchema, stats: Mapping[str, ChannelStats]) -> bytes:
    """Serialize parameters as little-endian float32 behind a JSON header."""
    if params.D != schema.D:
        raise CheckpointError(f"parameters are for D={params.D}, schema has D={schema.D}")
    header = json.dumps(
        {
            "schema": schema.to_dict(),
            "L": SEQ_LEN,
            "d": D_MODEL,
            "layers": N_LAYERS,
            "heads": N_HEADS,
            "stats": stats_to_dict(stats),
        },
        sort_keys=True,
    ).encode("utf-8")
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header]
    for name, shape in param_shapes(schema.D).items():
        tensor = params[name]
        if tensor.shape != shape:
            raise CheckpointError(f"{name} has shape {tensor.shape}, expected {shape}")
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_checkpoint(
    data: bytes,
    expected_schema: Optional[HomeSchema] = None,
) -> Tuple[ModelParams, HomeSchema, Dict[str, ChannelStats]]:
    """
    Decode a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: bad magic or version, truncated or oversized payload,
            architecture or schema mismatch
    """
    if len(data) < _HEADER.size:
        raise CheckpointError("corrupt checkpoint: truncated header")
    magic, version, header_len = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body_start = _HEADER.size + header_len
    if len(data) < body_start:
        raise CheckpointError("corrupt checkpoint: truncated header")
    try:
        header = json.loads(data[_HEADER.size:body_start].decode("utf-8"))
        schema = HomeSchema.from_dict(header["schema"])
        stats = stats_from_dict(header.get("stats", {}))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    arch = (header.get("L"), header.get("d"), header.get("layers"), header.get("heads"))
    if arch != (SEQ_LEN, D_MODEL, N_LAYERS, N_HEADS):
        raise CheckpointError(f"checkpoint architecture (L, d, layers, heads) = {arch} is not supported")
    if expected_schema is not None and expected_schema.D != schema.D:
        raise CheckpointError(f"checkpoint was trained for D={schema.D}, schema has D={expected_schema.D}")

    shapes = param_shapes(schema.D)
    expected_bytes = 4 * sum(int(np.prod(s)) for s in shapes.values())
    payload = data[body_start:]
    if len(payload) != expected_bytes:
        raise CheckpointError(f"corrupt checkpoint: {len(payload)} parameter bytes, expected {expected_bytes}")
    tensors = {}
    offset = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * n
    return ModelParams(tensors), schema, stats


def _objective(params, x, bit_mask, gamma, dropout_rate, seed):
    rng = np.random.default_rng(seed) if dropout_rate > 0 else None
    logits, cache = forward(params, x, bit_mask, dropout_rate, rng)
    loss, dlogits = focal_loss(logits, x, bit_mask, gamma)
    return loss, dlogits, cache


def check_indices(flat_grad: np.ndarray, k: int, rng: np.random.Generator, exhaustive: bool = False, full_below: int = 128) -> np.ndarray:
    """Flat entries a gradient check perturbs: all of them for small tensors or exhaustive runs, else top-k plus k random."""
    size = flat_grad.size
    if exhaustive or size <= full_below:
        return np.arange(size)
    top = np.argsort(-np.abs(flat_grad), kind="stable")[:k]
    return np.unique(np.concatenate([top, rng.integers(0, size, size=min(k, size))]))


def gradient_check(
    params: ModelParams,
    x: np.ndarray,
    bit_mask: np.ndarray,
    gamma: float = 2.0,
    k: int = 3,
    h: float = 1e-4,
    dropout_rate: float = 0.0,
    seed: int = 0,
    exhaustive: bool = False,
    full_below: int = 128,
    floor: float = 1e-5,
) -> Dict[str, float]:
    """
    Compare analytic gradients with central finite differences.

    Tensors with at most full_below entries are checked entry by entry; larger
    ones perturb their k largest-gradient entries plus k random entries, or
    every entry when exhaustive is set. Relative error is
    |a - n| / max(|a|, |n|, floor). With dropout on, every evaluation replays
    the same dropout masks.

    Returns:
        Map tensor name -> worst relative error among its checked entries
    """
    _, dlogits, cache = _objective(params, x, bit_mask, gamma, dropout_rate, seed)
    analytic = backward(params, cache, dlogits)
    pick_rng = np.random.default_rng(seed + 1)
    worst = {}
    for name in params.names():
        flat_grad = analytic[name].ravel()
        errors = []
        for index in check_indices(flat_grad, k, pick_rng, exhaustive, full_below):
            losses = []
            for sign in (1.0, -1.0):
                tensors = dict(params.tensors)
                bumped = tensors[name].copy()
                bumped.ravel()[index] += sign * h
                tensors[name] = bumped
                losses.append(_objective(params.evolve(tensors), x, bit_mask, gamma, dropout_rate, seed)[0])
            numeric = (losses[0] - losses[1]) / (2.0 * h)
            a = flat_grad[index]
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
        worst[name] = float(max(errors))
    return worst


def gradcheck_schema(D: int) -> HomeSchema:
    """Tiny schemas for gradient checking: D=6 or D=12."""
    if D == 6:
        return build_schema(["B0"], ["N0"])
    if D == 12:
        return build_schema(["B0", "B1"], ["N0", "N1"])
    raise ValueError(f"gradient check supports D in (6, 12), got {D}")


# For testing this module independently
if __name__ == "__main__":
    schema = gradcheck_schema(6)
    rng = np.random.default_rng(0)
    x = (rng.random((3, SEQ_LEN, schema.D)) < 0.5).astype(np.float64)
    bit_mask = np.zeros((3, schema.D), dtype=bool)
    bit_mask[:, schema.sensor("N0").bits] = True
    params = random_params(schema, seed=0)
    worst = gradient_check(params, x, bit_mask)
    print(f"✓ Parameters for D={schema.D}: {count_parameters(schema.D)}")
    print(f"✓ Worst relative gradient error: {max(worst.values()):.2e}")
