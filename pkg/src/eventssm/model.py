"""Event-by-event classifier built from stacked gated SSM blocks.

Data flow for one block::

    u -> layernorm -> SSM -> gelu -> sigmoid gate -> dropout -> + u -> pool

Every event is integrated into the block's SSM state; pooling only thins the
sequence that is forwarded to the next block. Padding positions carry zero
inputs and zero gaps, so they leave the state untouched.

Backpropagation is written out by hand; the SSM part delegates to
:func:`eventssm.ssm.ssm_backward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import ssm as kernel
from .events import Batch
from .ssm import DiscretizationMode, SSMParams

GATES = ("output", "activation")
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class ModelConfig:
    num_channels: int = 16
    num_classes: int = 2
    num_layers: int = 6
    state_size: int = 64
    width: int = 64
    pooling: Sequence[int] | int = 1
    width_mult: Sequence[int] | int = 1
    mode: str = "async"
    dropout: float = 0.1
    # "output": y * sigmoid(W gelu(y));  "activation": gelu(y) * sigmoid(W gelu(y))
    gate: str = "output"
    norm_eps: float = 1e-5
    lambda_re_range: Sequence[float] = (0.1, 1.0)
    delta_range: Sequence[float] = (10.0, 1e4)
    chunk_size: int = kernel.DEFAULT_CHUNK

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        for name in ("pooling", "width_mult"):
            value = getattr(self, name)
            value = (value,) * self.num_layers if isinstance(value, int) else tuple(int(v) for v in value)
            if len(value) != self.num_layers:
                raise ValueError(f"{name} needs {self.num_layers} entries, got {len(value)}")
            if min(value) < 1:
                raise ValueError(f"{name} entries must be >= 1")
            setattr(self, name, value)
        self.mode = DiscretizationMode.parse(self.mode).value
        if self.gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}, got {self.gate!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if min(self.state_size, self.width, self.num_channels) < 1 or self.num_classes < 2:
            raise ValueError("sizes must be positive and num_classes >= 2")
        self.lambda_re_range = tuple(float(v) for v in self.lambda_re_range)
        self.delta_range = tuple(float(v) for v in self.delta_range)

    @property
    def layer_widths(self) -> list[int]:
        widths = [self.width]
        for q in self.width_mult:
            widths.append(widths[-1] * q)
        return widths

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


@dataclass
class LayerWeights:
    ssm: SSMParams
    norm_scale: np.ndarray  # (W,)
    norm_bias: np.ndarray  # (W,)
    gate_W: np.ndarray  # (W, W)
    proj_W: Optional[np.ndarray] = None  # (W*q, W) when the width grows

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.ssm.{k}": v for k, v in self.ssm.items()}
        out[f"{prefix}.norm.scale"] = self.norm_scale
        out[f"{prefix}.norm.bias"] = self.norm_bias
        out[f"{prefix}.gate.W"] = self.gate_W
        if self.proj_W is not None:
            out[f"{prefix}.proj.W"] = self.proj_W
        return out


@dataclass
class ModelWeights:
    embedding: np.ndarray  # (J, N)
    layers: list[LayerWeights]
    readout_W: np.ndarray  # (W_L, K)
    readout_b: np.ndarray  # (K,)

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view (arrays are shared, not copied)."""
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layers.{i}"))
        out["readout.W"] = self.readout_W
        out["readout.b"] = self.readout_b
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray], num_layers: int) -> ModelWeights:
        try:
            layers = []
            for i in range(num_layers):
                pre = f"layers.{i}"
                ssm = SSMParams(**{f.name: tensors[f"{pre}.ssm.{f.name}"] for f in fields(SSMParams)})
                layers.append(
                    LayerWeights(
                        ssm, tensors[f"{pre}.norm.scale"], tensors[f"{pre}.norm.bias"],
                        tensors[f"{pre}.gate.W"], tensors.get(f"{pre}.proj.W"),
                    )
                )
            return cls(tensors["embedding"], layers, tensors["readout.W"], tensors["readout.b"])
        except KeyError as exc:
            raise ValueError(f"missing weight tensor {exc.args[0]}") from None

    def astype(self, dtype) -> ModelWeights:
        named = {k: v.astype(dtype) for k, v in self.named_tensors().items()}
        return ModelWeights.from_named(named, len(self.layers))

    def copy(self) -> ModelWeights:
        named = {k: v.copy() for k, v in self.named_tensors().items()}
        return ModelWeights.from_named(named, len(self.layers))

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype


def check_weights(w: ModelWeights, cfg: ModelConfig) -> None:
    """Raise ``ValueError`` if ``w`` does not fit ``cfg``."""
    if len(w.layers) != cfg.num_layers:
        raise ValueError(f"weights have {len(w.layers)} layers, config says {cfg.num_layers}")
    if w.embedding.shape != (cfg.num_channels, cfg.width):
        raise ValueError(
            f"embedding shape {w.embedding.shape} != ({cfg.num_channels}, {cfg.width})"
        )
    widths = cfg.layer_widths
    for i, (layer, q) in enumerate(zip(w.layers, cfg.width_mult)):
        W = widths[i]
        if layer.ssm.width != W or layer.ssm.state_size != cfg.state_size:
            raise ValueError(f"layer {i}: SSM shape does not match config")
        if layer.gate_W.shape != (W, W) or layer.norm_scale.shape != (W,):
            raise ValueError(f"layer {i}: gate/norm shape does not match width {W}")
        if (q > 1) != (layer.proj_W is not None):
            raise ValueError(f"layer {i}: projection presence does not match width_mult {q}")
    if w.readout_W.shape != (widths[-1], cfg.num_classes):
        raise ValueError(f"readout shape {w.readout_W.shape} != ({widths[-1]}, {cfg.num_classes})")


def init_weights(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelWeights:
    widths = cfg.layer_widths
    layers = []
    for i in range(cfg.num_layers):
        W, q = widths[i], cfg.width_mult[i]
        ssm = kernel.init_ssm_params(
            cfg.state_size, W, rng, cfg.lambda_re_range, cfg.delta_range, np.float64
        )
        gate_W = rng.normal(0.0, 1.0 / math.sqrt(W), (W, W))
        proj_W = rng.normal(0.0, 1.0 / math.sqrt(W), (W * q, W)) if q > 1 else None
        layers.append(LayerWeights(ssm, np.ones(W), np.zeros(W), gate_W, proj_W))
    w = ModelWeights(
        embedding=rng.normal(0.0, 1.0, (cfg.num_channels, cfg.width)),
        layers=layers,
        readout_W=rng.normal(0.0, 1.0 / math.sqrt(widths[-1]), (widths[-1], cfg.num_classes)),
        readout_b=np.zeros(cfg.num_classes),
    )
    return w.astype(dtype)


def count_parameters(cfg: ModelConfig, include_embedding: bool = False) -> int:
    """Analytic parameter count (real scalars) for ``cfg``."""
    H = cfg.state_size
    total = cfg.num_channels * cfg.width if include_embedding else 0
    widths = cfg.layer_widths
    for i, q in enumerate(cfg.width_mult):
        W = widths[i]
        total += 3 * H + 4 * H * W + W  # phi, theta, log_delta, B, C, D
        total += 2 * W + W * W  # norm, gate
        if q > 1:
            total += W * q * W
    return total + widths[-1] * cfg.num_classes + cfg.num_classes


# --------------------------------------------------------------------------
# Elementwise pieces
# --------------------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_norm(x, scale, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * scale + bias, (xhat, inv)


def layer_norm_backward(dout, scale, cache):
    xhat, inv = cache
    n = xhat.shape[-1]
    flat = lambda a: a.reshape(-1, n)
    d_scale = (flat(dout) * flat(xhat)).sum(axis=0)
    d_bias = flat(dout).sum(axis=0)
    dxhat = dout * scale
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, d_scale, d_bias


def embed_events(channels: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Look up one row of ``E`` per event."""
    channels = np.asarray(channels)
    if channels.size and (channels.min() < 0 or channels.max() >= E.shape[0]):
        raise IndexError(f"channel index outside [0, {E.shape[0]})")
    return E[channels]


# --------------------------------------------------------------------------
# Event pooling
# --------------------------------------------------------------------------


def pool_indices(mask: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Index of the last valid event in each group of ``p`` and the new mask."""
    lengths = mask.sum(axis=-1)
    groups = -(-mask.shape[-1] // p)
    starts = np.arange(groups) * p
    mask_out = starts < lengths[..., None]
    idx = np.minimum(starts + p - 1, lengths[..., None] - 1)
    return np.where(mask_out, idx, 0), mask_out


def pool_deltas(deltas: np.ndarray, p: int) -> np.ndarray:
    """Gap between consecutive pooled events: the sum of each group's gaps."""
    m = deltas.shape[-1]
    groups = -(-m // p)
    padded = np.zeros(deltas.shape[:-1] + (groups * p,), deltas.dtype)
    padded[..., :m] = deltas
    return padded.reshape(deltas.shape[:-1] + (groups, p)).sum(axis=-1)


def event_pool(seq, mask, p: int, proj_W: np.ndarray | None = None):
    """Keep the last valid element of each group of ``p`` events.

    Args:
        seq: ``(..., M, W)`` features, already integrated by the SSM.
        mask: ``(..., M)`` prefix-valid mask.
        p: pooling factor.
        proj_W: optional ``(W*q, W)`` width expansion.

    Returns:
        ``(pooled, mask_out)`` with ``ceil(M / p)`` positions.
    """
    if p < 1:
        raise ValueError("pooling factor must be >= 1")
    idx, mask_out = pool_indices(mask, p)
    pooled = np.take_along_axis(seq, idx[..., None], axis=-2) * mask_out[..., None]
    if proj_W is not None:
        pooled = pooled @ proj_W.T
    return pooled, mask_out


# --------------------------------------------------------------------------
# Block
# --------------------------------------------------------------------------


@dataclass
class BlockCache:
    u: np.ndarray
    mask: np.ndarray
    norm: tuple
    ssm: kernel.SSMCache
    y: np.ndarray
    v: np.ndarray
    g: np.ndarray
    keep: Optional[np.ndarray]
    pool_idx: np.ndarray
    mask_out: np.ndarray
    pooled: np.ndarray


def s5_block_forward(
    w: LayerWeights,
    u: np.ndarray,
    deltas: np.ndarray,
    mask: np.ndarray,
    *,
    mode="async",
    pool: int = 1,
    gate: str = "output",
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    eps: float = 1e-5,
    chunk_size: int = kernel.DEFAULT_CHUNK,
    return_cache: bool = False,
):
    """One gated SSM block followed by event pooling.

    ``u`` is ``(B, M, W)`` with zero rows at padding, ``deltas`` and ``mask``
    are ``(B, M)``. Dropout is active only when ``rng`` is given.

    Returns ``(z, deltas_out, mask_out)`` and optionally a :class:`BlockCache`.
    """
    if u.ndim != 3 or u.shape[:2] != mask.shape or deltas.shape != mask.shape:
        raise ValueError(f"shape mismatch: u {u.shape}, deltas {deltas.shape}, mask {mask.shape}")
    m = mask[..., None].astype(u.dtype)
    normed, norm_cache = layer_norm(u, w.norm_scale, w.norm_bias, eps)
    h = normed * m
    _, y, ssm_cache = kernel.ssm_forward_scan(w.ssm, mode, h, deltas, True, chunk_size)
    v = gelu(y)
    g = sigmoid(v @ w.gate_W.T)
    z = (y if gate == "output" else v) * g
    keep = None
    if rng is not None and dropout > 0.0:
        keep = (rng.random(z.shape) >= dropout).astype(u.dtype) / (1.0 - dropout)
        z = z * keep
    res = (u + z) * m
    pool_idx, mask_out = pool_indices(mask, pool)
    pooled = np.take_along_axis(res, pool_idx[..., None], axis=-2) * mask_out[..., None]
    out = pooled @ w.proj_W.T if w.proj_W is not None else pooled
    deltas_out = pool_deltas(deltas, pool) if pool > 1 else deltas
    if not return_cache:
        return out, deltas_out, mask_out
    cache = BlockCache(u, mask, norm_cache, ssm_cache, y, v, g, keep, pool_idx, mask_out, pooled)
    return out, deltas_out, mask_out, cache


def s5_block_backward(w: LayerWeights, cache: BlockCache, d_out: np.ndarray, gate: str = "output"):
    """Gradients of a block; returns ``(d_u, {tensor suffix: grad})``."""
    grads: dict[str, np.ndarray] = {}
    d_pooled = d_out
    if w.proj_W is not None:
        flat_d = d_out.reshape(-1, d_out.shape[-1])
        grads["proj.W"] = flat_d.T @ cache.pooled.reshape(-1, cache.pooled.shape[-1])
        d_pooled = d_out @ w.proj_W
    d_pooled = d_pooled * cache.mask_out[..., None]
    bsz = d_pooled.shape[0]
    d_res = np.zeros_like(cache.u)
    rows = np.broadcast_to(np.arange(bsz)[:, None], cache.pool_idx.shape)
    np.add.at(d_res, (rows, cache.pool_idx), d_pooled)
    d_res *= cache.mask[..., None]

    d_u = d_res.copy()
    d_z = d_res if cache.keep is None else d_res * cache.keep
    y, v, g = cache.y, cache.v, cache.g
    if gate == "output":
        d_y = d_z * g
        d_g = d_z * y
        d_v = np.zeros_like(v)
    else:
        d_v = d_z * g
        d_g = d_z * v
        d_y = np.zeros_like(y)
    d_pre = d_g * g * (1.0 - g)
    grads["gate.W"] = d_pre.reshape(-1, d_pre.shape[-1]).T @ v.reshape(-1, v.shape[-1])
    d_v = d_v + d_pre @ w.gate_W
    d_y = d_y + d_v * gelu_grad(y)

    sg = kernel.ssm_backward(w.ssm, cache.ssm, d_y)
    for name, value in sg.params().items():
        grads[f"ssm.{name}"] = value
    d_h = sg.u * cache.mask[..., None]
    d_x, grads["norm.scale"], grads["norm.bias"] = layer_norm_backward(d_h, w.norm_scale, cache.norm)
    return d_u + d_x, grads


# --------------------------------------------------------------------------
# Full model
# --------------------------------------------------------------------------


@dataclass
class ModelCache:
    channels: np.ndarray
    mask: np.ndarray
    blocks: list[BlockCache] = field(default_factory=list)
    final: np.ndarray | None = None
    final_mask: np.ndarray | None = None
    features: np.ndarray | None = None
    counts: np.ndarray | None = None


def model_forward(
    w: ModelWeights,
    batch: Batch,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    return_cache: bool = False,
):
    """Logits ``(B, K)`` for a padded batch.

    In training mode dropout draws from ``rng``; evaluation is deterministic.
    """
    check_weights(w, cfg)
    dtype = w.dtype
    mask = np.asarray(batch.mask, bool)
    deltas = np.asarray(batch.deltas).astype(dtype)
    channels = np.where(mask, batch.channels, 0)
    m0 = mask[..., None].astype(dtype)
    h = embed_events(channels, w.embedding) * m0
    cache = ModelCache(channels, mask)
    drop_rng = rng if (train and cfg.dropout > 0.0) else None
    for i, layer in enumerate(w.layers):
        h, deltas, mask, bc = s5_block_forward(
            layer, h, deltas, mask,
            mode=cfg.mode, pool=cfg.pooling[i], gate=cfg.gate, dropout=cfg.dropout,
            rng=drop_rng, eps=cfg.norm_eps, chunk_size=cfg.chunk_size, return_cache=True,
        )
        if return_cache:
            cache.blocks.append(bc)
    counts = mask.sum(axis=-1, keepdims=True).astype(dtype)
    features = (h * mask[..., None]).sum(axis=1) / np.maximum(counts, 1.0)
    logits = features @ w.readout_W + w.readout_b
    if not return_cache:
        return logits
    cache.final, cache.final_mask, cache.features, cache.counts = h, mask, features, counts
    return logits, cache


def model_backward(w: ModelWeights, cfg: ModelConfig, cache: ModelCache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every tensor in ``w.named_tensors()``."""
    if not cache.blocks:
        raise ValueError("forward cache is empty; call model_forward(..., return_cache=True)")
    grads: dict[str, np.ndarray] = {}
    grads["readout.W"] = cache.features.T @ d_logits
    grads["readout.b"] = d_logits.sum(axis=0)
    d_feat = d_logits @ w.readout_W.T
    d_h = (d_feat / np.maximum(cache.counts, 1.0))[:, None, :] * cache.final_mask[..., None]
    for i in range(len(w.layers) - 1, -1, -1):
        d_h, layer_grads = s5_block_backward(w.layers[i], cache.blocks[i], d_h, cfg.gate)
        for name, value in layer_grads.items():
            grads[f"layers.{i}.{name}"] = value
    d_h = d_h * cache.mask[..., None]
    d_E = np.zeros_like(w.embedding)
    np.add.at(d_E, cache.channels[cache.mask], d_h[cache.mask])
    grads["embedding"] = d_E
    return {name: grads[name] for name in w.named_tensors()}
