"""Transformer building blocks: patch embedding, attention, MLP heads.

One `AttentionBlock` type serves both self- and cross-attention; the
distinction is whether the key/value sequence differs from the query
sequence.  All blocks are pre-norm residual and preserve the query
sequence shape.  Parameters are registered under dotted path strings so
checkpoints are flat `path -> (shape, values)` maps.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .tensor import (
    ConfigError,
    Rng,
    ShapeError,
    Tensor,
    affine,
    concat,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "votevit-checkpoint"


class LinearLayer:
    """Dense layer with Glorot-normal weight init and zero bias."""

    def __init__(self, rng: Rng, fan_in: int, fan_out: int):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        self.weight = Tensor(rng.normal((fan_in, fan_out)) * std, requires_grad=True)
        self.bias = Tensor([0.0] * fan_out, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = ""):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class PatchEmbed:
    """Linear patch projector with learned positional embeddings and a CLS token.

    Maps a [C, H, W] image to a [num_patches + 1, model_dim] sequence whose
    row 0 is the CLS token.
    """

    def __init__(self, rng: Rng, image_shape: tuple[int, int, int],
                 patch_size: int, model_dim: int):
        c, h, w = image_shape
        if h % patch_size or w % patch_size:
            raise ConfigError(f"image size {h}x{w} not divisible by patch size {patch_size}")
        self.image_shape = (c, h, w)
        self.patch_size = patch_size
        self.model_dim = model_dim
        self.grid = (h // patch_size, w // patch_size)
        self.num_patches = self.grid[0] * self.grid[1]
        self.proj = LinearLayer(rng, c * patch_size * patch_size, model_dim)
        self.pos = Tensor(rng.normal((self.num_patches, model_dim)) * 0.02,
                          requires_grad=True)
        self.cls = Tensor(rng.normal((1, model_dim)) * 0.02, requires_grad=True)

    def __call__(self, image: Tensor) -> Tensor:
        c, h, w = self.image_shape
        ps = self.patch_size
        gh, gw = self.grid
        if image.shape == (c, h, w):
            patches = reshape(image, (c, gh, ps, gw, ps))
            patches = transpose(patches, (1, 3, 0, 2, 4))
            patches = reshape(patches, (self.num_patches, c * ps * ps))
            rows = self.proj(patches) + self.pos
            return concat([self.cls, rows], axis=0)
        if image.ndim == 4 and image.shape[1:] == (c, h, w):
            b = image.shape[0]
            patches = reshape(image, (b, c, gh, ps, gw, ps))
            patches = transpose(patches, (0, 2, 4, 1, 3, 5))
            patches = reshape(patches, (b, self.num_patches, c * ps * ps))
            rows = self.proj(patches) + self.pos
            # suffix-broadcast add tiles the CLS row across the batch
            cls_rows = self.cls + Tensor(np.zeros((b, 1, self.model_dim)))
            return concat([cls_rows, rows], axis=1)
        raise ConfigError(f"expected image shape {(c, h, w)} or batched "
                          f"(b, {c}, {h}, {w}), got {image.shape}")

    def named_parameters(self, prefix: str = ""):
        out = self.proj.named_parameters(f"{prefix}.proj")
        out.append((f"{prefix}.pos", self.pos))
        out.append((f"{prefix}.cls", self.cls))
        return out


class AttentionBlock:
    """Pre-norm residual attention block with a GELU feed-forward stage.

    The same parameters serve self-attention (context == query) and
    cross-attention (context from the other stream).  `dropout_rate`
    applies to the attention output projection and the feed-forward
    hidden layer, only while training.
    """

    def __init__(self, rng: Rng, model_dim: int, num_heads: int,
                 ffn_dim: int, dropout_rate: float):
        if model_dim % num_heads:
            raise ConfigError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.dropout_rate = dropout_rate
        self.norm1_gain = Tensor([1.0] * model_dim, requires_grad=True)
        self.norm1_bias = Tensor([0.0] * model_dim, requires_grad=True)
        self.q = LinearLayer(rng, model_dim, model_dim)
        self.k = LinearLayer(rng, model_dim, model_dim)
        self.v = LinearLayer(rng, model_dim, model_dim)
        self.out = LinearLayer(rng, model_dim, model_dim)
        self.norm2_gain = Tensor([1.0] * model_dim, requires_grad=True)
        self.norm2_bias = Tensor([0.0] * model_dim, requires_grad=True)
        self.ffn1 = LinearLayer(rng, model_dim, ffn_dim)
        self.ffn2 = LinearLayer(rng, ffn_dim, model_dim)

    def named_parameters(self, prefix: str = ""):
        out = [(f"{prefix}.norm1_gain", self.norm1_gain),
               (f"{prefix}.norm1_bias", self.norm1_bias)]
        for name in ("q", "k", "v", "out"):
            out.extend(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        out.append((f"{prefix}.norm2_gain", self.norm2_gain))
        out.append((f"{prefix}.norm2_bias", self.norm2_bias))
        out.extend(self.ffn1.named_parameters(f"{prefix}.ffn1"))
        out.extend(self.ffn2.named_parameters(f"{prefix}.ffn2"))
        return out


def cross_attention(query_seq: Tensor, context_seq: Tensor, block: AttentionBlock,
                    rng: Rng, train: bool) -> tuple[Tensor, Tensor]:
    """Attend `query_seq` over `context_seq`; residual applies to the query side.

    Sequences are [T, d] or batched [b, T, d] (batch shapes must agree).
    Returns the transformed sequence (same shape as the query input) and
    the row-stochastic attention weights, [..., num_heads, Tq, Tk].
    """
    d = block.model_dim
    if query_seq.shape[-1] != d or context_seq.shape[-1] != d:
        raise ShapeError(f"sequences must have width {d}, got "
                         f"{query_seq.shape} / {context_seq.shape}")
    if query_seq.ndim != context_seq.ndim \
            or query_seq.shape[:-2] != context_seq.shape[:-2]:
        raise ShapeError(f"query/context shapes disagree: "
                         f"{query_seq.shape} / {context_seq.shape}")
    tq = query_seq.shape[-2]
    tk = context_seq.shape[-2]
    nh, hd = block.num_heads, block.head_dim
    if query_seq.ndim == 2:
        lead: tuple[int, ...] = ()
        to_heads = (1, 0, 2)       # [nh, T, hd]
        k_perm = (1, 2, 0)         # [nh, hd, T]
    elif query_seq.ndim == 3:
        lead = (query_seq.shape[0],)
        to_heads = (0, 2, 1, 3)
        k_perm = (0, 2, 3, 1)
    else:
        raise ShapeError(f"sequences must be rank 2 or 3, got {query_seq.shape}")

    qn = layer_norm(query_seq, block.norm1_gain, block.norm1_bias, LAYER_NORM_EPS)
    cn = qn if context_seq is query_seq else layer_norm(
        context_seq, block.norm1_gain, block.norm1_bias, LAYER_NORM_EPS)

    q = transpose(reshape(block.q(qn), lead + (tq, nh, hd)), to_heads) \
        * (1.0 / math.sqrt(hd))
    k = transpose(reshape(block.k(cn), lead + (tk, nh, hd)), k_perm)
    v = transpose(reshape(block.v(cn), lead + (tk, nh, hd)), to_heads)

    weights = softmax(matmul(q, k), axis=-1)            # [..., nh, tq, tk]
    ctx = matmul(weights, v)                            # [..., nh, tq, hd]
    ctx = reshape(transpose(ctx, to_heads), lead + (tq, d))
    attended = dropout(block.out(ctx), block.dropout_rate, rng, train)
    x = query_seq + attended

    fn = layer_norm(x, block.norm2_gain, block.norm2_bias, LAYER_NORM_EPS)
    hidden = dropout(gelu(block.ffn1(fn)), block.dropout_rate, rng, train)
    return x + block.ffn2(hidden), weights


def self_attention(x: Tensor, block: AttentionBlock, rng: Rng,
                   train: bool) -> tuple[Tensor, Tensor]:
    """Cross-attention degenerate case: the sequence attends to itself."""
    return cross_attention(x, x, block, rng, train)


class MlpHead:
    """Stack of linear layers with GELU and dropout between them, plus a
    linear shortcut from input to output.

    `dims` runs input -> hidden... -> output; the final layer is purely
    linear.  Dropout is applied to the input and after each hidden
    activation whenever the caller asks for it (the voting head keeps it
    active at inference).  The shortcut matters for optimisation: its
    gradient points straight along the input-output covariance, so the
    head picks up weak linear structure that the randomly-initialised
    hidden path would otherwise shrink away as noise.
    """

    def __init__(self, rng: Rng, dims: list[int], dropout_rate: float):
        if len(dims) < 2:
            raise ConfigError("an MLP head needs at least input and output dims")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.dims = list(dims)
        self.dropout_rate = dropout_rate
        self.layers = [LinearLayer(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.skip = (LinearLayer(rng, dims[0], dims[-1])
                     if len(dims) > 2 else None)

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}.layer{i}"))
        if self.skip is not None:
            out.extend(self.skip.named_parameters(f"{prefix}.skip"))
        return out


def mlp_head_forward(z: Tensor, head: MlpHead, rng: Rng,
                     dropout_active: bool) -> Tensor:
    """Run the head on a vector [d] or a batch of vectors [b, d].

    Input dropout feeds both the hidden path and the shortcut, so the
    voting head's inference-time dropout perturbs the output even when
    the shortcut carries most of the signal.
    """
    if z.shape[-1] != head.dims[0]:
        raise ShapeError(f"head expects input width {head.dims[0]}, got {z.shape}")
    h = dropout(z, head.dropout_rate, rng, dropout_active)
    shortcut = head.skip(h) if head.skip is not None else None
    for layer in head.layers[:-1]:
        h = dropout(gelu(layer(h)), head.dropout_rate, rng, dropout_active)
    out = head.layers[-1](h)
    if shortcut is not None:
        out = out + shortcut
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, named_params: dict[str, Tensor],
                    extra: dict | None = None) -> None:
    """Write a flat JSON checkpoint mapping parameter paths to shape + values.

    Values round-trip bit-exactly (shortest-repr float serialization).
    `extra` carries non-parameter payload such as the model config.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.values.tolist()}
            for name, t in named_params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[dict[str, tuple[tuple[int, ...], list[float]]], dict]:
    """Read a checkpoint; returns ({path: (shape, flat values)}, extra)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a recognized checkpoint file")
    params = {
        name: (tuple(entry["shape"]), entry["values"])
        for name, entry in payload["params"].items()
    }
    return params, payload.get("extra", {})


def restore_parameters(named_params: dict[str, Tensor],
                       stored: dict[str, tuple[tuple[int, ...], list[float]]]) -> None:
    """Copy stored values into live parameters, verifying names and shapes."""
    missing = set(named_params) - set(stored)
    surplus = set(stored) - set(named_params)
    if missing or surplus:
        raise ConfigError(f"checkpoint/model mismatch: missing={sorted(missing)[:3]} "
                          f"surplus={sorted(surplus)[:3]}")
    for name, tensor in named_params.items():
        shape, values = stored[name]
        if shape != tensor.shape:
            raise ConfigError(f"checkpoint shape {shape} != model shape "
                              f"{tensor.shape} for '{name}'")
        tensor.data = np.asarray(values, dtype=np.float64).reshape(shape)
