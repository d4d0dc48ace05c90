"""Neural building blocks: linear layers, patch embedding, linear attention.

All blocks are pre-norm transformers with a feature-map linear attention
(elu(u)+1 on queries and keys) so cost stays linear in token count.  There
is no positional term inside any block; position enters once, at
:func:`patch_embed`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ContractError, DiffTensor, DimensionError

ATTN_DENOM_FLOOR = 1e-6
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"OWTW"
CHECKPOINT_VERSION = 1


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std).astype(dtype)


@dataclass
class LinearLayer:
    """Affine map on the last axis: x [t, in] -> x @ weight + bias."""

    weight: DiffTensor  # [in, out]
    bias: DiffTensor    # [out]

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> "LinearLayer":
        return cls(
            weight=DiffTensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True, dtype=dtype),
            bias=DiffTensor(np.zeros(d_out, dtype=dtype), requires_grad=True, dtype=dtype),
        )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return T.affine(x, self.weight, self.bias)

    def parameters(self, prefix: str) -> dict[str, DiffTensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class AttentionBlock:
    """Pre-norm block: linear attention + 4x GELU MLP, both residual.

    Per-head query/key/value/output projections are stored fused: head h
    owns columns [h*d_head, (h+1)*d_head) of the q/k/v weights and the
    matching rows of the output projection.
    """

    heads: int
    wq: LinearLayer
    wk: LinearLayer
    wv: LinearLayer
    wo: LinearLayer
    ln1_gain: DiffTensor
    ln1_bias: DiffTensor
    ln2_gain: DiffTensor
    ln2_bias: DiffTensor
    fc1: LinearLayer
    fc2: LinearLayer

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, heads: int, dtype=np.float32) -> "AttentionBlock":
        if dim % heads != 0:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")

        def ln_pair():
            return (DiffTensor(np.ones(dim, dtype=dtype), requires_grad=True, dtype=dtype),
                    DiffTensor(np.zeros(dim, dtype=dtype), requires_grad=True, dtype=dtype))

        g1, b1 = ln_pair()
        g2, b2 = ln_pair()
        return cls(
            heads=heads,
            wq=LinearLayer.create(rng, dim, dim, dtype),
            wk=LinearLayer.create(rng, dim, dim, dtype),
            wv=LinearLayer.create(rng, dim, dim, dtype),
            wo=LinearLayer.create(rng, dim, dim, dtype),
            ln1_gain=g1, ln1_bias=b1, ln2_gain=g2, ln2_bias=b2,
            fc1=LinearLayer.create(rng, dim, 4 * dim, dtype),
            fc2=LinearLayer.create(rng, 4 * dim, dim, dtype),
        )

    @property
    def dim(self) -> int:
        return self.wq.d_in

    def parameters(self, prefix: str) -> dict[str, DiffTensor]:
        params: dict[str, DiffTensor] = {}
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                            ("wo", self.wo), ("fc1", self.fc1), ("fc2", self.fc2)):
            params.update(layer.parameters(f"{prefix}.{name}"))
        params[f"{prefix}.ln1.gain"] = self.ln1_gain
        params[f"{prefix}.ln1.bias"] = self.ln1_bias
        params[f"{prefix}.ln2.gain"] = self.ln2_gain
        params[f"{prefix}.ln2.bias"] = self.ln2_bias
        return params


@lru_cache(maxsize=64)
def _ones_column(t: int, dtype_name: str) -> DiffTensor:
    return DiffTensor(np.ones((t, 1), dtype=np.dtype(dtype_name)))


def linear_attention(q: DiffTensor, k: DiffTensor, v: DiffTensor, heads: int) -> DiffTensor:
    """Feature-map attention: out_i = phi(q_i)^T sum_j phi(k_j) v_j^T over
    phi(q_i)^T sum_j phi(k_j), computed per head and re-concatenated."""
    t, dim = q.shape
    d_head = dim // heads
    qf = T.pointwise(q, "elu_plus_one")
    kf = T.pointwise(k, "elu_plus_one")
    ones = _ones_column(t, q.data.dtype.name)
    outs = []
    for h in range(heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = T.slice_cols(qf, lo, hi)
        kh = T.slice_cols(kf, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        kt = T.transpose(kh)
        summary = T.matmul(kt, vh)             # [d_head, d_head]
        norm = T.matmul(kt, ones)              # [d_head, 1]
        num = T.matmul(qh, summary)            # [t, d_head]
        den = T.clamp_min(T.matmul(qh, norm), ATTN_DENOM_FLOOR)
        outs.append(T.div(num, den))
    return T.concat_cols(outs) if len(outs) > 1 else outs[0]


def linear_attention_block(x: DiffTensor, blk: AttentionBlock) -> DiffTensor:
    if x.shape[0] == 0:
        raise ContractError("attention over zero tokens is undefined")
    h = T.layernorm(x, blk.ln1_gain, blk.ln1_bias)
    attn = blk.wo(linear_attention(blk.wq(h), blk.wk(h), blk.wv(h), blk.heads))
    x = T.add(x, attn)
    h2 = T.layernorm(x, blk.ln2_gain, blk.ln2_bias)
    mlp = blk.fc2(T.pointwise(blk.fc1(h2), "gelu"))
    return T.add(x, mlp)


@dataclass
class TransformerStack:
    """A nonempty sequence of attention blocks plus a final layernorm."""

    blocks: list[AttentionBlock]
    final_gain: DiffTensor
    final_bias: DiffTensor

    def __post_init__(self):
        if not self.blocks:
            raise ContractError("a transformer stack needs at least one block")

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, heads: int, depth: int,
               dtype=np.float32) -> "TransformerStack":
        if depth < 1:
            raise ContractError(f"stack depth must be >= 1, got {depth}")
        return cls(
            blocks=[AttentionBlock.create(rng, dim, heads, dtype) for _ in range(depth)],
            final_gain=DiffTensor(np.ones(dim, dtype=dtype), requires_grad=True, dtype=dtype),
            final_bias=DiffTensor(np.zeros(dim, dtype=dtype), requires_grad=True, dtype=dtype),
        )

    def parameters(self, prefix: str) -> dict[str, DiffTensor]:
        params: dict[str, DiffTensor] = {}
        for i, blk in enumerate(self.blocks):
            params.update(blk.parameters(f"{prefix}.block{i}"))
        params[f"{prefix}.norm.gain"] = self.final_gain
        params[f"{prefix}.norm.bias"] = self.final_bias
        return params


def encoder_stack(x: DiffTensor, stack: TransformerStack) -> DiffTensor:
    for blk in stack.blocks:
        x = linear_attention_block(x, blk)
    return T.layernorm(x, stack.final_gain, stack.final_bias)


# ---------------------------------------------------------------------------
# patch embedding


@dataclass(frozen=True)
class PatchGrid:
    """Static geometry of the token grid for an image."""

    height: int
    width: int
    patch: int
    channels: int = 1

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise DimensionError(
                f"patch {self.patch} does not divide image {self.height}x{self.width}")

    @property
    def h(self) -> int:
        return self.height // self.patch

    @property
    def w(self) -> int:
        return self.width // self.patch

    @property
    def tokens(self) -> int:
        return self.h * self.w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@lru_cache(maxsize=32)
def _patch_perm(height: int, width: int, patch: int, channels: int) -> np.ndarray:
    """Flat-index map from [H,W,C] pixels to [tokens, p*p*C] rows."""
    flat = np.arange(height * width * channels).reshape(height, width, channels)
    h, w = height // patch, width // patch
    blocks = flat.reshape(h, patch, w, patch, channels).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(h * w, patch * patch * channels)).reshape(-1)


@lru_cache(maxsize=32)
def _unpatch_perm(height: int, width: int, patch: int, channels: int) -> np.ndarray:
    perm = _patch_perm(height, width, patch, channels)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return inverse


def patchify(img: DiffTensor, grid: PatchGrid) -> DiffTensor:
    """[H, W, C] image -> [tokens, p*p*C] rows, patches in row-major order."""
    if img.shape != (grid.height, grid.width, grid.channels):
        raise DimensionError(f"image {img.shape} does not match grid "
                             f"({grid.height}, {grid.width}, {grid.channels})")
    perm = _patch_perm(grid.height, grid.width, grid.patch, grid.channels)
    return T.permute_flat(img, perm, (grid.tokens, grid.patch_dim))


def patch_embed(img: DiffTensor, grid: PatchGrid, proj: LinearLayer,
                pos: DiffTensor) -> DiffTensor:
    """Project flattened patches and add the positional table (no class token)."""
    if proj.d_in != grid.patch_dim:
        raise DimensionError(f"patch projection expects {grid.patch_dim} inputs, has {proj.d_in}")
    if pos.shape != (grid.tokens, proj.d_out):
        raise DimensionError(f"positional table {pos.shape} does not match "
                             f"({grid.tokens}, {proj.d_out})")
    return T.add(proj(patchify(img, grid)), pos)


def unpatchify(tokens: DiffTensor, grid: PatchGrid, proj: LinearLayer) -> DiffTensor:
    """Inverse spatial arrangement of patch_embed: tokens -> [H, W, C] image."""
    if tokens.shape[0] != grid.tokens:
        raise DimensionError(f"got {tokens.shape[0]} tokens, grid has {grid.tokens}")
    pixels = proj(tokens)
    if pixels.shape[1] != grid.patch_dim:
        raise DimensionError(f"output projection produced {pixels.shape[1]} values "
                             f"per token, grid patch needs {grid.patch_dim}")
    perm = _unpatch_perm(grid.height, grid.width, grid.patch, grid.channels)
    return T.permute_flat(pixels, perm, (grid.height, grid.width, grid.channels))


# ---------------------------------------------------------------------------
# checkpoint container (bit-exact across platforms, little-endian)


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""


def save_checkpoint(params: dict[str, DiffTensor], path) -> None:
    """Write a named-tensor container: magic, version, then per entry
    name(u16 len + utf-8), rank u8, extents u32..., float32 LE payload."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint at offset {offset}: {exc}") from None
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes at offset {offset}")
    return out


def load_params_into(params: dict[str, DiffTensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into existing parameter tensors, by name."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if loaded[name].shape != p.data.shape:
            raise DimensionError(
                f"checkpoint entry {name!r} has shape {loaded[name].shape}, model needs {p.data.shape}")
        p.data[...] = loaded[name].astype(p.data.dtype)
