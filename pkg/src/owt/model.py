"""The organ-wise tokenization pipeline.

An image is encoded to a holistic token grid; the organ collector pools it
into per-group tokens (token-wise attention over the spatial axis); a
retained subset of groups is re-encoded; the adaptive restorer attends the
variable-length retained tokens back onto the fixed spatial grid; the
decoder reconstructs pixels.  A holistic path (encode -> decode, sharing
the same parameters) doubles as the pretraining route and as the baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    LinearLayer,
    PatchGrid,
    TransformerStack,
    encoder_stack,
    patch_embed,
    trunc_normal,
    unpatchify,
)
from .tensor import ContractError, DiffTensor, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; serialized beside every checkpoint."""

    patch: int = 4
    dim: int = 64
    heads: int = 4
    enc_blocks: int = 2
    tge_blocks: int = 2
    dec_blocks: int = 2
    groups: int = 3
    tokens_per_group: int | None = 4
    group_token_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.tokens_per_group is None) == (self.group_token_counts is None):
            raise ValueError("set exactly one of tokens_per_group / group_token_counts")
        if self.group_token_counts is not None:
            if len(self.group_token_counts) != self.groups + 1:
                raise ValueError(
                    f"group_token_counts has {len(self.group_token_counts)} entries, "
                    f"need {self.groups + 1}")
            if any(c < 1 for c in self.group_token_counts):
                raise ValueError("every group needs at least one token")

    @property
    def token_counts(self) -> tuple[int, ...]:
        if self.group_token_counts is not None:
            return tuple(self.group_token_counts)
        return tuple([self.tokens_per_group] * (self.groups + 1))

    @property
    def total_group_tokens(self) -> int:
        return sum(self.token_counts)

    def to_json(self) -> str:
        doc = {
            "patch": self.patch,
            "dim": self.dim,
            "enc_blocks": self.enc_blocks,
            "tge_blocks": self.tge_blocks,
            "dec_blocks": self.dec_blocks,
            "heads": self.heads,
            "groups": self.groups,
        }
        if self.group_token_counts is not None:
            doc["group_token_counts"] = list(self.group_token_counts)
        else:
            doc["tokens_per_group"] = self.tokens_per_group
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        doc = json.loads(text)
        counts = doc.pop("group_token_counts", None)
        per_group = doc.pop("tokens_per_group", None)
        return cls(
            patch=doc["patch"], dim=doc["dim"], heads=doc["heads"],
            enc_blocks=doc["enc_blocks"], tge_blocks=doc["tge_blocks"],
            dec_blocks=doc["dec_blocks"], groups=doc["groups"],
            tokens_per_group=per_group,
            group_token_counts=tuple(counts) if counts is not None else None,
        )


@dataclass
class HolisticEmbedding:
    """The encoder's full [tokens x dim] matrix for one image."""

    tokens: DiffTensor
    grid: PatchGrid


@dataclass
class TokenGroupSet:
    """Collected per-group tokens; group k owns one contiguous row span."""

    tokens: DiffTensor           # [total_group_tokens, dim]
    groups: int                  # semantic groups g (background is group 0)
    token_counts: tuple[int, ...]  # per group, length groups+1

    def __post_init__(self):
        if self.tokens.shape[0] != sum(self.token_counts):
            raise DimensionError(
                f"{self.tokens.shape[0]} tokens vs counts {self.token_counts}")

    @property
    def group_of(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.token_counts)), self.token_counts)

    def span(self, group: int) -> tuple[int, int]:
        starts = np.concatenate([[0], np.cumsum(self.token_counts)])
        return int(starts[group]), int(starts[group + 1])


@dataclass(frozen=True)
class RetainedSelection:
    """An ordered choice of distinct group indices to keep."""

    retained_groups: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.retained_groups)) != len(self.retained_groups):
            raise ContractError(f"duplicate groups in selection {self.retained_groups}")

    @property
    def count(self) -> int:
        return len(self.retained_groups)


@dataclass
class OwtModel:
    config: ModelConfig
    grid: PatchGrid
    patch_proj: LinearLayer
    pos_table: DiffTensor
    encoder: TransformerStack
    collect_score: LinearLayer   # dim -> total group tokens, per holistic token
    collect_value: LinearLayer   # dim -> dim
    group_encoder: TransformerStack
    restore_score: LinearLayer   # dim -> spatial tokens, per group token
    restore_value: LinearLayer   # dim -> dim
    decoder: TransformerStack
    out_proj: LinearLayer        # dim -> patch pixels
    _params: dict[str, DiffTensor] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, config: ModelConfig, height: int, width: int, channels: int = 1,
               seed: int = 0, dtype=np.float32) -> "OwtModel":
        grid = PatchGrid(height, width, config.patch, channels)
        rng = np.random.default_rng(seed)
        d = config.dim
        model = cls(
            config=config,
            grid=grid,
            patch_proj=LinearLayer.create(rng, grid.patch_dim, d, dtype),
            pos_table=DiffTensor(trunc_normal(rng, (grid.tokens, d), dtype=dtype),
                                 requires_grad=True, dtype=dtype),
            encoder=TransformerStack.create(rng, d, config.heads, config.enc_blocks, dtype),
            collect_score=LinearLayer.create(rng, d, config.total_group_tokens, dtype),
            collect_value=LinearLayer.create(rng, d, d, dtype),
            group_encoder=TransformerStack.create(rng, d, config.heads, config.tge_blocks, dtype),
            restore_score=LinearLayer.create(rng, d, grid.tokens, dtype),
            restore_value=LinearLayer.create(rng, d, d, dtype),
            decoder=TransformerStack.create(rng, d, config.heads, config.dec_blocks, dtype),
            out_proj=LinearLayer.create(rng, d, grid.patch_dim, dtype),
        )
        model._params = model._collect_params()
        return model

    def _collect_params(self) -> dict[str, DiffTensor]:
        params: dict[str, DiffTensor] = {}
        params.update(self.patch_proj.parameters("patch_proj"))
        params["pos_table"] = self.pos_table
        params.update(self.encoder.parameters("encoder"))
        params.update(self.collect_score.parameters("collector.score"))
        params.update(self.collect_value.parameters("collector.value"))
        params.update(self.group_encoder.parameters("group_encoder"))
        params.update(self.restore_score.parameters("restorer.score"))
        params.update(self.restore_value.parameters("restorer.value"))
        params.update(self.decoder.parameters("decoder"))
        params.update(self.out_proj.parameters("out_proj"))
        if len(params) != len(set(params)):
            raise ContractError("duplicate parameter names")
        return params

    def named_parameters(self) -> dict[str, DiffTensor]:
        return dict(self._params)

    def zero_grads(self) -> None:
        T.zero_grads(self._params)


# ---------------------------------------------------------------------------
# pipeline stages


def encode(img: DiffTensor, model: OwtModel) -> HolisticEmbedding:
    tokens = patch_embed(img, model.grid, model.patch_proj, model.pos_table)
    return HolisticEmbedding(encoder_stack(tokens, model.encoder), model.grid)


def organ_collect(embedding: HolisticEmbedding, model: OwtModel) -> tuple[TokenGroupSet, DiffTensor]:
    """Pool holistic tokens into group tokens via token-wise attention.

    Returns the group set and the attention matrix (one spatial
    distribution per collected token), which is kept as a first-class
    output for interpretability export.
    """
    scores = model.collect_score(embedding.tokens)          # [spatial, n_group_tokens]
    attn = T.softmax_rows(T.transpose(scores))              # [n_group_tokens, spatial]
    values = model.collect_value(embedding.tokens)          # [spatial, dim]
    collected = T.matmul(attn, values)                      # [n_group_tokens, dim]
    tgs = TokenGroupSet(collected, model.config.groups, model.config.token_counts)
    return tgs, attn


def gather_retained(token_set: TokenGroupSet, sel: RetainedSelection) -> DiffTensor:
    """Concatenate the selected groups' token spans, in selection order."""
    if sel.count < 1:
        raise ContractError("empty selection cannot be gathered")
    n_groups = len(token_set.token_counts)
    rows: list[int] = []
    for group in sel.retained_groups:
        if not 0 <= group < n_groups:
            raise ContractError(f"group {group} out of range 0..{n_groups - 1}")
        lo, hi = token_set.span(group)
        rows.extend(range(lo, hi))
    return T.take_rows(token_set.tokens, np.asarray(rows))


def token_group_encode(retained: DiffTensor, model: OwtModel) -> DiffTensor:
    if retained.shape[0] < 1:
        raise ContractError("token group encoder needs at least one token")
    return encoder_stack(retained, model.group_encoder)


def aher_restore(retained: DiffTensor, model: OwtModel) -> HolisticEmbedding:
    """Attend a variable number of retained tokens back onto the fixed grid.

    Each spatial row of the attention matrix is a distribution over the
    retained tokens, so the output shape is independent of how many groups
    were kept.
    """
    if retained.shape[0] < 1:
        raise ContractError("restorer needs at least one retained token")
    scores = model.restore_score(retained)                  # [retained, spatial]
    attn = T.softmax_rows(T.transpose(scores))              # [spatial, retained]
    restored = T.matmul(attn, model.restore_value(retained))
    return HolisticEmbedding(restored, model.grid)


def decode(embedding: HolisticEmbedding, model: OwtModel) -> DiffTensor:
    tokens = embedding.tokens
    if tokens.shape != (model.grid.tokens, model.config.dim):
        raise DimensionError(f"decoder input {tokens.shape} does not match grid "
                             f"({model.grid.tokens}, {model.config.dim})")
    tokens = T.add(tokens, model.pos_table)
    tokens = encoder_stack(tokens, model.decoder)
    return unpatchify(tokens, model.grid, model.out_proj)


def forward_owt(img: DiffTensor, sel: RetainedSelection,
                model: OwtModel) -> tuple[DiffTensor, TokenGroupSet, DiffTensor]:
    """Full pipeline; returns (reconstruction, group tokens, collect attention)."""
    embedding = encode(img, model)
    token_set, attn = organ_collect(embedding, model)
    retained = gather_retained(token_set, sel)
    encoded = token_group_encode(retained, model)
    restored = aher_restore(encoded, model)
    return decode(restored, model), token_set, attn


def forward_holistic(img: DiffTensor, model: OwtModel) -> DiffTensor:
    """Encode -> decode directly, bypassing the group pipeline."""
    return decode(encode(img, model), model)
