"""Object-background distinguishing attention.

A support sequence mixes per-class feature slots with background
placeholders. On the key side every placeholder is realized as a shared
learnable background token (deliberately *not* passed through the key
projection); on the value side it is a fixed zero vector, so attention mass
spent on the background contributes nothing to the mixed output and the
token is trained purely through the similarity path.

Two branches share the machinery: the support branch lets class features
attend over the sequence itself (self-interaction), the query branch lets
image patch features attend over the sequence and then fuses the result
back with the original patches through Conv1D + FFN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ShapeError
from .tensor import (FfnParams, Tensor, concat_channels, concat_rows, ffn_apply,
                     matmul, pointwise_conv1d, reshape, slice_cols, slice_rows,
                     softmax_rows, take_rows, transpose)


@dataclass
class BackgroundToken:
    """Learnable d-vector standing in for "not any target class"."""

    vector: Tensor

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ShapeError(f"background token must be a vector, got {self.vector.shape}")

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class ClassSlot:
    class_id: int
    feature: Tensor  # shape (d,)


class BackgroundPlaceholder:
    """Marker slot holding no class."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "[bg]"


BG = BackgroundPlaceholder()
Slot = Union[ClassSlot, BackgroundPlaceholder]


@dataclass
class SupportSequence:
    """Ordered support slots: class features plus background placeholders."""

    slots: list[Slot]

    def __post_init__(self):
        ids = self.class_ids
        if len(set(ids)) != len(ids):
            raise ShapeError(f"duplicate class ids in support sequence: {ids}")
        dims = {s.feature.shape for s in self.slots if isinstance(s, ClassSlot)}
        if len(dims) > 1:
            raise ShapeError(f"inconsistent class feature shapes: {dims}")

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def class_count(self) -> int:
        return sum(1 for s in self.slots if isinstance(s, ClassSlot))

    @property
    def class_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if isinstance(s, ClassSlot)]

    @property
    def placeholder_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if not isinstance(s, ClassSlot)]

    @property
    def class_ids(self) -> list[int]:
        return [s.class_id for s in self.slots if isinstance(s, ClassSlot)]

    def position_of_class(self, class_id: int) -> int:
        for i, s in enumerate(self.slots):
            if isinstance(s, ClassSlot) and s.class_id == class_id:
                return i
        raise KeyError(f"class id {class_id} has no slot in this sequence")

    def class_feature_matrix(self) -> Tensor:
        """Class slot features stacked into a C x d tensor (graph-recorded)."""
        rows = [reshape(s.feature, (1, s.feature.shape[0]))
                for s in self.slots if isinstance(s, ClassSlot)]
        if not rows:
            raise ShapeError("support sequence has no class slots")
        return concat_rows(rows)

    def with_class_features(self, features: Tensor) -> "SupportSequence":
        """Same layout with class slot features replaced by rows of ``features``."""
        positions = self.class_positions
        if features.shape[0] != len(positions):
            raise ShapeError(
                f"expected {len(positions)} feature rows, got {features.shape}")
        d = features.shape[1]
        slots: list[Slot] = list(self.slots)
        for row, pos in enumerate(positions):
            feat = reshape(slice_rows(features, row, row + 1), (d,))
            slots[pos] = ClassSlot(self.slots[pos].class_id, feat)
        return SupportSequence(slots)


@dataclass
class OfeProjections:
    """Per-layer weight matrices: w1 on query patches, w2 keys, w3 values."""

    w1: Tensor
    w2: Tensor
    w3: Tensor

    def __post_init__(self):
        for name, w in (("w1", self.w1), ("w2", self.w2), ("w3", self.w3)):
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ShapeError(f"{name} must be square, got {w.shape}")


@dataclass
class OfeFusion:
    """Conv1D + FFN parameters fusing patches with their attended features."""

    conv_kernel: Tensor  # (2d, d)
    conv_bias: Tensor    # (d,)
    ffn: FfnParams


@dataclass
class RefinedFeatures:
    per_position_output: Tensor
    attention: Tensor
    refined: Optional[Tensor] = None
    attention_heads: list[Tensor] = field(default_factory=list)


def build_key_sequence(s: SupportSequence, w_key: Tensor,
                       token: BackgroundToken) -> Tensor:
    """Key-side realization of the sequence: projected class features with the
    background token dropped in *unprojected* at every placeholder."""
    d = token.dim
    projected = None
    if s.class_count:
        projected = matmul(s.class_feature_matrix(), transpose(w_key))
        if projected.shape[1] != d:
            raise ShapeError(
                f"key projection output {projected.shape} does not match token dim {d}")
    token_row = reshape(token.vector, (1, d))
    rows = []
    class_row = 0
    for slot in s.slots:
        if isinstance(slot, ClassSlot):
            rows.append(slice_rows(projected, class_row, class_row + 1))
            class_row += 1
        else:
            rows.append(token_row)
    return concat_rows(rows)


def build_value_sequence(s: SupportSequence, w3: Tensor) -> Tensor:
    """Value-side realization: projected class features, exact zero rows at
    placeholders (the zero rows are constants and carry no gradient)."""
    n = len(s)
    if s.class_count == 0:
        return Tensor(np.zeros((n, w3.shape[0])))
    projected = matmul(s.class_feature_matrix(), transpose(w3))
    d = projected.shape[1]
    zero_row = Tensor(np.zeros((1, d)))
    rows = []
    class_row = 0
    for slot in s.slots:
        if isinstance(slot, ClassSlot):
            rows.append(slice_rows(projected, class_row, class_row + 1))
            class_row += 1
        else:
            rows.append(zero_row)
    return concat_rows(rows)


def _headwise_attention(queries: Tensor, keys: Tensor, values: Tensor,
                        heads: int) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Scaled dot-product attention per head slice; returns the concatenated
    output, the head-averaged attention matrix, and per-head attention."""
    d = queries.shape[1]
    if d % heads != 0:
        raise ShapeError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads
    outputs = []
    attentions = []
    for h in range(heads):
        q = slice_cols(queries, h * dh, (h + 1) * dh)
        k = slice_cols(keys, h * dh, (h + 1) * dh)
        v = slice_cols(values, h * dh, (h + 1) * dh)
        attn = softmax_rows(matmul(q, transpose(k)) * (1.0 / np.sqrt(dh)))
        outputs.append(matmul(attn, v))
        attentions.append(attn)
    combined = outputs[0] if heads == 1 else concat_channels_all(outputs)
    mean_attn = attentions[0]
    for a in attentions[1:]:
        mean_attn = mean_attn + a
    mean_attn = mean_attn * (1.0 / heads)
    return combined, mean_attn, attentions


def concat_channels_all(parts: list[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = concat_channels(out, p)
    return out


def ofe_support(s: SupportSequence, proj: OfeProjections, token: BackgroundToken,
                d: int, heads: int = 1) -> RefinedFeatures:
    """Support-branch self-interaction: keys double as queries, values carry
    zero rows at placeholders so background mass dilutes rather than leaks."""
    if len(s) == 0:
        raise ShapeError("ofe_support: empty support sequence")
    keys = build_key_sequence(s, proj.w2, token)
    values = build_value_sequence(s, proj.w3)
    if keys.shape[1] != d:
        raise ShapeError(f"sequence dim {keys.shape[1]} does not match d={d}")
    out, attn, per_head = _headwise_attention(keys, keys, values, heads)
    return RefinedFeatures(per_position_output=out, attention=attn,
                           attention_heads=per_head)


def ofe_query(q_patches: Tensor, s: SupportSequence, proj: OfeProjections,
              token: BackgroundToken, d: int, fusion: OfeFusion,
              heads: int = 1) -> RefinedFeatures:
    """Query-branch cross-interaction plus Conv1D/FFN fusion with the
    original patches, so global image content is retained."""
    if q_patches.ndim != 2 or q_patches.shape[0] < 1:
        raise ShapeError(f"ofe_query: need at least one patch row, got {q_patches.shape}")
    projected_q = matmul(q_patches, transpose(proj.w1))
    keys = build_key_sequence(s, proj.w2, token)
    values = build_value_sequence(s, proj.w3)
    out, attn, per_head = _headwise_attention(projected_q, keys, values, heads)
    fused = pointwise_conv1d(concat_channels(q_patches, out),
                             fusion.conv_kernel, fusion.conv_bias)
    refined = ffn_apply(fused, fusion.ffn)
    if refined.shape != (q_patches.shape[0], d):
        raise ShapeError(f"refined output {refined.shape} != ({q_patches.shape[0]}, {d})")
    return RefinedFeatures(per_position_output=out, attention=attn,
                           refined=refined, attention_heads=per_head)


def background_attention_mass(attention: np.ndarray | Tensor,
                              s: SupportSequence) -> np.ndarray:
    """Per row of the attention matrix, the mass spent on placeholder
    positions (diagnostic; zero vector when the sequence has none)."""
    attn = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    positions = s.placeholder_positions
    if not positions:
        return np.zeros(attn.shape[0])
    return attn[:, positions].sum(axis=1)
