"""Ablation variants: which heads a network has and which loss terms drive it."""

from __future__ import annotations

import enum

from .errors import ContractError

HEADS = ("sct", "bone", "mask")
TERMS = ("body_reg", "bone_class", "bone_reg")


class Variant(enum.Enum):
    THREE_TASK = "3tn"
    TWO_TASK = "2tn"
    ONE_TASK_FOCUSED = "1tn-fl"
    ONE_TASK_GLOBAL = "1tn-gl"

    @classmethod
    def parse(cls, kind) -> "Variant":
        if isinstance(kind, cls):
            return kind
        key = str(kind).strip().lower()
        for v in cls:
            if key in (v.value, v.name.lower(), v.name.lower().replace("_", "")):
                return v
        raise ContractError(f"unknown variant {kind!r}")

    @property
    def heads(self) -> tuple[str, ...]:
        return _HEADS[self]

    @property
    def terms(self) -> tuple[str, ...]:
        return _TERMS[self]

    @property
    def global_loss(self) -> bool:
        return self is Variant.ONE_TASK_GLOBAL


_HEADS = {
    Variant.THREE_TASK: ("sct", "bone", "mask"),
    Variant.TWO_TASK: ("sct", "bone"),
    Variant.ONE_TASK_FOCUSED: ("sct",),
    Variant.ONE_TASK_GLOBAL: ("sct",),
}
_TERMS = {
    Variant.THREE_TASK: ("body_reg", "bone_class", "bone_reg"),
    Variant.TWO_TASK: ("body_reg", "bone_reg"),
    Variant.ONE_TASK_FOCUSED: ("body_reg",),
    Variant.ONE_TASK_GLOBAL: ("body_reg",),
}

# report row order
VARIANT_ORDER = (
    Variant.THREE_TASK,
    Variant.TWO_TASK,
    Variant.ONE_TASK_FOCUSED,
    Variant.ONE_TASK_GLOBAL,
)
