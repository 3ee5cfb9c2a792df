"""Per-layer bit plans and their JSON form."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, replace

from .errors import InvalidArgument

INT_BITS = (3, 4, 6, 8)
FP_BITS = (16, 32)
GROUP_SIZES = (32, 64, 128, 192, 288)


@dataclass(frozen=True)
class LayerPlan:
    bits: int
    group: int
    frozen: bool = False

    def __post_init__(self):
        if self.bits not in INT_BITS + FP_BITS:
            raise InvalidArgument(f"unsupported weight bits {self.bits}")
        if self.group < 1:
            raise InvalidArgument(f"group size must be >= 1, got {self.group}")

    @property
    def fp(self) -> bool:
        """Full-precision passthrough (FP16 or FP32): no integer kernel, no DAQ."""
        return self.bits in FP_BITS


class BitPlan(Mapping):
    """Immutable ordered ``layer_id -> LayerPlan`` mapping."""

    def __init__(self, entries):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._items = tuple((str(k), v) for k, v in items)
        self._index = dict(self._items)
        if len(self._index) != len(self._items):
            raise InvalidArgument("duplicate layer id in bit plan")

    def __getitem__(self, key):
        return self._index[key]

    def __iter__(self):
        return (k for k, _ in self._items)

    def __len__(self):
        return len(self._items)

    def __eq__(self, other):
        return isinstance(other, BitPlan) and self._items == other._items

    def __hash__(self):
        return hash(self._items)

    def __repr__(self):
        body = ", ".join(f"{k}: W{v.bits}/g{v.group}{'*' if v.frozen else ''}" for k, v in self._items)
        return f"BitPlan({body})"

    def with_layer(self, layer_id: str, **changes) -> "BitPlan":
        return BitPlan([(k, replace(v, **changes) if k == layer_id else v) for k, v in self._items])

    @classmethod
    def uniform(cls, layer_ids, bits: int, group: int) -> "BitPlan":
        return cls([(lid, LayerPlan(bits, group)) for lid in layer_ids])

    def check_covers(self, layer_ids) -> None:
        missing = [lid for lid in layer_ids if lid not in self._index]
        extra = [lid for lid in self._index if lid not in set(layer_ids)]
        if missing or extra:
            raise InvalidArgument(f"plan/model layer mismatch: missing={missing} extra={extra}")

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for v in self.values():
            out[v.bits] = out.get(v.bits, 0) + 1
        return dict(sorted(out.items()))

    def to_dict(self) -> dict:
        return {"layers": [{"layer_id": k, "bits": v.bits, "group": v.group, "frozen": v.frozen,
                            "fp": v.fp} for k, v in self._items]}

    @classmethod
    def from_dict(cls, doc) -> "BitPlan":
        return cls([(e["layer_id"], LayerPlan(int(e["bits"]), int(e["group"]), bool(e.get("frozen", False))))
                    for e in doc["layers"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "BitPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
