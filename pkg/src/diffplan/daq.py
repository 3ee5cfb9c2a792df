"""Dynamic activation quantization with percentile clipping and phase bins.

Scales are computed at run time per sample row, per timestep and per feature
group: τ is the nearest-rank percentile of |v|, α = τ / (2^(b-1) - 1), and
v̂ = α · round(clip(v, -τ, τ) / α). Zero-point is always 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgument
from .quant import SCALE_FLOOR, qmax, round_half_away

BINS = ("early", "mid", "late")
ACT_BITS = (4, 6, 8, 16)


def phase_bin(t: int, T: int, boundaries=(1 / 3, 2 / 3)) -> str:
    """Bin a timestep index. Boundaries are fractions of T, floored to step
    indices; a step sitting on a boundary belongs to the higher bin."""
    if not 0 <= t < T:
        raise InvalidArgument(f"timestep {t} outside [0, {T})")
    lo, hi = (math.floor(f * T + 1e-9) for f in boundaries)
    if t >= hi:
        return "late"
    if t >= lo:
        return "mid"
    return "early"


@dataclass(frozen=True)
class DaqPolicy:
    bits: tuple = (8, 8, 8)  # early, mid, late
    percentile: float = 99.9
    group_size: int = 128
    boundaries: tuple = (1 / 3, 2 / 3)

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        if len(self.bits) != 3 or any(b not in ACT_BITS for b in self.bits):
            raise InvalidArgument(f"DAQ bits must be three values from {ACT_BITS}, got {self.bits}")
        if not 50 < self.percentile <= 100:
            raise InvalidArgument(f"percentile must lie in (50, 100], got {self.percentile}")
        if self.group_size < 1:
            raise InvalidArgument("activation group size must be >= 1")
        b0, b1 = self.boundaries
        if not 0 < b0 < b1 < 1:
            raise InvalidArgument(f"bin boundaries must be strictly increasing in (0, 1), got {self.boundaries}")

    @classmethod
    def uniform(cls, bits: int, **kw) -> "DaqPolicy":
        return cls(bits=(bits, bits, bits), **kw)

    def bits_at(self, t: int, T: int) -> int:
        return self.bits[BINS.index(phase_bin(t, T, self.boundaries))]

    def with_bits(self, bits) -> "DaqPolicy":
        return DaqPolicy(tuple(bits), self.percentile, self.group_size, self.boundaries)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bits"] = dict(zip(BINS, self.bits))
        d["boundaries"] = list(self.boundaries)
        return d

    @classmethod
    def from_dict(cls, d) -> "DaqPolicy":
        bits = d["bits"]
        if isinstance(bits, dict):
            bits = tuple(bits[b] for b in BINS)
        return cls(tuple(bits), float(d["percentile"]), int(d["group_size"]), tuple(d["boundaries"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "DaqPolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def percentile_rank(n: int, p: float) -> int:
    """0-based index of the nearest-rank p-th percentile in a sorted length-n vector."""
    return min(n, max(1, math.ceil(p * n / 100.0 - 1e-9))) - 1


def daq_quantize(v, p: float = 99.9, b: int = 8):
    """Quantize one group vector; returns ``(v_hat, tau, alpha)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidArgument("cannot quantize an empty group")
    if b < 2:
        raise InvalidArgument(f"activation bits must be >= 2, got {b}")
    a = np.sort(np.abs(v.ravel()))
    tau = max(float(a[percentile_rank(a.size, p)]), SCALE_FLOOR)
    alpha = tau / qmax(b)
    v_hat = alpha * np.clip(round_half_away(np.clip(v, -tau, tau) / alpha), -qmax(b), qmax(b))
    return v_hat, tau, alpha


def daq_quantize_rows(x, p: float, b: int, group_size: int):
    """Vectorised DAQ over a (rows, features) matrix.

    Returns integer ``codes`` (rows, features), ``scales`` α of shape
    (rows, n_groups) and the matching ``taus``.
    """
    x = np.asarray(x, dtype=np.float64)
    n, width = x.shape
    q = qmax(b)
    ng = math.ceil(width / group_size)
    codes = np.empty((n, width), dtype=np.int8 if b <= 8 else np.int16)
    taus = np.empty((n, ng))
    for k in range(ng):
        blk = x[:, k * group_size:(k + 1) * group_size]
        srt = np.sort(np.abs(blk), axis=1)
        tau = np.maximum(srt[:, percentile_rank(blk.shape[1], p)], SCALE_FLOOR)
        taus[:, k] = tau
        alpha = tau / q
        clipped = np.clip(blk, -tau[:, None], tau[:, None])
        codes[:, k * group_size:(k + 1) * group_size] = np.clip(round_half_away(clipped / alpha[:, None]), -q, q)
    return codes, taus / q, taus


def static_quantize_rows(x, scale: float, b: int):
    """Fixed per-tensor scale (the no-DAQ baseline): clip to ±scale·qmax and round."""
    q = qmax(b)
    codes = np.clip(round_half_away(np.asarray(x) / scale), -q, q).astype(np.int8 if b <= 8 else np.int16)
    return codes, np.full((codes.shape[0], 1), float(scale))
