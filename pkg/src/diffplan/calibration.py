"""Calibration statistics, layer sensitivity scores, tiers and the seed plan.

Per layer we record Σx² per input feature, per-group activation envelopes and
a reservoir of input rows; the reservoir feeds a PCA rank read-out (k95 and
spill). These give the PCA sensitivity ``0.5·spill + 0.5·k95/d`` and the
blended score ``α·s_pca + (1-α)·h_norm``. The composite sensitivity
``0.4·Sx + 0.2·Sd + 0.25·Sk + 0.15·Sn`` adds drift-based signals measured by
quantizing one layer at a time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .daq import BINS, phase_bin
from .errors import InvalidArgument
from .plans import BitPlan, LayerPlan
from .quant import CostModel, quantize_grouped
from .student import PackCache, TeacherCache, build_student
from .toy import NoiseSchedule, TinyDiT, add_noise, latent_pool, layer_rows_per_sample, register_hooks

log = logging.getLogger(__name__)

COMPOSITE_WEIGHTS = {"Sx": 0.4, "Sd": 0.2, "Sk": 0.25, "Sn": 0.15}
TIER_SEED = {"low": (4, 288), "mid": (8, 128), "high": (16, 64)}
STAND_INS = {
    "Sd": "leave-one-quantized drift at W4/g288 (D-PCA undefined)",
    "Sx": "0.8 * blended PCA-curvature score + 0.2 * normalized temporal variance of activation std; HF-bias omitted",
}


@dataclass
class CalibrationSet:
    x_t: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.t)

    def by_timestep(self, batch_size: int = 64):
        """Yield ``(t, x_t, y)`` batches sharing one timestep, in ascending t."""
        for t in np.unique(self.t):
            idx = np.flatnonzero(self.t == t)
            for s in range(0, len(idx), batch_size):
                sel = idx[s:s + batch_size]
                yield int(t), self.x_t[sel], self.y[sel]


def make_calibration_set(sched: NoiseSchedule, n_samples: int = 512, timesteps=None,
                         n_timesteps: int = 8, seed: int = 0, n_classes: int = 10) -> CalibrationSet:
    """Noise a seeded latent pool at a spread of timesteps (early through late)."""
    if timesteps is None:
        timesteps = np.unique(np.round(np.linspace(0, sched.T - 1, n_timesteps)).astype(int))
    timesteps = np.asarray(timesteps, dtype=int)
    rng = np.random.default_rng(seed)
    x0 = latent_pool(n_samples, seed)
    eps = rng.standard_normal(x0.shape)
    y = rng.integers(0, n_classes, size=n_samples)
    t = timesteps[np.arange(n_samples) % len(timesteps)]
    x_t = np.stack([add_noise(x0[i], int(t[i]), eps[i], sched) for i in range(n_samples)])
    return CalibrationSet(x_t, t, y)


def collect_stats(model: TinyDiT, calib: CalibrationSet, reservoir_cap: int = 2048,
                  group_size: int = 128, batch_size: int = 64, seed: int = 0) -> dict:
    """Run the teacher over ``calib`` with capture hooks; returns ``layer_id -> CaptureHook``."""
    if len(calib) == 0:
        raise InvalidArgument("empty calibration set")
    bins = {phase_bin(int(t), model.config.T) for t in np.unique(calib.t)}
    if bins != set(BINS):
        log.warning("calibration timesteps cover only %s bins", sorted(bins))
    hooks = register_hooks(model, caps=reservoir_cap, seed=seed, group_size=group_size)
    try:
        for t, x, y in calib.by_timestep(batch_size):
            model.forward(x, t, y)
    finally:
        hooks.remove()
    return dict(hooks)


# ---------------------------------------------------------------------------
# PCA read-out
# ---------------------------------------------------------------------------

class StreamingCovariance:
    """Chunked covariance accumulator; same spectrum as a one-shot eigendecomposition."""

    def __init__(self, width: int):
        self.n = 0
        self.s = np.zeros(width)
        self.ss = np.zeros((width, width))

    def update(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        self.n += rows.shape[0]
        self.s += rows.sum(axis=0)
        self.ss += rows.T @ rows

    def spectrum(self) -> np.ndarray:
        mu = self.s / self.n
        cov = (self.ss - self.n * np.outer(mu, mu)) / max(self.n - 1, 1)
        return np.clip(np.linalg.eigvalsh((cov + cov.T) / 2)[::-1], 0.0, None)


def variance_spectrum(A, incremental: bool = False, chunk: int = 256) -> np.ndarray:
    """Eigenvalues of the column-centred covariance, descending."""
    A = np.asarray(A, dtype=np.float64)
    if incremental:
        acc = StreamingCovariance(A.shape[1])
        for s in range(0, len(A), chunk):
            acc.update(A[s:s + chunk])
        return acc.spectrum()
    C = A - A.mean(axis=0)
    cov = C.T @ C / max(len(A) - 1, 1)
    return np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)


def rank_from_spectrum(eigs, K: int = 128, threshold: float = 0.95) -> tuple[int, float]:
    eigs = np.asarray(eigs, dtype=np.float64)
    total = float(eigs.sum())
    if total <= 1e-300:
        return 1, 0.0
    cum = np.cumsum(eigs) / total
    reached = cum >= threshold - 1e-12
    k = int(np.argmax(reached)) + 1 if reached.any() else len(eigs)
    k = min(k, K, len(eigs))
    return k, max(0.0, 1.0 - float(cum[k - 1]))


def pca_rank(A, K: int = 128, threshold: float = 0.95, incremental: bool = False) -> tuple[int, float]:
    """``(k95, spill)``: fewest components reaching ``threshold`` of the variance,
    capped at ``K``, and the variance left over beyond them."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 2:
        raise InvalidArgument("PCA needs a 2-D matrix with at least two rows")
    return rank_from_spectrum(variance_spectrum(A, incremental), K, threshold)


def pca_sensitivity(k95: int, d: int, spill: float) -> float:
    return 0.5 * spill + 0.5 * k95 / d


def combined_score(s_pca: float, h_diag_norm: float, alpha: float = 0.5) -> float:
    return alpha * s_pca + (1.0 - alpha) * h_diag_norm


def minmax_normalize(values) -> np.ndarray:
    """Scale to [0, 1]; a single value (or all-equal values) maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 1e-300:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def composite_score(signals: dict, weights: dict = COMPOSITE_WEIGHTS):
    missing = [k for k in weights if signals.get(k) is None]
    if missing:
        raise InvalidArgument(f"missing sensitivity signals: {missing}")
    return sum(w * np.asarray(signals[k], dtype=np.float64) for k, w in weights.items())


# ---------------------------------------------------------------------------
# drift-based signals
# ---------------------------------------------------------------------------

def src_sweep(drift_of, cost_of, bit_grid=(4, 8), group_grid=(64, 288)):
    """Sweep a tiny (bits, group) grid for one layer.

    Returns ``(slope, knee, table)``: the drift decrease per added bit
    (averaged over groups, floored at 0), the cheapest grid point whose
    drift is within 10% of the best point, and the raw drift table.
    """
    table = {(b, g): float(drift_of(b, g)) for b in bit_grid for g in group_grid}
    b_lo, b_hi = min(bit_grid), max(bit_grid)
    slope = 0.0
    if b_hi > b_lo:
        slope = float(np.mean([(table[(b_lo, g)] - table[(b_hi, g)]) / (b_hi - b_lo) for g in group_grid]))
    slope = max(slope, 0.0)
    best = min(table.values())
    ok = [p for p, d in table.items() if d <= 1.1 * best]
    knee = min(ok, key=lambda p: (cost_of(*p), p[0], -p[1]))
    return slope, knee, table


class _PerturbedDiT(TinyDiT):
    """Teacher with an additive perturbation on one layer's output."""

    def __init__(self, teacher: TinyDiT, layer_id: str):
        self.__dict__.update({k: v for k, v in teacher.__dict__.items() if k != "_hooks"})
        self._hooks = {}
        self.target = layer_id
        self.delta = None

    def linear(self, layer_id, x, t, ctx):
        y = x @ self.weights[layer_id].T + self.biases[layer_id]
        if layer_id == self.target and self.delta is not None:
            y = y + self.delta
        return y


def jacobian_energy(model: TinyDiT, layer_id: str, batches, k: int = 8, h: float = 1e-3, seed: int = 0) -> float:
    """Per-sample ‖∂ε/∂(layer output)‖²_F by random-probe central differences.

    For v ~ N(0, I), E‖Jv‖² = ‖J‖²_F; ``batches`` is a list of ``(x_t, t, y)``.
    """
    probe = _PerturbedDiT(model, layer_id)
    rng = np.random.default_rng(seed)
    out_f = model.shapes[layer_id][0]
    rows = layer_rows_per_sample(model.config, layer_id)
    total, n = 0.0, 0
    for x, t, y in batches:
        b = x.shape[0]
        for _ in range(k):
            v = rng.standard_normal((b * rows, out_f))
            probe.delta = h * v
            plus = probe.forward(x, t, y)
            probe.delta = -h * v
            minus = probe.forward(x, t, y)
            jv = (plus - minus) / (2 * h)
            total += float(np.sum(jv * jv))
        n += b * k
    return total / n


def quant_noise_variance(q) -> float:
    """σ² = Δ²/12 with Δ the mean group scale."""
    delta = float(np.mean(q.scales))
    return delta * delta / 12.0


def noise_estimate(model: TinyDiT, layer_id: str, bits: int, group: int, batches, k: int = 8,
                   seed: int = 0) -> float:
    """Unnormalised Sn = σ²·‖Jac‖²_F for quantizing ``layer_id`` at (bits, group)."""
    q = quantize_grouped(model.weights[layer_id], bits, group, layer_id)
    return quant_noise_variance(q) * jacobian_energy(model, layer_id, batches, k=k, seed=seed)


# ---------------------------------------------------------------------------
# tiers
# ---------------------------------------------------------------------------

def tier_and_seed(scores: dict, freeze_frac: float = 0.1, tier_seed: dict = TIER_SEED):
    """Tertile split by score (ties broken by layer order), seed plan, frozen set.

    ``scores`` is an ordered ``layer_id -> score`` mapping. The top
    ``freeze_frac`` of layers by score are frozen.
    """
    ids = list(scores)
    n = len(ids)
    vals = np.array([scores[i] for i in ids], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise InvalidArgument("scores must be finite")
    order = sorted(range(n), key=lambda i: (vals[i], i))
    if n < 3:
        tiers = {lid: "mid" for lid in ids}
    else:
        tiers = {}
        for name, chunk in zip(("low", "mid", "high"), np.array_split(np.array(order), 3)):
            for i in chunk:
                tiers[ids[i]] = name
    n_frozen = int(math.floor(freeze_frac * n + 0.5))
    frozen = {ids[i] for i in order[n - n_frozen:]} if n_frozen else set()
    plan = BitPlan([(lid, LayerPlan(*tier_seed[tiers[lid]], frozen=lid in frozen)) for lid in ids])
    return tiers, plan, frozen


def uniform_seed(layer_ids, bits: int = 4, group: int = 288) -> BitPlan:
    return BitPlan.uniform(layer_ids, bits, group)


# ---------------------------------------------------------------------------
# full pass
# ---------------------------------------------------------------------------

@dataclass
class LayerStats:
    layer_id: str
    d: int
    h_diag_mean: float
    k95: int
    spill: float
    group_envelopes: list
    s_pca: float
    h_norm: float = 0.0
    score: float = 0.0
    temporal_var: float = 0.0
    Sx: float = 0.0
    Sd: float = 0.0
    Sk: float = 0.0
    Sn: float = 0.0
    knee: tuple = (4, 288)
    composite: float = 0.0
    tier: str = "mid"
    frozen: bool = False
    std_by_t: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["knee"] = list(self.knee)
        d["group_envelopes"] = [list(e) for e in self.group_envelopes]
        d["std_by_t"] = {str(k): v for k, v in self.std_by_t.items()}
        return d


@dataclass(frozen=True)
class CalibrationConfig:
    n_samples: int = 512
    n_timesteps: int = 8
    reservoir_cap: int = 2048
    group_size: int = 128
    pca_cap: int = 128
    pca_threshold: float = 0.95
    alpha: float = 0.5
    freeze_frac: float = 0.1
    tier_by: str = "composite"  # or "blend"
    uniform_seed: bool = False
    signals: bool = True
    sweep_bits: tuple = (4, 8)
    sweep_groups: tuple = (64, 288)
    probe_k: int = 8
    eval_samples: int = 16
    eval_timesteps: int = 4
    batch_size: int = 64


@dataclass
class CalibrationResult:
    stats: list
    tiers: dict
    seed_plan: BitPlan
    frozen: set
    hooks: dict

    def reservoirs(self) -> dict:
        return {lid: h.reservoir for lid, h in self.hooks.items()}

    def envelopes(self) -> dict:
        return {s.layer_id: s.group_envelopes for s in self.stats}

    def sensitivity(self, kind: str = "composite") -> dict:
        key = "composite" if kind == "composite" else "score"
        return {s.layer_id: getattr(s, key) for s in self.stats}

    def to_dict(self) -> dict:
        return {"version": 1, "stand_ins": STAND_INS, "layers": [s.to_dict() for s in self.stats]}

    def save_stats(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def calibrate(model: TinyDiT, sched: NoiseSchedule, cfg: CalibrationConfig = CalibrationConfig(),
              seed: int = 0, calib: CalibrationSet | None = None) -> CalibrationResult:
    calib = calib or make_calibration_set(sched, cfg.n_samples, n_timesteps=cfg.n_timesteps, seed=seed,
                                          n_classes=model.config.n_classes)
    hooks = collect_stats(model, calib, cfg.reservoir_cap, cfg.group_size, cfg.batch_size, seed)
    ids = model.layer_ids
    stats = []
    for lid in ids:
        h = hooks[lid]
        k95, spill = pca_rank(h.reservoir, cfg.pca_cap, cfg.pca_threshold)
        stds = h.std_by_t()
        stats.append(LayerStats(
            layer_id=lid, d=h.width, h_diag_mean=float(h.sum_sq.mean()), k95=k95, spill=spill,
            group_envelopes=[(float(a), float(b)) for a, b in zip(h.group_min, h.group_max)],
            s_pca=pca_sensitivity(k95, h.width, spill),
            temporal_var=float(np.var(list(stds.values()))), std_by_t=stds))

    h_norm = minmax_normalize([s.h_diag_mean for s in stats])
    tv_norm = minmax_normalize([s.temporal_var for s in stats])
    for s, hn, tv in zip(stats, h_norm, tv_norm):
        s.h_norm = float(hn)
        s.score = combined_score(s.s_pca, s.h_norm, cfg.alpha)
        s.Sx = 0.8 * s.score + 0.2 * float(tv)
    for s, v in zip(stats, minmax_normalize([s.Sx for s in stats])):
        s.Sx = float(v)

    if cfg.signals:
        _drift_signals(model, sched, calib, stats, cfg, seed)
        comp = composite_score({k: [getattr(s, k) for s in stats] for k in COMPOSITE_WEIGHTS})
        for s, c in zip(stats, comp):
            s.composite = float(c)
    else:
        for s in stats:
            s.composite = s.Sx

    if cfg.tier_by not in ("composite", "blend"):
        raise InvalidArgument(f"tier_by must be 'composite' or 'blend', got {cfg.tier_by!r}")
    key = "composite" if cfg.tier_by == "composite" else "score"
    tiers, plan, frozen = tier_and_seed({s.layer_id: getattr(s, key) for s in stats}, cfg.freeze_frac)
    if cfg.uniform_seed:
        plan, frozen = uniform_seed(ids), set()
    for s in stats:
        s.tier, s.frozen = tiers[s.layer_id], s.layer_id in frozen
    return CalibrationResult(stats, tiers, plan, frozen, hooks)


def _drift_signals(model, sched, calib, stats, cfg, seed):
    ids = model.layer_ids
    pool = latent_pool(cfg.eval_samples, seed + 1)
    labels = np.arange(cfg.eval_samples) % model.config.n_classes
    bs = min(8, cfg.eval_samples)
    cache = TeacherCache(model, sched, pool, labels, batch_size=bs, seed=seed + 1)
    ts = np.unique(calib.t)
    ts = ts[np.round(np.linspace(0, len(ts) - 1, min(cfg.eval_timesteps, len(ts)))).astype(int)]
    rtn = PackCache(model, method="rtn")
    cost = CostModel.from_model(model)
    fp = BitPlan.uniform(ids, 32, 288)

    def drift_of(lid):
        def f(b, g):
            student = build_student(model, fp.with_layer(lid, bits=b, group=g), pack_cache=rtn, act_mode="none")
            return cache.drift(student, ts)
        return f

    probe_batches = []
    for t in ts[:: max(1, len(ts) - 1)]:
        x, y = cache.inputs(0, int(t))
        probe_batches.append((x, int(t), y))
    raw_sd, raw_sk, raw_sn = [], [], []
    for s in stats:
        f = drift_of(s.layer_id)
        slope, knee, table = src_sweep(f, lambda b, g, lid=s.layer_id: cost.c_mem(lid, b, g),
                                       cfg.sweep_bits, cfg.sweep_groups)
        low = (min(cfg.sweep_bits), max(cfg.sweep_groups))
        raw_sd.append(table[low] if low in table else f(*low))
        raw_sk.append(slope)
        s.knee = knee
        raw_sn.append(noise_estimate(model, s.layer_id, 4, 288, probe_batches, k=cfg.probe_k, seed=seed))
    for s, sd, sk, sn in zip(stats, minmax_normalize(raw_sd), minmax_normalize(raw_sk), minmax_normalize(raw_sn)):
        s.Sd, s.Sk, s.Sn = float(sd), float(sk), float(sn)
