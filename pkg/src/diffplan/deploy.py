"""Deployment simulation: run the pruned reverse schedule with the planned
student, log per-step activation bits and clipping thresholds, compare
against the teacher and write the report tables.

report.json layout (``schema`` = "diffplan-report", ``version`` = 1)::

    substitutions   quality and energy columns replaced by drift/latency units
    model           size_bytes (plan / fp32 / fp16), compression ratios
    schedule        T, kept, k, kept_fraction, tail
    cost            latency units and bitops (plan / full-precision full schedule)
    quality         final-latent MSE vs teacher, held-out noise-prediction drift
    daq             policy and per-step τ trace
    ablation        rows of ablation.csv
    reference       published full-size and reduced-size model sizes (MB) and their ratio
    files           CSVs written alongside
    warnings        list of strings
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .daq import DaqPolicy, phase_bin
from .errors import InvalidArgument, NumericFailure
from .plans import BitPlan
from .quant import CostModel
from .toy import NoiseSchedule, ddim_step

log = logging.getLogger(__name__)

REPORT_VERSION = 1
REFERENCE_SIZES_MB = {"full_precision": 2575.42, "reduced": 397.24}
SUBSTITUTIONS = {
    "FID": "final-latent teacher-student MSE (lower is better)",
    "Latency(sec)": "analytic latency units from the cost model",
    "Energy(J)": "omitted",
    "Model Size(MB)": "packed bytes of the toy model",
}


def initial_noise(n_images: int, seed: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, 7]).standard_normal((n_images, *shape))


def default_labels(n_images: int, n_classes: int) -> np.ndarray:
    return np.arange(n_images) % n_classes


def _sample_batch(model, kept, x, y, sched, policy, log_rows):
    steps = sorted(kept, reverse=True)
    T = sched.T
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        ctx = {}
        try:
            eps = model.forward(x, t, y, ctx)
            x = ddim_step(x, eps, t, t_prev, sched)
        except NumericFailure as exc:
            exc.t = t
            raise
        taus = ctx.get("tau", {})
        a_bits = ctx.get("a_bits", policy.bits_at(t, T) if policy is not None else None)
        log_rows.append((t, phase_bin(t, T), a_bits, float(np.mean(list(taus.values()))) if taus else None))
    return x


def sample(model, kept, n_images: int, seed: int, sched: NoiseSchedule, policy: DaqPolicy | None = None,
           labels=None, batch_size: int = 8, workers: int = 1):
    """DDIM over ``kept`` in descending order; returns (latents, per-step log).

    The log has one row (t, bin, a_bits, mean τ) per denoiser forward of the
    first image batch; every batch runs exactly |kept| forwards. On a numeric
    failure the rows logged so far are attached as ``exc.partial_log``.
    """
    kept = sorted(int(t) for t in kept)
    if not kept:
        raise InvalidArgument("kept schedule is empty")
    if n_images < 1:
        raise InvalidArgument("n_images must be >= 1")
    cfg = model.config
    x = initial_noise(n_images, seed, (cfg.channels, cfg.size, cfg.size))
    y = default_labels(n_images, cfg.n_classes) if labels is None else np.asarray(labels)
    chunks = [(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, n_images, batch_size)]
    logs = [[] for _ in chunks]

    def run(j):
        return _sample_batch(model, kept, chunks[j][0], chunks[j][1], sched, policy, logs[j])

    try:
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(workers) as pool:
                outs = list(pool.map(run, range(len(chunks))))
        else:
            outs = [run(j) for j in range(len(chunks))]
    except NumericFailure as exc:
        exc.partial_log = [row for rows in logs for row in rows]
        raise
    return np.concatenate(outs), logs[0]


def latent_mse(a, b) -> float:
    """Mean squared elementwise difference between two latent batches."""
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


class TrajectoryObjective:
    """Final-latent MSE of a candidate's sampled trajectory against the teacher
    sampled on the full schedule, from identical initial noise.

    Stage tuples are ``(n_batches,)``; batch ``i`` always uses the same noise.
    """

    def __init__(self, teacher, sched, builder, full_schedule, seed: int = 0, batch_size: int = 4):
        self.teacher = teacher
        self.sched = sched
        self.builder = builder
        self.full = sorted(full_schedule)
        self.seed = seed
        self.batch_size = batch_size
        self._ref = {}

    def reference(self, i: int):
        if i not in self._ref:
            self._ref[i] = sample(self.teacher, self.full, self.batch_size, self.seed + 1000 * i, self.sched)[0]
        return self._ref[i]

    def __call__(self, cand, n_batches: int = 1) -> float:
        student = self.builder(cand)
        errs = []
        for i in range(n_batches):
            out, _ = sample(student, cand.kept, self.batch_size, self.seed + 1000 * i, self.sched, cand.daq)
            errs.append(latent_mse(out, self.reference(i)))
        return float(np.mean(errs))


# ---------------------------------------------------------------------------
# ablations and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    plan: BitPlan
    policy: DaqPolicy
    kept: tuple
    act_mode: str = "daq"


ABLATION_HEADER = ("variant", "latent_mse", "latency_units", "bitops", "size_bytes", "k")


def run_ablations(teacher, sched, variants, builder, cost: CostModel, n_images: int, seed: int,
                  reference=None, workers: int = 1) -> list[dict]:
    """Sample every variant from the same noise and compare with the teacher's
    full-schedule sample. ``builder(variant)`` returns the student."""
    full = list(range(sched.T))
    if reference is None:
        reference, _ = sample(teacher, full, n_images, seed, sched, workers=workers)
    rows = []
    for v in variants:
        out, _ = sample(builder(v), v.kept, n_images, seed, sched, v.policy, workers=workers)
        rows.append({
            "variant": v.name,
            "latent_mse": latent_mse(out, reference),
            "latency_units": cost.latency(v.plan, v.policy, v.kept, sched.T, daq=v.act_mode == "daq"),
            "bitops": cost.bitops(v.plan, v.policy, v.kept, sched.T),
            "size_bytes": cost.memory(v.plan),
            "k": len(v.kept),
        })
    return rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] if isinstance(r, dict) else r[i] for i, h in enumerate(header)])


def write_bits_heatmap(path, plan: BitPlan) -> None:
    """Layer-by-bit-width indicator table (one row per layer)."""
    bit_cols = sorted({e.bits for e in plan.values()} | {4, 6, 8, 16})
    header = ("layer_id", "bits", "group", "frozen", *[f"w{b}" for b in bit_cols])
    rows = [(lid, e.bits, e.group, int(e.frozen), *[int(e.bits == b) for b in bit_cols]) for lid, e in plan.items()]
    write_csv(path, header, rows)


def wall_clock(fn, repeats: int = 10, warmup: int = 2) -> float:
    """Mean seconds per call after warm-up runs; informational only."""
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def build_report(plan: BitPlan, policy: DaqPolicy, kept, tail, cost: CostModel, T: int, *, latent_mse_value,
                 heldout_drift, tau_trace, ablation_rows=None, files=(), wall=None) -> dict:
    fp32 = BitPlan.uniform(plan, 32, 128)
    fp16 = BitPlan.uniform(plan, 16, 128)
    full = list(range(T))
    size = cost.memory(plan)
    warnings = []
    baseline = {r["variant"]: r for r in (ablation_rows or [])}
    if not baseline:
        warnings.append("no baseline runs found; baseline fields are null")
    doc = {
        "schema": "diffplan-report",
        "version": REPORT_VERSION,
        "substitutions": SUBSTITUTIONS,
        "model": {
            "size_bytes": size,
            "fp32_size_bytes": cost.memory(fp32),
            "fp16_size_bytes": cost.memory(fp16),
            "compression_vs_fp32": cost.memory(fp32) / size,
            "compression_vs_fp16": cost.memory(fp16) / size,
            "bits_histogram": {str(b): n for b, n in sorted(plan.counts().items())},
        },
        "schedule": {"T": T, "kept": list(kept), "k": len(kept), "kept_fraction": len(kept) / T,
                     "tail": list(tail)},
        "cost": {
            "latency_units": cost.latency(plan, policy, kept, T),
            "bitops": cost.bitops(plan, policy, kept, T),
            "fp_latency_units": cost.latency(fp32, policy, full, T),
            "fp_bitops": cost.bitops(fp32, policy, full, T),
        },
        "quality": {
            "latent_mse": latent_mse_value,
            "heldout_drift": heldout_drift,
            "baseline_latent_mse": {k: r["latent_mse"] for k, r in baseline.items()} or None,
        },
        "daq": {"policy": policy.to_dict(),
                "tau_trace": [{"t": t, "bin": b, "a_bits": a, "mean_tau": tau} for t, b, a, tau in tau_trace]},
        "ablation": ablation_rows or None,
        "reference": {**REFERENCE_SIZES_MB,
                      "ratio": REFERENCE_SIZES_MB["full_precision"] / REFERENCE_SIZES_MB["reduced"],
                      "note": "published sizes for context only; not reproduced by the toy model"},
        "files": sorted(files),
        "warnings": warnings,
    }
    c = doc["cost"]
    c["bitops_ratio"] = c["bitops"] / c["fp_bitops"]
    c["latency_ratio"] = c["latency_units"] / c["fp_latency_units"]
    if wall is not None:
        doc["wall_clock_sec"] = wall
    for w in warnings:
        log.warning(w)
    return doc


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
