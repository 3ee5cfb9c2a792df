"""Per-timestep teacher/student drift and protected-tail step selection.

The kept schedule is the protected tail (the last ρ fraction of timesteps)
plus the highest-drift remaining steps, up to exactly ``k`` steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import BudgetInfeasible, InvalidArgument
from .toy import add_noise


@dataclass(frozen=True)
class DriftProfile:
    delta: dict          # t -> δ(t) >= 0
    batch_size: int
    T: int

    @property
    def candidates(self) -> tuple:
        return tuple(sorted(self.delta))

    def values(self) -> np.ndarray:
        return np.array([self.delta[t] for t in self.candidates])


@dataclass(frozen=True)
class Schedule:
    kept: tuple
    tail: tuple
    rho: float
    T: int

    @property
    def k(self) -> int:
        return len(self.kept)


def tail_set(candidates, T: int, rho: float) -> tuple:
    """Steps with t/T >= 1 - ρ."""
    return tuple(t for t in sorted(candidates) if t >= (1.0 - rho) * T - 1e-9)


def measure_drift(teacher, student, x0_pool, labels, candidates, sched, batch_size: int | None = None,
                  seed: int = 0) -> DriftProfile:
    """δ(t): batch mean of ‖ε_student − ε_teacher‖² on identical noised latents.

    The latents at step t are the fixed x0 pool noised with noise seeded by
    ``(seed, t)``, so the cost is linear in |C| times the batch size.
    """
    B = len(x0_pool) if batch_size is None else batch_size
    if B <= 0:
        raise InvalidArgument("drift batch size must be positive")
    x0 = np.asarray(x0_pool)[:B]
    y = np.asarray(labels)[:B]
    delta = {}
    for t in candidates:
        t = int(t)
        eps = np.random.default_rng([seed, t]).standard_normal(x0.shape)
        x_t = add_noise(x0, t, eps, sched)
        d = student.forward(x_t, t, y) - teacher.forward(x_t, t, y)
        delta[t] = float(np.sum(d * d) / B)
    return DriftProfile(delta, B, sched.T)


def select_schedule(profile: DriftProfile, k: int, rho: float = 0.2) -> Schedule:
    """Tail ∪ TopK(non-tail, δ, k − |tail|); ties go to the larger t."""
    C = profile.candidates
    tail = tail_set(C, profile.T, rho)
    if k < len(tail):
        raise BudgetInfeasible(f"k={k} is below the protected tail size {len(tail)}", "steps",
                               required=len(tail))
    if k > len(C):
        raise InvalidArgument(f"k={k} exceeds the {len(C)} candidate steps")
    rest = sorted((t for t in C if t not in set(tail)), key=lambda t: (-profile.delta[t], -t))
    kept = tuple(sorted(set(tail) | set(rest[: k - len(tail)])))
    return Schedule(kept, tail, rho, profile.T)


def select_schedule_for_budget(profile: DriftProfile, budget: float, step_cost, rho: float = 0.2) -> Schedule:
    """Largest-k schedule whose summed ``step_cost(t)`` fits ``budget``."""
    C = profile.candidates
    tail = tail_set(C, profile.T, rho)
    best = None
    for k in range(len(tail), len(C) + 1):
        s = select_schedule(profile, k, rho)
        if sum(step_cost(t) for t in s.kept) > budget:
            break
        best = s
    if best is None:
        need = sum(step_cost(t) for t in tail)
        raise BudgetInfeasible(f"latency budget {budget} below protected-tail cost {need}", "latency",
                               required=need)
    return best


def lorenz_coverage(profile: DriftProfile, k: int, rho: float = 0.2) -> float:
    """Share of total drift carried by the selected schedule."""
    total = float(profile.values().sum())
    if total <= 0.0:
        return k / len(profile.candidates)
    s = select_schedule(profile, k, rho)
    return sum(profile.delta[t] for t in s.kept) / total


def gini(values) -> float:
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    total = x.sum()
    if n == 0 or total <= 0.0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(2.0 * np.sum(i * x) / (n * total) - (n + 1.0) / n)


def sorted_drift_curve(profile: DriftProfile) -> np.ndarray:
    """Cumulative share of drift over steps sorted by δ, largest first."""
    v = np.sort(profile.values())[::-1]
    return np.cumsum(v) / max(v.sum(), 1e-300)


DRIFT_CSV_HEADER = ("t", "delta", "kept", "tail")


def write_drift_csv(path, profile: DriftProfile, schedule: Schedule) -> None:
    kept, tail = set(schedule.kept), set(schedule.tail)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DRIFT_CSV_HEADER)
        for t in profile.candidates:
            w.writerow([t, repr(profile.delta[t]), int(t in kept), int(t in tail)])


def read_drift_csv(path, T: int, batch_size: int = 0, rho: float = 0.2) -> tuple[DriftProfile, Schedule]:
    delta, kept, tail = {}, [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["t"])
            delta[t] = float(row["delta"])
            if int(row["kept"]):
                kept.append(t)
            if int(row["tail"]):
                tail.append(t)
    return DriftProfile(delta, batch_size, T), Schedule(tuple(kept), tuple(tail), rho, T)
