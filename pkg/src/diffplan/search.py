"""Plan search: evolutionary bit/group refinement with successive halving, the
budgeted greedy planner over bit downgrades and step removals, and the joint
search over DAQ bits and schedule length.

Candidates are scored as ``drift + λ·latency_penalty + μ·bitops_penalty`` with
hinge penalties ``max(0, cost/budget - 1)``.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .daq import ACT_BITS, DaqPolicy
from .errors import BudgetInfeasible, InvalidArgument, NumericFailure
from .plans import GROUP_SIZES, BitPlan, LayerPlan
from .quant import CostModel
from .schedule import DriftProfile, select_schedule, tail_set
from .student import PackCache, TeacherCache, build_student


@dataclass(frozen=True)
class SearchConfig:
    population: int = 12
    elites: int = 4
    generations: int = 6
    mutation_rate: float = 0.10
    stages: tuple = ((2, 6), (6, 12))  # (n_batches, n_steps) per halving stage
    lam: float = 0.5
    mu: float = 0.5
    eps: float = 1e-8
    b_lat: float | None = None
    b_mem: float | None = None
    b_bitops: float | None = None
    bit_set: tuple = (4, 6, 8, 16)
    group_set: tuple = GROUP_SIZES
    schedule_jitter: float = 0.10
    workers: int = 1

    def __post_init__(self):
        if not self.elites < self.population:
            raise InvalidArgument("elites must be smaller than the population")
        if not 0 < self.mutation_rate < 1:
            raise InvalidArgument("mutation rate must lie in (0, 1)")
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))


def fingerprint(bitplan: BitPlan, kept, daq: DaqPolicy) -> str:
    """128-bit digest of (bit plan, kept steps, DAQ policy)."""
    doc = {"plan": [[k, v.bits, v.group, v.frozen] for k, v in bitplan.items()],
           "kept": [int(t) for t in kept], "daq": daq.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:32]


@dataclass(frozen=True)
class PlanCandidate:
    bitplan: BitPlan
    kept: tuple
    daq: DaqPolicy
    drift: float | None = None
    latency: float | None = None
    bitops: float | None = None
    mem: float | None = None
    score: float | None = None
    fidelity: tuple | None = None
    fp: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kept", tuple(int(t) for t in self.kept))
        if not self.fp:
            object.__setattr__(self, "fp", fingerprint(self.bitplan, self.kept, self.daq))

    @property
    def fingerprint(self) -> str:
        return self.fp


BUDGET_RTOL = 1e-12  # relative slack on budget comparisons


def hinge(cost: float, budget: float | None) -> float:
    return 0.0 if budget is None else max(0.0, cost / budget - 1.0)


def score(drift_mse: float, latency: float, bitops: float, b_lat=None, b_bitops=None,
          lam: float = 0.5, mu: float = 0.5) -> float:
    """drift + λ·max(0, latency/B_lat − 1) + μ·max(0, bitops/B_bitops − 1)."""
    return drift_mse + lam * hinge(latency, b_lat) + mu * hinge(bitops, b_bitops)


# ---------------------------------------------------------------------------
# mutation
# ---------------------------------------------------------------------------

def _step(values, current, rng):
    values = sorted(values)
    i = int(np.argmin([abs(v - current) for v in values]))
    if values[i] != current:
        return values[i]
    d = 1 if rng.random() < 0.5 else -1
    if not 0 <= i + d < len(values):
        d = -d
    return values[i + d]


def mutate(plan: BitPlan, rate: float, rng, bit_set=(4, 6, 8, 16), group_set=GROUP_SIZES) -> BitPlan:
    """Move each non-frozen layer, with probability ``rate``, one step along
    the bit ladder or the group ladder (chosen uniformly)."""
    out = []
    for lid, e in plan.items():
        if e.frozen or rng.random() >= rate:
            out.append((lid, e))
            continue
        axis = int(rng.integers(2))
        if len(bit_set) < 2:
            axis = 1
        elif len(group_set) < 2:
            axis = 0
        if axis == 0:
            e = replace(e, bits=_step(bit_set, e.bits, rng))
        else:
            e = replace(e, group=_step(group_set, e.group, rng))
        out.append((lid, e))
    return BitPlan(out)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def pick_steps(kept, n_steps: int) -> list:
    kept = sorted(kept)
    if n_steps >= len(kept):
        return kept
    idx = np.unique(np.round(np.linspace(0, len(kept) - 1, n_steps)).astype(int))
    return [kept[i] for i in idx]


class DriftObjective:
    """Drift (mean ‖ε_student − ε_teacher‖²) of a candidate against cached teacher outputs."""

    def __init__(self, teacher, cache: TeacherCache, pack_cache: PackCache, act_mode: str = "daq",
                 static_scales: dict | None = None):
        self.teacher = teacher
        self.cache = cache
        self.pack_cache = pack_cache
        self.act_mode = act_mode
        self.static_scales = static_scales

    def student(self, cand: PlanCandidate):
        return build_student(self.teacher, cand.bitplan, cand.daq, pack_cache=self.pack_cache,
                             act_mode=self.act_mode, static_scales=self.static_scales)

    def __call__(self, cand: PlanCandidate, n_batches: int, n_steps: int, use_cache: bool = True) -> float:
        try:
            return self.cache.drift(self.student(cand), pick_steps(cand.kept, n_steps), n_batches, use_cache)
        except NumericFailure as exc:
            exc.fingerprint = cand.fingerprint
            raise


class Evaluator:
    """Attaches drift, cost components and the score to candidates."""

    def __init__(self, drift_fn, cost: CostModel, T: int, cfg: SearchConfig = SearchConfig(),
                 daq_active: bool = True):
        self.drift_fn = drift_fn
        self.cost = cost
        self.T = T
        self.cfg = cfg
        self.daq_active = daq_active
        self.calls: list = []

    def costs(self, cand: PlanCandidate) -> tuple[float, float, float]:
        lat = self.cost.latency(cand.bitplan, cand.daq, cand.kept, self.T, self.daq_active)
        ops = self.cost.bitops(cand.bitplan, cand.daq, cand.kept, self.T)
        return lat, ops, self.cost.memory(cand.bitplan)

    def evaluate(self, cand: PlanCandidate, stage) -> PlanCandidate:
        drift = float(self.drift_fn(cand, *stage))
        lat, ops, mem = self.costs(cand)
        c = self.cfg
        total = score(drift, lat, ops, c.b_lat, c.b_bitops, c.lam, c.mu)
        if not math.isfinite(total):
            raise NumericFailure(f"non-finite score for candidate {cand.fingerprint}", fingerprint=cand.fingerprint)
        return replace(cand, drift=drift, latency=lat, bitops=ops, mem=mem, score=total, fidelity=tuple(stage))

    def evaluate_many(self, cands, stage) -> list:
        self.calls.extend((c.fingerprint, tuple(stage)) for c in cands)
        if self.cfg.workers > 1 and len(cands) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                return list(pool.map(lambda c: self.evaluate(c, stage), cands))
        return [self.evaluate(c, stage) for c in cands]


def successive_halving(candidates, stages, evaluate_many) -> list:
    """Score survivors at each stage's fidelity and keep the better half (at least one).

    Survivors leave carrying the scores of the last stage. Ties keep the
    earlier candidate.
    """
    pool = list(candidates)
    if not pool:
        raise InvalidArgument("successive halving needs at least one candidate")
    for stage in stages:
        scored = evaluate_many(pool, stage)
        order = sorted(range(len(scored)), key=lambda i: (scored[i].score, i))
        pool = [scored[i] for i in order[: max(1, len(scored) // 2)]]
    return pool


# ---------------------------------------------------------------------------
# evolution
# ---------------------------------------------------------------------------

@dataclass
class EvolutionResult:
    best: PlanCandidate
    history: list          # rows (generation, best, median, n_evaluated)
    evaluated: list        # (generation, candidate) at final fidelity


def evolve(seed, cfg: SearchConfig, evaluator: Evaluator, rng=None, mutate_fn=None, kept=None,
           daq: DaqPolicy | None = None) -> EvolutionResult:
    """Elitist evolution with successive-halving screening and fingerprint dedup.

    ``seed`` is a BitPlan (wrapped with ``kept``/``daq``) or a PlanCandidate.
    ``mutate_fn(candidate, rng) -> candidate`` defaults to bit/group mutation.
    Generation 0 is the evaluated seed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(seed, BitPlan):
        if kept is None:
            kept = tuple(range(evaluator.T))
        seed = PlanCandidate(seed, kept, daq or DaqPolicy())
    if mutate_fn is None:
        def mutate_fn(c, r):
            return replace(c, bitplan=mutate(c.bitplan, cfg.mutation_rate, r, cfg.bit_set, cfg.group_set), fp="")
    final = cfg.stages[-1]
    seed = evaluator.evaluate_many([seed], final)[0]
    elites = [seed]
    seen = {seed.fingerprint}
    history = [(0, seed.score, seed.score, 1)]
    evaluated = [(0, seed)]
    for gen in range(1, cfg.generations + 1):
        n_off = cfg.population - len(elites)
        offspring, attempts = [], 0
        while len(offspring) < n_off and attempts < 50 * n_off:
            attempts += 1
            parent = elites[int(rng.integers(len(elites)))]
            child = mutate_fn(parent, rng)
            child = replace(child, drift=None, latency=None, bitops=None, mem=None, score=None, fidelity=None)
            if child.fingerprint in seen:
                continue
            seen.add(child.fingerprint)
            offspring.append(child)
        survivors = successive_halving(offspring, cfg.stages, evaluator.evaluate_many) if offspring else []
        evaluated.extend((gen, s) for s in survivors)
        pool = sorted(elites + survivors, key=lambda c: c.score)
        elites = pool[: cfg.elites]
        scores = [c.score for c in pool]
        history.append((gen, elites[0].score, float(np.median(scores)), len(offspring)))
    return EvolutionResult(elites[0], history, evaluated)


def mutate_daq_schedule(profile: DriftProfile, rho: float, cfg: SearchConfig):
    """Mutation for the joint search: nudge one bin's activation bits, or
    lengthen/shorten the kept schedule by ``cfg.schedule_jitter``."""
    n_cand = len(profile.candidates)
    n_tail = len(tail_set(profile.candidates, profile.T, rho))

    def fn(c: PlanCandidate, rng) -> PlanCandidate:
        if rng.random() < 0.5:
            b = int(rng.integers(3))
            bits = list(c.daq.bits)
            bits[b] = _step(ACT_BITS, bits[b], rng)
            return replace(c, daq=c.daq.with_bits(bits), fp="")
        k = len(c.kept)
        delta = max(1, int(round(cfg.schedule_jitter * k)))
        k = k + delta if rng.random() < 0.5 else k - delta
        k = min(max(k, n_tail), n_cand)
        return replace(c, kept=select_schedule(profile, k, rho).kept, fp="")

    return fn


def joint_search(base: PlanCandidate, profile: DriftProfile, cfg: SearchConfig, evaluator: Evaluator,
                 rho: float = 0.2, rng=None) -> EvolutionResult:
    """Evolve DAQ bits and schedule length with the weight plan held fixed."""
    return evolve(base, cfg, evaluator, rng, mutate_fn=mutate_daq_schedule(profile, rho, cfg))


def feasible(c: PlanCandidate, b_lat=None, b_mem=None) -> bool:
    return ((b_lat is None or c.latency <= b_lat * (1 + BUDGET_RTOL))
            and (b_mem is None or c.mem <= b_mem * (1 + BUDGET_RTOL)))


# ---------------------------------------------------------------------------
# budgeted greedy planner
# ---------------------------------------------------------------------------

@dataclass
class BudgetPlan:
    bitplan: BitPlan
    kept: tuple
    tail: tuple
    c_lat: float
    c_mem: float
    moves: list


def default_bit_options(plan: BitPlan, bit_set) -> dict:
    """Per-layer options: the bit set capped at the layer's current bits; frozen layers fixed."""
    opts = {}
    for lid, e in plan.items():
        if e.frozen:
            opts[lid] = (e.bits,)
        else:
            opts[lid] = tuple(sorted({b for b in bit_set if b <= e.bits} | {e.bits}))
    return opts


def joint_budget_plan(plan: BitPlan, steps, drift: dict, sensitivity: dict, cost: CostModel,
                      policy: DaqPolicy, T: int, b_lat: float, b_mem: float, rho: float = 0.2,
                      eps: float = 1e-8, bit_options: dict | None = None, bit_set=(4, 6, 8, 16),
                      normalize: str | None = "share", daq_active: bool = True, polish: bool = True,
                      orders=("mixed", "bits", "steps")) -> BudgetPlan:
    """Greedy joint choice of bit downgrades and step removals under latency and memory budgets.

    Starts from every layer at its highest option and every step kept. While
    over budget, the lowest-drift non-tail step (score c_step/(ε + D_e))
    competes with the best one-step bit downgrade (score Δc_lat/(ε + s_M),
    Δc_lat summed over the kept steps, held in a lazily revalidated heap);
    the higher score is applied. Step removal only helps latency, so when just
    memory is over budget the downgrade saving the most bytes per unit
    sensitivity is taken instead.

    Drift and sensitivity are normalized before scoring (``normalize``); the
    default expresses both as shares of their totals, so removing a step and
    downgrading a layer are priced in comparable fractions of fragility.

    The descent runs once per entry of ``orders`` (``mixed`` as above,
    ``bits`` and ``steps`` exhausting one move type first); each result is
    polished and the one with the lowest drift proxy is returned.

    With ``polish`` each greedy result is then improved by local search on the
    additive drift proxy Σ_removed D_e + Σ_ℓ s_M(ℓ)·levels_dropped(ℓ): small
    combinations of restores, removals and one-level bit changes are applied
    while they lower the proxy and keep both budgets met. Every applied move
    is logged.

    Raises :class:`BudgetInfeasible` naming the binding resource if the
    budgets are out of reach even at minimum bits with only the tail kept.
    """
    if b_lat <= 0 or b_mem <= 0:
        raise InvalidArgument("budgets must be positive")
    # totals summed in a different order than the caller's may differ in the last ulp
    b_lat, b_mem = b_lat * (1 + BUDGET_RTOL), b_mem * (1 + BUDGET_RTOL)
    steps = sorted(int(t) for t in steps)
    opts = bit_options or default_bit_options(plan, bit_set)
    tail = tail_set(steps, T, rho)
    d_e = _normalized({t: drift[t] for t in steps}, normalize)
    sensitivity = _normalized({lid: sensitivity[lid] for lid in plan}, normalize)
    ids = list(plan)
    table = _CostTable(plan, opts, steps, cost, policy, T, daq_active)

    floor = {lid: 0 for lid in ids}
    lat_min, mem_min = table.totals(floor, set(tail))
    if mem_min > b_mem:
        raise BudgetInfeasible(f"memory budget {b_mem:.6g} < minimum achievable {mem_min:.6g}", "memory",
                               required=mem_min)
    if lat_min > b_lat:
        raise BudgetInfeasible(f"latency budget {b_lat:.6g} < minimum achievable {lat_min:.6g}", "latency",
                               required=lat_min)

    runs = []
    for order_name in orders:
        level, kept, moves = _greedy(table, ids, opts, steps, tail, d_e, sensitivity, b_lat, b_mem, eps, order_name)
        c_lat, c_mem = table.totals(level, kept)
        if polish:
            c_lat, c_mem = _polish(table, level, kept, set(tail), d_e, sensitivity, opts, b_lat, b_mem, moves)
        runs.append((_proxy(level, kept, steps, d_e, sensitivity, opts), len(runs), level, kept, moves, c_lat, c_mem))
    _, idx, level, kept, moves, c_lat, c_mem = min(runs, key=lambda r: r[:2])
    if len(orders) > 1:
        moves.insert(0, {"kind": "start", "order": orders[idx]})
    bitplan = BitPlan([(lid, replace(plan[lid], bits=opts[lid][level[lid]])) for lid in ids])
    return BudgetPlan(bitplan, tuple(sorted(kept)), tuple(tail), c_lat, c_mem, moves)


def _proxy(level, kept, steps, d_e, sens, opts) -> float:
    """Additive drift proxy: removed-step drift plus sensitivity per bit level dropped."""
    return (sum(d_e[t] for t in steps if t not in kept)
            + sum(sens[lid] * (len(opts[lid]) - 1 - lv) for lid, lv in level.items()))


def _greedy(table, ids, opts, steps, tail, d_e, sensitivity, b_lat, b_mem, eps, order_name="mixed"):
    """One greedy descent from max bits and the full schedule.

    ``mixed`` applies the higher of the step and bit scores; ``bits`` and
    ``steps`` exhaust one move type before touching the other.
    """
    level = {lid: len(opts[lid]) - 1 for lid in ids}
    kept = set(steps)
    removable = sorted((t for t in steps if t not in set(tail)), key=lambda t: (d_e[t], t))
    c_lat, c_mem = table.totals(level, kept)
    order = {lid: i for i, lid in enumerate(ids)}

    def bit_score(lid):
        if level[lid] == 0:
            return None
        return table.lat_gain(lid, level[lid], kept) / (eps + sensitivity[lid])

    heap = []

    def push(lid):
        s = bit_score(lid)
        if s is not None:
            heapq.heappush(heap, (-s, order[lid], lid, level[lid]))

    def top_bit():
        while heap:
            neg, _, lid, lv = heap[0]
            if level[lid] != lv:
                heapq.heappop(heap)
                continue
            s = bit_score(lid)
            if abs(s + neg) > 1e-12 * max(1.0, abs(s)):
                heapq.heapreplace(heap, (-s, order[lid], lid, lv))
                continue
            return s, lid
        return None

    def mem_bit():
        best = None
        for lid in ids:
            if level[lid] > 0:
                s = table.mem_gain(lid, level[lid]) / (eps + sensitivity[lid])
                if best is None or s > best[0]:
                    best = (s, lid)
        return best

    def prefer_step(step, bit):
        if step is None or c_lat <= b_lat:
            return False
        if bit is None or order_name == "steps":
            return True
        if order_name == "bits":
            return False
        return step[0] > bit[0]

    for lid in ids:
        push(lid)
    moves = []
    while c_lat > b_lat or c_mem > b_mem:
        step = None
        if removable:
            t = removable[0]
            step = (table.step_cost(level, t) / (eps + d_e[t]), t)
        bit = top_bit() if c_lat > b_lat else mem_bit()
        if prefer_step(step, bit):
            s, t = step
            removable.pop(0)
            kept.discard(t)
            moves.append({"kind": "step", "t": t, "score": s})
        elif bit is not None:
            s, lid = bit
            moves.append({"kind": "bit", "layer": lid, "from": opts[lid][level[lid]],
                          "to": opts[lid][level[lid] - 1], "score": s})
            level[lid] -= 1
            push(lid)  # re-insert the next cheaper move; stale entries are skipped lazily
        else:
            resource = "memory" if c_mem > b_mem else "latency"
            raise BudgetInfeasible(f"moves exhausted while over the {resource} budget", resource)
        c_lat, c_mem = table.totals(level, kept)
        moves[-1].update(c_lat=c_lat, c_mem=c_mem)
    return level, kept, moves


def _normalized(values: dict, how: str | None) -> dict:
    """``share``: divide by the total; ``max``: divide by the largest; None: as given."""
    if how is None:
        return dict(values)
    if how not in ("share", "max"):
        raise InvalidArgument(f"unknown normalization {how!r}")
    if any(v < 0 for v in values.values()):
        raise InvalidArgument("drift and sensitivity values must be nonnegative")
    den = sum(values.values()) if how == "share" else max(values.values())
    return {k: (v / den if den > 0 else 0.0) for k, v in values.items()}


class _CostTable:
    """Per-layer latency/memory lookups so plan totals cost O(layers·act-bit values)."""

    def __init__(self, plan, opts, steps, cost, policy, T, daq_active):
        self.a_of = {t: policy.bits_at(t, T) for t in steps}
        self.a_values = sorted(set(self.a_of.values()))
        self.lat = {}
        self.mem = {}
        for lid, e in plan.items():
            self.lat[lid] = [{a: cost.layer_step_cost(lid, replace(e, bits=b), a, daq_active) for a in self.a_values}
                             for b in opts[lid]]
            self.mem[lid] = [cost.c_mem(lid, b, e.group, fp=b >= 16) for b in opts[lid]]
        self.aux = cost.aux_bytes

    def counts(self, kept):
        n = dict.fromkeys(self.a_values, 0)
        for t in kept:
            n[self.a_of[t]] += 1
        return n

    def totals(self, level, kept):
        n = self.counts(kept)
        lat = sum(self.lat[lid][lv][a] * c for lid, lv in level.items() for a, c in n.items())
        mem = sum(self.mem[lid][lv] for lid, lv in level.items()) + self.aux
        return lat, mem

    def step_cost(self, level, t):
        a = self.a_of[t]
        return sum(self.lat[lid][lv][a] for lid, lv in level.items())

    def lat_gain(self, lid, lv, kept):
        n = self.counts(kept)
        return sum((self.lat[lid][lv][a] - self.lat[lid][lv - 1][a]) * c for a, c in n.items())

    def mem_gain(self, lid, lv):
        return self.mem[lid][lv] - self.mem[lid][lv - 1]


def _polish(table, level, kept, tail, d_e, sens, opts, b_lat, b_mem, moves, max_combos: int = 20000):
    """Local search on the additive drift proxy; mutates ``level``/``kept`` in place.

    The neighbourhood is every multiset of up to ``r`` elementary moves
    (restore a step, remove a non-tail step, raise or lower a layer one bit
    level) that contains at least one restore or raise, with ``r`` the largest
    size in 2..4 whose neighbourhood has at most ``max_combos`` members (pairs
    are always searched). The best feasible net improvement is applied until
    none remains.
    """
    steps = sorted(d_e)

    def gain(mv):  # proxy drift removed by the move (negative for new moves)
        kind, x = mv
        if kind in ("restore", "remove"):
            return d_e[x] if kind == "restore" else -d_e[x]
        return sens[x] if kind == "up" else -sens[x]

    def trial(combo):
        lv, kp = dict(level), set(kept)
        for kind, x in combo:
            if kind == "restore":
                kp.add(x)
            elif kind == "remove":
                kp.discard(x)
            else:
                lv[x] += 1 if kind == "up" else -1
                if not 0 <= lv[x] < len(opts[x]):
                    return None
        return lv, kp

    def admissible(combo):
        if not any(m[0] in ("restore", "up") for m in combo):
            return False
        seen = {}
        for kind, x in combo:
            if kind in ("restore", "remove") and x in seen:
                return False  # a step moves at most once
            if seen.get(x, kind) != kind:
                return False  # never raise and lower the same layer
            seen[x] = kind
        return True

    while True:
        elems = [("restore", t) for t in steps if t not in kept]
        elems += [("up", lid) for lid in level if level[lid] + 1 < len(opts[lid])]
        elems += [("remove", t) for t in steps if t in kept and t not in tail]
        elems += [("down", lid) for lid in level if level[lid] > 0]
        size = 2
        while size < 4 and math.comb(len(elems) + size, size + 1) <= max_combos:
            size += 1
        best = None
        for r in range(1, size + 1):
            for combo in itertools.combinations_with_replacement(elems, r):
                g = sum(gain(m) for m in combo)
                if g <= 1e-12 or (best is not None and g <= best[0]) or not admissible(combo):
                    continue
                st = trial(combo)
                if st is None:
                    continue
                lat, mem = table.totals(*st)
                if lat <= b_lat and mem <= b_mem:
                    best = (g, combo, st, lat, mem)
        if best is None:
            return table.totals(level, kept)
        g, combo, (lv, kp), lat, mem = best
        level.clear()
        level.update(lv)
        kept.clear()
        kept.update(kp)
        moves.append({"kind": "polish", "moves": [list(m) for m in combo], "gain": g, "c_lat": lat, "c_mem": mem})
