"""Run configuration and the staged pipeline behind the command line.

Every stage reads its predecessors' files from the run directory, writes its
own, and rewrites ``config.json`` with the effective configuration. Nothing
written depends on the clock, the worker count or the host.

Run directory contents by stage::

    calibrate    teacher.json calibration.json seed_plan.json reservoirs/<layer>.npy
    refine       refined_plan.json evolution.csv
    daq-profile  daq.json daq_profile.csv
    prune        drift.csv schedule.json
    plan         plan.json pareto.csv joint_evolution.csv
    deploy       deploy.json ablation.csv
    report       report.json bits_heatmap.csv
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .calibration import CalibrationConfig, calibrate, uniform_seed
from .daq import DaqPolicy
from .deploy import (ABLATION_HEADER, TrajectoryObjective, Variant, build_report, latent_mse, run_ablations,
                     sample, wall_clock, write_bits_heatmap, write_csv, write_json)
from .errors import BudgetInfeasible, InvalidArgument
from .plans import BitPlan
from .quant import CostModel
from .schedule import DriftProfile, measure_drift, read_drift_csv, select_schedule, write_drift_csv
from .search import (Evaluator, DriftObjective, PlanCandidate, SearchConfig, evolve, feasible, joint_budget_plan,
                     joint_search)
from .student import PackCache, TeacherCache, build_student, static_scales_from_envelopes
from .toy import DiTConfig, TinyDiT, cosine_schedule, latent_pool, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

RUNS_ENV = "DIFFPLAN_RUNS"
STAGES = ("calibrate", "refine", "daq-profile", "prune", "plan", "deploy", "report")


def _search_defaults():
    return {"population": 12, "elites": 4, "generations": 6, "mutation_rate": 0.10,
            "stages": [[2, 6], [6, 12]], "lam": 0.5, "mu": 0.5, "eps": 1e-8,
            "bit_set": [4, 6, 8, 16], "group_set": [32, 64, 128, 192, 288],
            "eval_samples": 48, "eval_batch": 8}


def _joint_defaults():
    return {"population": 6, "elites": 2, "generations": 3, "stages": [[1], [2]], "batch_size": 4,
            "schedule_jitter": 0.10, "weights": "planned"}  # weights: "planned" or "int8"


@dataclass
class RunConfig:
    seed: int = 0
    model_seed: int = 42
    model: dict = field(default_factory=lambda: asdict(DiTConfig()))
    calibration: dict = field(default_factory=lambda: asdict(CalibrationConfig()))
    search: dict = field(default_factory=_search_defaults)
    joint: dict = field(default_factory=_joint_defaults)
    daq: dict = field(default_factory=lambda: DaqPolicy().to_dict())
    b_lat: float | None = None   # None: latency of the refined plan on the count-k schedule
    b_mem: float | None = None   # None: memory of the refined plan
    k: int | None = None         # None: T // 2
    rho: float = 0.2
    planner_sensitivity: str = "blend"  # or "composite"
    drift_batch: int = 8
    deploy: dict = field(default_factory=lambda: {"n_images": 8, "heldout_samples": 16, "batch_size": 8})
    wall_clock: bool = False

    @property
    def T(self) -> int:
        return int(self.model["T"])

    @property
    def k_eff(self) -> int:
        return self.T // 2 if self.k is None else int(self.k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        base = asdict(cls())
        unknown = set(doc) - set(base)
        if unknown:
            raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
        return cls(**_merge(base, doc))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    def calibration_config(self) -> CalibrationConfig:
        d = dict(self.calibration)
        d["sweep_bits"] = tuple(d["sweep_bits"])
        d["sweep_groups"] = tuple(d["sweep_groups"])
        return CalibrationConfig(**d)

    def search_config(self, **budgets) -> SearchConfig:
        s = self.search
        return SearchConfig(population=s["population"], elites=s["elites"], generations=s["generations"],
                            mutation_rate=s["mutation_rate"], stages=tuple(map(tuple, s["stages"])),
                            lam=s["lam"], mu=s["mu"], eps=s["eps"], bit_set=tuple(s["bit_set"]),
                            group_set=tuple(s["group_set"]), **budgets)

    def joint_config(self, **budgets) -> SearchConfig:
        j, s = self.joint, self.search
        return SearchConfig(population=j["population"], elites=j["elites"], generations=j["generations"],
                            stages=tuple(map(tuple, j["stages"])), lam=s["lam"], mu=s["mu"], eps=s["eps"],
                            schedule_jitter=j["schedule_jitter"], **budgets)

    def policy(self) -> DaqPolicy:
        return DaqPolicy.from_dict(self.daq)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def default_run_dir(seed: int) -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs")) / f"seed{seed}"


class MissingArtifact(FileNotFoundError):
    pass


class Run:
    """A run directory plus lazily loaded shared objects."""

    def __init__(self, root, cfg: RunConfig, workers: int = 1):
        # the worker count is an execution setting: it never changes outputs, so it is not recorded
        self.workers = workers
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.sched = cosine_schedule(cfg.T)
        self._teacher = None
        self._pack = None

    def path(self, name) -> Path:
        return self.root / name

    def need(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {p} (run the stage that produces {name} first)")
        return p

    def read_json(self, name):
        with open(self.need(name)) as fh:
            return json.load(fh)

    @property
    def teacher(self) -> TinyDiT:
        if self._teacher is None:
            self._teacher = load_checkpoint(self.need("teacher.json"))
        return self._teacher

    @property
    def cost(self) -> CostModel:
        return CostModel.from_model(self.teacher)

    def reservoirs(self) -> dict:
        d = self.need("reservoirs")
        return {lid: np.load(d / f"{lid}.npy") for lid in self.teacher.layer_ids}

    @property
    def pack_cache(self) -> PackCache:
        if self._pack is None:
            self._pack = PackCache(self.teacher, self.reservoirs(), method="gptq")
        return self._pack

    def sensitivity(self) -> dict:
        """Planner sensitivity: the PCA-curvature blend (strictly positive) or the composite score."""
        if self.cfg.planner_sensitivity not in ("blend", "composite"):
            raise InvalidArgument(f"planner_sensitivity must be 'blend' or 'composite', "
                                  f"got {self.cfg.planner_sensitivity!r}")
        key = "score" if self.cfg.planner_sensitivity == "blend" else "composite"
        return {s["layer_id"]: float(s[key]) for s in self.read_json("calibration.json")["layers"]}

    def envelopes(self) -> dict:
        return {s["layer_id"]: s["group_envelopes"] for s in self.read_json("calibration.json")["layers"]}

    def write_config(self) -> None:
        self.cfg.save(self.path("config.json"))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_calibrate(run: Run) -> None:
    cfg = run.cfg
    teacher = TinyDiT(DiTConfig(**cfg.model), seed=cfg.model_seed)
    save_checkpoint(teacher, run.path("teacher.json"))
    run._teacher = teacher
    res = calibrate(teacher, run.sched, cfg.calibration_config(), seed=cfg.seed)
    res.save_stats(run.path("calibration.json"))
    res.seed_plan.save(run.path("seed_plan.json"))
    rdir = run.path("reservoirs")
    rdir.mkdir(exist_ok=True)
    for lid, arr in res.reservoirs().items():
        np.save(rdir / f"{lid}.npy", arr)
    run._pack = None


def _teacher_cache(run: Run, seed_offset: int, n: int, batch: int) -> TeacherCache:
    cfg = run.cfg
    pool = latent_pool(n, cfg.seed + seed_offset)
    labels = np.arange(n) % run.teacher.config.n_classes
    return TeacherCache(run.teacher, run.sched, pool, labels, batch_size=batch, seed=cfg.seed + seed_offset)


def stage_refine(run: Run) -> None:
    cfg = run.cfg
    seed_plan = BitPlan.load(run.need("seed_plan.json"))
    policy = cfg.policy()
    full = tuple(range(cfg.T))
    cost = run.cost
    # score budgets: the seed plan's own costs, so refinement may not get more expensive for free
    b_lat = cost.latency(seed_plan, policy, full, cfg.T)
    b_bitops = cost.bitops(seed_plan, policy, full, cfg.T)
    scfg = replace(cfg.search_config(b_lat=b_lat, b_bitops=b_bitops), workers=run.workers)
    cache = _teacher_cache(run, 101, cfg.search["eval_samples"], cfg.search["eval_batch"])
    objective = DriftObjective(run.teacher, cache, run.pack_cache)
    ev = Evaluator(objective, cost, cfg.T, scfg)
    res = evolve(seed_plan, scfg, ev, np.random.default_rng([cfg.seed, 2]), kept=full, daq=policy)
    res.best.bitplan.save(run.path("refined_plan.json"))
    write_csv(run.path("evolution.csv"), ("generation", "best", "median", "n_offspring"), res.history)


def stage_daq_profile(run: Run) -> None:
    cfg = run.cfg
    policy = cfg.policy()
    policy.save(run.path("daq.json"))
    plan = BitPlan.load(run.need("refined_plan.json"))
    student = build_student(run.teacher, plan, policy, pack_cache=run.pack_cache)
    d = cfg.deploy
    _, rows = sample(student, range(cfg.T), min(d["batch_size"], d["n_images"]), cfg.seed + 3, run.sched, policy)
    write_csv(run.path("daq_profile.csv"), ("t", "bin", "a_bits", "mean_tau"), sorted(rows))


def stage_prune(run: Run) -> None:
    cfg = run.cfg
    plan = BitPlan.load(run.need("refined_plan.json"))
    policy = DaqPolicy.load(run.need("daq.json"))
    student = build_student(run.teacher, plan, policy, pack_cache=run.pack_cache)
    n = cfg.drift_batch
    pool = latent_pool(n, cfg.seed + 4)
    labels = np.arange(n) % run.teacher.config.n_classes
    profile = measure_drift(run.teacher, student, pool, labels, range(cfg.T), run.sched, n, seed=cfg.seed + 4)
    sched = select_schedule(profile, cfg.k_eff, cfg.rho)
    write_drift_csv(run.path("drift.csv"), profile, sched)
    write_json(run.path("schedule.json"), {"kept": list(sched.kept), "tail": list(sched.tail), "k": sched.k,
                                           "rho": sched.rho, "T": sched.T, "batch_size": profile.batch_size})


def _candidate_builder(run: Run):
    def build(c: PlanCandidate):
        return build_student(run.teacher, c.bitplan, c.daq, pack_cache=run.pack_cache)
    return build


def _variant_builder(run: Run, static_scales=None):
    def build(v: Variant):
        return build_student(run.teacher, v.plan, v.policy, pack_cache=run.pack_cache, act_mode=v.act_mode,
                             static_scales=static_scales)
    return build


def plan_budgets(run: Run, plan: BitPlan, policy: DaqPolicy, count_k_kept) -> tuple[float, float]:
    cfg = run.cfg
    cost = run.cost
    b_lat = cfg.b_lat if cfg.b_lat is not None else cost.latency(plan, policy, count_k_kept, cfg.T)
    b_mem = cfg.b_mem if cfg.b_mem is not None else cost.memory(plan)
    return float(b_lat), float(b_mem)


def stage_plan(run: Run) -> None:
    cfg = run.cfg
    plan = BitPlan.load(run.need("refined_plan.json"))
    policy = DaqPolicy.load(run.need("daq.json"))
    profile, sched = read_drift_csv(run.need("drift.csv"), cfg.T, rho=cfg.rho)
    cost = run.cost
    b_lat, b_mem = plan_budgets(run, plan, policy, sched.kept)
    phase_a = joint_budget_plan(plan, profile.candidates, profile.delta, run.sensitivity(), cost, policy, cfg.T,
                                b_lat, b_mem, rho=cfg.rho, eps=cfg.search["eps"],
                                bit_set=tuple(cfg.search["bit_set"]))
    weights = cfg.joint["weights"]
    if weights == "planned":
        base = PlanCandidate(phase_a.bitplan, phase_a.kept, policy)
    elif weights == "int8":
        # every layer at W8 with its planned group size, frozen or not
        base = PlanCandidate(BitPlan([(lid, replace(e, bits=8)) for lid, e in phase_a.bitplan.items()]),
                             phase_a.kept, policy)
    else:
        raise InvalidArgument(f"joint.weights must be 'planned' or 'int8', got {weights!r}")
    b_bitops = cost.bitops(base.bitplan, policy, base.kept, cfg.T)
    jcfg = replace(cfg.joint_config(b_lat=b_lat, b_mem=b_mem, b_bitops=b_bitops), workers=run.workers)
    objective = TrajectoryObjective(run.teacher, run.sched, _candidate_builder(run), range(cfg.T), seed=cfg.seed + 5,
                                    batch_size=cfg.joint["batch_size"])
    ev = Evaluator(objective, cost, cfg.T, jcfg)
    res = joint_search(base, DriftProfile(profile.delta, profile.batch_size, cfg.T), jcfg, ev, cfg.rho,
                       np.random.default_rng([cfg.seed, 6]))
    final_stage = jcfg.stages[-1]
    pool = [c for _, c in res.evaluated if c.fidelity == final_stage]
    ok = [c for c in pool if feasible(c, b_lat, b_mem)]
    if not ok:  # only reachable with int8 weights; the Phase A plan itself is always feasible
        over = "memory" if cost.memory(base.bitplan) > b_mem else "latency"
        raise BudgetInfeasible(f"no joint-search candidate with {weights} weights meets the budgets", over)
    best = min(ok, key=lambda c: c.score)
    write_csv(run.path("joint_evolution.csv"), ("generation", "best", "median", "n_offspring"), res.history)
    write_csv(run.path("pareto.csv"),
              ("generation", "fingerprint", "drift", "latency_units", "bitops", "mem_bytes", "score", "feasible"),
              [(g, c.fingerprint, c.drift, c.latency, c.bitops, c.mem, c.score, int(feasible(c, b_lat, b_mem)))
               for g, c in res.evaluated])
    write_json(run.path("plan.json"), {
        "bitplan": best.bitplan.to_dict(),
        "kept": list(best.kept),
        "tail": list(phase_a.tail),
        "rho": cfg.rho,
        "daq": best.daq.to_dict(),
        "budgets": {"b_lat": b_lat, "b_mem": b_mem, "b_bitops": b_bitops},
        "score": {"drift_mse": best.drift, "latency_units": best.latency, "bitops": best.bitops,
                  "mem_bytes": best.mem, "total": best.score},
        "phase_a": {"kept": list(phase_a.kept), "c_lat": phase_a.c_lat, "c_mem": phase_a.c_mem,
                    "bitplan": phase_a.bitplan.to_dict()},
        "moves": phase_a.moves,
        "fingerprint": best.fingerprint,
    })


def load_plan(run: Run):
    doc = run.read_json("plan.json")
    return BitPlan.from_dict(doc["bitplan"]), DaqPolicy.from_dict(doc["daq"]), tuple(doc["kept"]), doc


def deploy_variants(run: Run) -> list:
    cfg = run.cfg
    plan, policy, kept, _ = load_plan(run)
    full = tuple(range(cfg.T))
    ids = run.teacher.layer_ids
    return [
        Variant("full", plan, policy, kept),
        Variant("no_daq", plan, policy, kept, act_mode="static"),
        Variant("no_prune", plan, policy, full),
        Variant("uniform_w4_g288", uniform_seed(ids, 4, 288), policy, kept),
        Variant("uniform_w8_g32", BitPlan.uniform(ids, 8, 32), policy, kept),
        Variant("fp", BitPlan.uniform(ids, 32, 128), policy, full),
    ]


def stage_deploy(run: Run) -> None:
    cfg = run.cfg
    d = cfg.deploy
    static = static_scales_from_envelopes(run.envelopes())
    build = _variant_builder(run, static)
    variants = deploy_variants(run)
    rows = run_ablations(run.teacher, run.sched, variants, build, run.cost, d["n_images"], cfg.seed + 8,
                         workers=run.workers)
    write_csv(run.path("ablation.csv"), ABLATION_HEADER, rows)
    full = variants[0]
    student = build(full)
    _, trace = sample(student, full.kept, min(d["batch_size"], d["n_images"]), cfg.seed + 8, run.sched, full.policy)
    held = _teacher_cache(run, 909, d["heldout_samples"], min(d["batch_size"], d["heldout_samples"]))
    doc = {"latent_mse": rows[0]["latent_mse"], "heldout_drift": held.drift(student, full.kept),
           "tau_trace": trace, "n_images": d["n_images"], "forwards_per_image": len(full.kept)}
    if cfg.wall_clock:
        doc["wall_clock_sec"] = wall_clock(lambda: sample(student, full.kept, 1, 0, run.sched, full.policy))
    write_json(run.path("deploy.json"), doc)


def stage_report(run: Run) -> None:
    cfg = run.cfg
    plan, policy, kept, pdoc = load_plan(run)
    dep = run.read_json("deploy.json")
    rows = []
    if run.path("ablation.csv").exists():
        with open(run.path("ablation.csv"), newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({k: (r[k] if k == "variant" else float(r[k])) for k in ABLATION_HEADER})
    write_bits_heatmap(run.path("bits_heatmap.csv"), plan)
    files = [f for f in ("drift.csv", "evolution.csv", "joint_evolution.csv", "pareto.csv", "bits_heatmap.csv",
                         "ablation.csv", "daq_profile.csv") if run.path(f).exists()]
    doc = build_report(plan, policy, kept, pdoc["tail"], run.cost, cfg.T, latent_mse_value=dep["latent_mse"],
                       heldout_drift=dep["heldout_drift"], tau_trace=[tuple(r) for r in dep["tau_trace"]],
                       ablation_rows=rows, files=files, wall=dep.get("wall_clock_sec"))
    write_json(run.path("report.json"), doc)


STAGE_FUNCS = {
    "calibrate": stage_calibrate,
    "refine": stage_refine,
    "daq-profile": stage_daq_profile,
    "prune": stage_prune,
    "plan": stage_plan,
    "deploy": stage_deploy,
    "report": stage_report,
}


def run_stage(name: str, run: Run) -> None:
    run.write_config()
    log.info("stage %s -> %s", name, run.root)
    STAGE_FUNCS[name](run)


def run_all(run: Run) -> None:
    for name in STAGES:
        run_stage(name, run)
