"""Plan bit-widths and kept steps together under shrinking latency budgets,
then sample with each plan and compare against the teacher.

    python3 demos/03_budget_planner.py
"""

import numpy as np

from diffplan import CostModel, TinyDiT, build_student, cosine_schedule, joint_budget_plan, measure_drift
from diffplan.calibration import CalibrationConfig, calibrate
from diffplan.daq import DaqPolicy
from diffplan.deploy import latent_mse, sample
from diffplan.errors import BudgetInfeasible
from diffplan.student import PackCache
from diffplan.toy import latent_pool

teacher = TinyDiT(seed=42)
sched = cosine_schedule(100)
calib = calibrate(teacher, sched, CalibrationConfig(n_samples=128, signals=False), seed=0)
pack = PackCache(teacher, calib.reservoirs())
policy = DaqPolicy.uniform(8)
cost = CostModel.from_model(teacher)

# tier-derived seed plan and the drift of its student at every step
seed_plan = calib.seed_plan
seed_student = build_student(teacher, seed_plan, policy, pack_cache=pack)
profile = measure_drift(teacher, seed_student, latent_pool(8, seed=1), np.arange(8), range(100), sched)
full_lat = cost.latency(seed_plan, policy, range(100), 100)
mem = cost.memory(seed_plan)
print(f"seed plan: bits histogram {dict(sorted(seed_plan.counts().items()))}, {mem / 1024:.1f} KiB, "
      f"latency {full_lat:.3g} units over 100 steps")

ref, _ = sample(teacher, range(100), 4, seed=0, sched=sched)
print("\nbudget   k  bits histogram              latency/budget  latent mse")
for frac in (1.0, 0.7, 0.5, 0.3, 0.1):
    try:
        res = joint_budget_plan(seed_plan, range(100), profile.delta, calib.sensitivity("score"), cost, policy,
                                100, frac * full_lat, mem)
    except BudgetInfeasible as exc:
        print(f"{frac:5.0%}  infeasible ({exc.resource})")
        continue
    student = build_student(teacher, res.bitplan, policy, pack_cache=pack)
    out, _ = sample(student, res.kept, 4, seed=0, sched=sched, policy=policy)
    hist = dict(sorted(res.bitplan.counts().items()))
    print(f"{frac:5.0%}  {len(res.kept):3d}  {str(hist):26s}  {res.c_lat / (frac * full_lat):.3f}"
          f"           {latent_mse(out, ref):.4e}")
