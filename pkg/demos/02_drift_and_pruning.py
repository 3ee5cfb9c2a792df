"""Measure per-timestep teacher-student drift of a W8 student and keep the
steps that carry most of it.

    python3 demos/02_drift_and_pruning.py
"""

import numpy as np

from diffplan import BitPlan, TinyDiT, build_student, cosine_schedule, gini, lorenz_coverage, measure_drift
from diffplan import select_schedule
from diffplan.daq import DaqPolicy
from diffplan.deploy import latent_mse, sample
from diffplan.toy import latent_pool

teacher = TinyDiT(seed=42)
sched = cosine_schedule(100)
student = build_student(teacher, BitPlan.uniform(teacher.layer_ids, 8, 64), DaqPolicy.uniform(8))

x0 = latent_pool(16, seed=1)
profile = measure_drift(teacher, student, x0, np.arange(16) % 10, range(100), sched, batch_size=8)
d = profile.values()
print("drift by decile of t (mean δ):")
for lo in range(0, 100, 10):
    print(f"  t {lo:2d}-{lo + 9:2d}  {d[lo:lo + 10].mean():.3e}")
print(f"gini of δ: {gini(d):.3f}")

print("\n  k  coverage  latent mse vs full-schedule teacher")
ref, _ = sample(teacher, range(100), 4, seed=0, sched=sched)
for k in (100, 70, 50, 30):
    s = select_schedule(profile, k, rho=0.2)
    out, _ = sample(student, s.kept, 4, seed=0, sched=sched, policy=student.policy)
    print(f"{k:3d}  {lorenz_coverage(profile, k, 0.2):.3f}     {latent_mse(out, ref):.4e}")

s = select_schedule(profile, 50, rho=0.2)
print(f"\nk=50 keeps {len(s.tail)} tail steps ({s.tail[0]}..{s.tail[-1]}) "
      f"and {s.k - len(s.tail)} others, earliest kept t={s.kept[0]}")
