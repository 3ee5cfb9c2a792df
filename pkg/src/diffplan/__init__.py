"""Joint timestep pruning and layer-wise precision planning for a toy diffusion transformer."""

from .daq import DaqPolicy, daq_quantize, phase_bin
from .errors import BudgetInfeasible, InvalidArgument, NumericFailure
from .plans import BitPlan, LayerPlan
from .quant import CostModel, bitops, dequantize, gptq_pack, int_gemm, model_size_bytes, quantize_grouped
from .schedule import gini, lorenz_coverage, measure_drift, select_schedule
from .search import SearchConfig, evolve, joint_budget_plan, mutate, score, successive_halving
from .student import attach_daq, build_student
from .toy import DiTConfig, TinyDiT, cosine_schedule, ddim_step

__all__ = [
    "BitPlan", "BudgetInfeasible", "CostModel", "DaqPolicy", "DiTConfig", "InvalidArgument", "LayerPlan",
    "NumericFailure", "SearchConfig", "TinyDiT", "attach_daq", "bitops", "build_student", "cosine_schedule",
    "daq_quantize", "ddim_step",
    "dequantize", "evolve", "gini", "gptq_pack", "int_gemm", "joint_budget_plan", "lorenz_coverage",
    "measure_drift", "model_size_bytes", "mutate", "phase_bin", "quantize_grouped", "score",
    "select_schedule", "successive_halving",
]
