"""Pack one toy layer with round-to-nearest and with GPTQ, then run it through
the integer kernel.

    python3 demos/01_pack_one_layer.py
"""

import numpy as np

from diffplan import CostModel, TinyDiT, cosine_schedule, dequantize, gptq_pack, int_gemm, quantize_grouped
from diffplan.calibration import CalibrationConfig, calibrate
from diffplan.daq import daq_quantize_rows
from diffplan.quant import output_mse

teacher = TinyDiT(seed=42)
sched = cosine_schedule(100)

# layer inputs recorded while the teacher denoises a small calibration set
calib = calibrate(teacher, sched, CalibrationConfig(n_samples=256, signals=False), seed=0)
lid = "blocks.1.mlp_fc2"
X = calib.reservoirs()[lid][:512]
W = teacher.weights[lid]
print(f"{lid}: weight {W.shape}, {len(X)} calibration rows")

print("\nbits group   RTN mse      GPTQ mse")
for bits, group in [(4, 64), (4, 288), (6, 64), (8, 128)]:
    rtn = output_mse(X, W, dequantize(quantize_grouped(W, bits, group)))
    gptq = output_mse(X, W, dequantize(gptq_pack(W, X, bits, group, lid)))
    print(f"{bits:4d} {group:5d}  {rtn:.3e}    {gptq:.3e}")

# W8A8: activations quantized per row and group at run time, then an integer matmul
qw = gptq_pack(W, X, 8, 64, lid)
a_codes, a_scales, _ = daq_quantize_rows(X[:16], 99.9, 8, 128)
y_int = int_gemm(a_codes, a_scales, 128, qw)
y_fp = X[:16] @ W.T
print(f"\nW8A8 kernel vs float output: rel err {np.linalg.norm(y_int - y_fp) / np.linalg.norm(y_fp):.2e}")

cost = CostModel.from_model(teacher)
print(f"MACs per forward for this layer: {cost.macs[lid]}")
