import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffplan.daq import DaqPolicy
from diffplan.errors import InvalidArgument, NumericFailure
from diffplan.plans import BitPlan, LayerPlan
from diffplan.quant import (CostModel, bitops, dequantize, gptq_pack, int_gemm, load_packed, model_size_bytes,
                            output_mse, quantize_grouped, save_packed)
from oracles import int_gemm_loop, packed_bytes_oracle, rtn_dequant_loop


def test_all_zero_weights():
    q = quantize_grouped(np.zeros((3, 64)), 4, 32)
    assert np.all(q.codes == 0) and np.all(q.scales == 1e-12)
    assert q.scales.shape == (3, 2)
    np.testing.assert_array_equal(dequantize(q), 0.0)


def test_representable_grid_round_trip():
    row = np.arange(-127, 128) * 0.01
    q = quantize_grouped(row[None, :], 8, row.size)
    assert q.scales[0, 0] == pytest.approx(0.01, rel=1e-12)
    np.testing.assert_allclose(dequantize(q), row[None, :], atol=1e-14)


def test_rtn_matches_scalar_loop(rng):
    W = rng.standard_normal((8, 16))
    q = quantize_grouped(W, 4, 8)
    ref, ref_scales = rtn_dequant_loop(W, 4, 8)
    np.testing.assert_array_equal(dequantize(q), ref)
    np.testing.assert_array_equal(q.scales, ref_scales)
    assert np.abs(W - dequantize(q)).max() <= q.scales.max() / 2


def test_idempotent_on_representable_values(rng):
    W = rng.standard_normal((5, 40))
    q1 = quantize_grouped(W, 6, 16)
    q2 = quantize_grouped(dequantize(q1), 6, 16)
    np.testing.assert_array_equal(q1.codes, q2.codes)
    np.testing.assert_allclose(q1.scales, q2.scales, rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 50)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)),
       st.sampled_from([3, 4, 6, 8]), st.sampled_from([1, 3, 32, 64]))
def test_error_bound_property(W, bits, group):
    q = quantize_grouped(W, bits, group)
    err = np.abs(W - dequantize(q))
    assert np.all(err <= q.scale_matrix() / 2 + 1e-12)
    assert q.scales.shape == (W.shape[0], math.ceil(W.shape[1] / group))
    assert np.all(np.abs(q.codes) <= 2 ** (bits - 1) - 1)


def test_quantize_rejects_bad_args():
    with pytest.raises(InvalidArgument):
        quantize_grouped(np.ones((2, 2)), 1, 2)
    with pytest.raises(InvalidArgument):
        quantize_grouped(np.ones((2, 2)), 4, 0)


def test_int_gemm_identity_operand(rng):
    qw = quantize_grouped(rng.standard_normal((8, 16)), 8, 8)
    y = int_gemm(np.eye(16, dtype=np.int8), np.ones((16, 2)), 8, qw)
    np.testing.assert_allclose(y, dequantize(qw).T, rtol=1e-15)


def test_int_gemm_zero_codes(rng):
    qw = quantize_grouped(rng.standard_normal((8, 16)), 8, 8)
    y = int_gemm(np.zeros((4, 16), dtype=np.int8), np.ones((4, 2)), 8, qw)
    np.testing.assert_array_equal(y, 0.0)


def test_int_gemm_matches_float_and_loop(rng):
    A = rng.standard_normal((4, 16))
    qa = quantize_grouped(A, 8, 8)
    qw = quantize_grouped(rng.standard_normal((8, 16)), 8, 8)
    ref = dequantize(qa) @ dequantize(qw).T
    fast = int_gemm(qa.codes, qa.scales, 8, qw)
    exact = int_gemm(qa.codes, qa.scales, 8, qw, exact=True)
    loop = int_gemm_loop(qa.codes, qa.scales, 8, qw.codes, qw.scales, 8)
    assert np.linalg.norm(fast - ref) / np.linalg.norm(ref) <= 1e-4
    np.testing.assert_array_equal(fast, exact)
    np.testing.assert_allclose(fast, loop, rtol=1e-12, atol=1e-12)


def test_int_gemm_mismatched_groups(rng):
    # activation groups of 12 against weight groups of 32 over 64 inputs
    A = rng.standard_normal((3, 64))
    qa = quantize_grouped(A, 8, 12)
    qw = quantize_grouped(rng.standard_normal((5, 64)), 4, 32)
    y = int_gemm(qa.codes, qa.scales, 12, qw)
    loop = int_gemm_loop(qa.codes, qa.scales, 12, qw.codes, qw.scales, 32)
    np.testing.assert_allclose(y, loop, rtol=1e-12, atol=1e-12)


def test_int_gemm_errors(rng):
    qw = quantize_grouped(rng.standard_normal((4, 8)), 8, 8)
    with pytest.raises(InvalidArgument):
        int_gemm(np.zeros((2, 6), dtype=np.int8), np.ones((2, 1)), 8, qw)
    # 16-bit codes over a long row overflow the int32 accumulator
    big = quantize_grouped(np.ones((1, 4096)), 16, 4096)
    with pytest.raises(NumericFailure):
        int_gemm(np.full((1, 4096), 32767, dtype=np.int16), np.ones((1, 1)), 4096, big, exact=True)


def test_gptq_identity_hessian_is_rtn(rng):
    W = rng.standard_normal((6, 32))
    g = gptq_pack(W, np.eye(32), 4, 8)
    r = quantize_grouped(W, 4, 8)
    np.testing.assert_array_equal(g.codes, r.codes)
    np.testing.assert_allclose(g.scales, r.scales, rtol=1e-15)


def test_gptq_lossless_limit(rng):
    # every row sits on its own 16-bit grid: one code at the clamp, the rest integers below it
    codes = rng.integers(-32767, 32768, size=(4, 16)).astype(float)
    codes[:, 0] = 32767
    W = codes * rng.uniform(1e-4, 1e-3, size=(4, 1))
    X = rng.standard_normal((64, 16))
    q = gptq_pack(W, X, 16, 16)
    assert output_mse(X, W, dequantize(q)) < 1e-12


def test_gptq_not_worse_than_rtn_on_correlated_inputs(rng):
    W = rng.standard_normal((16, 64))
    base = rng.standard_normal((512, 8))
    X = base @ rng.standard_normal((8, 64)) + 0.1 * rng.standard_normal((512, 64))
    g = output_mse(X, W, dequantize(gptq_pack(W, X, 4, 64)))
    r = output_mse(X, W, dequantize(quantize_grouped(W, 4, 64)))
    assert g <= r


def test_gptq_input_checks(rng):
    with pytest.raises(InvalidArgument):
        gptq_pack(rng.standard_normal((4, 16)), rng.standard_normal((8, 16)), 4, 8)
    with pytest.raises(InvalidArgument):
        gptq_pack(rng.standard_normal((4, 16)), rng.standard_normal((32, 12)), 4, 8)


def test_gptq_dead_columns(rng):
    X = rng.standard_normal((64, 16))
    X[:, 3] = 0.0
    q = gptq_pack(rng.standard_normal((4, 16)), X, 4, 8)
    assert np.all(q.codes[:, 3] == 0) and np.all(np.isfinite(q.scales))


def _cost():
    return CostModel({"a": (4, 8), "b": (2, 4)}, {"a": 4 * 8 * 3, "b": 2 * 4 * 3}, aux_bytes=10)


def test_cost_model_hand_arithmetic():
    c = _cost()
    assert c.c_lat("a", 4, 8) == 96 * 4 * 8 / 64
    assert c.c_mem("a", 4, 4) == 32 * 4 / 8 + 2 * 4 * 2
    assert c.c_mem("a", 16, 4) == 32 * 2
    plan = BitPlan({"a": LayerPlan(4, 4), "b": LayerPlan(16, 32)})
    assert c.memory(plan) == (16 + 16) + 16 + 10
    step = 96 * 4 * 8 / 64 * 1.01 + 24 * 16 * 16 / 64
    assert c.c_step(plan, 8) == pytest.approx(step)
    assert c.c_step(plan, 8, daq=False) == pytest.approx(96 * 4 * 8 / 64 + 24 * 16 * 16 / 64)


def test_cost_monotonicity():
    c = _cost()
    for b in (3, 4, 6):
        assert c.c_lat("a", b, 8) <= c.c_lat("a", b + 1, 8)
        assert c.c_lat("a", 4, b) <= c.c_lat("a", 4, b + 1)
        assert c.c_mem("a", b, 4) < c.c_mem("a", b + 1, 4)
    assert c.c_mem("a", 4, 2) > c.c_mem("a", 4, 4) > c.c_mem("a", 4, 8)


def test_bitops_linearity_and_ratio(teacher):
    pol = DaqPolicy.uniform(8)
    w8 = BitPlan.uniform(teacher.layer_ids, 8, 64)
    w4 = BitPlan.uniform(teacher.layer_ids, 4, 64)
    full = list(range(100))
    assert bitops(w8, pol, full, teacher) == 2 * bitops(w8, pol, full[::2], teacher)
    assert bitops(w8, pol, full, teacher) == 2 * bitops(w4, pol, full, teacher)


def test_bitops_mixed_plan_matches_summation(teacher, frozen):
    cost = CostModel.from_model(teacher)
    plan = BitPlan({lid: LayerPlan(*frozen["mixed_plan"][lid]) for lid in teacher.layer_ids})
    pol = DaqPolicy(bits=(6, 8, 16))
    kept = [0, 10, 40, 70, 99]
    total = 0
    for t in kept:
        a = 6 if t < 33 else 8 if t < 66 else 16
        for lid in teacher.layer_ids:
            out_f, in_f = teacher.shapes[lid]
            rows = 1 if lid.startswith("time_mlp") else 16
            bw = frozen["mixed_plan"][lid][0]
            total += out_f * in_f * rows * bw * (bw if bw >= 16 else a)
    assert bitops(plan, pol, kept, teacher, cost) == total


def test_model_size_matches_byte_oracle(teacher, frozen):
    mixed = BitPlan({lid: LayerPlan(*frozen["mixed_plan"][lid]) for lid in teacher.layer_ids})
    assert model_size_bytes(mixed, teacher) == frozen["mixed_bytes"]
    fp32 = BitPlan.uniform(teacher.layer_ids, 32, 128)
    assert model_size_bytes(fp32, teacher) == frozen["fp32_bytes"] == 4 * teacher.total_params()
    assert frozen["fp32_bytes"] / model_size_bytes(mixed, teacher) >= 4.0
    w4 = BitPlan.uniform(teacher.layer_ids, 4, 288)
    assert model_size_bytes(w4, teacher) == frozen["w4g288_bytes"]
    layout = dict(teacher.shapes)
    oracle = packed_bytes_oracle(layout, {k: (4, 288) for k in layout}, teacher.aux_param_count())
    assert model_size_bytes(w4, teacher) == oracle


def test_model_size_strictly_decreasing(teacher):
    plan = BitPlan.uniform(teacher.layer_ids, 8, 64)
    lower = plan.with_layer("blocks.2.qkv", bits=6)
    assert model_size_bytes(lower, teacher) < model_size_bytes(plan, teacher)


def test_model_size_uncovered_layer(teacher):
    plan = BitPlan.uniform(teacher.layer_ids[:-1], 8, 64)
    with pytest.raises(InvalidArgument):
        model_size_bytes(plan, teacher)


def test_packed_file_round_trip(tmp_path, teacher):
    plan = BitPlan.uniform(teacher.layer_ids, 4, 32).with_layer("final_proj", bits=16)
    packed = {lid: quantize_grouped(teacher.weights[lid], e.bits, e.group, lid)
              for lid, e in plan.items() if not e.fp}
    p = tmp_path / "student.pack"
    save_packed(p, packed, plan)
    back, plan2 = load_packed(p)
    assert plan2 == plan and set(back) == set(packed)
    for lid, q in packed.items():
        np.testing.assert_array_equal(back[lid].codes, q.codes)
        np.testing.assert_array_equal(back[lid].scales, q.scales)


def test_packed_file_bad_magic(tmp_path):
    p = tmp_path / "x.pack"
    p.write_bytes(b"NOTAPACK" + b"\0" * 8)
    with pytest.raises(InvalidArgument):
        load_packed(p)
