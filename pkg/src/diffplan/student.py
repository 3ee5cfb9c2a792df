"""Quantized student built from a bit plan, and a cached teacher for drift."""

from __future__ import annotations

import hashlib
import threading

import numpy as np

from .daq import DaqPolicy, daq_quantize_rows, static_quantize_rows
from .errors import InvalidArgument
from .plans import BitPlan
from .quant import GroupQuantWeights, dequantize, gptq_pack, int_gemm, quantize_grouped
from .toy import TinyDiT, add_noise

ACT_MODES = ("daq", "static", "none")


class PackCache:
    """Memoises packed weights per (layer, bits, group, method); thread-safe."""

    def __init__(self, teacher: TinyDiT, calib_inputs: dict | None = None, method: str = "gptq"):
        if method not in ("gptq", "rtn"):
            raise InvalidArgument(f"unknown packing method {method!r}")
        if method == "gptq" and not calib_inputs:
            raise InvalidArgument("GPTQ packing needs per-layer calibration inputs")
        self.teacher = teacher
        self.calib_inputs = calib_inputs or {}
        self.method = method
        self._cache: dict = {}
        self._lock = threading.Lock()

    def get(self, layer_id: str, bits: int, group: int) -> GroupQuantWeights:
        key = (layer_id, bits, group)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        W = self.teacher.weights[layer_id]
        if self.method == "gptq":
            q = gptq_pack(W, self.calib_inputs[layer_id], bits, group, layer_id=layer_id)
        else:
            q = quantize_grouped(W, bits, group, layer_id=layer_id)
        with self._lock:
            self._cache.setdefault(key, q)
        return q


class StudentDiT(TinyDiT):
    """Teacher architecture with linears executed per the bit plan.

    Integer layers run ``int_gemm`` on packed weight codes. Their inputs are
    quantized by DAQ (``act_mode="daq"``), by a fixed per-layer scale
    (``"static"``), or left in float (``"none"``). Full-precision and frozen
    layers skip activation quantization. FP16 layers use float16-rounded
    weights; FP32 layers are the teacher's weights unchanged.
    """

    def __init__(self, teacher: TinyDiT, plan: BitPlan, packed: dict, policy: DaqPolicy | None = None,
                 act_mode: str = "daq", static_scales: dict | None = None, static_bits: int = 8):
        if act_mode not in ACT_MODES:
            raise InvalidArgument(f"act_mode must be one of {ACT_MODES}")
        plan.check_covers(teacher.layer_ids)
        if act_mode == "static" and static_scales is None:
            raise InvalidArgument("static activation mode needs per-layer scales")
        # share every float parameter with the teacher
        self.__dict__.update({k: v for k, v in teacher.__dict__.items() if k != "_hooks"})
        self._hooks = {}
        self.teacher = teacher
        self.plan = plan
        self.packed = dict(packed)
        self.policy = policy or DaqPolicy()
        self.act_mode = act_mode
        self.static_scales = static_scales or {}
        self.static_bits = static_bits
        self._fp_weights = {}
        self._deq = {}
        for lid, e in plan.items():
            if e.fp:
                W = teacher.weights[lid]
                self._fp_weights[lid] = W.astype(np.float16).astype(np.float64) if e.bits == 16 else W
            elif lid not in self.packed:
                raise InvalidArgument(f"no packed weights for integer layer {lid}")

    def dequantized(self, layer_id: str) -> np.ndarray:
        if layer_id not in self._deq:
            self._deq[layer_id] = dequantize(self.packed[layer_id])
        return self._deq[layer_id]

    def linear(self, layer_id, x, t, ctx):
        e = self.plan[layer_id]
        b = self.biases[layer_id]
        if e.fp:
            return x @ self._fp_weights[layer_id].T + b
        if e.frozen or self.act_mode == "none":
            return x @ self.dequantized(layer_id).T + b
        q = self.packed[layer_id]
        if self.act_mode == "static":
            codes, scales = static_quantize_rows(x, self.static_scales[layer_id], self.static_bits)
            return int_gemm(codes, scales, x.shape[1], q) + b
        pol = self.policy
        a_bits = pol.bits_at(t, self.config.T)
        codes, scales, taus = daq_quantize_rows(x, pol.percentile, a_bits, pol.group_size)
        if ctx is not None:
            ctx.setdefault("tau", {})[layer_id] = float(taus.mean())
            ctx["a_bits"] = a_bits
        return int_gemm(codes, scales, pol.group_size, q) + b

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.teacher.fingerprint().encode())
        h.update(repr((self.act_mode, self.policy, sorted(self.static_scales.items()))).encode())
        for lid, e in self.plan.items():
            h.update(repr((lid, e)).encode())
            q = self.packed.get(lid)
            if q is not None and not e.fp:
                h.update(q.codes.tobytes())
                h.update(q.scales.tobytes())
        return h.hexdigest()


def build_student(teacher: TinyDiT, plan: BitPlan, policy: DaqPolicy | None = None, *,
                  pack_cache: PackCache | None = None, calib_inputs: dict | None = None,
                  method: str = "gptq", act_mode: str = "daq", static_scales: dict | None = None,
                  packed: dict | None = None) -> StudentDiT:
    """Install packed linears per ``plan`` (GPTQ by default) and attach DAQ."""
    plan.check_covers(teacher.layer_ids)
    if packed is None:
        if pack_cache is None:
            pack_cache = PackCache(teacher, calib_inputs, method=method if calib_inputs else "rtn")
        packed = {lid: pack_cache.get(lid, e.bits, e.group) for lid, e in plan.items() if not e.fp}
    return StudentDiT(teacher, plan, packed, policy, act_mode=act_mode, static_scales=static_scales)


def attach_daq(student: StudentDiT, policy: DaqPolicy) -> StudentDiT:
    """Same packed weights, inputs of integer layers quantized by ``policy``."""
    if not isinstance(policy, DaqPolicy):
        raise InvalidArgument(f"expected a DaqPolicy, got {type(policy).__name__}")
    return StudentDiT(student.teacher, student.plan, student.packed, policy, act_mode="daq")


def static_scales_from_envelopes(envelopes: dict, bits: int = 8) -> dict:
    """Per-layer tensor scales max(|min|, |max|) / qmax from calibration envelopes."""
    q = 2 ** (bits - 1) - 1
    return {lid: max(max(abs(lo), abs(hi)) for lo, hi in env) / q for lid, env in envelopes.items()}


class TeacherCache:
    """Fixed evaluation latents with lazily cached teacher predictions.

    Batch ``i`` at timestep ``t`` is built by noising a fixed x0 pool with
    noise seeded by ``(seed, i, t)``, so teacher and student always see the
    same inputs.
    """

    def __init__(self, teacher: TinyDiT, sched, x0_pool: np.ndarray, labels: np.ndarray,
                 batch_size: int = 8, seed: int = 0):
        self.teacher = teacher
        self.sched = sched
        self.batch_size = batch_size
        self.seed = seed
        n = (len(x0_pool) // batch_size) * batch_size
        if n == 0:
            raise InvalidArgument("evaluation pool smaller than one batch")
        self.x0 = np.asarray(x0_pool[:n]).reshape(-1, batch_size, *x0_pool.shape[1:])
        self.labels = np.asarray(labels[:n]).reshape(-1, batch_size)
        self._out: dict = {}
        self._lock = threading.Lock()

    @property
    def n_batches(self) -> int:
        return len(self.x0)

    def inputs(self, i: int, t: int):
        rng = np.random.default_rng([self.seed, i, t])
        eps = rng.standard_normal(self.x0[i].shape)
        return add_noise(self.x0[i], t, eps, self.sched), self.labels[i]

    def teacher_out(self, i: int, t: int, use_cache: bool = True) -> np.ndarray:
        if use_cache:
            with self._lock:
                hit = self._out.get((i, t))
            if hit is not None:
                return hit
        x, y = self.inputs(i, t)
        out = self.teacher.forward(x, t, y)
        if use_cache:
            with self._lock:
                self._out.setdefault((i, t), out)
        return out

    def drift(self, student, timesteps, n_batches: int | None = None, use_cache: bool = True) -> float:
        """Mean over samples of ‖ε_student − ε_teacher‖² across the given timesteps."""
        n_batches = self.n_batches if n_batches is None else min(n_batches, self.n_batches)
        if n_batches <= 0 or len(timesteps) == 0:
            raise InvalidArgument("drift needs at least one batch and one timestep")
        total, count = 0.0, 0
        for t in timesteps:
            for i in range(n_batches):
                x, y = self.inputs(i, int(t))
                d = student.forward(x, int(t), y) - self.teacher_out(i, int(t), use_cache)
                total += float(np.sum(d * d))
                count += d.shape[0]
        return total / count
