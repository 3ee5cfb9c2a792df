"""Grouped symmetric integer quantization, reference integer GEMM, GPTQ packing
and the analytic cost model.

Weights are quantized per (output row, input group) with zero-point 0 and
round-half-away-from-zero. Codes of any width up to 8 bits are carried as
int8 operands, which is how a W4 layer runs on an INT8 kernel.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidArgument, NumericFailure
from .plans import BitPlan, LayerPlan
from .toy import layer_rows_per_sample

SCALE_FLOOR = 1e-12
SCALE_BYTES = 2
DAQ_OVERHEAD = 0.01
INT32_MAX = 2**31 - 1


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def qmax(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def code_dtype(bits: int):
    return np.int8 if bits <= 8 else (np.int16 if bits <= 16 else np.int32)


def n_groups(width: int, group_size: int) -> int:
    return math.ceil(width / group_size)


@dataclass(frozen=True)
class GroupQuantWeights:
    layer_id: str
    bits: int
    group_size: int
    codes: np.ndarray   # (out, in), integer
    scales: np.ndarray  # (out, ceil(in / group_size)), positive

    @property
    def shape(self):
        return self.codes.shape

    def scale_matrix(self) -> np.ndarray:
        """Scales broadcast to one per weight element."""
        return np.repeat(self.scales, self.group_size, axis=1)[:, : self.codes.shape[1]]


def _check_bits(bits):
    if not 2 <= bits <= 16:
        raise InvalidArgument(f"integer bit-width must lie in [2, 16], got {bits}")


def quantize_grouped(W, bits: int, group_size: int, layer_id: str = "") -> GroupQuantWeights:
    """Round-to-nearest grouped quantization; scale = max|w| / (2^(b-1) - 1) per group."""
    _check_bits(bits)
    if group_size < 1:
        raise InvalidArgument(f"group size must be >= 1, got {group_size}")
    W = np.asarray(W, dtype=np.float64)
    out_f, in_f = W.shape
    q = qmax(bits)
    ng = n_groups(in_f, group_size)
    scales = np.empty((out_f, ng))
    codes = np.empty((out_f, in_f), dtype=code_dtype(bits))
    for k in range(ng):
        blk = W[:, k * group_size:(k + 1) * group_size]
        s = np.maximum(np.abs(blk).max(axis=1) / q, SCALE_FLOOR)
        scales[:, k] = s
        codes[:, k * group_size:(k + 1) * group_size] = np.clip(round_half_away(blk / s[:, None]), -q, q)
    return GroupQuantWeights(layer_id, bits, group_size, codes, scales)


def dequantize(q: GroupQuantWeights) -> np.ndarray:
    return q.codes.astype(np.float64) * q.scale_matrix()


def int_gemm(a_codes, a_scales, a_group: int, qw: GroupQuantWeights, exact: bool = False) -> np.ndarray:
    """``A @ W.T`` from integer operands.

    ``a_codes`` is (N, in) with per-(row, group) scales ``a_scales`` of shape
    (N, ceil(in / a_group)). The input axis is cut into segments on which both
    the activation group and the weight group are constant; each segment is
    accumulated in integers, checked against the int32 range, then rescaled by
    ``act_scale * weight_scale`` and summed in float.

    With ``exact=True`` the accumulation runs in int64. Otherwise it runs as a
    float64 GEMM on the integer codes, which yields the same integers because
    every partial sum stays far below 2**53.
    """
    a_codes = np.asarray(a_codes)
    n, in_f = a_codes.shape
    out_f, w_in = qw.codes.shape
    if w_in != in_f:
        raise InvalidArgument(f"inner dimensions disagree: {in_f} vs {w_in}")
    a_scales = np.asarray(a_scales, dtype=np.float64).reshape(n, -1)
    cuts = sorted(set(range(0, in_f, a_group)) | set(range(0, in_f, qw.group_size)) | {in_f})
    acc_t = np.int64 if exact else np.float64
    y = np.zeros((n, out_f))
    for s, e in zip(cuts[:-1], cuts[1:]):
        acc = a_codes[:, s:e].astype(acc_t) @ qw.codes[:, s:e].T.astype(acc_t)
        if acc.size and np.abs(acc).max() > INT32_MAX:
            raise NumericFailure(f"int32 accumulator overflow in layer {qw.layer_id}", layer_id=qw.layer_id)
        y += acc * a_scales[:, s // a_group][:, None] * qw.scales[:, s // qw.group_size][None, :]
    return y


def gptq_pack(W, X, bits: int, group_size: int, layer_id: str = "", damp: float = 0.01,
              max_retries: int = 3) -> GroupQuantWeights:
    """Hessian-guided grouped quantization (GPTQ, natural column order).

    H = XᵀX + λI with λ = ``damp`` · mean(diag H). Columns are quantized left
    to right; each column's rounding error is pushed into the not-yet-quantized
    columns through the upper Cholesky factor of H⁻¹. A group's scale is fixed
    from the error-updated weights when its first column is reached.
    """
    _check_bits(bits)
    W = np.array(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    out_f, in_f = W.shape
    if X.ndim != 2 or X.shape[1] != in_f:
        raise InvalidArgument(f"calibration inputs must be (N, {in_f}), got {X.shape}")
    if X.shape[0] < in_f:
        raise InvalidArgument(f"need >= {in_f} calibration rows, got {X.shape[0]}")

    H = X.T @ X
    dead = np.diag(H) == 0
    H[dead, dead] = 1.0
    W[:, dead] = 0.0
    lam = damp * float(np.mean(np.diag(H)))
    for attempt in range(max_retries + 1):
        try:
            Hd = H + lam * np.eye(in_f)
            L = np.linalg.cholesky(Hd)
            Hinv = scipy.linalg.cho_solve((L, True), np.eye(in_f))
            U = np.linalg.cholesky(Hinv).T  # upper: Hinv = UᵀU
            break
        except np.linalg.LinAlgError:
            if attempt == max_retries:
                raise NumericFailure(f"Cholesky failed for layer {layer_id} after damping escalation",
                                     layer_id=layer_id) from None
            lam *= 10.0

    q = qmax(bits)
    ng = n_groups(in_f, group_size)
    scales = np.empty((out_f, ng))
    codes = np.empty((out_f, in_f), dtype=code_dtype(bits))
    s = None
    for i in range(in_f):
        if i % group_size == 0:
            k = i // group_size
            blk = W[:, i:i + group_size]
            s = np.maximum(np.abs(blk).max(axis=1) / q, SCALE_FLOOR)
            scales[:, k] = s
        w = W[:, i]
        c = np.clip(round_half_away(w / s), -q, q)
        codes[:, i] = c
        err = (w - c * s) / U[i, i]
        W[:, i + 1:] -= np.outer(err, U[i, i + 1:])
    return GroupQuantWeights(layer_id, bits, group_size, codes, scales)


def output_mse(X, W, W_hat) -> float:
    """Mean squared calibration-output error ‖XW − XŴ‖² / size."""
    d = np.asarray(X) @ (np.asarray(W) - np.asarray(W_hat)).T
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Analytic latency/memory/BitOps model.

    MACs(ℓ) = out·in·rows per forward (rows = tokens, or 1 for the time MLP).
    c_lat = MACs·b_w·b_a/64, c_mem = params·b_w/8 + scale_bytes·out·⌈in/g⌉.
    Full-precision layers carry no scales and run with activation bits equal
    to their weight bits. Each DAQ-quantized input adds ``daq_overhead`` of
    its layer's c_lat.
    """

    shapes: dict
    macs: dict
    aux_bytes: int
    scale_bytes: int = SCALE_BYTES
    daq_overhead: float = DAQ_OVERHEAD

    @classmethod
    def from_model(cls, model, scale_bytes: int = SCALE_BYTES, daq_overhead: float = DAQ_OVERHEAD):
        macs = {lid: o * i * layer_rows_per_sample(model.config, lid) for lid, (o, i) in model.shapes.items()}
        return cls(dict(model.shapes), macs, 4 * model.aux_param_count(), scale_bytes, daq_overhead)

    @property
    def layer_ids(self):
        return list(self.shapes)

    def c_lat(self, layer_id: str, b_w: int, b_a: int) -> float:
        return self.macs[layer_id] * b_w * b_a / 64.0

    def c_mem(self, layer_id: str, b_w: int, group: int, fp: bool | None = None) -> float:
        out_f, in_f = self.shapes[layer_id]
        fp = b_w >= 16 if fp is None else fp
        mem = out_f * in_f * b_w / 8.0
        if not fp:
            mem += self.scale_bytes * out_f * n_groups(in_f, group)
        return mem

    def layer_step_cost(self, layer_id: str, entry, a_bits: int, daq: bool = True) -> float:
        if entry.fp:
            return self.c_lat(layer_id, entry.bits, entry.bits)
        base = self.c_lat(layer_id, entry.bits, a_bits)
        if daq and not entry.frozen:
            base *= 1.0 + self.daq_overhead
        return base

    def c_step(self, plan: BitPlan, a_bits: int, daq: bool = True) -> float:
        return sum(self.layer_step_cost(lid, e, a_bits, daq) for lid, e in plan.items())

    def memory(self, plan: BitPlan) -> float:
        plan.check_covers(self.layer_ids)
        return sum(self.c_mem(lid, e.bits, e.group) for lid, e in plan.items()) + self.aux_bytes

    def latency(self, plan: BitPlan, policy, schedule, T: int, daq: bool = True) -> float:
        return sum(self.c_step(plan, policy.bits_at(t, T), daq) for t in schedule)

    def bitops(self, plan: BitPlan, policy, schedule, T: int) -> float:
        total = 0
        for t in schedule:
            a = policy.bits_at(t, T)
            for lid, e in plan.items():
                total += self.macs[lid] * e.bits * (e.bits if e.fp else a)
        return total


def model_size_bytes(plan: BitPlan, model, cost: CostModel | None = None) -> float:
    """Packed size: Σ c_mem over quantizable layers + FP32 biases, norms and embeddings."""
    cost = cost or CostModel.from_model(model)
    plan.check_covers(model.layer_ids)
    return cost.memory(plan)


def bitops(plan: BitPlan, policy, schedule, model, cost: CostModel | None = None) -> float:
    """Σ over kept steps and layers of MACs·b_w·b_a(phase(t))."""
    cost = cost or CostModel.from_model(model)
    return cost.bitops(plan, policy, schedule, model.config.T)


# ---------------------------------------------------------------------------
# packed-plan file
# ---------------------------------------------------------------------------

PACK_MAGIC = b"DPQPACK1"


def save_packed(path, packed: dict, plan: BitPlan) -> None:
    """Write the packed student weights.

    Byte layout (version 1, little-endian)::

        8 bytes   magic  b"DPQPACK1"
        4 bytes   uint32 header length H
        H bytes   UTF-8 JSON header
        ...       blob region; offsets in the header are relative to its start

    Header: ``{"version": 1, "layers": [{"layer_id", "bits", "group", "frozen",
    "fp", "shape", "codes": {"offset", "nbytes", "dtype"}, "scales": {...}}]}``.
    Codes are stored as int8/int16, scales as float64; full-precision layers
    have ``codes``/``scales`` set to null.
    """
    blobs = bytearray()
    layers = []
    for lid, e in plan.items():
        rec = {"layer_id": lid, "bits": e.bits, "group": e.group, "frozen": e.frozen, "fp": e.fp,
               "shape": None, "codes": None, "scales": None}
        q = packed.get(lid)
        if q is not None:
            rec["shape"] = list(q.codes.shape)
            for name, arr in (("codes", q.codes), ("scales", q.scales)):
                arr = np.ascontiguousarray(arr)
                rec[name] = {"offset": len(blobs), "nbytes": arr.nbytes, "dtype": arr.dtype.str,
                             "shape": list(arr.shape)}
                blobs += arr.tobytes()
        layers.append(rec)
    header = json.dumps({"version": 1, "layers": layers}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(blobs))


def load_packed(path) -> tuple[dict, BitPlan]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != PACK_MAGIC:
        raise InvalidArgument(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    packed, entries = {}, []
    for rec in header["layers"]:
        entries.append((rec["layer_id"], LayerPlan(rec["bits"], rec["group"], rec["frozen"])))
        if rec["codes"] is None:
            continue
        arrs = {}
        for name in ("codes", "scales"):
            m = rec[name]
            buf = raw[base + m["offset"]: base + m["offset"] + m["nbytes"]]
            arrs[name] = np.frombuffer(buf, dtype=np.dtype(m["dtype"])).reshape(m["shape"]).copy()
        packed[rec["layer_id"]] = GroupQuantWeights(rec["layer_id"], rec["bits"], rec["group"],
                                                    arrs["codes"], arrs["scales"])
    return packed, BitPlan(entries)
