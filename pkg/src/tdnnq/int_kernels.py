"""Integer matrix multiply with zero-point correction.

For activations q1 (T x N, zero-point Z1) and weights q2 (stored out x N,
zero-point Z2) the integer core is

    core[i, k] = N*Z1*Z2 - Z1*a2[k] - Z2*a1[i] + sum_j q1[i, j] * q2[k, j]

with a1 the per-frame sums of q1 and a2 the per-output sums of q2. It equals
sum_j (q1 - Z1)(q2 - Z2) exactly. The product term is accumulated in int32 for
8-bit operands, the correction terms in int64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant_core import QuantizedTensor, QuantParams, quantize, storage_dtype

INT32_MAX = 2**31 - 1
INT64_MAX = 2**63 - 1


class AccumulatorOverflowError(ValueError):
    """The inner dimension is large enough that the product sum may overflow."""


def _qmag(p: QuantParams) -> int:
    return max(abs(p.qmin), abs(p.qmax))


def accumulator_dtype(w_params: QuantParams, act_params: QuantParams) -> np.dtype:
    # 16-bit operands overflow int32 after two products, so they get int64.
    if w_params.bits == 8 and act_params.bits == 8:
        return np.dtype(np.int32)
    return np.dtype(np.int64)


def check_accumulator_bound(n: int, w_params: QuantParams, act_params: QuantParams) -> None:
    acc = accumulator_dtype(w_params, act_params)
    limit = INT32_MAX if acc == np.int32 else INT64_MAX
    worst = n * _qmag(w_params) * _qmag(act_params)
    if worst > limit:
        raise AccumulatorOverflowError(
            f"inner dimension {n} can reach |sum| = {worst} > {limit} in the {acc} accumulator"
        )


@dataclass(frozen=True)
class ActRowSums:
    row_sums_a1: np.ndarray


def act_row_sums(q_acts: QuantizedTensor) -> ActRowSums:
    return ActRowSums(q_acts.data.astype(np.int64).sum(axis=-1))


@dataclass(frozen=True)
class IntConvPlan:
    """Quantized weights plus every input-independent constant of the integer matmul."""

    q_weights: QuantizedTensor
    col_sums_a2: np.ndarray
    multiplier_M: float
    const_NZ1Z2: int
    N: int
    act_params: QuantParams
    out_params: QuantParams | None = None

    @property
    def w_params(self) -> QuantParams:
        return self.q_weights.params

    @property
    def out_dim(self) -> int:
        return self.q_weights.shape[0]


def build_plan(
    weights,
    w_params: QuantParams,
    act_params: QuantParams,
    out_params: QuantParams | None = None,
) -> IntConvPlan:
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise ValueError(f"weights must be a matrix (out x N), got shape {weights.shape}")
    n = weights.shape[1]
    check_accumulator_bound(n, w_params, act_params)
    qw = quantize(weights, w_params)
    a2 = qw.data.astype(np.int64).sum(axis=1)
    m = act_params.scale * w_params.scale
    if out_params is not None:
        m /= out_params.scale
    nz1z2 = n * act_params.zero_point * w_params.zero_point
    return IntConvPlan(qw, a2, m, int(nz1z2), n, act_params, out_params)


def integer_core(plan: IntConvPlan, q_acts: QuantizedTensor, a1: ActRowSums | None = None) -> np.ndarray:
    """The exact int64 value of sum_j (q1 - Z1)(q2 - Z2), via the decomposition."""
    if q_acts.shape[-1] != plan.N:
        raise ValueError(f"activation inner dim {q_acts.shape[-1]} != plan inner dim {plan.N}")
    if q_acts.params != plan.act_params:
        raise ValueError("activations were quantized with parameters other than the plan's")
    if a1 is None:
        a1 = act_row_sums(q_acts)
    if a1.row_sums_a1.shape != q_acts.shape[:-1]:
        raise ValueError("row sums do not match the activation batch shape")
    acc_t = accumulator_dtype(plan.w_params, q_acts.params)
    acc = np.matmul(q_acts.data.astype(acc_t), plan.q_weights.data.T.astype(acc_t))
    z1 = q_acts.params.zero_point
    z2 = plan.w_params.zero_point
    core = acc.astype(np.int64)
    core += plan.const_NZ1Z2
    core -= z1 * plan.col_sums_a2
    core -= z2 * a1.row_sums_a1[..., None]
    return core


def int_matmul_float_out(plan: IntConvPlan, q_acts: QuantizedTensor, a1: ActRowSums | None = None) -> np.ndarray:
    """Real-valued product M * core with M = S1 * S2."""
    if plan.out_params is not None:
        raise ValueError("plan was built for requantized output; use int_matmul_requant")
    return plan.multiplier_M * integer_core(plan, q_acts, a1).astype(np.float64)


def int_matmul_requant(plan: IntConvPlan, q_acts: QuantizedTensor, a1: ActRowSums | None = None) -> QuantizedTensor:
    """Integer output q3 = clamp(Z3 + round(M * core)) with M = S1 * S2 / S3."""
    out = plan.out_params
    if out is None:
        raise ValueError("plan has no output quantization parameters")
    core = integer_core(plan, q_acts, a1)
    q3 = np.rint(plan.multiplier_M * core.astype(np.float64)) + out.zero_point
    q3 = np.clip(q3, out.qmin, out.qmax)
    return QuantizedTensor(q3.astype(storage_dtype(out.bits)), out)


def conv1d_int(plan: IntConvPlan, q_spliced_input: QuantizedTensor) -> np.ndarray:
    """Frame-wise integer convolution over already spliced input; bias is left to the caller."""
    return int_matmul_float_out(plan, q_spliced_input, act_row_sums(q_spliced_input))
