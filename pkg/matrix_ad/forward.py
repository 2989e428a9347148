"""Forward-mode differentiation: push (primal, tangent) pairs through programs.

Every primitive registers one JVP rule in ``JVP_RULES``. A rule receives
the op, its input primals and tangents, the output primal and the context
saved while evaluating, and returns the output tangent. Linear primitives
return themselves applied to the tangent; nonlinear ones follow the
Leibniz rule, the power and inverse formulas, and the Fréchet derivative of
matrix functions.
"""

import logging
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import matfunc
from .matrix import LUFactors, Mat, conj_transpose, inner, lu_factor, transpose
from .models import LINEAR_KINDS, Dual, ErrorKind, Field, FieldError, OpKind, Side
from .ops import Op, Program, apply_op, broadcast_bias

logger = logging.getLogger(__name__)

JvpRule = Callable[[Op, Sequence[Mat], Sequence[Mat], Mat, Any], Mat]

JVP_RULES: Dict[OpKind, JvpRule] = {}


def defjvp(kind: OpKind) -> Callable[[JvpRule], JvpRule]:
    def register(rule: JvpRule) -> JvpRule:
        if kind in JVP_RULES:
            raise ValueError(f"JVP rule for {kind.value} registered twice")
        JVP_RULES[kind] = rule
        return rule

    return register


def jvp_power(
    A: Mat, E: Mat, k: int, powers: Optional[Sequence[np.ndarray]] = None
) -> Mat:
    """Σ_{i<k} AⁱEA^{k−1−i}, reusing the cached powers A⁰..A^{k−1}."""
    if not A.is_square or E.shape != A.shape:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"power jvp: {A.shape}, {E.shape}")
    if E.field != A.field:
        raise FieldError(ErrorKind.FIELD_MISMATCH, "power jvp: field mismatch")
    if k < 1:
        raise FieldError(ErrorKind.DOMAIN_VIOLATION, f"power {k} < 1")
    if powers is None:
        powers = [np.eye(A.rows, dtype=A.data.dtype)]
        for _ in range(k - 1):
            powers.append(powers[-1] @ A.data)
    total = np.zeros_like(A.data)
    for i in range(k):
        total = total + powers[i] @ E.data @ powers[k - 1 - i]
    return Mat(total, A.field)


def jvp_inverse(A: Mat, E: Mat, factors: Optional[LUFactors] = None) -> Mat:
    """−A⁻¹EA⁻¹ with both solves on one LU factorization of A."""
    factors = factors or lu_factor(A)
    left = factors.solve(E)
    return -factors.solve_right(left)


def jvp_matmul(a: Dual, b: Dual) -> Dual:
    """Leibniz rule for the product: E_A·B + A·E_B."""
    primal = a.primal @ b.primal
    return Dual(primal, a.tangent @ b.primal + a.primal @ b.tangent)


def jvp_linear(op: Op, d: Dual) -> Dual:
    """For an ℝ-linear (or affine) single-input op, the tangent map is the op."""
    if op.kind not in LINEAR_KINDS:
        raise FieldError(ErrorKind.DOMAIN_VIOLATION, f"{op.label} is not linear")
    if len(op.inputs) != 1:
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH, f"{op.label} needs a constant operand here"
        )
    return jvp_op(op, [d])


def jvp_elementwise(kind: OpKind, d: Dual, aux: Optional[Mat] = None) -> Dual:
    """Sigmoid or squared loss (against target ``aux``) of a real dual."""
    if kind == OpKind.SIGMOID:
        return jvp_op(Op.unary(OpKind.SIGMOID), [d])
    if kind == OpKind.SQUARED_LOSS:
        if aux is None:
            raise FieldError(ErrorKind.SHAPE_MISMATCH, "squared loss needs a target")
        return jvp_op(Op.unary(OpKind.SQUARED_LOSS, constant=aux), [d])
    raise FieldError(ErrorKind.DOMAIN_VIOLATION, f"{kind.value} is not elementwise")


def jvp_op(op: Op, duals: Sequence[Dual]) -> Dual:
    """Evaluate one primitive on duals."""
    primals = [d.primal for d in duals]
    out, saved = apply_op(op, primals)
    tangent = JVP_RULES[op.kind](op, primals, [d.tangent for d in duals], out, saved)
    return Dual(out, tangent)


def jvp_chain(stages: Sequence[Op], x: Mat, v: Mat) -> Mat:
    """d(fₙ∘…∘f₁)ₓ(v) by pushing (x, v) through the stages left to right."""
    d = Dual(x, v)
    for stage in stages:
        d = jvp_op(stage, [d])
    return d.tangent


def jvp(
    program: Program, values: Mapping[str, Mat], tangents: Mapping[str, Mat]
) -> Tuple[Mat, Mat]:
    """Value and directional derivative of a program.

    Leaves without an entry in ``tangents`` are held fixed.
    """
    duals: Dict[str, Dual] = {}
    for name in program.leaves:
        if name not in values:
            raise FieldError(ErrorKind.PARSE_ERROR, f"no value for leaf {name}")
        x = values[name]
        duals[name] = Dual(x, tangents[name] if name in tangents else x.zeros_like())
    for op in program.ops:
        duals[op.output] = jvp_op(op, [duals[name] for name in op.inputs])
    result = duals[program.output]
    return result.primal, result.tangent


@defjvp(OpKind.MATMUL)
def _matmul_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    if op.constant is None:
        a = Dual(primals[0], tangents[0])
        return jvp_matmul(a, Dual(primals[1], tangents[1])).tangent
    if op.side == Side.LEFT:
        return op.constant @ tangents[0]
    return tangents[0] @ op.constant


@defjvp(OpKind.TRANSPOSE)
def _transpose_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return transpose(tangents[0])


@defjvp(OpKind.CONJ_TRANSPOSE)
def _conj_transpose_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return conj_transpose(tangents[0])


@defjvp(OpKind.TRACE)
def _trace_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return Mat(np.array([[np.trace(tangents[0].data)]]), tangents[0].field)


@defjvp(OpKind.INVERSE)
def _inverse_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return jvp_inverse(primals[0], tangents[0], saved)


@defjvp(OpKind.POWER)
def _power_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return jvp_power(primals[0], tangents[0], op.k, saved)


@defjvp(OpKind.MATFUNC)
def _matfunc_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return matfunc.frechet_block(op.function, primals[0], tangents[0], saved)


@defjvp(OpKind.ADD)
def _add_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    if op.constant is None:
        return tangents[0] + tangents[1]
    return tangents[0]


@defjvp(OpKind.SCALE)
def _scale_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return tangents[0] * op.c


@defjvp(OpKind.RE)
def _re_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return tangents[0].real()


@defjvp(OpKind.IM)
def _im_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return tangents[0].imag()


@defjvp(OpKind.SIGMOID)
def _sigmoid_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    s = out.data
    return Mat(s * (1.0 - s) * tangents[0].data, Field.REAL)


@defjvp(OpKind.ADD_BIAS)
def _add_bias_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    if op.constant is not None:
        return tangents[0]
    return tangents[0] + broadcast_bias(tangents[1], tangents[0].cols)


@defjvp(OpKind.SQUARED_LOSS)
def _squared_loss_jvp(
    op: Op, primals: Sequence[Mat], tangents: Sequence[Mat], out: Mat, saved: Any
) -> Mat:
    return Mat([[2.0 * inner(saved, tangents[0])]], Field.REAL)
