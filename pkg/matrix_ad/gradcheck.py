"""Verification harness: finite differences, dot tests and gradient checks.

Checks never raise on numerical disagreement. They return a ``CheckReport``
whose cases record what was compared; an evaluation error inside a check
becomes a failed case carrying the error text.
"""

import logging
import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .forward import JVP_RULES, jvp
from .matfunc import BlockConsistencyError, MatrixFunction
from .matrix import Mat, identity, inner, product_for, solve_spd
from .models import (
    CheckCase,
    CheckReport,
    FDConfig,
    Field,
    FieldError,
    InnerProduct,
    OpKind,
    Side,
)
from .ops import Op, Program, apply_op
from .reverse import Node, backprop, record, vjp

logger = logging.getLogger(__name__)

DOT_TEST_TOL = 1e-10
MATFUNC_TEST_RADIUS = 0.4

# evaluation errors that become failed cases instead of propagating
CHECK_ERRORS = (FieldError, BlockConsistencyError)


def directional_fd(
    fn: Callable[[Mat], Mat], x: Mat, v: Mat, cfg: Optional[FDConfig] = None
) -> Mat:
    """Central difference (f(x+hv) − f(x−hv)) / 2h.

    For complex x the perturbation follows the complex direction v, so v and
    i·v cover the two real degrees of freedom of each entry.
    """
    cfg = cfg or FDConfig()
    h = cfg.step_for(x)
    logger.debug(f"Central difference with h={h:.3e}")
    return (fn(x + v * h) - fn(x - v * h)) / (2.0 * h)


def observed_order(
    fn: Callable[[Mat], Mat],
    x: Mat,
    v: Mat,
    reference: Mat,
    steps: Sequence[float],
) -> float:
    """Slope of log(error) against log(h) over the given step sizes."""
    if len(steps) < 2:
        raise ValueError("need at least two step sizes")
    errors = []
    for h in steps:
        estimate = directional_fd(fn, x, v, FDConfig(step=h))
        errors.append((estimate - reference).norm())
    if min(errors) == 0.0:
        return math.inf
    slope, _ = np.polyfit(np.log(steps), np.log(errors), 1)
    return float(slope)


def _canonical_space(A: Mat, product: Optional[InnerProduct]) -> InnerProduct:
    # weighted products only apply where the row count fits
    if product is not None and product.is_weighted and product.H.rows == A.rows:
        return product
    return product_for(A)


def dot_test(
    op: Op,
    primals: Sequence[Mat],
    tangents: Sequence[Mat],
    cotangent: Mat,
    product: Optional[InnerProduct] = None,
    tol: float = DOT_TEST_TOL,
    label: Optional[str] = None,
) -> CheckReport:
    """Compare ⟨w, JVP(v)⟩ with ⟨VJP(w), v⟩.

    With a weighted ``product`` the adjoint is H_in⁻¹·Tᵀ(H_out·w) on every
    space whose row count matches H; other spaces stay canonical.
    """
    name = label or op.label
    report = CheckReport(f"dot-test {name}")
    try:
        out, saved = apply_op(op, primals)
        tangent_out = JVP_RULES[op.kind](op, primals, tangents, out, saved)
        p_out = _canonical_space(out, product)
        seed = p_out.H @ cotangent if p_out.is_weighted else cotangent
        slots = tuple(range(len(primals)))
        node = Node(len(primals), op, slots, tuple(primals), out, saved)
        pulled = vjp(op, node, seed)

        lhs = inner(cotangent, tangent_out, p_out)
        rhs = 0.0
        for g, v in zip(pulled, tangents):
            if g is None:
                continue
            p_in = _canonical_space(v, product)
            representer = solve_spd(p_in.H, g) if p_in.is_weighted else g
            rhs += inner(representer, v, p_in)
    except CHECK_ERRORS as e:
        report.cases.append(CheckCase.failure(name, str(e)))
        logger.warning(f"Dot test {name} errored: {e}")
        return report
    report.cases.append(CheckCase.compare(name, lhs, rhs, tol * (1.0 + abs(lhs)), tol))
    if not report.passed:
        logger.warning(f"Dot test {name} failed: {lhs!r} vs {rhs!r}")
    return report


class _Sampler:
    """Seeded source of random matrices for one dot-test suite."""

    def __init__(self, seed: int, field: Field):
        self.rng = np.random.default_rng(seed)
        self.field = field

    def mat(self, rows: int, cols: int, field: Optional[Field] = None) -> Mat:
        field = field or self.field
        data = self.rng.standard_normal((rows, cols))
        if field == Field.COMPLEX:
            data = data + 1j * self.rng.standard_normal((rows, cols))
        return Mat(data, field)

    def like(self, A: Mat) -> Mat:
        return self.mat(A.rows, A.cols, A.field)

    def well_conditioned(self, n: int) -> Mat:
        return self.mat(n, n) + identity(n, self.field) * (2.0 * n)

    def small(self, n: int, radius: float = MATFUNC_TEST_RADIUS) -> Mat:
        A = self.mat(n, n)
        return A * (radius / A.norm())


def _suite_instances(
    sample: _Sampler, n: int, field: Field
) -> List[Tuple[str, Op, List[Mat]]]:
    m = n + 1
    instances: List[Tuple[str, Op, List[Mat]]] = [
        (
            "matmul",
            Op(OpKind.MATMUL, ("a", "b"), "out"),
            [sample.mat(n, m), sample.mat(m, n)],
        ),
        (
            "matmul(left constant)",
            Op(
                OpKind.MATMUL, ("a",), "out", constant=sample.mat(m, n), side=Side.LEFT
            ),
            [sample.mat(n, n)],
        ),
        (
            "matmul(right constant)",
            Op(OpKind.MATMUL, ("a",), "out", constant=sample.mat(m, n)),
            [sample.mat(n, m)],
        ),
        ("transpose", Op.unary(OpKind.TRANSPOSE), [sample.mat(n, m)]),
        ("conj_transpose", Op.unary(OpKind.CONJ_TRANSPOSE), [sample.mat(n, m)]),
        ("trace", Op.unary(OpKind.TRACE), [sample.mat(n, n)]),
        ("inverse", Op.unary(OpKind.INVERSE), [sample.well_conditioned(n)]),
    ]
    for k in (1, 2, 4, 7):
        instances.append(
            (f"power({k})", Op.unary(OpKind.POWER, k=k), [sample.small(n, 1.0)])
        )
    functions = [
        MatrixFunction.exp(),
        MatrixFunction.log1p(),
        MatrixFunction.sin(),
        MatrixFunction.cos(),
        MatrixFunction.poly([1.0, -2.0, 0.5, 3.0]),
    ]
    for f in functions:
        instances.append(
            (
                f"matfunc({f.name})",
                Op.unary(OpKind.MATFUNC, function=f),
                [sample.small(n)],
            )
        )
    instances += [
        (
            "add",
            Op(OpKind.ADD, ("a", "b"), "out"),
            [sample.mat(n, m), sample.mat(n, m)],
        ),
        (
            "add(constant)",
            Op(OpKind.ADD, ("a",), "out", constant=sample.mat(n, m)),
            [sample.mat(n, m)],
        ),
        ("scale", Op.unary(OpKind.SCALE, c=-2.5), [sample.mat(n, m)]),
        ("re", Op.unary(OpKind.RE), [sample.mat(n, m)]),
        ("im", Op.unary(OpKind.IM), [sample.mat(n, m)]),
        (
            "add_bias",
            Op(OpKind.ADD_BIAS, ("a", "b"), "out"),
            [sample.mat(n, m), sample.mat(n, 1)],
        ),
        (
            "add_bias(constant)",
            Op(OpKind.ADD_BIAS, ("a",), "out", constant=sample.mat(n, 1)),
            [sample.mat(n, m)],
        ),
    ]
    if field == Field.REAL:
        instances += [
            ("sigmoid", Op.unary(OpKind.SIGMOID), [sample.mat(n, m)]),
            (
                "squared_loss",
                Op.unary(OpKind.SQUARED_LOSS, constant=sample.mat(n, m)),
                [sample.mat(n, m)],
            ),
        ]
    return instances


def dot_test_suite(
    seed: int, size: int, field: Field = Field.REAL, tol: float = DOT_TEST_TOL
) -> CheckReport:
    """Dot test for every primitive defined on ``field``, one random instance each."""
    if size < 1:
        raise ValueError(f"size must be positive, got {size}")
    sample = _Sampler(seed, field)
    report = CheckReport(
        "dot-test", metadata={"seed": seed, "size": size, "field": field.value}
    )
    for label, op, primals in _suite_instances(sample, size, field):
        tangents = [sample.like(p) for p in primals]
        try:
            out, _ = apply_op(op, primals)
        except CHECK_ERRORS as e:
            report.cases.append(CheckCase.failure(label, str(e)))
            continue
        cotangent = sample.like(out)
        report.extend(dot_test(op, primals, tangents, cotangent, tol=tol, label=label))
    logger.info(
        f"Dot-test suite seed={seed} size={size} field={field.value}: "
        f"{len(report.cases) - len(report.failures)}/{len(report.cases)} passed"
    )
    return report


def dot_test_sweep(
    size: int,
    field: Field = Field.REAL,
    cfg: Optional[FDConfig] = None,
    tol: float = DOT_TEST_TOL,
) -> CheckReport:
    """``dot_test_suite`` once per seed in ``cfg.seeds``; labels get a seed prefix."""
    cfg = cfg or FDConfig()
    report = CheckReport(
        "dot-test",
        metadata={
            "seeds": ",".join(str(s) for s in cfg.seeds),
            "size": size,
            "field": field.value,
        },
    )
    for seed in cfg.seeds:
        report.extend(dot_test_suite(seed, size, field, tol), f"seed={seed}/")
    return report


def _unit(A: Mat, i: int, j: int, scale: complex = 1.0) -> Mat:
    data = np.zeros(A.shape, dtype=A.data.dtype)
    data[i, j] = scale
    return Mat(data, A.field)


def gradcheck(
    program: Program, leaves: Mapping[str, Mat], cfg: Optional[FDConfig] = None
) -> CheckReport:
    """Backprop gradients against coordinate-wise central differences.

    Complex leaves are perturbed along e_ij and i·e_ij, which pick out the real
    and imaginary parts of the gradient entry.
    """
    cfg = cfg or FDConfig()
    report = CheckReport(
        "gradcheck",
        metadata={
            "atol": cfg.atol,
            "rtol": cfg.rtol,
            "leaves": ",".join(program.leaves),
        },
    )
    try:
        gradients = backprop(record(program, leaves))
    except CHECK_ERRORS as e:
        report.cases.append(CheckCase.failure("backprop", str(e)))
        logger.warning(f"Gradcheck could not record the program: {e}")
        return report

    for name in program.leaves:
        x = leaves[name]
        fn = program.function_of(name, leaves)
        g = gradients[name].data
        directions: List[Tuple[str, complex]] = [("", 1.0)]
        if x.is_complex:
            directions.append((".imag", 1j))
        for i in range(x.rows):
            for j in range(x.cols):
                for suffix, scale in directions:
                    label = f"{name}[{i},{j}]{suffix}"
                    expected = g[i, j].imag if suffix else g[i, j].real
                    try:
                        fd = directional_fd(fn, x, _unit(x, i, j, scale), cfg).item()
                    except CHECK_ERRORS as e:
                        report.cases.append(CheckCase.failure(label, str(e)))
                        continue
                    report.cases.append(
                        CheckCase.compare(
                            label,
                            float(np.real(fd)),
                            float(expected),
                            cfg.atol,
                            cfg.rtol,
                        )
                    )
    if not report.passed:
        logger.warning(f"Gradcheck failed on {len(report.failures)} entries")
    return report


def jvp_check(
    program: Program,
    values: Mapping[str, Mat],
    tangents: Mapping[str, Mat],
    cfg: Optional[FDConfig] = None,
) -> CheckReport:
    """Forward-mode tangent against a central difference along all tangents at once."""
    cfg = cfg or FDConfig()
    report = CheckReport("jvp-check", metadata={"atol": cfg.atol, "rtol": cfg.rtol})
    try:
        _, tangent = jvp(program, values, tangents)
        h = max(cfg.step_for(values[name]) for name in tangents) if tangents else 1.0

        def shifted(t: float) -> Mat:
            moved: Dict[str, Mat] = dict(values)
            for name, v in tangents.items():
                moved[name] = values[name] + v * t
            return program.evaluate(moved)

        fd = (shifted(h) - shifted(-h)) / (2.0 * h)
    except CHECK_ERRORS as e:
        report.cases.append(CheckCase.failure("jvp", str(e)))
        return report

    parts = [("", np.real)]
    if tangent.is_complex:
        parts.append((".imag", np.imag))
    for i in range(tangent.rows):
        for j in range(tangent.cols):
            for suffix, part in parts:
                report.cases.append(
                    CheckCase.compare(
                        f"out[{i},{j}]{suffix}",
                        float(part(fd.data[i, j])),
                        float(part(tangent.data[i, j])),
                        cfg.atol,
                        cfg.rtol,
                    )
                )
    return report


def numerical_rank(M: Mat, rel_tol: float = 1e-10) -> int:
    """Number of singular values above rel_tol·σ_max (0 for the zero matrix)."""
    singular_values = np.linalg.svd(M.data, compute_uv=False)
    top = float(singular_values[0]) if singular_values.size else 0.0
    if top == 0.0:
        return 0
    return int(np.sum(singular_values > rel_tol * top))
