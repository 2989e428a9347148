"""Unit tests for reverse.py"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from matrix_ad import demo, matfunc
from matrix_ad.forward import jvp
from matrix_ad.gradcheck import gradcheck
from matrix_ad.matfunc import MatrixFunction
from matrix_ad.matrix import Mat, identity, inner, random_mat, random_spd
from matrix_ad.models import ErrorKind, Field, FieldError, InnerProduct, OpKind, Side
from matrix_ad.ops import Op, Program, ProgramBuilder, apply_op
from matrix_ad.reverse import (
    VJP_RULES,
    Node,
    adjoint_weighted_left_mul,
    adjoint_weighted_right_mul,
    backprop,
    backprop_in_products,
    defvjp,
    gradient,
    gradient_in_product,
    record,
    vjp,
)


def node_for(op, args):
    out, saved = apply_op(op, args)
    return Node(len(args), op, tuple(range(len(args))), tuple(args), out, saved)


def trace_program(stage=None):
    b = ProgramBuilder()
    a = b.leaf("A")
    if stage is not None:
        a = stage(b, a)
    return b.build(b.trace(a))


class TestRecord:
    """Test suite for recording tapes."""

    def test_empty_program(self):
        """Test that an empty program's output is its 1x1 leaf."""
        x = Mat([[3.0]])
        tape = record(Program(("x",), (), "x"), {"x": x})
        assert tape.nodes == []
        assert tape.output == 0
        assert tape.result == 3.0
        assert backprop(tape)["x"].item() == 1.0

    def test_trace_tape(self):
        """Test that tr(A) records one node."""
        tape = record(trace_program(), {"A": identity(3)})
        assert len(tape.nodes) == 1
        assert tape.result == 3.0

    def test_ffn_tape(self):
        """Test that the default network records seven nodes."""
        params = demo.init_params(demo.DEFAULT_WIDTHS, seed=0)
        batch = demo.random_batch(demo.DEFAULT_WIDTHS, 1, seed=0)
        program, leaves = demo.ffn_program(params, batch)
        tape = record(program, leaves)
        assert len(tape.nodes) == 7
        assert tape.leaf_names == ["A1", "b1", "A2", "b2"]

    def test_rejects_matrix_output(self):
        """Test that the output must be a scalar."""
        b = ProgramBuilder()
        program = b.build(b.transpose(b.leaf("A")))
        with pytest.raises(FieldError) as exc_info:
            record(program, {"A": identity(2)})
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_rejects_complex_output(self):
        """Test that the output must be real."""
        with pytest.raises(FieldError) as exc_info:
            record(trace_program(), {"A": identity(2, Field.COMPLEX)})
        assert exc_info.value.kind == ErrorKind.FIELD_MISMATCH

    def test_missing_leaf(self):
        """Test that every leaf needs a value."""
        with pytest.raises(FieldError) as exc_info:
            record(trace_program(), {})
        assert exc_info.value.kind == ErrorKind.PARSE_ERROR

    def test_singular_propagates(self):
        """Test that evaluation errors surface while recording."""
        program = trace_program(lambda b, a: b.inverse(a))
        with pytest.raises(FieldError) as exc_info:
            record(program, {"A": Mat([[1.0, 2.0], [2.0, 4.0]])})
        assert exc_info.value.kind == ErrorKind.SINGULAR


class TestVjpRules:
    """Test suite for individual adjoint rules."""

    def test_every_kind_has_a_rule(self):
        """Test that each primitive registered a VJP."""
        assert set(VJP_RULES) == set(OpKind)

    def test_duplicate_registration(self):
        """Test that a second rule for a kind is refused."""
        before = VJP_RULES[OpKind.SCALE]
        with pytest.raises(ValueError):
            defvjp(OpKind.SCALE)(lambda op, node, g: (g,))
        assert VJP_RULES[OpKind.SCALE] is before

    def test_trace(self):
        """Test that the trace pulls 1 back to I."""
        op = Op.unary(OpKind.TRACE)
        (g,) = vjp(op, node_for(op, [random_mat(4, 4)]), Mat([[1.0]]))
        assert_allclose(g.data, np.eye(4))

    def test_right_multiplication(self):
        """Test (A ↦ A·X)*(B) = B·Xᵀ."""
        X = random_mat(3, 2, seed=1)
        B = random_mat(4, 2, seed=2)
        op = Op.unary(OpKind.MATMUL, constant=X, side=Side.RIGHT)
        (g,) = vjp(op, node_for(op, [random_mat(4, 3)]), B)
        assert_allclose(g.data, B.data @ X.data.T)

    def test_complex_left_multiplication(self):
        """Test (A ↦ X·A)*(E) = Xᴴ·E."""
        X = random_mat(3, 3, Field.COMPLEX, seed=1)
        E = random_mat(3, 2, Field.COMPLEX, seed=2)
        op = Op.unary(OpKind.MATMUL, constant=X, side=Side.LEFT)
        (g,) = vjp(op, node_for(op, [random_mat(3, 2, Field.COMPLEX)]), E)
        assert_allclose(g.data, X.data.conj().T @ E.data)

    def test_power_one(self):
        """Test that k = 1 passes the cotangent through."""
        G = random_mat(3, 3, seed=3)
        op = Op.unary(OpKind.POWER, k=1)
        (g,) = vjp(op, node_for(op, [random_mat(3, 3)]), G)
        assert_allclose(g.data, G.data)

    def test_inverse(self):
        """Test −A⁻ᵀGA⁻ᵀ."""
        A = random_mat(3, 3, seed=4) + identity(3) * 5.0
        G = random_mat(3, 3, seed=5)
        op = Op.unary(OpKind.INVERSE)
        (g,) = vjp(op, node_for(op, [A]), G)
        inv_t = np.linalg.inv(A.data).T
        assert_allclose(g.data, -inv_t @ G.data @ inv_t, rtol=1e-12)

    def test_im_of_real_input(self):
        """Test that Im of a real matrix pulls back zero."""
        op = Op.unary(OpKind.IM)
        (g,) = vjp(op, node_for(op, [random_mat(2, 2)]), identity(2))
        assert_allclose(g.data, np.zeros((2, 2)))

    def test_im_embeds_imaginary_part(self):
        """Test that Im pulls G back to i·G."""
        op = Op.unary(OpKind.IM)
        G = random_mat(2, 2, seed=6)
        (g,) = vjp(op, node_for(op, [random_mat(2, 2, Field.COMPLEX)]), G)
        assert g.field == Field.COMPLEX
        assert_allclose(g.data, 1j * G.data)

    def test_cotangent_shape(self):
        """Test that the cotangent must match the node output."""
        op = Op.unary(OpKind.TRANSPOSE)
        with pytest.raises(FieldError) as exc_info:
            vjp(op, node_for(op, [random_mat(2, 3)]), random_mat(2, 3))
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_linear_in_cotangent(self):
        """Test additivity and real homogeneity of a pullback."""
        op = Op.unary(OpKind.MATFUNC, function=MatrixFunction.exp())
        x = random_mat(3, 3, seed=7) * 0.1
        node = node_for(op, [x])
        G1, G2 = random_mat(3, 3, seed=8), random_mat(3, 3, seed=9)
        (combined,) = vjp(op, node, G1 * 2.0 + G2 * -3.0)
        (g1,) = vjp(op, node, G1)
        (g2,) = vjp(op, node, G2)
        assert_allclose(combined.data, (g1 * 2.0 + g2 * -3.0).data, atol=1e-12)


class TestBackprop:
    """Test suite for gradients of whole programs."""

    def test_linear_functional(self):
        """Test that gᵀx has gradient g."""
        g = Mat.column([1.0, -2.0, 0.5])
        b = ProgramBuilder()
        program = b.build(b.matmul(g.T, b.leaf("x")))
        report = gradient(program, {"x": Mat.column([4.0, 5.0, 6.0])})
        assert_allclose(report["x"].data, g.data)

    def test_trace(self):
        """Test that tr(A) has gradient I."""
        report = gradient(trace_program(), {"A": random_mat(4, 4)})
        assert_allclose(report["A"].data, np.eye(4))

    def test_complex_linear_functional(self):
        """Test that Re(gᵀx) has gradient ḡ."""
        g = Mat.column([1 + 2j, -1j, 3.0 + 0j])
        b = ProgramBuilder()
        program = b.build(b.re(b.matmul(g.T, b.leaf("x"))))
        x = random_mat(3, 1, Field.COMPLEX, seed=1)
        report = gradient(program, {"x": x})
        assert_allclose(report["x"].data, np.conj(g.data))

    def test_fan_out(self):
        """Test that tr(A·A) accumulates to 2Aᵀ."""
        b = ProgramBuilder()
        a = b.leaf("A")
        program = b.build(b.trace(b.matmul(a, a)))
        A = random_mat(3, 3, seed=2)
        assert_allclose(gradient(program, {"A": A})["A"].data, 2.0 * A.data.T)
        assert gradcheck(program, {"A": A}).passed

    def test_unused_leaf_gets_zero(self):
        """Test that a leaf the output ignores has a zero gradient."""
        b = ProgramBuilder()
        a = b.leaf("A")
        b.leaf("B")
        program = b.build(b.trace(a))
        report = gradient(program, {"A": identity(2), "B": random_mat(2, 3)})
        assert_allclose(report["B"].data, np.zeros((2, 3)))

    def test_composition_reverses_adjoints(self):
        """Test that a two-stage tape applies the adjoints in reverse order."""
        X = random_mat(3, 3, seed=3)
        b = ProgramBuilder()
        t = b.transpose(b.leaf("A"))
        program = b.build(b.trace(b.matmul(t, X)))
        report = gradient(program, {"A": random_mat(3, 3, seed=4)})
        # T(A) = Aᵀ, S(B) = tr(BX): T*(S*(1)) = (I·Xᵀ)ᵀ = X
        assert_allclose(report["A"].data, X.data)

    @pytest.mark.parametrize(
        "f",
        [MatrixFunction.exp(), MatrixFunction.sin(), MatrixFunction.log1p()],
        ids=lambda f: f.name,
    )
    def test_trace_of_matfunc(self, f):
        """Test tr(f(A)) against finite differences on both fields."""
        for field in (Field.REAL, Field.COMPLEX):
            b = ProgramBuilder()
            out = b.trace(b.matfunc(b.leaf("A"), f))
            if field == Field.COMPLEX:
                out = b.re(out)
            A = random_mat(3, 3, field, seed=5)
            A = A * (0.4 / A.norm())
            assert gradcheck(b.build(out), {"A": A}).passed

    def test_trace_of_exp_gradient(self):
        """Test ∇ tr(exp(A)) = exp(A)ᵀ."""
        b = ProgramBuilder()
        program = b.build(b.trace(b.matfunc(b.leaf("A"), MatrixFunction.exp())))
        A = random_mat(3, 3, seed=6) * 0.2
        report = gradient(program, {"A": A})
        value = matfunc.apply(MatrixFunction.exp(), A).value
        assert_allclose(report["A"].data, value.data.T, rtol=1e-10)

    def test_complex_inverse_and_power(self):
        """Test Re tr(X·A⁻¹ + A³) on a complex leaf."""
        X = random_mat(3, 3, Field.COMPLEX, seed=7)
        b = ProgramBuilder()
        a = b.leaf("A")
        summed = b.add(b.matmul(X, b.inverse(a)), b.power(a, 3))
        program = b.build(b.re(b.trace(summed)))
        A = random_mat(3, 3, Field.COMPLEX, seed=8) * 0.3
        A = A + identity(3, Field.COMPLEX) * 2.0
        assert gradcheck(program, {"A": A}).passed


class TestWeightedProducts:
    """Test suite for gradients and adjoints under Weighted(H)."""

    def test_canonical_is_identity(self):
        """Test that canonical products leave the gradient alone."""
        g = random_mat(3, 2)
        assert gradient_in_product(g, InnerProduct.canonical()) is g

    def test_scaled_identity(self):
        """Test H = 2I halves the gradient."""
        g = random_mat(3, 2)
        P = InnerProduct.weighted(identity(3) * 2.0)
        assert_allclose(gradient_in_product(g, P).data, g.data / 2.0)

    def test_representer_identity(self):
        """Test ⟨∇_H f, v⟩_H = ⟨g, v⟩ for random SPD H."""
        for seed in range(10):
            H = random_spd(4, seed)
            P = InnerProduct.weighted(H)
            g = random_mat(4, 3, seed=seed + 1)
            v = random_mat(4, 3, seed=seed + 2)
            lhs = inner(gradient_in_product(g, P), v, P)
            assert lhs == pytest.approx(inner(g, v), abs=1e-10)

    def test_complex_rejected(self):
        """Test that weighted gradients are real-only."""
        P = InnerProduct.weighted(identity(2))
        with pytest.raises(FieldError) as exc_info:
            gradient_in_product(identity(2, Field.COMPLEX), P)
        assert exc_info.value.kind == ErrorKind.FIELD_MISMATCH

    def test_left_mul_at_identity_weight(self):
        """Test H = I reduces to XᵀG."""
        X, G = random_mat(3, 3, seed=1), random_mat(3, 2, seed=2)
        result = adjoint_weighted_left_mul(X, G, identity(3))
        assert_allclose(result.data, X.data.T @ G.data, rtol=1e-12)

    def test_left_mul_adjoint_identity(self):
        """Test ⟨B, X·A⟩_H = ⟨L*(B), A⟩_H."""
        for seed in range(10):
            H = random_spd(3, seed)
            P = InnerProduct.weighted(H)
            X = random_mat(3, 3, seed=seed + 1)
            A, B = random_mat(3, 2, seed=seed + 2), random_mat(3, 2, seed=seed + 3)
            lhs = inner(B, X @ A, P)
            rhs = inner(adjoint_weighted_left_mul(X, B, H), A, P)
            assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(lhs))

    def test_right_mul_adjoint_identity(self):
        """Test that the weighted right-multiplication adjoint is still G·Xᵀ."""
        for seed in range(10):
            H = random_spd(3, seed)
            P = InnerProduct.weighted(H)
            X = random_mat(2, 2, seed=seed + 1)
            A, B = random_mat(3, 2, seed=seed + 2), random_mat(3, 2, seed=seed + 3)
            adjoint = adjoint_weighted_right_mul(X, B, H)
            assert_allclose(adjoint.data, B.data @ X.data.T)
            lhs = inner(B, A @ X, P)
            assert abs(lhs - inner(adjoint, A, P)) <= 1e-10 * (1.0 + abs(lhs))

    def test_rejects_indefinite_weight(self):
        """Test NotSPD for a bad weight."""
        H = Mat([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(FieldError) as exc_info:
            adjoint_weighted_left_mul(identity(2), identity(2), H)
        assert exc_info.value.kind == ErrorKind.NOT_SPD

    def test_rejects_shape(self):
        """Test ShapeMismatch when H does not fit G."""
        with pytest.raises(FieldError) as exc_info:
            adjoint_weighted_left_mul(identity(2), identity(3), identity(2))
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_right_mul_on_tall_matrices(self):
        """Test that X only has to match the columns of G, not H."""
        H = random_spd(4, 6)
        X, G = random_mat(2, 2, seed=7), random_mat(4, 2, seed=8)
        adjoint = adjoint_weighted_right_mul(X, G, H)
        assert adjoint.shape == (4, 2)
        assert_allclose(adjoint.data, G.data @ X.data.T)

    def test_right_mul_rejects_shape(self):
        """Test ShapeMismatch when X does not act on the columns of G."""
        with pytest.raises(FieldError) as exc_info:
            adjoint_weighted_right_mul(identity(3), random_mat(4, 2), identity(4))
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_left_mul_rejects_wide_x(self):
        """Test that left multiplication needs X to act on the rows of H."""
        with pytest.raises(FieldError) as exc_info:
            adjoint_weighted_left_mul(identity(2), random_mat(3, 2), identity(3))
        assert exc_info.value.kind == ErrorKind.SHAPE_MISMATCH

    def test_gradient_with_products(self):
        """Test that gradient() applies H⁻¹ to the chosen leaf only."""
        H = random_spd(3, 4)
        b = ProgramBuilder()
        a, c = b.leaf("A"), b.leaf("C")
        program = b.build(b.trace(b.add(b.matmul(a, a), c)))
        A = random_mat(3, 3, seed=1)
        leaves = {"A": A, "C": random_mat(3, 3, seed=2)}
        report = gradient(program, leaves, {"A": InnerProduct.weighted(H)})
        expected = np.linalg.solve(H.data, 2.0 * A.data.T)
        assert_allclose(report["A"].data, expected, rtol=1e-10)
        assert_allclose(report["C"].data, np.eye(3))


class TestProductInvariance:
    """Test suite for invariance of the differential under the product choice."""

    @pytest.fixture(params=range(5))
    def setup(self, request):
        """A program with square intermediates and an SPD weight per value."""
        seed = 10 * request.param
        b = ProgramBuilder()
        a = b.leaf("A")
        squared = b.matmul(a, a)
        shifted = b.add(squared, identity(3) * 4.0)
        out = b.trace(b.inverse(shifted))
        program = b.build(out)
        products = {
            "A": InnerProduct.weighted(random_spd(3, seed + 1)),
            squared: InnerProduct.weighted(random_spd(3, seed + 2)),
            shifted: InnerProduct.weighted(random_spd(3, seed + 3)),
        }
        A = random_mat(3, 3, seed=seed + 4)
        return program, {"A": A * (1.0 / A.norm())}, products

    def test_backprop_unchanged_by_intermediate_products(self, setup):
        """Test that weighted intermediates give the canonical gradient back."""
        program, leaves, products = setup
        tape = record(program, leaves)
        canonical = backprop(tape)["A"]
        weighted = backprop_in_products(tape, products)["A"]
        assert_allclose(weighted.data, canonical.data, rtol=1e-9, atol=1e-12)

    def test_jvp_unchanged_and_representer_scaled(self, setup):
        """Test that jvp ignores P while the gradient changes by H⁻¹."""
        program, leaves, products = setup
        v = random_mat(3, 3, seed=5)
        _, tangent = jvp(program, leaves, {"A": v})
        P = products["A"]
        canonical = gradient(program, leaves)["A"]
        weighted = gradient(program, leaves, {"A": P})["A"]
        assert_allclose(weighted.data, np.linalg.solve(P.H.data, canonical.data))
        assert inner(weighted, v, P) == pytest.approx(tangent.item(), rel=1e-9)
        assert inner(canonical, v) == pytest.approx(tangent.item(), rel=1e-9)

    def test_unknown_value(self, setup):
        """Test that products must name recorded values."""
        program, leaves, _ = setup
        with pytest.raises(FieldError) as exc_info:
            products = {"nope": InnerProduct.canonical()}
            backprop_in_products(record(program, leaves), products)
        assert exc_info.value.kind == ErrorKind.PARSE_ERROR
