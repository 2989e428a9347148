"""Reverse-mode differentiation: record a tape, then pull cotangents back.

VJP rules are adjoints under the canonical real product of each space
(tr(AᵀB) for real matrices, Re tr(AᴴB) for complex ones), so for complex
leaves and a real output the gradient is the representer of the
differential in Re tr(XᴴY). Gradients for other products are obtained from
the canonical one.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import matfunc
from .forward import jvp_power
from .matrix import Mat, conj_transpose, identity, solve_spd, transpose
from .models import (
    ErrorKind,
    Field,
    FieldError,
    GradientReport,
    InnerProduct,
    OpKind,
    ProductKind,
    Side,
)
from .ops import Op, Program, apply_op

logger = logging.getLogger(__name__)


@dataclass
class Node:
    """A recorded primitive application.

    Slots 0..L−1 are the leaves, so ``inputs`` refers to leaves and to
    earlier nodes alike, and ``id`` is the node's own slot.
    """

    id: int
    op: Op
    inputs: Tuple[int, ...]
    args: Tuple[Mat, ...]
    primal: Mat
    saved: Any = None


@dataclass
class Tape:
    leaves: Dict[str, Mat]
    nodes: List[Node] = field(default_factory=list)
    output: int = 0

    @property
    def leaf_names(self) -> List[str]:
        return list(self.leaves)

    def value(self, slot: int) -> Mat:
        if slot < len(self.leaves):
            return list(self.leaves.values())[slot]
        return self.nodes[slot - len(self.leaves)].primal

    @property
    def result(self) -> float:
        return float(self.value(self.output).item().real)


VjpRule = Callable[[Op, Node, Mat], Tuple[Optional[Mat], ...]]

VJP_RULES: Dict[OpKind, VjpRule] = {}


def defvjp(kind: OpKind) -> Callable[[VjpRule], VjpRule]:
    def register(rule: VjpRule) -> VjpRule:
        if kind in VJP_RULES:
            raise ValueError(f"VJP rule for {kind.value} registered twice")
        VJP_RULES[kind] = rule
        return rule

    return register


def record(program: Program, leaves: Mapping[str, Mat]) -> Tape:
    """Evaluate a program, keeping every primal and saved context."""
    missing = [name for name in program.leaves if name not in leaves]
    if missing:
        raise FieldError(ErrorKind.PARSE_ERROR, f"no value for leaves {missing}")
    tape = Tape({name: leaves[name] for name in program.leaves})
    slots = {name: i for i, name in enumerate(program.leaves)}
    for op in program.ops:
        inputs = tuple(slots[name] for name in op.inputs)
        args = tuple(tape.value(slot) for slot in inputs)
        primal, saved = apply_op(op, args)
        node_id = len(tape.leaves) + len(tape.nodes)
        tape.nodes.append(Node(node_id, op, inputs, args, primal, saved))
        slots[op.output] = node_id
    tape.output = slots[program.output]
    out = tape.value(tape.output)
    if out.shape != (1, 1):
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH, f"output must be 1x1, got {out.shape}"
        )
    if out.field != Field.REAL:
        raise FieldError(
            ErrorKind.FIELD_MISMATCH, f"output must be real, got {out.field.value}"
        )
    logger.debug(f"Recorded tape with {len(tape.nodes)} nodes")
    return tape


def vjp(op: Op, node: Node, cotangent: Mat) -> Tuple[Optional[Mat], ...]:
    """Cotangents for each input of ``node`` given the cotangent of its output."""
    if cotangent.shape != node.primal.shape:
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH,
            f"{op.label}: cotangent {cotangent.shape} vs output {node.primal.shape}",
        )
    return VJP_RULES[op.kind](op, node, cotangent)


def _pull_back(
    tape: Tape,
    seed: Mat,
    to_canonical: Callable[[int, Mat], Mat],
    from_canonical: Callable[[int, Mat], Mat],
) -> Dict[int, Mat]:
    n_leaves = len(tape.leaves)
    cotangents: Dict[int, Mat] = {tape.output: seed}
    for node in reversed(tape.nodes):
        if node.id not in cotangents:
            continue
        g = to_canonical(node.id, cotangents.pop(node.id))
        for slot, contribution in zip(node.inputs, vjp(node.op, node, g)):
            if contribution is None:
                continue
            contribution = from_canonical(slot, contribution)
            if slot in cotangents:
                cotangents[slot] = cotangents[slot] + contribution
            else:
                cotangents[slot] = contribution
    return {slot: g for slot, g in cotangents.items() if slot < n_leaves}


def _report(tape: Tape, leaf_cotangents: Dict[int, Mat]) -> GradientReport:
    gradients = {}
    for slot, (name, value) in enumerate(tape.leaves.items()):
        gradients[name] = leaf_cotangents.get(slot, value.zeros_like())
    return GradientReport(gradients, ProductKind.CANONICAL)


def _seed() -> Mat:
    return Mat([[1.0]], Field.REAL)


def _unchanged(slot: int, g: Mat) -> Mat:
    return g


def backprop(tape: Tape) -> GradientReport:
    """Canonical-product gradients of the tape's scalar output for every leaf."""
    leaf_cotangents = _pull_back(tape, _seed(), _unchanged, _unchanged)
    return _report(tape, leaf_cotangents)


def backprop_in_products(
    tape: Tape, products: Mapping[str, InnerProduct]
) -> GradientReport:
    """Backprop with weighted products on chosen values.

    A value named in ``products`` keeps its cotangent as the representer in
    that product; each step maps it through the weighted adjoint
    H_in⁻¹·Tᵀ·H_out. Leaf gradients are mapped back to the canonical product,
    so the result matches ``backprop`` whatever products are chosen.
    """
    names = tape.leaf_names + [node.op.output for node in tape.nodes]
    weights: Dict[int, Mat] = {}
    for name, product in products.items():
        if name not in names:
            raise FieldError(ErrorKind.PARSE_ERROR, f"unknown value {name}")
        if product.is_weighted:
            weights[names.index(name)] = product.H

    def to_canonical(slot: int, g: Mat) -> Mat:
        return weights[slot] @ g if slot in weights else g

    def from_canonical(slot: int, g: Mat) -> Mat:
        return solve_spd(weights[slot], g) if slot in weights else g

    seed = from_canonical(tape.output, _seed())
    leaf_cotangents = _pull_back(tape, seed, to_canonical, from_canonical)
    canonical = {slot: to_canonical(slot, g) for slot, g in leaf_cotangents.items()}
    return _report(tape, canonical)


def gradient(
    program: Program,
    leaves: Mapping[str, Mat],
    products: Optional[Mapping[str, InnerProduct]] = None,
) -> GradientReport:
    """Record, backprop, and express each leaf gradient in its chosen product."""
    report = backprop(record(program, leaves))
    if not products:
        return report
    gradients = {
        name: gradient_in_product(g, products[name]) if name in products else g
        for name, g in report.gradients.items()
    }
    kinds = {products[name].kind for name in products}
    kind = kinds.pop() if len(kinds) == 1 else ProductKind.CANONICAL
    return GradientReport(gradients, kind)


def gradient_in_product(g_canonical: Mat, P: InnerProduct) -> Mat:
    """Representer of the same differential in P: H⁻¹·g for Weighted(H)."""
    if not P.is_weighted:
        return g_canonical
    if g_canonical.is_complex:
        raise FieldError(ErrorKind.FIELD_MISMATCH, "weighted gradients are real-only")
    return solve_spd(P.H, g_canonical)


def adjoint_weighted_left_mul(X: Mat, G: Mat, H: Mat) -> Mat:
    """Adjoint of A ↦ X·A under ⟨A, B⟩_H = tr(AᵀHB): H⁻¹XᵀH·G."""
    _check_weighted(X, G, H)
    if X.rows != H.rows:
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH, f"X {X.shape} does not act on H {H.shape}"
        )
    return solve_spd(H, transpose(X) @ (H @ G))


def adjoint_weighted_right_mul(X: Mat, G: Mat, H: Mat) -> Mat:
    """Adjoint of A ↦ A·X under ⟨A, B⟩_H; H cancels, leaving G·Xᵀ."""
    _check_weighted(X, G, H)
    if X.cols != G.cols:
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH, f"X {X.shape} does not act on G {G.shape}"
        )
    return G @ transpose(X)


def _check_weighted(X: Mat, G: Mat, H: Mat) -> None:
    # H weights the rows of G; X must be square on either side
    InnerProduct.weighted(H)
    if X.is_complex or G.is_complex:
        raise FieldError(ErrorKind.FIELD_MISMATCH, "weighted adjoints are real-only")
    if not X.is_square or G.rows != H.rows:
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH, f"X {X.shape}, G {G.shape}, H {H.shape}"
        )


@defvjp(OpKind.MATMUL)
def _matmul_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    if op.constant is None:
        a, b = node.args
        return g @ conj_transpose(b), conj_transpose(a) @ g
    if op.side == Side.LEFT:
        return (conj_transpose(op.constant) @ g,)
    return (g @ conj_transpose(op.constant),)


@defvjp(OpKind.TRANSPOSE)
def _transpose_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    return (transpose(g),)


@defvjp(OpKind.CONJ_TRANSPOSE)
def _conj_transpose_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    return (conj_transpose(g),)


@defvjp(OpKind.TRACE)
def _trace_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    n = node.args[0].rows
    return (identity(n, g.field) * g.item(),)


@defvjp(OpKind.INVERSE)
def _inverse_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    factors = node.saved
    left = factors.solve(g, trans=2)
    return (-factors.solve_right(left, adjoint=True),)


@defvjp(OpKind.POWER)
def _power_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    powers = [np.conj(p).T for p in node.saved]
    return (jvp_power(conj_transpose(node.args[0]), g, op.k, powers),)


@defvjp(OpKind.MATFUNC)
def _matfunc_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    return (matfunc.adjoint_frechet(op.function, node.args[0], g),)


@defvjp(OpKind.ADD)
def _add_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    return (g,) if op.constant is not None else (g, g)


@defvjp(OpKind.SCALE)
def _scale_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    return (g * op.c,)


@defvjp(OpKind.RE)
def _re_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    # real cotangent embedded as the real part
    return (g.as_field(node.args[0].field),)


@defvjp(OpKind.IM)
def _im_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    x = node.args[0]
    if not x.is_complex:
        return (x.zeros_like(),)
    return (Mat(1j * g.data, Field.COMPLEX),)


@defvjp(OpKind.SIGMOID)
def _sigmoid_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    s = node.primal.data
    return (Mat(s * (1.0 - s) * g.data, Field.REAL),)


@defvjp(OpKind.ADD_BIAS)
def _add_bias_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    if op.constant is not None:
        return (g,)
    return g, Mat(np.sum(g.data, axis=1, keepdims=True), g.field)


@defvjp(OpKind.SQUARED_LOSS)
def _squared_loss_vjp(op: Op, node: Node, g: Mat) -> Tuple[Optional[Mat], ...]:
    residual: Mat = node.saved
    return (residual * (2.0 * g.item()),)

