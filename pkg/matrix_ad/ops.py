"""Primitive applications and the programs built from them.

A ``Program`` is an immutable, topologically ordered list of ``Op``s over
named values. Leaves are the differentiable inputs; constants (data,
targets, fixed factors) ride along inside the ops that use them, so every
named value has a tangent and a cotangent.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import matfunc
from .matfunc import MatrixFunction
from .matrix import Mat, conj_transpose, lu_factor, transpose
from .models import ErrorKind, Field, FieldError, OpKind, Side

logger = logging.getLogger(__name__)

Operand = Union[str, Mat]

UNARY_KINDS = frozenset(
    {
        OpKind.TRANSPOSE,
        OpKind.CONJ_TRANSPOSE,
        OpKind.TRACE,
        OpKind.INVERSE,
        OpKind.POWER,
        OpKind.MATFUNC,
        OpKind.SCALE,
        OpKind.RE,
        OpKind.IM,
        OpKind.SIGMOID,
        OpKind.SQUARED_LOSS,
    }
)


@dataclass(frozen=True)
class Op:
    """One primitive application.

    ``constant`` is the fixed operand of one-sided products (``side`` says
    where it sits: LEFT is X·a, RIGHT is a·X), the fixed summand of
    ADD/ADD_BIAS, or the target of SQUARED_LOSS.
    """

    kind: OpKind
    inputs: Tuple[str, ...]
    output: str
    constant: Optional[Mat] = None
    side: Side = Side.RIGHT
    k: int = 1
    c: float = 1.0
    function: Optional[MatrixFunction] = None

    @classmethod
    def unary(cls, kind: OpKind, **params: Any) -> "Op":
        """A stage for chains: single input, placeholder names."""
        return cls(kind, ("in",), "out", **params)

    @property
    def label(self) -> str:
        if self.kind == OpKind.POWER:
            return f"power({self.k})"
        if self.kind == OpKind.SCALE:
            return f"scale({self.c:g})"
        if self.kind == OpKind.MATFUNC and self.function is not None:
            return f"matfunc({self.function.name})"
        if self.kind == OpKind.MATMUL and self.constant is not None:
            return f"matmul({self.side.value} constant)"
        return self.kind.value


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def _require(condition: bool, kind: ErrorKind, detail: str) -> None:
    if not condition:
        raise FieldError(kind, detail)


def _real_only(op: Op, a: Mat) -> None:
    _require(
        a.field == Field.REAL,
        ErrorKind.FIELD_MISMATCH,
        f"{op.label} is defined on real matrices only",
    )


def broadcast_bias(bias: Mat, cols: int) -> Mat:
    return Mat(np.repeat(bias.data, cols, axis=1), bias.field)


def apply_op(op: Op, args: Sequence[Mat]) -> Tuple[Mat, Any]:
    """Evaluate a primitive; returns the value and the context backprop needs."""
    _require(
        len(args) == len(op.inputs),
        ErrorKind.SHAPE_MISMATCH,
        f"{op.label} expects {len(op.inputs)} inputs, got {len(args)}",
    )
    a = args[0]
    kind = op.kind

    if kind == OpKind.MATMUL:
        if op.constant is None:
            return args[0] @ args[1], None
        if op.side == Side.LEFT:
            return op.constant @ a, None
        return a @ op.constant, None
    if kind == OpKind.TRANSPOSE:
        return transpose(a), None
    if kind == OpKind.CONJ_TRANSPOSE:
        return conj_transpose(a), None
    if kind == OpKind.TRACE:
        _require(a.is_square, ErrorKind.SHAPE_MISMATCH, f"trace of {a.shape}")
        return Mat(np.array([[np.trace(a.data)]]), a.field), None
    if kind == OpKind.INVERSE:
        factors = lu_factor(a)
        return factors.inverse(), factors
    if kind == OpKind.POWER:
        _require(op.k >= 1, ErrorKind.DOMAIN_VIOLATION, f"power {op.k} < 1")
        _require(a.is_square, ErrorKind.SHAPE_MISMATCH, f"power of {a.shape}")
        powers = [np.eye(a.rows, dtype=a.data.dtype)]
        for _ in range(op.k):
            powers.append(powers[-1] @ a.data)
        return Mat(powers[-1], a.field), powers
    if kind == OpKind.MATFUNC:
        _require(op.function is not None, ErrorKind.PARSE_ERROR, "matfunc without f")
        result = matfunc.apply(op.function, a)
        return result.value, result
    if kind == OpKind.ADD:
        if op.constant is None:
            return args[0] + args[1], None
        return a + op.constant, None
    if kind == OpKind.SCALE:
        return a * op.c, None
    if kind == OpKind.RE:
        return a.real(), None
    if kind == OpKind.IM:
        return a.imag(), None
    if kind == OpKind.SIGMOID:
        _real_only(op, a)
        return Mat(stable_sigmoid(a.data), a.field), None
    if kind == OpKind.ADD_BIAS:
        bias = op.constant if op.constant is not None else args[1]
        _require(
            bias.cols == 1 and bias.rows == a.rows,
            ErrorKind.SHAPE_MISMATCH,
            f"bias {bias.shape} for {a.shape}",
        )
        return a + broadcast_bias(bias, a.cols), None
    if kind == OpKind.SQUARED_LOSS:
        _real_only(op, a)
        target = op.constant
        _require(target is not None, ErrorKind.SHAPE_MISMATCH, "loss without target")
        _require(
            target.shape == a.shape,
            ErrorKind.SHAPE_MISMATCH,
            f"target {target.shape} vs {a.shape}",
        )
        residual = a - target
        return Mat([[float(np.sum(residual.data**2))]], Field.REAL), residual
    raise FieldError(ErrorKind.PARSE_ERROR, f"unknown op kind {kind}")


@dataclass(frozen=True)
class Program:
    """Straight-line program over named matrix values."""

    leaves: Tuple[str, ...]
    ops: Tuple[Op, ...]
    output: str

    def __post_init__(self) -> None:
        known = set(self.leaves)
        if len(known) != len(self.leaves):
            raise FieldError(ErrorKind.PARSE_ERROR, "duplicate leaf names")
        for op in self.ops:
            missing = [name for name in op.inputs if name not in known]
            if missing:
                raise FieldError(
                    ErrorKind.PARSE_ERROR, f"{op.label} reads undefined {missing}"
                )
            if op.output in known:
                raise FieldError(ErrorKind.PARSE_ERROR, f"{op.output} redefined")
            known.add(op.output)
        if self.output not in known:
            raise FieldError(ErrorKind.PARSE_ERROR, f"undefined output {self.output}")

    @classmethod
    def chain(cls, stages: Sequence[Op], leaf: str = "x") -> "Program":
        """Compose single-input stages left to right."""
        ops: List[Op] = []
        current = leaf
        for i, stage in enumerate(stages):
            if stage.kind not in UNARY_KINDS and not (
                stage.kind in (OpKind.MATMUL, OpKind.ADD, OpKind.ADD_BIAS)
                and stage.constant is not None
            ):
                raise FieldError(
                    ErrorKind.PARSE_ERROR, f"{stage.label} is not a single-input stage"
                )
            ops.append(replace(stage, inputs=(current,), output=f"s{i}"))
            current = f"s{i}"
        return cls((leaf,), tuple(ops), current)

    def evaluate(self, values: Mapping[str, Mat]) -> Mat:
        env = self.run(values)
        return env[self.output]

    def run(self, values: Mapping[str, Mat]) -> Dict[str, Mat]:
        env = self._leaf_env(values)
        for op in self.ops:
            env[op.output], _ = apply_op(op, [env[name] for name in op.inputs])
        return env

    def _leaf_env(self, values: Mapping[str, Mat]) -> Dict[str, Mat]:
        missing = [name for name in self.leaves if name not in values]
        if missing:
            raise FieldError(ErrorKind.PARSE_ERROR, f"no value for leaves {missing}")
        return {name: values[name] for name in self.leaves}

    def function_of(self, leaf: str, values: Mapping[str, Mat]) -> Callable[[Mat], Mat]:
        """The program as a function of one leaf, others held at ``values``."""
        if leaf not in self.leaves:
            raise FieldError(ErrorKind.PARSE_ERROR, f"unknown leaf {leaf}")
        frozen = dict(values)

        def evaluate_at(x: Mat) -> Mat:
            frozen[leaf] = x
            return self.evaluate(frozen)

        return evaluate_at

    def __call__(self, x: Mat) -> Mat:
        if len(self.leaves) != 1:
            raise FieldError(ErrorKind.PARSE_ERROR, "call needs a single-leaf program")
        return self.evaluate({self.leaves[0]: x})


@dataclass
class ProgramBuilder:
    """Records primitive applications and hands out value names."""

    leaves: List[str] = field(default_factory=list)
    ops: List[Op] = field(default_factory=list)

    def leaf(self, name: str) -> str:
        self.leaves.append(name)
        return name

    def _emit(self, kind: OpKind, inputs: Sequence[str], **params: Any) -> str:
        name = f"v{len(self.ops)}"
        self.ops.append(Op(kind, tuple(inputs), name, **params))
        return name

    def matmul(self, a: Operand, b: Operand) -> str:
        if isinstance(a, Mat) and isinstance(b, Mat):
            raise FieldError(ErrorKind.PARSE_ERROR, "matmul of two constants")
        if isinstance(a, Mat):
            return self._emit(OpKind.MATMUL, [b], constant=a, side=Side.LEFT)
        if isinstance(b, Mat):
            return self._emit(OpKind.MATMUL, [a], constant=b, side=Side.RIGHT)
        return self._emit(OpKind.MATMUL, [a, b])

    def add(self, a: str, b: Operand) -> str:
        if isinstance(b, Mat):
            return self._emit(OpKind.ADD, [a], constant=b)
        return self._emit(OpKind.ADD, [a, b])

    def add_bias(self, a: str, bias: Operand) -> str:
        if isinstance(bias, Mat):
            return self._emit(OpKind.ADD_BIAS, [a], constant=bias)
        return self._emit(OpKind.ADD_BIAS, [a, bias])

    def transpose(self, a: str) -> str:
        return self._emit(OpKind.TRANSPOSE, [a])

    def conj_transpose(self, a: str) -> str:
        return self._emit(OpKind.CONJ_TRANSPOSE, [a])

    def trace(self, a: str) -> str:
        return self._emit(OpKind.TRACE, [a])

    def inverse(self, a: str) -> str:
        return self._emit(OpKind.INVERSE, [a])

    def power(self, a: str, k: int) -> str:
        return self._emit(OpKind.POWER, [a], k=k)

    def matfunc(self, a: str, f: MatrixFunction) -> str:
        return self._emit(OpKind.MATFUNC, [a], function=f)

    def scale(self, a: str, c: float) -> str:
        return self._emit(OpKind.SCALE, [a], c=float(c))

    def re(self, a: str) -> str:
        return self._emit(OpKind.RE, [a])

    def im(self, a: str) -> str:
        return self._emit(OpKind.IM, [a])

    def sigmoid(self, a: str) -> str:
        return self._emit(OpKind.SIGMOID, [a])

    def squared_loss(self, a: str, target: Mat) -> str:
        return self._emit(OpKind.SQUARED_LOSS, [a], constant=target)

    def build(self, output: str) -> Program:
        program = Program(tuple(self.leaves), tuple(self.ops), output)
        logger.debug(f"Built program with {len(program.ops)} ops over {program.leaves}")
        return program
