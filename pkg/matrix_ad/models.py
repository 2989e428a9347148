"""Data models shared across the differentiation engine."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor

if TYPE_CHECKING:
    from .matrix import Mat


class Field(str, Enum):
    REAL = "R"
    COMPLEX = "C"


class ErrorKind(str, Enum):
    SHAPE_MISMATCH = "ShapeMismatch"
    FIELD_MISMATCH = "FieldMismatch"
    SINGULAR = "Singular"
    NOT_SPD = "NotSPD"
    DOMAIN_VIOLATION = "DomainViolation"
    PARSE_ERROR = "ParseError"


class FieldError(Exception):
    """Failure of a matrix operation, tagged with exactly one error kind."""

    def __init__(self, kind: ErrorKind, detail: str):
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind
        self.detail = detail

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {"kind": self.kind.value, "detail": self.detail}


class ProductKind(str, Enum):
    CANONICAL = "canonical"
    WEIGHTED = "weighted"
    COMPLEX_CANONICAL = "complex-canonical"


@dataclass(frozen=True)
class InnerProduct:
    """Real inner product on a matrix space.

    Canonical is tr(AᵀB), Weighted(H) is tr(AᵀHB) for an SPD H, and
    ComplexCanonical is Re tr(AᴴB). H is verified SPD on construction.
    """

    kind: ProductKind = ProductKind.CANONICAL
    H: Optional["Mat"] = None

    def __post_init__(self) -> None:
        if self.kind != ProductKind.WEIGHTED:
            if self.H is not None:
                raise FieldError(
                    ErrorKind.SHAPE_MISMATCH,
                    f"{self.kind.value} product does not take a weight matrix",
                )
            return
        if self.H is None:
            raise FieldError(ErrorKind.NOT_SPD, "weighted product needs H")
        if self.H.field != Field.REAL:
            raise FieldError(
                ErrorKind.FIELD_MISMATCH, "weighted products are real-only"
            )
        if self.H.rows != self.H.cols:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH, f"weight matrix is {self.H.shape}"
            )
        data = self.H.data
        if not np.allclose(data, data.T, rtol=1e-12, atol=1e-14):
            raise FieldError(ErrorKind.NOT_SPD, "weight matrix is not symmetric")
        try:
            cho_factor(data, lower=True, check_finite=False)
        except LinAlgError as e:
            raise FieldError(ErrorKind.NOT_SPD, f"Cholesky failed: {e}") from e

    @classmethod
    def canonical(cls) -> "InnerProduct":
        return cls(ProductKind.CANONICAL)

    @classmethod
    def complex_canonical(cls) -> "InnerProduct":
        return cls(ProductKind.COMPLEX_CANONICAL)

    @classmethod
    def weighted(cls, H: "Mat") -> "InnerProduct":
        return cls(ProductKind.WEIGHTED, H)

    @property
    def is_weighted(self) -> bool:
        return self.kind == ProductKind.WEIGHTED


class OpKind(str, Enum):
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    CONJ_TRANSPOSE = "conj_transpose"
    TRACE = "trace"
    INVERSE = "inverse"
    POWER = "power"
    MATFUNC = "matfunc"
    ADD = "add"
    SCALE = "scale"
    RE = "re"
    IM = "im"
    SIGMOID = "sigmoid"
    ADD_BIAS = "add_bias"
    SQUARED_LOSS = "squared_loss"


# Kinds whose differential is the map itself, up to dropping a constant offset.
LINEAR_KINDS = frozenset(
    {
        OpKind.TRANSPOSE,
        OpKind.CONJ_TRANSPOSE,
        OpKind.TRACE,
        OpKind.RE,
        OpKind.IM,
        OpKind.ADD,
        OpKind.SCALE,
        OpKind.ADD_BIAS,
        OpKind.MATMUL,
    }
)


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class Dual:
    """Primal point paired with a tangent direction."""

    primal: "Mat"
    tangent: "Mat"

    def __post_init__(self) -> None:
        if self.primal.shape != self.tangent.shape:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH,
                f"primal {self.primal.shape} vs tangent {self.tangent.shape}",
            )
        if self.primal.field != self.tangent.field:
            raise FieldError(
                ErrorKind.FIELD_MISMATCH,
                f"primal {self.primal.field.value} vs tangent "
                f"{self.tangent.field.value}",
            )


@dataclass
class SeriesResult:
    """Truncated power series evaluation of a matrix function."""

    value: "Mat"
    terms_used: int
    truncation_residual: float


@dataclass
class FDConfig:
    """Finite-difference settings.

    ``step`` of None selects ∛eps·(1+‖x‖_F) at the point being perturbed.
    """

    step: Optional[float] = None
    scheme: str = "central"
    atol: float = 0.01
    rtol: float = 1e-4
    seeds: List[int] = field(default_factory=lambda: list(range(10)))

    def __post_init__(self) -> None:
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")
        if self.scheme != "central":
            raise ValueError(f"unsupported scheme: {self.scheme}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")

    def step_for(self, x: "Mat") -> float:
        if self.step is not None:
            return self.step
        return float(np.cbrt(np.finfo(float).eps)) * (1.0 + x.norm())


@dataclass
class CheckCase:
    """One comparison inside a check."""

    label: str
    expected: float
    actual: float
    abs_error: float
    rel_error: float
    passed: bool
    error: Optional[str] = None

    @classmethod
    def compare(
        cls,
        label: str,
        expected: float,
        actual: float,
        atol: float,
        rtol: float,
    ) -> "CheckCase":
        """Pass when the difference is inside the atol band or the rtol band."""
        abs_error = abs(actual - expected)
        rel_error = abs_error / abs(expected) if expected != 0 else abs_error
        passed = math.isfinite(abs_error) and (
            abs_error <= atol or abs_error <= rtol * abs(expected)
        )
        return cls(label, expected, actual, abs_error, rel_error, passed)

    @classmethod
    def failure(cls, label: str, error: str) -> "CheckCase":
        return cls(label, math.nan, math.nan, math.inf, math.inf, False, error)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "label": self.label,
            "expected": _json_float(self.expected),
            "actual": _json_float(self.actual),
            "abs_error": _json_float(self.abs_error),
            "rel_error": _json_float(self.rel_error),
            "passed": self.passed,
            "error": self.error,
        }


@dataclass
class CheckReport:
    """Outcome of a verification check."""

    name: str
    cases: List[CheckCase] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.cases) and all(case.passed for case in self.cases)

    @property
    def max_abs_error(self) -> float:
        return max((case.abs_error for case in self.cases), default=0.0)

    @property
    def max_rel_error(self) -> float:
        return max((case.rel_error for case in self.cases), default=0.0)

    @property
    def failures(self) -> List[CheckCase]:
        return [case for case in self.cases if not case.passed]

    def extend(self, other: "CheckReport", prefix: str = "") -> None:
        for case in other.cases:
            label = f"{prefix}{case.label}" if prefix else case.label
            self.cases.append(
                CheckCase(
                    label,
                    case.expected,
                    case.actual,
                    case.abs_error,
                    case.rel_error,
                    case.passed,
                    case.error,
                )
            )

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "name": self.name,
            "pass": self.passed,
            "max_abs_error": _json_float(self.max_abs_error),
            "max_rel_error": _json_float(self.max_rel_error),
            "cases": [case.to_dict() for case in self.cases],
            "metadata": self.metadata,
        }

    def to_text(self) -> str:
        """Render as ``key: value`` lines."""
        lines = [
            f"name: {self.name}",
            f"pass: {str(self.passed).lower()}",
            f"cases: {len(self.cases)}",
            f"max_abs_error: {self.max_abs_error:.3e}",
            f"max_rel_error: {self.max_rel_error:.3e}",
        ]
        for key in sorted(self.metadata):
            lines.append(f"{key}: {self.metadata[key]}")
        for case in self.failures:
            reason = case.error or f"abs_error={case.abs_error:.3e}"
            lines.append(f"failed: {case.label} ({reason})")
        return "\n".join(lines)


@dataclass
class GradientReport:
    """Per-leaf gradients together with the inner product they represent."""

    gradients: Dict[str, "Mat"]
    product: ProductKind = ProductKind.CANONICAL

    def __getitem__(self, leaf: str) -> "Mat":
        return self.gradients[leaf]

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "product": self.product.value,
            "gradients": {
                name: grad.to_nested() for name, grad in self.gradients.items()
            },
        }


def _json_float(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def max_relative_difference(
    actual: Sequence["Mat"], expected: Sequence["Mat"]
) -> float:
    """Largest ‖a−b‖_F / max(‖a‖_F, ‖b‖_F) over pairs; 0 when both vanish."""
    worst = 0.0
    for a, b in zip(actual, expected):
        scale = max(a.norm(), b.norm())
        diff = (a - b).norm()
        if diff == 0.0:
            continue
        worst = max(worst, diff / scale if scale > 0 else math.inf)
    return worst
