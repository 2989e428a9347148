"""Matrix functions f(A) = Σ cₖAᵏ and their Fréchet derivatives.

The Fréchet derivative (df)_A(E) is available two ways: term by term from
the power series, and as the top-right block of f applied to the 2n×2n
block matrix [[A, E], [0, A]]. Both truncate at the index K chosen when
evaluating f(A), so they agree as polynomials up to rounding.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .matrix import Mat, conj_transpose, spectral_radius_estimate
from .models import ErrorKind, FieldError, SeriesResult

logger = logging.getLogger(__name__)

K_MAX = 200
CONVERGENCE_RTOL = 1e-16
RADIUS_SAFETY = 0.95
BLOCK_DIAGONAL_TOL = 1e-12


class FunctionKind(str, Enum):
    EXP = "exp"
    LOG1P = "log1p"
    SIN = "sin"
    COS = "cos"
    POLY = "poly"


class BlockConsistencyError(RuntimeError):
    """The block evaluation contradicted the structure it must have."""


@dataclass(frozen=True)
class MatrixFunction:
    """Analytic function given by its Taylor coefficients around 0.

    Log1p is log(I + A) with c₀ = 0 and cₖ = (−1)^{k+1}/k, so it needs the
    spectrum of A inside the unit disk. Poly takes real coefficients
    (c₀, c₁, ...) and is summed exactly.
    """

    kind: FunctionKind
    coeffs: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == FunctionKind.POLY and not self.coeffs:
            raise ValueError("poly needs at least one coefficient")
        if self.kind != FunctionKind.POLY and self.coeffs:
            raise ValueError(f"{self.kind.value} has fixed coefficients")

    @classmethod
    def exp(cls) -> "MatrixFunction":
        return cls(FunctionKind.EXP)

    @classmethod
    def log1p(cls) -> "MatrixFunction":
        return cls(FunctionKind.LOG1P)

    @classmethod
    def sin(cls) -> "MatrixFunction":
        return cls(FunctionKind.SIN)

    @classmethod
    def cos(cls) -> "MatrixFunction":
        return cls(FunctionKind.COS)

    @classmethod
    def poly(cls, coeffs: Sequence[float]) -> "MatrixFunction":
        return cls(FunctionKind.POLY, tuple(float(c) for c in coeffs))

    @classmethod
    def monomial(cls, k: int) -> "MatrixFunction":
        return cls.poly([0.0] * k + [1.0])

    @classmethod
    def from_name(cls, name: str) -> "MatrixFunction":
        """Parse ``exp``, ``log1p``, ``sin``, ``cos`` or ``poly:c0,c1,...``."""
        name = name.strip().lower()
        if name.startswith("poly:"):
            try:
                return cls.poly([float(c) for c in name[5:].split(",")])
            except ValueError as e:
                raise FieldError(
                    ErrorKind.PARSE_ERROR, f"bad polynomial {name!r}"
                ) from e
        try:
            return cls(FunctionKind(name))
        except ValueError as e:
            raise FieldError(ErrorKind.PARSE_ERROR, f"unknown function {name!r}") from e

    @property
    def name(self) -> str:
        if self.kind == FunctionKind.POLY:
            return "poly:" + ",".join(f"{c:g}" for c in self.coeffs)
        return self.kind.value

    @property
    def domain_radius(self) -> float:
        return 1.0 if self.kind == FunctionKind.LOG1P else math.inf

    def coefficients(self, count: int) -> List[float]:
        """The first ``count`` Taylor coefficients."""
        if self.kind == FunctionKind.POLY:
            padded = list(self.coeffs) + [0.0] * max(0, count - len(self.coeffs))
            return padded[:count]
        if self.kind == FunctionKind.LOG1P:
            return [0.0] + [(-1.0) ** (k + 1) / k for k in range(1, count)]
        coeffs = []
        inv_factorial = 1.0
        for k in range(count):
            if k > 0:
                inv_factorial /= k
            if self.kind == FunctionKind.EXP:
                coeffs.append(inv_factorial)
            elif self.kind == FunctionKind.SIN:
                sign = (-1.0) ** ((k - 1) // 2)
                coeffs.append(0.0 if k % 2 == 0 else sign * inv_factorial)
            else:
                coeffs.append((-1.0) ** (k // 2) * inv_factorial if k % 2 == 0 else 0.0)
        return coeffs


def _require_square(A: Mat) -> None:
    if not A.is_square:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"matrix function of {A.shape}")


def _check_domain(f: MatrixFunction, A: Mat) -> None:
    if math.isinf(f.domain_radius):
        return
    radius = spectral_radius_estimate(A)
    if radius >= RADIUS_SAFETY * f.domain_radius:
        raise FieldError(
            ErrorKind.DOMAIN_VIOLATION,
            f"{f.name}: spectral radius estimate {radius:.4g} outside "
            f"{RADIUS_SAFETY} x {f.domain_radius:g}",
        )


def _partial_sum(coeffs: Sequence[float], M: np.ndarray) -> np.ndarray:
    total = np.zeros_like(M)
    power = np.eye(M.shape[0], dtype=M.dtype)
    for k, c in enumerate(coeffs):
        if k > 0:
            power = power @ M
        if c != 0.0:
            total = total + c * power
    return total


def apply(f: MatrixFunction, A: Mat) -> SeriesResult:
    """Evaluate f(A) by its truncated power series."""
    _require_square(A)
    if f.kind == FunctionKind.POLY:
        value = _partial_sum(f.coeffs, A.data)
        last = f.coeffs[-1] * np.linalg.matrix_power(A.data, len(f.coeffs) - 1)
        return SeriesResult(
            Mat(value, A.field), len(f.coeffs), _relative(last, value)
        )

    _check_domain(f, A)
    coeffs = f.coefficients(K_MAX)
    total = np.zeros_like(A.data)
    power = np.eye(A.rows, dtype=A.data.dtype)
    previous_small = False
    for k, c in enumerate(coeffs):
        if k > 0:
            power = power @ A.data
        term = c * power
        total = total + term
        small = np.linalg.norm(term) <= CONVERGENCE_RTOL * np.linalg.norm(total)
        if small and previous_small:
            logger.debug(f"{f.name} series converged with {k + 1} terms")
            return SeriesResult(Mat(total, A.field), k + 1, _relative(term, total))
        previous_small = small
    raise FieldError(
        ErrorKind.DOMAIN_VIOLATION,
        f"{f.name} series did not converge in {K_MAX} terms",
    )


def _relative(term: np.ndarray, total: np.ndarray) -> float:
    denom = float(np.linalg.norm(total))
    return float(np.linalg.norm(term)) / denom if denom > 0 else 0.0


def _check_direction(A: Mat, E: Mat) -> None:
    if E.shape != A.shape:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"direction {E.shape} vs {A.shape}")
    if E.field != A.field:
        raise FieldError(ErrorKind.FIELD_MISMATCH, "direction field differs")


def frechet_series(
    f: MatrixFunction, A: Mat, E: Mat, base: Optional[SeriesResult] = None
) -> Mat:
    """Σₖ cₖ Σᵢ AⁱEA^{k−1−i}, truncated where apply(f, A) truncates."""
    _check_direction(A, E)
    base = base or apply(f, A)
    coeffs = f.coefficients(base.terms_used)
    power = np.eye(A.rows, dtype=A.data.dtype)
    # derivative of A^k along E: D_k = D_{k-1}·A + A^{k-1}·E
    derivative = np.zeros_like(A.data)
    total = np.zeros_like(A.data)
    for k in range(1, base.terms_used):
        derivative = derivative @ A.data + power @ E.data
        power = power @ A.data
        if coeffs[k] != 0.0:
            total = total + coeffs[k] * derivative
    return Mat(total, A.field)


def frechet_block(
    f: MatrixFunction, A: Mat, E: Mat, base: Optional[SeriesResult] = None
) -> Mat:
    """Top-right block of f([[A, E], [0, A]])."""
    _check_direction(A, E)
    base = base or apply(f, A)
    n = A.rows
    block = np.block([[A.data, E.data], [np.zeros_like(A.data), A.data]])
    value = _partial_sum(f.coefficients(base.terms_used), block)

    if np.any(value[n:, :n] != 0):
        raise BlockConsistencyError("bottom-left block of f(block) is not zero")
    expected = base.value.data
    tolerance = BLOCK_DIAGONAL_TOL * max(1.0, float(np.linalg.norm(expected)))
    diagonals = (("top-left", value[:n, :n]), ("bottom-right", value[n:, n:]))
    for label, diagonal in diagonals:
        if np.linalg.norm(diagonal - expected) > tolerance:
            raise BlockConsistencyError(f"{label} block differs from f(A)")
    return Mat(value[:n, n:], A.field)


def adjoint_frechet(f: MatrixFunction, A: Mat, G: Mat) -> Mat:
    """Adjoint of (df)_A under the canonical product: (df) at Aᵀ (Aᴴ if complex)."""
    return frechet_block(f, conj_transpose(A), G)


