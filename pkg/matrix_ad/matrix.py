"""Dense real/complex matrix values and the linear algebra every rule is built on.

A matrix carries its scalar field as a tag: Real matrices are stored as
float64 arrays, Complex matrices as complex128 arrays, and every rule is
written once against both. Values are immutable after construction.

``random_mat`` draws from numpy's PCG64 generator (``numpy.random.default_rng``)
seeded with the given integer: entries are standard normal, and complex
entries get independent standard normal real and imaginary parts.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, LinAlgWarning, cho_factor, cho_solve
from scipy.linalg import lu_factor as _scipy_lu_factor
from scipy.linalg import lu_solve as _scipy_lu_solve

from .models import ErrorKind, Field, FieldError, InnerProduct, ProductKind

logger = logging.getLogger(__name__)

Scalar = Union[float, complex]

SINGULAR_PIVOT_RTOL = 1e-12
SPECTRAL_SAFETY_FACTOR = 1.1


@dataclass(frozen=True, eq=False)
class Mat:
    """Dense matrix over the real or complex field."""

    data: np.ndarray
    field: Field = Field.REAL

    # numpy scalars on the left defer to __rmul__ instead of broadcasting.
    __array_ufunc__ = None

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH, f"expected a 2-D matrix, got {raw.shape}"
            )
        if self.field == Field.REAL:
            if np.iscomplexobj(raw):
                if np.any(raw.imag != 0):
                    raise FieldError(
                        ErrorKind.FIELD_MISMATCH,
                        "real matrix with nonzero imaginary parts",
                    )
                raw = raw.real
            arr = np.array(raw, dtype=np.float64)
        else:
            arr = np.array(raw, dtype=np.complex128)
        if not np.all(np.isfinite(arr)):
            raise FieldError(ErrorKind.DOMAIN_VIOLATION, "non-finite entry")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_rows(
        cls, rows: Sequence[Sequence[Scalar]], field: Optional[Field] = None
    ) -> "Mat":
        arr = np.array(rows)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if field is None:
            field = Field.COMPLEX if np.iscomplexobj(arr) else Field.REAL
        return cls(arr, field)

    @classmethod
    def scalar(cls, value: Scalar, field: Optional[Field] = None) -> "Mat":
        return cls.from_rows([[value]], field)

    @classmethod
    def column(cls, values: Sequence[Scalar], field: Optional[Field] = None) -> "Mat":
        return cls.from_rows([[v] for v in values], field)

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    @property
    def is_square(self) -> bool:
        return self.rows == self.cols

    @property
    def is_complex(self) -> bool:
        return self.field == Field.COMPLEX

    @property
    def T(self) -> "Mat":
        return transpose(self)

    @property
    def H(self) -> "Mat":
        return conj_transpose(self)

    def item(self) -> Scalar:
        if self.shape != (1, 1):
            raise FieldError(ErrorKind.SHAPE_MISMATCH, f"{self.shape} is not 1x1")
        value = self.data[0, 0]
        return complex(value) if self.is_complex else float(value)

    def norm(self) -> float:
        return frobenius_norm(self)

    def conj(self) -> "Mat":
        return Mat(np.conj(self.data), self.field)

    def real(self) -> "Mat":
        return Mat(self.data.real, Field.REAL)

    def imag(self) -> "Mat":
        return Mat(self.data.imag, Field.REAL)

    def as_field(self, field: Field) -> "Mat":
        return self if field == self.field else Mat(self.data, field)

    def zeros_like(self) -> "Mat":
        return zeros(self.rows, self.cols, self.field)

    def to_nested(self) -> List[List[Any]]:
        if self.is_complex:
            return [[[float(z.real), float(z.imag)] for z in row] for row in self.data]
        return self.data.tolist()

    def allclose(self, other: "Mat", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        return self.shape == other.shape and bool(
            np.allclose(self.data, other.data, rtol=rtol, atol=atol)
        )

    def __add__(self, other: "Mat") -> "Mat":
        _require_same_shape(self, other, "add")
        _require_same_field(self, other, "add")
        return Mat(self.data + other.data, self.field)

    def __sub__(self, other: "Mat") -> "Mat":
        _require_same_shape(self, other, "subtract")
        _require_same_field(self, other, "subtract")
        return Mat(self.data - other.data, self.field)

    def __neg__(self) -> "Mat":
        return Mat(-self.data, self.field)

    def __mul__(self, c: Scalar) -> "Mat":
        if isinstance(c, Mat):
            return NotImplemented
        if isinstance(c, complex) and c.imag != 0 and not self.is_complex:
            raise FieldError(
                ErrorKind.FIELD_MISMATCH, "complex scalar times a real matrix"
            )
        return Mat(self.data * c, self.field)

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "Mat":
        return Mat(self.data / c, self.field)

    def __matmul__(self, other: "Mat") -> "Mat":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Mat({self.rows}x{self.cols}, {self.field.value})"


def _require_same_shape(a: Mat, b: Mat, what: str) -> None:
    if a.shape != b.shape:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"{what}: {a.shape} vs {b.shape}")


def _require_same_field(a: Mat, b: Mat, what: str) -> None:
    if a.field != b.field:
        raise FieldError(
            ErrorKind.FIELD_MISMATCH,
            f"{what}: {a.field.value} vs {b.field.value}",
        )


def _require_square(a: Mat, what: str) -> None:
    if not a.is_square:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"{what}: {a.shape} is not square")


def identity(n: int, field: Field = Field.REAL) -> Mat:
    return Mat(np.eye(n), field)


def zeros(rows: int, cols: int, field: Field = Field.REAL) -> Mat:
    return Mat(np.zeros((rows, cols)), field)


def diag(values: Sequence[Scalar], field: Optional[Field] = None) -> Mat:
    arr = np.diag(np.array(values))
    if field is None:
        field = Field.COMPLEX if np.iscomplexobj(arr) else Field.REAL
    return Mat(arr, field)


def matmul(A: Mat, B: Mat) -> Mat:
    if A.cols != B.rows:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"matmul: {A.shape} @ {B.shape}")
    _require_same_field(A, B, "matmul")
    return Mat(A.data @ B.data, A.field)


def transpose(A: Mat) -> Mat:
    return Mat(A.data.T, A.field)


def conj_transpose(A: Mat) -> Mat:
    return Mat(np.conj(A.data).T, A.field)


def trace(A: Mat) -> Scalar:
    _require_square(A, "trace")
    value = np.trace(A.data)
    return complex(value) if A.is_complex else float(value)


@dataclass(frozen=True, eq=False)
class LUFactors:
    """LU factorization with partial pivoting of a nonsingular square matrix."""

    lu: np.ndarray
    piv: np.ndarray
    field: Field

    @property
    def n(self) -> int:
        return int(self.lu.shape[0])

    def solve(self, B: Mat, trans: int = 0) -> Mat:
        """op(A)⁻¹·B with op = identity (0), transpose (1) or adjoint (2)."""
        if B.rows != self.n:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH, f"solve: {self.n}x{self.n} vs {B.shape}"
            )
        if B.field != self.field:
            raise FieldError(ErrorKind.FIELD_MISMATCH, "solve: field mismatch")
        x = _scipy_lu_solve(
            (self.lu, self.piv), B.data, trans=trans, check_finite=False
        )
        return Mat(x, self.field)

    def solve_right(self, B: Mat, adjoint: bool = False) -> Mat:
        """B·A⁻¹, or B·A⁻ᴴ when ``adjoint`` is set."""
        if adjoint:
            return conj_transpose(self.solve(conj_transpose(B), trans=0))
        return transpose(self.solve(transpose(B), trans=1))

    def inverse(self) -> Mat:
        return self.solve(identity(self.n, self.field))


def lu_factor(A: Mat) -> LUFactors:
    """Factor A, raising Singular when a pivot falls below 1e-12·max|A|."""
    _require_square(A, "lu_factor")
    scale = float(np.max(np.abs(A.data)))
    if scale == 0.0:
        raise FieldError(ErrorKind.SINGULAR, "zero matrix")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = _scipy_lu_factor(A.data, check_finite=False)
    smallest = float(np.min(np.abs(np.diag(lu))))
    if smallest < SINGULAR_PIVOT_RTOL * scale:
        raise FieldError(
            ErrorKind.SINGULAR,
            f"pivot {smallest:.3e} below {SINGULAR_PIVOT_RTOL:g} x {scale:.3e}",
        )
    return LUFactors(lu, piv, A.field)


def inverse(A: Mat) -> Mat:
    return lu_factor(A).inverse()


def cholesky(H: Mat) -> tuple:
    """Cholesky factor of an SPD matrix for ``cho_solve``; NotSPD otherwise."""
    _require_square(H, "cholesky")
    if H.is_complex:
        raise FieldError(ErrorKind.FIELD_MISMATCH, "SPD matrices are real here")
    if not np.allclose(H.data, H.data.T, rtol=1e-12, atol=1e-14):
        raise FieldError(ErrorKind.NOT_SPD, "matrix is not symmetric")
    try:
        return cho_factor(H.data, lower=True, check_finite=False)
    except LinAlgError as e:
        raise FieldError(ErrorKind.NOT_SPD, f"Cholesky failed: {e}") from e


def solve_spd(H: Mat, B: Mat) -> Mat:
    """Solve H·X = B for SPD H."""
    factor = cholesky(H)
    if B.rows != H.rows:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"solve_spd: {H.shape} vs {B.shape}")
    return Mat(cho_solve(factor, B.data, check_finite=False), B.field)


def inner(A: Mat, B: Mat, P: Optional[InnerProduct] = None) -> float:
    """Real inner product of two matrices under P (canonical when omitted)."""
    P = P or InnerProduct.canonical()
    _require_same_shape(A, B, "inner")
    _require_same_field(A, B, "inner")
    if P.kind == ProductKind.COMPLEX_CANONICAL:
        return float(np.sum(np.conj(A.data) * B.data).real)
    if A.is_complex:
        raise FieldError(
            ErrorKind.FIELD_MISMATCH,
            f"{P.kind.value} product is defined on real matrices only",
        )
    if P.kind == ProductKind.WEIGHTED:
        if P.H.rows != A.rows:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH, f"weight {P.H.shape} vs matrix {A.shape}"
            )
        return float(np.sum(A.data * (P.H.data @ B.data)))
    return float(np.sum(A.data * B.data))


def product_for(A: Mat, P: Optional[InnerProduct] = None) -> InnerProduct:
    """The product to use on A's space: P, or the canonical one of A's field."""
    if P is None or not P.is_weighted:
        if A.is_complex:
            return InnerProduct.complex_canonical()
        return InnerProduct.canonical()
    return P


def frobenius_norm(A: Mat) -> float:
    return float(np.linalg.norm(A.data))


def spectral_radius_estimate(A: Mat, iters: int = 100) -> float:
    """Power-iteration growth rate of A, times 1.1.

    The rate is the geometric mean of ‖A·v_k‖ over the second half of the
    iterations, from a fixed seeded start vector.
    """
    _require_square(A, "spectral_radius_estimate")
    v = np.random.default_rng(0).standard_normal(A.rows).astype(A.data.dtype)
    v /= np.linalg.norm(v)
    tail = max(1, iters // 2)
    log_growth: List[float] = []
    for _ in range(iters):
        w = A.data @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        log_growth.append(math.log(norm))
        v = w / norm
    return SPECTRAL_SAFETY_FACTOR * math.exp(float(np.mean(log_growth[-tail:])))


def random_mat(rows: int, cols: int, field: Field = Field.REAL, seed: int = 0) -> Mat:
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((rows, cols))
    if field == Field.COMPLEX:
        data = data + 1j * rng.standard_normal((rows, cols))
    return Mat(data, field)


def random_spd(n: int, seed: int = 0) -> Mat:
    """Well-conditioned SPD matrix MᵀM/n + I."""
    m = random_mat(n, n, Field.REAL, seed).data
    return Mat(m.T @ m / n + np.eye(n), Field.REAL)


def format_mat(A: Mat) -> str:
    """Matrix text format: header ``rows cols field`` then one line per row."""
    lines = [f"{A.rows} {A.cols} {A.field.value}"]
    for row in A.data:
        if A.is_complex:
            lines.append(" ".join(f"{z.real:.17g},{z.imag:.17g}" for z in row))
        else:
            lines.append(" ".join(f"{x:.17g}" for x in row))
    return "\n".join(lines) + "\n"


def parse_mat(text: str) -> Mat:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise FieldError(ErrorKind.PARSE_ERROR, "empty matrix text")
    header = lines[0].split()
    if len(header) != 3 or header[2] not in ("R", "C"):
        raise FieldError(ErrorKind.PARSE_ERROR, f"bad header: {lines[0]!r}")
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError as e:
        raise FieldError(ErrorKind.PARSE_ERROR, f"bad header: {lines[0]!r}") from e
    if rows < 1 or cols < 1:
        raise FieldError(ErrorKind.PARSE_ERROR, f"bad dimensions {rows}x{cols}")
    field = Field(header[2])
    body = lines[1:]
    if len(body) != rows:
        raise FieldError(
            ErrorKind.PARSE_ERROR, f"expected {rows} rows, got {len(body)}"
        )
    values: List[List[Scalar]] = []
    for i, line in enumerate(body):
        entries = line.split()
        if len(entries) != cols:
            raise FieldError(
                ErrorKind.PARSE_ERROR,
                f"row {i + 1}: expected {cols} entries, got {len(entries)}",
            )
        values.append([_parse_entry(entry, field, i) for entry in entries])
    try:
        return Mat(np.array(values), field)
    except FieldError as e:
        raise FieldError(ErrorKind.PARSE_ERROR, e.detail) from e


def _parse_entry(entry: str, field: Field, row: int) -> Scalar:
    try:
        if "," in entry:
            if field == Field.REAL:
                raise ValueError("complex entry in a real matrix")
            re_part, im_part = entry.split(",")
            return complex(float(re_part), float(im_part))
        value = float(entry)
    except ValueError as e:
        raise FieldError(
            ErrorKind.PARSE_ERROR, f"row {row + 1}: bad entry {entry!r}: {e}"
        ) from e
    return complex(value, 0.0) if field == Field.COMPLEX else value


def read_mat(path: Union[str, Path]) -> Mat:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FieldError(ErrorKind.PARSE_ERROR, f"cannot read {path}: {e}") from e
    logger.debug(f"Read matrix file {path}")
    return parse_mat(text)


def write_mat(path: Union[str, Path], A: Mat) -> None:
    Path(path).write_text(format_mat(A))
    logger.debug(f"Wrote {A!r} to {path}")
