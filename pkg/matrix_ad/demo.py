"""Feed-forward network demo: loss, engine and manual backward, rank-1 checks.

Samples are the columns of the batch (trailing batch dimension) and the
loss is the mean over samples of Σ(σ(A_d(⋯σ(A₁x+b₁)⋯)+b_d) − y)².
Parameters are drawn uniform(−1, 1)/√fan_in from ``default_rng(seed)``.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .gradcheck import gradcheck, numerical_rank
from .matrix import Mat
from .models import (
    CheckCase,
    CheckReport,
    ErrorKind,
    FDConfig,
    Field,
    FieldError,
    GradientReport,
    max_relative_difference,
)
from .ops import Operand, Program, ProgramBuilder, stable_sigmoid
from .reverse import backprop, record

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (32, 16, 8)
RANK_TOL = 1e-10
EXACTNESS_TOL = 1e-12


@dataclass
class FFNParams:
    """Layer matrices A_l (m_l × m_{l−1}) and biases b_l (m_l × 1)."""

    layers: List[Tuple[Mat, Mat]]
    widths: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.layers:
            raise FieldError(ErrorKind.SHAPE_MISMATCH, "network needs a layer")
        widths = [self.layers[0][0].cols]
        for depth, (A, b) in enumerate(self.layers, start=1):
            if A.field != Field.REAL or b.field != Field.REAL:
                raise FieldError(ErrorKind.FIELD_MISMATCH, f"layer {depth} is complex")
            if A.cols != widths[-1] or b.shape != (A.rows, 1):
                raise FieldError(
                    ErrorKind.SHAPE_MISMATCH,
                    f"layer {depth}: A {A.shape}, b {b.shape} after width {widths[-1]}",
                )
            widths.append(A.rows)
        if self.widths and list(self.widths) != widths:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH, f"widths {self.widths} vs layers {widths}"
            )
        self.widths = widths

    @property
    def depth(self) -> int:
        return len(self.layers)

    def leaves(self) -> Dict[str, Mat]:
        values: Dict[str, Mat] = {}
        for depth, (A, b) in enumerate(self.layers, start=1):
            values[f"A{depth}"] = A
            values[f"b{depth}"] = b
        return values

    def updated(self, gradients: GradientReport, lr: float) -> "FFNParams":
        layers = []
        for depth, (A, b) in enumerate(self.layers, start=1):
            layers.append(
                (A - gradients[f"A{depth}"] * lr, b - gradients[f"b{depth}"] * lr)
            )
        return FFNParams(layers, self.widths)


@dataclass
class Batch:
    """Inputs X (n × r) and targets Y (out × r), one sample per column."""

    X: Mat
    Y: Mat

    def __post_init__(self) -> None:
        if self.X.cols != self.Y.cols:
            raise FieldError(
                ErrorKind.SHAPE_MISMATCH, f"X {self.X.shape} vs Y {self.Y.shape}"
            )

    @property
    def size(self) -> int:
        return self.X.cols

    def sample(self, i: int) -> "Batch":
        return Batch(
            Mat(self.X.data[:, i : i + 1], Field.REAL),
            Mat(self.Y.data[:, i : i + 1], Field.REAL),
        )


@dataclass
class ManualBackward:
    """Hand-written reverse pass with every intermediate kept."""

    loss: float
    gradients: Dict[str, Mat]
    activations: List[Mat]
    pre_activation_cotangents: List[Mat]


def _check_widths(widths: Sequence[int]) -> None:
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"bad widths {list(widths)}")


def init_params(widths: Sequence[int], seed: int = 0) -> FFNParams:
    _check_widths(widths)
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        A = rng.uniform(-1.0, 1.0, (fan_out, fan_in)) * scale
        b = rng.uniform(-1.0, 1.0, (fan_out, 1)) * scale
        layers.append((Mat(A, Field.REAL), Mat(b, Field.REAL)))
    return FFNParams(layers, list(widths))


def random_batch(widths: Sequence[int], r: int, seed: int = 0) -> Batch:
    """Standard normal inputs and uniform(0, 1) targets."""
    _check_widths(widths)
    if r < 1:
        raise FieldError(ErrorKind.SHAPE_MISMATCH, f"batch size {r}")
    rng = np.random.default_rng([seed, r])
    X = rng.standard_normal((widths[0], r))
    Y = rng.uniform(0.0, 1.0, (widths[-1], r))
    return Batch(Mat(X, Field.REAL), Mat(Y, Field.REAL))


def _check_batch(params: FFNParams, batch: Batch) -> None:
    if batch.X.rows != params.widths[0] or batch.Y.rows != params.widths[-1]:
        raise FieldError(
            ErrorKind.SHAPE_MISMATCH,
            f"batch X {batch.X.shape}, Y {batch.Y.shape} for widths {params.widths}",
        )


def ffn_program(params: FFNParams, batch: Batch) -> Tuple[Program, Dict[str, Mat]]:
    """The loss as a program over leaves A1, b1, …, A_d, b_d."""
    _check_batch(params, batch)
    builder = ProgramBuilder()
    inputs: Operand = batch.X
    for depth in range(1, params.depth + 1):
        A = builder.leaf(f"A{depth}")
        b = builder.leaf(f"b{depth}")
        value = builder.sigmoid(builder.add_bias(builder.matmul(A, inputs), b))
        inputs = value
    loss = builder.squared_loss(value, batch.Y)
    if batch.size > 1:
        loss = builder.scale(loss, 1.0 / batch.size)
    return builder.build(loss), params.leaves()


def _forward(params: FFNParams, X: Mat) -> List[Mat]:
    activations = [X]
    for A, b in params.layers:
        z = A.data @ activations[-1].data + b.data
        activations.append(Mat(stable_sigmoid(z), Field.REAL))
    return activations


def ffn_loss(params: FFNParams, batch: Batch) -> float:
    _check_batch(params, batch)
    output = _forward(params, batch.X)[-1]
    return float(np.sum((output.data - batch.Y.data) ** 2)) / batch.size


def ffn_backward_manual(params: FFNParams, batch: Batch) -> ManualBackward:
    """Reverse pass written out layer by layer, without a tape."""
    _check_batch(params, batch)
    activations = _forward(params, batch.X)
    residual = activations[-1].data - batch.Y.data
    loss = float(np.sum(residual**2)) / batch.size

    gradients: Dict[str, Mat] = {}
    cotangents: List[Mat] = []
    d_activation = residual * (2.0 / batch.size)
    for depth in range(params.depth, 0, -1):
        A, _ = params.layers[depth - 1]
        s = activations[depth].data
        d_pre = s * (1.0 - s) * d_activation
        previous = activations[depth - 1].data
        gradients[f"A{depth}"] = Mat(d_pre @ previous.T, Field.REAL)
        gradients[f"b{depth}"] = Mat(np.sum(d_pre, axis=1, keepdims=True), Field.REAL)
        cotangents.append(Mat(d_pre, Field.REAL))
        d_activation = A.data.T @ d_pre
    cotangents.reverse()
    ordered = {name: gradients[name] for name in params.leaves()}
    return ManualBackward(loss, ordered, activations, cotangents)


def engine_gradients(params: FFNParams, batch: Batch) -> GradientReport:
    program, leaves = ffn_program(params, batch)
    return backprop(record(program, leaves))


def engine_manual_check(params: FFNParams, batch: Batch) -> CheckReport:
    """Tape backprop against the manual reverse pass, per parameter."""
    report = CheckReport("engine-vs-manual")
    engine = engine_gradients(params, batch)
    manual = ffn_backward_manual(params, batch)
    for name, expected in manual.gradients.items():
        difference = max_relative_difference([engine[name]], [expected])
        report.cases.append(
            CheckCase.compare(name, 0.0, difference, EXACTNESS_TOL, EXACTNESS_TOL)
        )
    return report


def rank1_check(params: FFNParams, x: Mat, y: Mat) -> CheckReport:
    """Single-sample gradients w.r.t. each A_l are rank one, equal to u·vᵀ.

    v is the layer's input activation and u the cotangent of its
    pre-activation.
    """
    report = CheckReport("rank1")
    if x.cols != 1 or y.cols != 1:
        report.cases.append(
            CheckCase.failure("batch", f"rank-1 check needs one sample, got {x.cols}")
        )
        return report
    try:
        manual = ffn_backward_manual(params, Batch(x, y))
    except FieldError as e:
        report.cases.append(CheckCase.failure("backward", str(e)))
        return report
    for depth in range(1, params.depth + 1):
        gradient = manual.gradients[f"A{depth}"]
        rank = numerical_rank(gradient, RANK_TOL)
        report.metadata[f"rank_A{depth}"] = rank
        report.cases.append(
            CheckCase.compare(f"rank(A{depth})", 1.0, float(rank), 0.0, 0.0)
        )
        u = manual.pre_activation_cotangents[depth - 1]
        v = manual.activations[depth - 1]
        outer = Mat(u.data @ v.data.T, Field.REAL)
        difference = max_relative_difference([outer], [gradient])
        report.cases.append(
            CheckCase.compare(
                f"outer(A{depth})", 0.0, difference, EXACTNESS_TOL, EXACTNESS_TOL
            )
        )
    return report


def batched_gradient_decomposition(params: FFNParams, batch: Batch) -> CheckReport:
    """Gradient of the mean loss equals the mean of per-sample gradients."""
    report = CheckReport("batch-decomposition", metadata={"batch": batch.size})
    if batch.size < 2:
        report.cases.append(
            CheckCase.failure("batch", f"needs at least two samples, got {batch.size}")
        )
        return report
    batched = ffn_backward_manual(params, batch).gradients
    totals = {name: np.zeros(g.shape) for name, g in batched.items()}
    for i in range(batch.size):
        single = ffn_backward_manual(params, batch.sample(i)).gradients
        for name, g in single.items():
            totals[name] += g.data
    for name, expected in batched.items():
        mean = Mat(totals[name] / batch.size, Field.REAL)
        difference = max_relative_difference([mean], [expected])
        report.cases.append(
            CheckCase.compare(name, 0.0, difference, EXACTNESS_TOL, EXACTNESS_TOL)
        )
    return report


def gradient_descent(
    params: FFNParams, batch: Batch, steps: int = 50, lr: float = 0.1
) -> Tuple[FFNParams, List[float]]:
    """Plain gradient descent; history holds the loss before each step and after."""
    history = []
    for _ in range(steps):
        history.append(ffn_loss(params, batch))
        params = params.updated(engine_gradients(params, batch), lr)
    history.append(ffn_loss(params, batch))
    logger.info(f"Gradient descent: loss {history[0]:.6g} -> {history[-1]:.6g}")
    return params, history


def ffn_demo(
    widths: Sequence[int] = DEFAULT_WIDTHS,
    r: int = 1,
    seed: int = 0,
    cfg: Optional[FDConfig] = None,
    batch: Optional[Batch] = None,
) -> CheckReport:
    """Every demo check on one seeded network, merged into a single report."""
    params = init_params(widths, seed)
    batch = batch or random_batch(widths, r, seed)
    program, leaves = ffn_program(params, batch)
    report = CheckReport(
        "ffn-demo",
        metadata={
            "widths": ",".join(str(w) for w in params.widths),
            "batch": batch.size,
            "seed": seed,
            "loss": f"{ffn_loss(params, batch):.17g}",
        },
    )
    report.extend(gradcheck(program, leaves, cfg), "gradcheck/")
    report.extend(engine_manual_check(params, batch), "manual/")
    first = batch.sample(0)
    rank = rank1_check(params, first.X, first.Y)
    report.extend(rank, "rank1/")
    report.metadata.update(rank.metadata)
    if batch.size >= 2:
        report.extend(batched_gradient_decomposition(params, batch), "batch/")
    logger.info(f"FFN demo {params.widths} r={batch.size}: pass={report.passed}")
    return report
