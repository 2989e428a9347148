"""Command-line entry point: dot tests, gradient checks, matrix functions, FFN demo."""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import matfunc
from .demo import (
    DEFAULT_WIDTHS,
    Batch,
    ffn_demo,
    ffn_program,
    init_params,
    random_batch,
)
from .gradcheck import dot_test_suite, dot_test_sweep, gradcheck
from .matfunc import BlockConsistencyError, FunctionKind, MatrixFunction
from .matrix import Mat, format_mat, read_mat, write_mat
from .models import (
    CheckCase,
    CheckReport,
    ErrorKind,
    FDConfig,
    Field,
    FieldError,
    OpKind,
    Side,
    max_relative_difference,
)
from .ops import Op, Program, ProgramBuilder

logger = logging.getLogger(__name__)

SEED_ENV = "MATRIX_AD_SEED"
REPORT_SCHEMA = 1
SERIES_TRUNCATION_TOL = 1e-12
BLOCK_SERIES_TOL = 1e-10

ProgramAndLeaves = Tuple[Program, Dict[str, Mat]]

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_CODES: Dict[ErrorKind, int] = {
    ErrorKind.PARSE_ERROR: 2,
    ErrorKind.SHAPE_MISMATCH: 3,
    ErrorKind.FIELD_MISMATCH: 4,
    ErrorKind.SINGULAR: 5,
    ErrorKind.NOT_SPD: 6,
    ErrorKind.DOMAIN_VIOLATION: 7,
}

EPILOG = """exit status:
  0  every check passed
  1  a check failed
  2  ParseError (bad file or flag)
  3  ShapeMismatch
  4  FieldMismatch
  5  Singular
  6  NotSPD
  7  DomainViolation

environment:
  MATRIX_AD_SEED  default for --seed
"""


@dataclass
class CliConfig:
    command: str
    seed: int = 0
    size: int = 4
    fields: List[Field] = field(default_factory=lambda: [Field.REAL, Field.COMPLEX])
    function: str = "exp"
    atol: float = 0.01
    rtol: float = 1e-4
    step: Optional[float] = None
    input: Optional[Path] = None
    direction: Optional[Path] = None
    target: Optional[Path] = None
    output: Optional[Path] = None
    frechet_output: Optional[Path] = None
    report_format: str = "text"
    report_file: Optional[Path] = None
    program: str = "trace-exp"
    pipeline: Optional[str] = None
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    batch: int = 1
    seeds: Optional[Tuple[int, ...]] = None

    @property
    def fd(self) -> FDConfig:
        seeds = list(self.seeds) if self.seeds else [self.seed]
        return FDConfig(step=self.step, atol=self.atol, rtol=self.rtol, seeds=seeds)


def _default_seed() -> int:
    raw = os.getenv(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {SEED_ENV}={raw!r}")
        return 0


def _widths(text: str) -> Tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad widths {text!r}") from e
    if len(widths) < 2 or min(widths) < 1:
        raise argparse.ArgumentTypeError(f"need two or more positive widths: {text!r}")
    return widths


def _seeds(text: str) -> Tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad seeds {text!r}") from e
    return seeds


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=_default_seed())
    common.add_argument(
        "--format",
        dest="report_format",
        choices=["text", "machine"],
        default="text",
    )
    common.add_argument(
        "--report-file", type=Path, help="also write the machine report here"
    )
    common.add_argument("--atol", type=float, default=0.01)
    common.add_argument("--rtol", type=float, default=1e-4)
    common.add_argument("--step", type=float, help="finite-difference step h")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="matrix-ad",
        description="Forward and reverse differentiation of matrix programs.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    dot = commands.add_parser(
        "dot-test", parents=[common], help="adjoint identity for every primitive"
    )
    dot.add_argument("--size", type=_positive_int, default=4)
    dot.add_argument("--field", choices=["R", "C"], help="default: both")
    dot.add_argument(
        "--seeds", type=_seeds, help="comma-separated seeds; overrides --seed"
    )

    check = commands.add_parser(
        "gradcheck", parents=[common], help="backprop vs finite differences"
    )
    check.add_argument(
        "--program",
        choices=sorted(BUILTIN_PROGRAMS),
        default="trace-exp",
    )
    check.add_argument("--size", type=_positive_int, default=4)
    check.add_argument("--field", choices=["R", "C"], default="R")
    check.add_argument("--input", type=Path, help="matrix file fed through --pipeline")
    check.add_argument("--pipeline", help="comma-separated stages, e.g. exp,trace")
    check.add_argument("--widths", type=_widths, default=DEFAULT_WIDTHS)
    check.add_argument("--batch", type=_positive_int, default=1)

    func = commands.add_parser(
        "matfunc", parents=[common], help="f(A) and its Fréchet derivative"
    )
    func.add_argument(
        "--function", default="exp", help="exp, log1p, sin, cos or poly:c0,c1,..."
    )
    func.add_argument("--input", type=Path, required=True)
    func.add_argument("--direction", type=Path, help="direction E of the derivative")
    func.add_argument("--output", type=Path, help="write f(A) here instead of stdout")
    func.add_argument("--frechet-output", type=Path)

    demo = commands.add_parser(
        "ffn-demo", parents=[common], help="feed-forward network checks"
    )
    demo.add_argument("--widths", type=_widths, default=DEFAULT_WIDTHS)
    demo.add_argument("--batch", type=_positive_int, default=1)
    demo.add_argument("--input", type=Path, help="inputs X, one sample per column")
    demo.add_argument("--target", type=Path, help="targets Y, one sample per column")
    return parser


def config_from_args(args: argparse.Namespace) -> CliConfig:
    cfg = CliConfig(command=args.command, seed=args.seed)
    for name in (
        "size",
        "function",
        "atol",
        "rtol",
        "step",
        "input",
        "direction",
        "target",
        "output",
        "frechet_output",
        "report_format",
        "report_file",
        "program",
        "pipeline",
        "widths",
        "batch",
        "seeds",
    ):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    chosen = getattr(args, "field", None)
    if chosen is not None:
        cfg.fields = [Field(chosen)]
    elif cfg.command != "dot-test":
        cfg.fields = [Field.REAL]
    return cfg


def _sample(rng: np.random.Generator, rows: int, cols: int, scalar_field: Field) -> Mat:
    data = rng.standard_normal((rows, cols))
    if scalar_field == Field.COMPLEX:
        data = data + 1j * rng.standard_normal((rows, cols))
    return Mat(data, scalar_field)


def _real_scalar(builder: ProgramBuilder, value: str, scalar_field: Field) -> str:
    return builder.re(value) if scalar_field == Field.COMPLEX else value


def _trace_exp(cfg: CliConfig, scalar_field: Field) -> ProgramAndLeaves:
    rng = np.random.default_rng(cfg.seed)
    A = _sample(rng, cfg.size, cfg.size, scalar_field)
    builder = ProgramBuilder()
    a = builder.leaf("A")
    out = builder.trace(builder.matfunc(a, MatrixFunction.exp()))
    program = builder.build(_real_scalar(builder, out, scalar_field))
    return program, {"A": A * (0.4 / A.norm())}


def _trace_square(cfg: CliConfig, scalar_field: Field) -> ProgramAndLeaves:
    rng = np.random.default_rng(cfg.seed)
    builder = ProgramBuilder()
    a = builder.leaf("A")
    out = builder.trace(builder.matmul(a, a))
    program = builder.build(_real_scalar(builder, out, scalar_field))
    return program, {"A": _sample(rng, cfg.size, cfg.size, scalar_field)}


def _linear(cfg: CliConfig, scalar_field: Field) -> ProgramAndLeaves:
    rng = np.random.default_rng(cfg.seed)
    g = _sample(rng, cfg.size, 1, scalar_field)
    builder = ProgramBuilder()
    x = builder.leaf("x")
    out = builder.matmul(g.T, x)
    program = builder.build(_real_scalar(builder, out, scalar_field))
    return program, {"x": _sample(rng, cfg.size, 1, scalar_field)}


def _inverse(cfg: CliConfig, scalar_field: Field) -> ProgramAndLeaves:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    A = _sample(rng, n, n, scalar_field) + Mat(np.eye(n) * 2.0 * n, scalar_field)
    builder = ProgramBuilder()
    a = builder.leaf("A")
    C = _sample(rng, n, n, scalar_field)
    out = builder.trace(builder.matmul(C, builder.inverse(a)))
    return builder.build(_real_scalar(builder, out, scalar_field)), {"A": A}


def _ffn(cfg: CliConfig, scalar_field: Field) -> ProgramAndLeaves:
    if scalar_field != Field.REAL:
        raise FieldError(ErrorKind.FIELD_MISMATCH, "the network demo is real-only")
    params = init_params(cfg.widths, cfg.seed)
    return ffn_program(params, random_batch(cfg.widths, cfg.batch, cfg.seed))


BUILTIN_PROGRAMS: Dict[str, Callable[[CliConfig, Field], ProgramAndLeaves]] = {
    "trace-exp": _trace_exp,
    "trace-square": _trace_square,
    "linear": _linear,
    "inverse": _inverse,
    "ffn": _ffn,
}


def _stage(name: str) -> Op:
    """One pipeline stage: a matrix function name or a primitive."""
    name = name.strip()
    simple = {
        "transpose": OpKind.TRANSPOSE,
        "ctranspose": OpKind.CONJ_TRANSPOSE,
        "trace": OpKind.TRACE,
        "inverse": OpKind.INVERSE,
        "re": OpKind.RE,
        "im": OpKind.IM,
        "sigmoid": OpKind.SIGMOID,
    }
    if name in simple:
        return Op.unary(simple[name])
    try:
        if name.startswith("power:"):
            return Op.unary(OpKind.POWER, k=int(name[6:]))
        if name.startswith("scale:"):
            return Op.unary(OpKind.SCALE, c=float(name[6:]))
    except ValueError as e:
        raise FieldError(ErrorKind.PARSE_ERROR, f"bad stage {name!r}") from e
    return Op.unary(OpKind.MATFUNC, function=MatrixFunction.from_name(name))


def pipeline_program(pipeline: str, x: Mat, seed: int = 0) -> Program:
    """Chain the stages over leaf ``x`` and reduce to a real scalar.

    A non-scalar result is reduced by Re tr(Wᴴ·value) with a seeded random W.
    """
    stages = [_stage(name) for name in pipeline.split(",") if name.strip()]
    if not stages:
        raise FieldError(ErrorKind.PARSE_ERROR, "empty pipeline")
    chain = Program.chain(stages)
    out = chain(x)
    ops = list(chain.ops)
    value = chain.output
    if out.shape != (1, 1):
        W = _sample(np.random.default_rng(seed), out.rows, out.cols, out.field)
        ops.append(
            Op(OpKind.MATMUL, (value,), "weighted", constant=W.H, side=Side.LEFT)
        )
        ops.append(Op(OpKind.TRACE, ("weighted",), "reduced"))
        value = "reduced"
    if out.is_complex:
        ops.append(Op(OpKind.RE, (value,), "real"))
        value = "real"
    return Program(chain.leaves, tuple(ops), value)


def _dot_test(cfg: CliConfig) -> CheckReport:
    if cfg.seeds:
        metadata: Dict[str, Any] = {"seeds": ",".join(str(s) for s in cfg.seeds)}
    else:
        metadata = {"seed": cfg.seed}
    metadata["size"] = cfg.size
    report = CheckReport("dot-test", metadata=metadata)
    for scalar_field in cfg.fields:
        if cfg.seeds:
            suite = dot_test_sweep(cfg.size, scalar_field, cfg.fd)
        else:
            suite = dot_test_suite(cfg.seed, cfg.size, scalar_field)
        report.extend(suite, f"{scalar_field.value}/")
    return report


def _gradcheck(cfg: CliConfig) -> CheckReport:
    scalar_field = cfg.fields[0]
    if cfg.input is not None:
        x = read_mat(cfg.input)
        program = pipeline_program(cfg.pipeline or "trace", x, cfg.seed)
        leaves = {"x": x}
        name = f"pipeline:{cfg.pipeline or 'trace'}"
    else:
        program, leaves = BUILTIN_PROGRAMS[cfg.program](cfg, scalar_field)
        name = cfg.program
    report = gradcheck(program, leaves, cfg.fd)
    report.metadata.update({"program": name, "seed": cfg.seed})
    return report


def _matfunc(cfg: CliConfig) -> CheckReport:
    f = MatrixFunction.from_name(cfg.function)
    if cfg.input is None:
        raise FieldError(ErrorKind.PARSE_ERROR, "matfunc needs --input")
    A = read_mat(cfg.input)
    result = matfunc.apply(f, A)
    report = CheckReport(
        "matfunc",
        metadata={
            "function": f.name,
            "terms_used": result.terms_used,
            "truncation_residual": f"{result.truncation_residual:.3e}",
        },
    )
    if cfg.output is not None:
        write_mat(cfg.output, result.value)
    else:
        sys.stdout.write(format_mat(result.value))
    # poly is summed exactly; series report the size of their last term
    residual = 0.0 if f.kind == FunctionKind.POLY else result.truncation_residual
    report.cases.append(
        CheckCase.compare("truncation", 0.0, residual, SERIES_TRUNCATION_TOL, 0.0)
    )

    if cfg.direction is not None:
        E = read_mat(cfg.direction)
        block = matfunc.frechet_block(f, A, E, result)
        series = matfunc.frechet_series(f, A, E, result)
        difference = max_relative_difference([block], [series])
        report.cases.append(
            CheckCase.compare("block-vs-series", 0.0, difference, BLOCK_SERIES_TOL, 0.0)
        )
        if cfg.frechet_output is not None:
            write_mat(cfg.frechet_output, block)
        else:
            sys.stdout.write(format_mat(block))
    return report


def _ffn_demo(cfg: CliConfig) -> CheckReport:
    batch = None
    if cfg.input is not None or cfg.target is not None:
        if cfg.input is None or cfg.target is None:
            raise FieldError(ErrorKind.PARSE_ERROR, "--input and --target go together")
        batch = Batch(read_mat(cfg.input), read_mat(cfg.target))
    return ffn_demo(cfg.widths, cfg.batch, cfg.seed, cfg.fd, batch)


COMMANDS: Dict[str, Callable[[CliConfig], CheckReport]] = {
    "dot-test": _dot_test,
    "gradcheck": _gradcheck,
    "matfunc": _matfunc,
    "ffn-demo": _ffn_demo,
}


def run(cfg: CliConfig) -> Tuple[int, CheckReport]:
    """Run one command; library errors become a failed report and their exit code."""
    try:
        report = COMMANDS[cfg.command](cfg)
    except FieldError as e:
        logger.error(f"{cfg.command}: {e}")
        report = CheckReport(cfg.command, [CheckCase.failure(e.kind.value, e.detail)])
        return EXIT_CODES[e.kind], report
    except BlockConsistencyError as e:
        logger.error(f"{cfg.command}: block evaluation inconsistent: {e}")
        report = CheckReport(cfg.command, [CheckCase.failure("block", str(e))])
        return EXIT_CHECK_FAILED, report
    return (EXIT_PASS if report.passed else EXIT_CHECK_FAILED), report


def machine_report(report: CheckReport) -> str:
    body = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    return f"schema: {REPORT_SCHEMA}\n{body}\n"


def render(report: CheckReport, report_format: str) -> str:
    if report_format == "machine":
        return machine_report(report)
    return report.to_text() + "\n"


def _log_level(verbosity: int) -> int:
    if verbosity >= 2:
        return logging.DEBUG
    return logging.INFO if verbosity == 1 else logging.WARNING


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=_log_level(args.verbose),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    cfg = config_from_args(args)
    try:
        FDConfig(step=cfg.step, atol=cfg.atol, rtol=cfg.rtol)
    except ValueError as e:
        parser.error(str(e))

    status, report = run(cfg)
    sys.stdout.write(render(report, cfg.report_format))
    if cfg.report_file is not None:
        cfg.report_file.write_text(machine_report(report))
    return status


if __name__ == "__main__":
    sys.exit(main())
