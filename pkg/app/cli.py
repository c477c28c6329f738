import argparse
import sys
from typing import Any, Dict, List, Optional

from loguru import logger
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.core.config import RunConfig, SolverConfig, config, load_run_config
from app.core.errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    DomainError,
    FingerprintMismatchError,
    MissingPrerequisiteError,
    NumericFaultError,
)
from app.models.reports import MetricsReport
from app.services import artifact_store as store
from app.services.networks import parameter_report
from app.services.pipeline_service import ANNEAL, DISTILL, TEACHER, PipelineService
from app.services.toy_data import sample_data
from app.utils.gradcheck import run_gradcheck_suite
from app.utils.logger import configure_logging

console = Console()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_MISSING = 4

STAGE_CHOICES = [TEACHER, ANNEAL, DISTILL]


def exit_code_for(error: BaseException) -> int:
    """Stable exit-code contract"""
    if isinstance(error, (ConfigError, ValidationError, ContractError, DomainError)):
        return EXIT_USAGE
    if isinstance(error, (DivergenceError, NumericFaultError)):
        return EXIT_DIVERGENCE
    if isinstance(error, (MissingPrerequisiteError, FingerprintMismatchError)):
        return EXIT_MISSING
    return EXIT_FAILURE


def _parse_set(items: List[str]) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        overrides[key.strip()] = value
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then --set overrides, then the dedicated flags"""
    overrides = _parse_set(args.set or [])
    if args.seed is not None:
        for offset, name in enumerate(("init", "data", "noise", "time", "pairs", "eval")):
            overrides[f"seeds.{name}"] = args.seed + offset
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    threads = args.threads if args.threads is not None else (config.threads if config.threads > 1 else None)
    if threads is not None:
        overrides["threads"] = threads
    return load_run_config(args.config, overrides)


def solver_from_args(args: argparse.Namespace, base: SolverConfig) -> SolverConfig:
    """
    Merge --solver/--steps/--rtol/--atol into the config's solver section.

    Raises:
        ConfigError: --steps given for rk45, or --rtol/--atol given for euler
    """
    kind = args.solver or base.kind
    if kind == "rk45" and args.steps is not None:
        raise ConfigError("--steps only applies to --solver euler")
    if kind == "euler" and (args.rtol is not None or args.atol is not None):
        raise ConfigError("--rtol/--atol only apply to --solver rk45")
    update: Dict[str, Any] = {"kind": kind}
    if args.steps is not None:
        update["euler_steps"] = args.steps
    if args.rtol is not None:
        update["rtol"] = args.rtol
    if args.atol is not None:
        update["atol"] = args.atol
    try:
        return SolverConfig.model_validate({**base.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"invalid solver flags: {e.errors()[0]['msg']}") from e


def print_metrics(title: str, report: MetricsReport) -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green")
    table.add_row(report.label, f"{report.frechet_gauss:.6f}")
    table.add_row("sliced W2", f"{report.sliced_wasserstein:.6f}")
    if report.straightness is not None:
        table.add_row("straightness", f"{report.straightness:.6f}")
    if report.mean_nfe is not None:
        table.add_row("mean NFE", f"{report.mean_nfe:.1f}")
    if report.time_per_sample is not None:
        table.add_row("time/sample", f"{report.time_per_sample * 1e3:.3f} ms")
    table.add_row("samples", str(report.n_samples))
    if report.frechet_degenerate:
        table.add_row("note", "degenerate covariance (clipped)")
    console.print(table)


# --- commands ---

def cmd_train_teacher(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    ckpt = service.train_teacher(resume=args.resume)
    console.print(f"[bold green]Teacher trained[/bold green] ({ckpt.iteration} iterations) -> "
                  f"{service.checkpoint_path(TEACHER)}")
    return EXIT_OK


def cmd_gen_pairs(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    pairs = service.generate_pairs(source=args.source, n=args.n)
    console.print(f"[bold green]{pairs.count} pairs[/bold green] ({pairs.skipped} skipped, "
                  f"mean NFE {pairs.mean_nfe:.1f}) -> {service.pairs_path(args.source)}")
    console.print(f"fingerprint {pairs.fingerprint}")
    return EXIT_OK


def cmd_anneal_reflow(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    ckpt = service.train_anneal_reflow(resume=args.resume)
    console.print(f"[bold green]Student trained by annealing reflow[/bold green] ({ckpt.iteration} iterations) -> "
                  f"{service.checkpoint_path(ANNEAL)}")
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    ckpt = service.train_distill(resume=args.resume, two_step=False if args.no_two_step else None)
    console.print(f"[bold green]Student distilled[/bold green] ({ckpt.iteration} iterations) -> "
                  f"{service.checkpoint_path(DISTILL)}")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    solver = solver_from_args(args, service.cfg.solver)
    result = service.sample(args.stage, args.n, solver, seed=args.sample_seed,
                            trajectory=args.trajectory is not None, checkpoint=args.checkpoint)
    store.write_samples_csv(args.out, result.x, tokens=result.tokens, classes=result.classes)
    if args.trajectory is not None:
        store.write_trajectory_csv(args.trajectory, result.report.trajectory)
    report = result.report
    console.print(f"Wrote {args.n} samples to {args.out}")
    console.print(f"solver={solver.kind} NFE={report.nfe} accepted={report.accepted} rejected={report.rejected} "
                  f"time/sample={report.wall_time / args.n * 1e3:.3f} ms")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    if args.samples:
        samples, _ = store.read_samples_csv(args.samples)
        report = service.evaluate_samples(samples)
        title = f"Evaluation of {args.samples}"
        if args.out is None:
            store.write_json_model(service.output_dir / "metrics_samples.json", report)
    else:
        solver = solver_from_args(args, service.cfg.solver)
        report = service.evaluate(args.stage, solver, n=args.n, write=args.out is None, checkpoint=args.checkpoint)
        label = args.checkpoint or args.stage
        title = f"Evaluation of {label} ({solver.kind})"
    if args.out:
        store.write_json_model(args.out, report)
    print_metrics(title, report)
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    service = PipelineService(resolve_config(args))
    reports = service.run_all(resume=args.resume)
    for name, report in reports.items():
        print_metrics(name, report)
    if args.ablation:
        ablation = service.run_ablation(include_no_anneal=args.with_no_anneal)
        print_metrics("FG distillation (1 step)", ablation.fg_distill)
        print_metrics("naive distillation (1 step)", ablation.naive_distill)
        print_metrics("no distillation (1 step)", ablation.no_distill)
        if ablation.no_anneal is not None:
            print_metrics("no annealing reflow (1 step)", ablation.no_anneal)
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    ds = cfg.dataset
    report = parameter_report(cfg.model, ds.dim, ds.conditional, ds.seq_len, ds.vocab_size)
    table = Table(title="Parameter counts", show_header=True, header_style="bold magenta")
    table.add_column("Model", style="cyan")
    table.add_column("Trunk", justify="right")
    table.add_column("Total", justify="right")
    table.add_row(f"teacher (width {cfg.model.teacher_width})", str(report.teacher_trunk), str(report.teacher_total))
    table.add_row(f"student (width {cfg.model.student_width})", str(report.student_trunk), str(report.student_total))
    if report.encoder_total is not None:
        table.add_row("condition encoder", "-", str(report.encoder_total))
        table.add_row("encoder, dense convolutions", "-", str(report.encoder_dense_equivalent))
    console.print(table)
    console.print(f"student/teacher trunk ratio: [bold]{report.trunk_ratio:.3f}[/bold]")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck_suite(seeds=args.seeds, tolerance=args.tolerance)
    table = Table(title=f"Gradient check ({args.seeds} seeds)", show_header=True, header_style="bold magenta")
    table.add_column("Case", style="cyan")
    table.add_column("Worst relative error", justify="right")
    table.add_column("Status")
    worst: Dict[str, float] = {}
    for name, _, result in results:
        worst[name] = max(worst.get(name, 0.0), result.max_relative_error)
    for name, error in worst.items():
        ok = error <= args.tolerance
        table.add_row(name, f"{error:.2e}", "[green]ok[/green]" if ok else "[red]FAIL[/red]")
    console.print(table)
    return EXIT_OK if all(r.passed for _, _, r in results) else EXIT_FAILURE


def cmd_export_data(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    batch = sample_data(cfg.dataset, args.n)
    store.write_samples_csv(args.out, batch.x0, tokens=batch.tokens, classes=batch.classes)
    console.print(f"Wrote {args.n} {cfg.dataset.kind} samples to {args.out}")
    return EXIT_OK


# --- parser ---

def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="Run config (JSON); defaults apply when omitted")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override a config value by dotted key, e.g. stages.teacher.iterations=500")
    parser.add_argument("--seed", type=int, help="Base seed; the six seed streams become seed..seed+5")
    parser.add_argument("--output-dir", help="Output directory for artifacts")
    parser.add_argument("--threads", type=int, help="Worker threads for pair generation (default 1)")


def _add_solver_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--solver", choices=["euler", "rk45"], help="Integrator (defaults to the config)")
    parser.add_argument("--steps", type=int, help="Euler steps")
    parser.add_argument("--rtol", type=float, help="RK45 relative tolerance")
    parser.add_argument("--atol", type=float, help="RK45 absolute tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflowlab",
                                     description="ReflowLab: rectified-flow reflow and one-step distillation toolkit")
    parser.add_argument("--log-level", help="Log level (overrides LOG_LEVEL)")
    parser.add_argument("--log-dir", help="Also write logs to DIR/reflowlab.log")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    teacher = subparsers.add_parser("train-teacher", help="Train the teacher rectified flow")
    _add_run_options(teacher)
    teacher.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    teacher.set_defaults(handler=cmd_train_teacher)

    pairs = subparsers.add_parser("gen-pairs", help="Generate (noise, endpoint) pairs from a trained model")
    _add_run_options(pairs)
    pairs.add_argument("--source", choices=[TEACHER, ANNEAL], default=TEACHER, help="Generating model")
    pairs.add_argument("--n", type=int, help="Pair count (defaults to stages.gen_pairs.pair_count)")
    pairs.set_defaults(handler=cmd_gen_pairs)

    anneal = subparsers.add_parser("anneal-reflow", help="Train the student by annealing reflow on teacher pairs")
    _add_run_options(anneal)
    anneal.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    anneal.set_defaults(handler=cmd_anneal_reflow)

    distill = subparsers.add_parser("distill", help="Flow-guided distillation of the annealed student")
    _add_run_options(distill)
    distill.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    distill.add_argument("--no-two-step", action="store_true", help="Drop the two-step regularizer")
    distill.set_defaults(handler=cmd_distill)

    sample = subparsers.add_parser("sample", help="Generate samples from a trained stage")
    _add_run_options(sample)
    _add_solver_options(sample)
    sample.add_argument("--stage", choices=STAGE_CHOICES, default=DISTILL, help="Model to sample from")
    sample.add_argument("--checkpoint", help="Sample from this checkpoint file instead of a stage of the run")
    sample.add_argument("--n", type=int, default=1000, help="Number of samples")
    sample.add_argument("--sample-seed", type=int, help="Noise seed (defaults to seeds.eval)")
    sample.add_argument("--out", required=True, help="Output CSV")
    sample.add_argument("--trajectory", help="Also write the trajectory (sample_id, t, x...) to this CSV")
    sample.set_defaults(handler=cmd_sample)

    evaluate = subparsers.add_parser("eval", help="Compare samples with the reference distribution")
    _add_run_options(evaluate)
    _add_solver_options(evaluate)
    source = evaluate.add_mutually_exclusive_group()
    source.add_argument("--samples", help="CSV of samples to evaluate")
    source.add_argument("--stage", choices=STAGE_CHOICES, default=DISTILL, help="Model to sample and evaluate")
    source.add_argument("--checkpoint", help="Sample and evaluate this checkpoint file instead of a stage of the run")
    evaluate.add_argument("--n", type=int, help="Sample count (defaults to metrics.n_samples)")
    evaluate.add_argument("--out", help="MetricsReport JSON path")
    evaluate.set_defaults(handler=cmd_eval)

    pipeline = subparsers.add_parser("pipeline", help="Run every stage and evaluate")
    _add_run_options(pipeline)
    pipeline.add_argument("--resume", action="store_true", help="Resume training stages from checkpoints")
    pipeline.add_argument("--ablation", action="store_true", help="Also run the distillation ablation arms")
    pipeline.add_argument("--with-no-anneal", action="store_true",
                          help="Include the arm trained by plain reflow (requires --ablation)")
    pipeline.set_defaults(handler=cmd_pipeline)

    params = subparsers.add_parser("params", help="Report teacher/student parameter counts")
    _add_run_options(params)
    params.set_defaults(handler=cmd_params)

    grad = subparsers.add_parser("gradcheck", help="Finite-difference check of every layer and loss")
    grad.add_argument("--seeds", type=int, default=10, help="Number of seeds")
    grad.add_argument("--tolerance", type=float, default=1e-5, help="Relative error tolerance")
    grad.set_defaults(handler=cmd_gradcheck)

    export = subparsers.add_parser("export-data", help="Write samples of the configured dataset to CSV")
    _add_run_options(export)
    export.add_argument("--n", type=int, default=10_000, help="Number of samples")
    export.add_argument("--out", required=True, help="Output CSV")
    export.set_defaults(handler=cmd_export_data)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level, args.log_dir)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    try:
        return args.handler(args)
    except KeyboardInterrupt:
        console.print("\n[bold yellow]Operation cancelled by user[/bold yellow]")
        return EXIT_FAILURE
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
        console.print(f"[bold red]Error:[/bold red] {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
