""" Command line surface: every output is a CSV file or a plain table

Exit codes: 0 on success, 1 when a check fails, 2 on usage errors.
"""
# Std lib
import dataclasses
import os
from typing import List, Optional, Tuple
# Non std lib
import click
# Local
from actbench import derivation
from actbench import tensor
from actbench import trainer
from actbench import verify
from actbench.activations import ActivationKind, FixedHyper
from actbench.task import BenchTask, CurveJob, CurveTask, GradCheckTask
from actbench.utils import change_ext, format_real


SWEEPABLE = ("alpha_p", "alpha_n", "beta")


def _kinds(ctx, param, value: str) -> List[ActivationKind]:
    if value.strip().lower() == "all":
        return list(ActivationKind)
    try:
        return [ActivationKind.from_name(name) for name in value.split(",")]
    except ValueError as error:
        raise click.BadParameter(str(error), ctx=ctx, param=param)


def _bench_kinds(ctx, param, value: str) -> List[str]:
    """ Like `--kind` of the other commands, `swiglu` is accepted for the gated product """
    if value.strip().lower() == "all":
        return [kind.value for kind in ActivationKind] + [tensor.GATED_ACTIVATION]
    names = []
    for name in value.split(","):
        if name.strip().lower() == tensor.GATED_ACTIVATION:
            names.append(tensor.GATED_ACTIVATION)
        else:
            names.append(_kind(ctx, param, name).value)
    return names


def _kind(ctx, param, value: str) -> ActivationKind:
    try:
        return ActivationKind.from_name(value)
    except ValueError as error:
        raise click.BadParameter(str(error), ctx=ctx, param=param)


def _sweep(ctx, param, value: Optional[str]) -> Optional[Tuple[str, List[float]]]:
    """ `name=v1,v2,...` """
    if not value:
        return None
    name, _, values = value.partition("=")
    name = name.strip().replace("-", "_")
    if name not in SWEEPABLE or not values:
        raise click.BadParameter(f"expected NAME=V1,V2 with NAME in {', '.join(SWEEPABLE)}", ctx=ctx, param=param)
    try:
        return name, [float(v) for v in values.split(",")]
    except ValueError:
        raise click.BadParameter(f"`{values}` is not a list of reals", ctx=ctx, param=param)


def _anchor(ctx, param, value: str) -> Tuple[float, float]:
    try:
        x, v = (float(part) for part in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected X,VALUE, got `{value}`", ctx=ctx, param=param)
    return x, v


@click.group()
def cli():
    """ Workbench for gradient-first trainable activation functions """


@cli.command("curve")
@click.option("--kind", callback=_kind, required=True, help="Activation name, e.g. xielu")
@click.option("--alpha-p", type=float, default=0.8, show_default=True)
@click.option("--alpha-n", type=float, default=0.8, show_default=True)
@click.option("--beta", type=float, default=0.5, show_default=True)
@click.option("--beta-n", type=float, default=None, help="Negative-branch beta (defaults to --beta)")
@click.option("--clamp", is_flag=True, help="Clamp negative inputs at eps, forward and backward")
@click.option("--xmin", type=float, default=-5.0, show_default=True)
@click.option("--xmax", type=float, default=5.0, show_default=True)
@click.option("--samples", type=int, default=1001, show_default=True)
@click.option("--sweep", callback=_sweep, default=None, help="One file per value, e.g. alpha_n=0.5,1,2")
@click.option("--out", type=click.Path(dir_okay=False), default="curve.csv", show_default=True)
@click.option("--skip-existing", is_flag=True, help="Do not rewrite curves already on disk")
@click.option("--jobs", type=int, default=1, show_default=True)
def cmd_curve(kind, alpha_p, alpha_n, beta, beta_n, clamp, xmin, xmax, samples, sweep, out, skip_existing, jobs):
    """ Sample an activation and its gradient """
    try:
        hyper = FixedHyper(beta=beta, beta_n=beta_n, clamp=clamp)
        base = dict(kind=kind, alpha_p=alpha_p, alpha_n=alpha_n, xmin=xmin, xmax=xmax, samples=samples, hyper=hyper)
        if sweep is None:
            jobs_list = [CurveJob(target=out, **base)]
        else:
            name, values = sweep
            jobs_list = []
            for value in values:
                options = dict(base)
                if name == "beta":
                    options["hyper"] = FixedHyper(beta=value, beta_n=beta_n, clamp=clamp)
                else:
                    options[name] = value
                target = change_ext(out, "") + f"{name}-{value:g}.csv"
                jobs_list.append(CurveJob(target=target, **options))
    except ValueError as error:
        raise click.UsageError(str(error))
    click.echo("[Task] Write curves")
    task = CurveTask(jobs_list, multiprocess=jobs, skip_existing=skip_existing)
    task.process()
    for path in task.output_files:
        click.echo(path)


@cli.command("gradcheck")
@click.option("--kind", "kinds", callback=_kinds, default="all", show_default=True,
              help="`all` or a comma separated list of activations")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--samples", type=int, default=1000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="gradcheck.csv", show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.pass_context
def cmd_gradcheck(ctx, kinds, seed, samples, out, jobs):
    """ Finite-difference, continuity and end-to-end model checks """
    if samples < 1:
        raise click.BadParameter("at least one sample is required", param_hint="--samples")
    click.echo("[Task] Check gradients")
    task = GradCheckTask(kinds, seed=seed, samples=samples, target=out, multiprocess=jobs)
    task.process()
    click.echo(f"Report written to {out}")
    if not task.passed:
        for report in task.failures:
            click.echo(f"FAILED {report.describe()}", err=True)
        ctx.exit(1)
    click.echo(f"All {len(task.reports)} checks passed")


@cli.command("stability")
@click.option("--mode", type=click.Choice(["single", "bf16", "double"]), default="single", show_default=True)
@click.option("--x", "xs", type=float, multiple=True, help="Negative inputs to evaluate (repeatable)")
@click.option("--out", type=click.Path(dir_okay=False), default="stability.csv", show_default=True)
@click.pass_context
def cmd_stability(ctx, mode, xs, out):
    """ Naive e^x - 1 against expm1 in emulated precision """
    if any(not x < 0 for x in xs):
        raise click.BadParameter("inputs must be negative", param_hint="--x")
    results = verify.stability_table(verify.PrecisionMode.from_name(mode), xs or verify.STABILITY_POINTS)
    with open(out, "w") as f:
        verify.write_stability(results, f)
    for result in results:
        click.echo(f"x={result.x:.3g}\tnaive_rel_err={result.naive_rel_err:.3e}\t"
                   f"stable_rel_err={result.stable_rel_err:.3e}")
    failed = [result for result in results if not verify.stability_passed(result)]
    if failed:
        worst = max(failed, key=lambda r: r.stable_rel_err)
        click.echo(f"FAILED stable form off by {worst.stable_rel_err:.3e} at x={worst.x:g}", err=True)
        ctx.exit(1)


@cli.command("derive")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--anchor", callback=_anchor, default="0,0", show_default=True, help="X,VALUE the result goes through")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV of the antiderivative pieces")
def cmd_derive(spec_path, anchor, out):
    """ Integrate a gradient spec into a continuous activation """
    with open(spec_path) as f:
        text = f.read()
    try:
        spec = derivation.parse_spec(text)
        derived = derivation.integrate(spec, *anchor)
    except ValueError as error:
        raise click.BadParameter(str(error), param_hint="--spec")
    for index, constant in enumerate(derived.constants):
        lo, hi = spec.interval(index)
        click.echo(f"C_{index}={format_real(constant)}\t({format_real(lo)}, {format_real(hi)}]")
    for b, jump in derivation.gradient_discontinuities(spec):
        if jump:
            click.echo(f"gradient jump of {format_real(jump)} at x={format_real(b)}")
    if out:
        with open(out, "w") as f:
            derivation.write_derived_csv(derived, f)


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="run", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the seed of the config")
@click.option("--progress/--no-progress", default=True)
@click.pass_context
def cmd_train(ctx, config_path, out_dir, seed, progress):
    """ Train the toy language model, writes runlog.csv, checkpoint.txt and config.cfg """
    try:
        config = trainer.load_config(config_path)
        if seed is not None:
            config = trainer.config_from_mapping({**dataclasses.asdict(config), "seed": seed})
    except trainer.ConfigError as error:
        raise click.BadParameter(str(error), param_hint="--config")
    click.echo(f"[Task] Train {config.activation} for {config.steps} steps")
    try:
        log = trainer.train(config, out_dir=out_dir, progress=progress)
    except (FloatingPointError, ValueError) as error:
        click.echo(f"Training failed: {error}", err=True)
        ctx.exit(1)
    click.echo(f"Final smoothed loss {log.smoothed_loss()[-1]:.4f}")
    click.echo(os.path.join(out_dir, "runlog.csv"))


@cli.command("alphas")
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Freshly initialised model of a training config")
def cmd_alphas(log_path, checkpoint, config_path):
    """ Per-layer learned alpha_p / alpha_n, and beta when it is trained """
    if sum(option is not None for option in (log_path, checkpoint, config_path)) != 1:
        raise click.UsageError("Give exactly one of --log, --checkpoint or --config")
    if log_path:
        with open(log_path) as f:
            log = trainer.RunLog.read_csv(f)
        if not log.rows:
            raise click.BadParameter("empty run log", param_hint="--log")
        last = log.rows[-1]
        rows = list(zip(last.alpha_p, last.alpha_n, last.beta or (None,) * len(last.alpha_p)))
    else:
        if checkpoint:
            model = tensor.load_checkpoint(checkpoint)
        else:
            try:
                config = trainer.load_config(config_path)
            except trainer.ConfigError as error:
                raise click.BadParameter(str(error), param_hint="--config")
            model = trainer.build_model(config, trainer.load_corpus(config.corpus or None, config.vocab))
        rows = [(p.alpha_p, p.alpha_n, p.beta) for p in model.alphas()]
    if not rows:
        click.echo("No trainable activation parameters")
        return
    with_beta = rows[0][2] is not None
    click.echo("layer\talpha_p\talpha_n" + ("\tbeta" if with_beta else ""))
    for index, (alpha_p, alpha_n, beta) in enumerate(rows):
        click.echo(f"{index}\t{alpha_p:.6g}\t{alpha_n:.6g}" + (f"\t{beta:.6g}" if with_beta else ""))


@cli.command("bench")
@click.option("--kind", "kinds", callback=_bench_kinds, default="all", show_default=True,
              help="`all` or a comma separated list of activations, `swiglu` included")
@click.option("--n", type=int, default=100_000, show_default=True, help="Elements per timing")
@click.option("--repeats", type=int, default=3, show_default=True)
def cmd_bench(kinds, n, repeats):
    """ Operation census and ns/element of each activation """
    try:
        task = BenchTask(kinds, n=n, repeats=repeats)
    except ValueError as error:
        raise click.UsageError(str(error))
    task.process()
    click.echo(task.table())


if __name__ == "__main__":
    cli()
