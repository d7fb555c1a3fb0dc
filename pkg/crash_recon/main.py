"""
crash-recon command line.

    crash-recon synth runs/corpus --n 200 --seed 1
    crash-recon preprocess runs/corpus
    crash-recon train runs/corpus --out runs/ckpt.bin
    crash-recon evaluate runs/corpus --ckpt runs/ckpt.bin --out runs/eval
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from dotenv import load_dotenv
from pydantic import ValidationError

from crash_recon.core.config import Settings, load_settings
from crash_recon.core.errors import CrashReconError
from crash_recon.core.io import write_csv, write_json
from crash_recon.crud.case import case_crud
from crash_recon.crud.statistics import case_stats, stats_frame
from crash_recon.crud.truth import truth_crud
from crash_recon.services.evaluation import Perturbation, evaluate_corpus
from crash_recon.services.evaluation import sweep as run_sweep
from crash_recon.services.geometry import standardize_case
from crash_recon.services.ingest import ingest_case
from crash_recon.services.model import load_model, prepare_case
from crash_recon.services.preprocess import preprocess_corpus
from crash_recon.services.reconstruct import baseline_case, reconstruct_case, reconstruct_many
from crash_recon.services.render import render_svg as write_svg
from crash_recon.services.robustness import ABLATABLE
from crash_recon.services.synth import build_corpus
from crash_recon.services.trainer import prepare_all
from crash_recon.services.trainer import train as run_training

logger = logging.getLogger("crash_recon")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: str, log_file: Optional[str]) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, handlers=handlers, force=True)


def _validation_message(error: ValidationError) -> str:
    parts = []
    for e in error.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "invalid configuration: " + "; ".join(parts)


class CrashReconGroup(click.Group):
    """Maps library errors onto exit codes: 2 for bad input, 1 for anything unexpected"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except ValidationError as e:
            logger.debug("validation failed", exc_info=True)
            click.echo(f"Error: {_validation_message(e)}", err=True)
            ctx.exit(2)
        except (CrashReconError, FileNotFoundError) as e:
            logger.debug("command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(2)
        except Exception as e:
            logger.exception(f"unexpected error: {e}")
            ctx.exit(1)


class Runtime:
    """Global options, resolved into Settings once per command"""

    def __init__(self, config: Optional[str], preset: Optional[str], seed: Optional[int], workers: Optional[int]):
        self.config = config
        self.preset = preset
        self.seed = seed
        self.workers = workers

    def settings(self, overrides: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> Settings:
        data: Dict[str, Any] = dict(overrides or {})
        seed = seed if seed is not None else self.seed
        if seed is not None:
            data["seed"] = seed
        if self.workers is not None:
            data["workers"] = self.workers
        settings = load_settings(self.config, self.preset, data)
        logger.info(f"resolved config: {json.dumps(settings.model_dump(mode='json'), sort_keys=True)}")
        return settings


def _echo_config(out_dir: Path, settings: Settings) -> None:
    write_json(Path(out_dir) / "resolved_config.json", settings.model_dump(mode="json"))


def _require_corpus(path: str) -> Path:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    return root


def _model_or_baseline(ckpt: Optional[str], baseline: bool, settings: Settings):
    if baseline:
        return None
    if not ckpt:
        raise click.UsageError("--ckpt is required unless --baseline is given")
    model, _ = load_model(ckpt, settings)
    return model


def _split_cases(root: Path, split: str):
    splits = case_crud.split_ids(root)
    if split != "all" and split not in splits:
        logger.warning(f"corpus {root} has no '{split}' split, using all cases")
        split = "all"
    return case_crud.get_split(root, split)


@click.group(cls=CrashReconGroup)
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="TOML settings file")
@click.option("--preset", type=click.Choice(["default", "tiny"]), default=None, help="Named settings preset")
@click.option("--log-level", default="INFO", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]))
@click.option("--log-file", type=click.Path(dir_okay=False), default=None)
@click.option("--workers", type=click.IntRange(min=0), default=None, help="Case-level threads, 0 = all cores")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Global seed (env CRASH_RECON_SEED)")
@click.pass_context
def cli(ctx: click.Context, config, preset, log_level, log_file, workers, seed):
    """Scene-grounded reconstruction of pre-impact vehicle trajectories"""
    load_dotenv()
    configure_logging(log_level, log_file)
    ctx.obj = Runtime(config, preset, seed, workers)


@cli.command()
@click.argument("corpus")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the table as CSV")
@click.pass_obj
def stats(rt: Runtime, corpus, out):
    """Per-field missing / unknown / malformed percentages"""
    rt.settings()
    frame = stats_frame(case_stats(case_crud.get_multi(_require_corpus(corpus))))
    if out:
        write_csv(out, frame)
    click.echo(frame.to_string(index=False))


@cli.command()
@click.argument("corpus")
@click.pass_obj
def preprocess(rt: Runtime, corpus):
    """Build dense supervision CSVs next to every case"""
    settings = rt.settings()
    root = _require_corpus(corpus)
    n = preprocess_corpus(root, settings, settings.workers)
    _echo_config(root, settings)
    click.echo(f"preprocessed {n} cases")


@cli.command()
@click.argument("out")
@click.option("--n", "n", type=click.IntRange(min=1), default=None, help="Number of cases")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.pass_obj
def synth(rt: Runtime, out, n, seed):
    """Generate a synthetic corpus with sealed ground truth"""
    overrides = {"synth": {"n": n}} if n is not None else {}
    settings = rt.settings(overrides, seed)
    manifest = build_corpus(out, settings.synth, settings.seed, workers=settings.workers)
    _echo_config(Path(out), settings)
    click.echo(f"wrote {manifest['n']} cases to {out}")


@cli.command()
@click.argument("corpus")
@click.option("--out", type=click.Path(dir_okay=False), default="runs/ckpt.bin", show_default=True,
              help="Checkpoint path; logs and config are written next to it")
@click.pass_obj
def train(rt: Runtime, corpus, out):
    """Run the staged training schedule"""
    settings = rt.settings()
    result = run_training(_require_corpus(corpus), settings, out, settings.workers)
    click.echo(f"checkpoint {result.checkpoint} after {result.steps} steps ({result.skipped} skipped)")


@cli.command()
@click.argument("corpus")
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None)
@click.option("--baseline", is_flag=True, help="Lane-following constant-speed-limit baseline")
@click.option("--case", "case_ids", multiple=True, help="Only these case ids")
@click.option("--out", type=click.Path(file_okay=False), default="runs/reconstructions", show_default=True)
@click.pass_obj
def reconstruct(rt: Runtime, corpus, ckpt, baseline, case_ids, out):
    """Write per-case trajectory CSVs and diagnostics"""
    settings = rt.settings()
    root = _require_corpus(corpus)
    model = _model_or_baseline(ckpt, baseline, settings)
    cases = [case_crud.get_or_raise(root, id) for id in case_ids] if case_ids else case_crud.get_multi(root)
    recs = reconstruct_many(model, prepare_all(cases, settings, False, settings.workers), settings)
    for rec in recs:
        rec.save(out)
    _echo_config(Path(out), settings)
    click.echo(f"reconstructed {len(recs)} cases into {out}")


@cli.command()
@click.argument("corpus")
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None)
@click.option("--baseline", is_flag=True, help="Score the lane-following baseline instead of a model")
@click.option("--split", default="test", show_default=True, help="Manifest split, or 'all'")
@click.option("--noise", type=float, default=None, help="Accident-site noise cap (m)")
@click.option("--drop", type=float, default=None, help="Random entry-missing rate")
@click.option("--map-keep", type=float, default=None, help="Fraction of road polylines kept")
@click.option("--ablate", default=None, help="Report attribute set to unknown for every vehicle")
@click.option("--conservative-circle", is_flag=True, help="Use the 16.2 ft contact circle")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Perturbation seed")
@click.option("--out", type=click.Path(file_okay=False), default="runs/eval", show_default=True)
@click.pass_obj
def evaluate(rt: Runtime, corpus, ckpt, baseline, split, noise, drop, map_keep, ablate, conservative_circle,
             seed, out):
    """Score reconstructions against annotations and sealed ground truth"""
    if ablate is not None and ablate not in ABLATABLE:
        raise click.BadParameter(f"expected one of {sorted(ABLATABLE)}", param_hint="--ablate")
    metrics: Dict[str, Any] = {}
    for key, value in (("noise", noise), ("drop", drop), ("map_keep", map_keep)):
        if value is not None:
            metrics[key] = value
    if conservative_circle:
        metrics["conservative_circle"] = True
    settings = rt.settings({"metrics": metrics} if metrics else {}, seed)
    root = _require_corpus(corpus)
    model = _model_or_baseline(ckpt, baseline, settings)
    cases = _split_cases(root, split)
    truths = truth_crud.get_many(root, [c.case_id for c in cases])
    perturbation = Perturbation(noise=settings.metrics.noise, drop=settings.metrics.drop, ablate=ablate,
                                map_keep=settings.metrics.map_keep, seed=settings.seed)
    result = evaluate_corpus(model, cases, truths, settings, perturbation,
                             label="baseline" if model is None else "model", workers=settings.workers)
    result.save(out)
    _echo_config(Path(out), settings)
    report = result.report
    click.echo(f"AKD {report.akd:.3f} m  AVD {report.avd:.3f} m/s  AAPD {report.aapd_tan:.3f}/{report.aapd_norm:.3f} m  "
               f"CR {report.cr:.2f}%  CSA {report.csa:.2f}%")


@cli.command("render-svg")
@click.argument("case_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="SVG path (default: next to the case)")
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None, help="Overlay a model reconstruction")
@click.option("--baseline", is_flag=True, help="Overlay the baseline reconstruction")
@click.pass_obj
def render_svg(rt: Runtime, case_path, out, ckpt, baseline):
    """Draw a case (and optionally its reconstruction) to SVG"""
    settings = rt.settings()
    case = ingest_case(Path(case_path).read_bytes())
    reconstruction = None
    if ckpt or baseline:
        prepared = prepare_case(case, settings)
        if baseline:
            reconstruction = baseline_case(prepared, settings)
        else:
            model, _ = load_model(ckpt, settings)
            reconstruction = reconstruct_case(model, prepared)
    out = Path(out) if out else Path(case_path).with_suffix(".svg")
    write_svg(standardize_case(case), out, reconstruction, settings.render)
    click.echo(f"wrote {out}")


@cli.command()
@click.argument("corpus")
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None)
@click.option("--baseline", is_flag=True)
@click.option("--mode", type=click.Choice(["drop", "noise", "map"]), default="drop", show_default=True)
@click.option("--rates", default=None, help="Comma-separated levels (default: metrics.sweep_rates)")
@click.option("--split", default="test", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="runs/sweep", show_default=True)
@click.pass_obj
def sweep(rt: Runtime, corpus, ckpt, baseline, mode, rates, split, out):
    """Metric rows over a range of perturbation levels"""
    levels = None
    if rates:
        try:
            levels = [float(r) for r in rates.split(",")]
        except ValueError:
            raise click.BadParameter("expected comma-separated numbers", param_hint="--rates") from None
    settings = rt.settings({"metrics": {"sweep_rates": levels}} if levels else {})
    root = _require_corpus(corpus)
    model = _model_or_baseline(ckpt, baseline, settings)
    cases = _split_cases(root, split)
    truths = truth_crud.get_many(root, [c.case_id for c in cases])
    frame = run_sweep(model, cases, truths, settings, mode, settings.metrics.sweep_rates, settings.seed,
                      settings.workers)
    write_csv(Path(out) / f"sweep_{mode}.csv", frame)
    _echo_config(Path(out), settings)
    click.echo(frame[["rate", "akd", "csa"]].to_string(index=False))


if __name__ == "__main__":
    cli()
