"""Command-line interface."""

from __future__ import annotations

import contextlib
import platform as platform_mod
import sys
from collections.abc import Iterator
from enum import Enum
from pathlib import Path
from typing import cast

import torch
import typer

from tubeot import __version__
from tubeot.config import (
    LOG_LEVEL_ENV,
    RunConfig,
    dump_run_config,
    load_run_config,
    log_level,
    save_run_config,
)
from tubeot.data.store import DatasetStore
from tubeot.data.synthetic import generate_dataset
from tubeot.errors import TubeotError
from tubeot.eval.features import export_projection_features
from tubeot.eval.probe import linear_probe
from tubeot.eval.report import ProbeReport, SegmentationReport, write_report, write_summary_csv
from tubeot.eval.segmentation import REGIMES, segmentation_benchmark
from tubeot.sweep import Axis, rows_as_dicts, run_sweep
from tubeot.train.checkpoint import load_checkpoint
from tubeot.train.trainer import train
from tubeot.ui.console import Console, configure_logging

app = typer.Typer(
    name="tubeot",
    help="Masked video pretraining against Sinkhorn-balanced prototype assignments.",
    no_args_is_help=True,
    add_completion=False,
)
config_app = typer.Typer(help="Create and inspect run configs.", no_args_is_help=True)
app.add_typer(config_app, name="config")


class Split(str, Enum):
    train = "train"
    eval = "eval"


class EvalMode(str, Enum):
    probe = "probe"
    segment = "segment"


class SweepAxis(str, Enum):
    prototypes = "prototypes"
    phi_arch = "phi_arch"
    loss = "loss"


def _console() -> Console:
    return Console()


@contextlib.contextmanager
def _reporting(ui: Console) -> Iterator[None]:
    """Turn package errors into a one-line message and their exit code."""
    try:
        yield
    except TubeotError as exc:
        ui.error(str(exc))
        raise typer.Exit(exc.exit_code) from exc


@app.callback()
def main() -> None:
    """Configure logging from the environment before any command runs."""
    configure_logging(log_level(), Console(stderr=True))


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------


@app.command()
def gen(
    config_path: Path = typer.Argument(..., help="Run config (TOML or JSON)."),
    out: Path = typer.Argument(..., help="Dataset directory to write."),
    split: Split = typer.Option(Split.train, "--split", "-s", help="Which split to generate."),
) -> None:
    """Render a synthetic dataset split to disk."""
    ui = _console()
    with _reporting(ui):
        config = load_run_config(config_path)
        generator, count = config.data.split(split.value)
        clips = generate_dataset(generator, count)
        manifest = DatasetStore(out).write(clips, generator=generator)
    ui.success(f"Wrote {len(manifest.clips)} {split.value} clips to {out}")


# --------------------------------------------------------------------------
# pretrain
# --------------------------------------------------------------------------


@app.command()
def pretrain(
    config_path: Path = typer.Argument(..., help="Run config (TOML or JSON)."),
    data: Path = typer.Option(..., "--data", "-d", help="Training dataset directory."),
    out: Path = typer.Option(Path("runs/desk"), "--out", "-o", help="Run directory."),
    resume: Path | None = typer.Option(
        None, "--resume", help="Checkpoint to continue from; must match the config."
    ),
) -> None:
    """Pretrain and write checkpoint.bin and metrics.csv to the run directory."""
    ui = _console()
    with _reporting(ui):
        config = load_run_config(config_path)
        clips = DatasetStore(data).load()
        state = load_checkpoint(resume) if resume is not None else None
        save_run_config(config, out / "config.toml")
        ui.info(
            f"Pretraining {config.name} with objective {config.train.objective} "
            f"on {len(clips)} clips"
        )
        result = train(clips, config, out_dir=out, state=state)

    if result.metrics:
        last = result.metrics[-1]
        ui.table(
            ["step", "loss", "variance", "usage entropy"],
            [[result.state.step, last.loss, last.feat_variance, last.usage_entropy]],
        )
    if result.collapsed(config.train.collapse_variance):
        ui.warning(
            f"Feature collapse: batch variance {result.final_variance:.3g} is below "
            f"{config.train.collapse_variance:g}"
        )
    ui.success(f"Checkpoint written to {result.checkpoint}")


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


@app.command("eval")
def evaluate(
    checkpoint: Path = typer.Argument(..., help="Checkpoint written by pretrain."),
    data: Path = typer.Argument(..., help="Evaluation dataset directory."),
    mode: EvalMode = typer.Option(EvalMode.segment, "--mode", "-m", help="Which protocol."),
    train_data: Path | None = typer.Option(
        None,
        "--train-data",
        help=(
            "Labelled clips to fit the probe on (probe mode). Defaults to the training "
            "split regenerated from the checkpoint's config."
        ),
    ),
    out: Path = typer.Option(Path("reports"), "--out", "-o", help="Report directory."),
) -> None:
    """Score frozen encoder features and write a JSON report plus a CSV summary."""
    ui = _console()
    with _reporting(ui):
        state = load_checkpoint(checkpoint)
        clips = DatasetStore(data).load()
        config = state.config
        resolved = config.model_dump(mode="json")
        if mode is EvalMode.probe:
            if train_data is None:
                ui.info("Regenerating the training split recorded in the checkpoint")
                train_clips = generate_dataset(*config.data.split("train"))
            else:
                train_clips = DatasetStore(train_data).load()
            result = linear_probe(train_clips, clips, state, config.eval.probe)
            report: ProbeReport | SegmentationReport = ProbeReport.build(
                result, checkpoint=str(checkpoint), config=resolved
            )
        else:
            results = [
                segmentation_benchmark(clips, state, config.tubes, regime, config.eval.segmentation)
                for regime in REGIMES
            ]
            report = SegmentationReport.build(results, checkpoint=str(checkpoint), config=resolved)
        rows = report.summary_rows()
        report_path = write_report(report, out / f"{mode.value}_report.json")
        write_summary_csv(rows, out / f"{mode.value}_summary.csv")

    ui.table(list(rows[0]), [list(row.values()) for row in rows])
    ui.success(f"Report written to {report_path}")


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


@app.command()
def export(
    checkpoint: Path = typer.Argument(..., help="Checkpoint with a trained projection network."),
    data: Path = typer.Argument(..., help="Dataset whose clips to project."),
    out: Path = typer.Argument(..., help="Feature store directory to write."),
) -> None:
    """Write per-tube projection features for use as frozen external targets."""
    ui = _console()
    with _reporting(ui):
        state = load_checkpoint(checkpoint)
        clips = DatasetStore(data).load()
        manifest = export_projection_features(clips, state, out)
    ui.success(
        f"Wrote {len(manifest.entries)} feature matrices of "
        f"{manifest.n_tokens}x{manifest.d_feat} to {out}"
    )


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------


@app.command()
def sweep(
    config_path: Path = typer.Argument(..., help="Run config (TOML or JSON)."),
    axis: SweepAxis = typer.Option(..., "--axis", "-a", help="Which ablation axis to vary."),
    out: Path = typer.Option(Path("sweep.csv"), "--out", "-o", help="Summary CSV to write."),
) -> None:
    """Pretrain and probe one cell per grid value; write one summary row per cell."""
    ui = _console()
    with _reporting(ui):
        config = load_run_config(config_path)
        rows = run_sweep(
            config,
            cast(Axis, axis.value),
            on_row=lambda row: ui.info(
                f"{row.axis}={row.value}: accuracy "
                f"{row.accuracy_mean:.3f} ± {row.accuracy_std:.3f}"
            ),
        )
        write_summary_csv(rows_as_dicts(rows), out)
    ui.table(
        ["value", "accuracy", "std", "seeds"],
        [[row.value, row.accuracy_mean, row.accuracy_std, row.n_seeds] for row in rows],
    )
    ui.success(f"Summary written to {out}")


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


@config_app.command("init")
def config_init(
    path: Path = typer.Argument(Path("tubeot.toml"), help="Where to write the config."),
    force: bool = typer.Option(False, "--force", "-f", help="Overwrite an existing file."),
) -> None:
    """Write a run config with every field at its default."""
    ui = _console()
    if path.exists() and not force:
        ui.error(f"{path} already exists. Pass --force to overwrite it.")
        raise typer.Exit(1)
    with _reporting(ui):
        save_run_config(RunConfig(), path)
    ui.success(f"Wrote default config to {path}")


@config_app.command("show")
def config_show(
    path: Path = typer.Argument(..., help="Run config (TOML or JSON)."),
) -> None:
    """Print the resolved config, defaults filled in."""
    ui = _console()
    with _reporting(ui):
        config = load_run_config(path)
    ui.rule(config.name)
    ui.print(dump_run_config(config), markup=False, highlight=False)
    ui.table(
        ["Derived", "Value"],
        [
            ["tubes per clip", config.n_tokens],
            ["masked tubes per clip", config.n_masked],
            ["tube pixels", config.tube_dim],
            ["decoder width", config.model.decoder_dim],
            ["projection widths", " x ".join(map(str, config.projection.hidden_widths))],
        ],
    )


# --------------------------------------------------------------------------
# version
# --------------------------------------------------------------------------


@app.command()
def version() -> None:
    """Print the version and the numeric stack."""
    ui = _console()
    ui.print(f"tubeot {__version__}")
    ui.table(
        ["Component", "Version"],
        [
            ["python", sys.version.split()[0]],
            ["torch", torch.__version__],
            ["platform", f"{platform_mod.system()} {platform_mod.machine()}"],
            ["log level", f"{log_level()} (from {LOG_LEVEL_ENV})"],
        ],
    )


if __name__ == "__main__":  # pragma: no cover
    app()
