"""Command-line entry point: `asdkit run` plus one subcommand per pipeline stage."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import click
import torch

from . import pipeline
from .corpus import write_corpus
from .embedder import load_checkpoint
from .errors import ASDError, ConfigHashMismatch, DataError, MissingPoints, UsageError
from .pseudolabel.labels import PseudoLabelTable, training_labels
from .trainer import featurize, train
from .viz import cmd_visualize, read_points

log = logging.getLogger("asdkit")


def _config(path: str, overrides: tuple[str, ...], workers: int | None) -> pipeline.ExperimentConfig:
    overrides = list(overrides)
    if workers is not None:
        if workers < 1:
            raise UsageError("--workers must be at least 1")
        overrides.append(f"train.workers={workers}")
        torch.set_num_threads(workers)
    cfg = pipeline.ExperimentConfig.load(path, overrides)
    cfg.check_paths()
    return cfg


def _features(cfg: pipeline.ExperimentConfig, manifest):
    with pipeline.Stage("features"):
        return dict(zip((c.clip_id for c in manifest), featurize(list(manifest), cfg.spectral)))


def _check_hash(found: str, cfg: pipeline.ExperimentConfig, what: str) -> None:
    if found and found != cfg.config_hash:
        raise ConfigHashMismatch(f"{what} was written by config {found}, current config is {cfg.config_hash}")


config_option = click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
                             help="YAML experiment config.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config key, e.g. --set train.epochs=4 (repeatable).")
workers_option = click.option("--workers", type=int, default=None, help="CPU threads for training and inference.")
seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Trial seed.")


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def cli(verbose: int):
    """Anomalous sound detection with pseudo-attribute labels."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@set_option
@workers_option
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
def run(config_path, overrides, workers, force):
    """Pseudo-label, train, score and evaluate every trial seed."""
    cfg = _config(config_path, overrides, workers)
    pipeline.run(cfg, force=force)
    click.echo((Path(cfg.output_dir) / "report.txt").read_text(), nl=False)


@cli.command()
@config_option
@set_option
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory for WAV files.")
@click.option("--force", is_flag=True)
def synth(config_path, overrides, out, force):
    """Write the configured synthetic corpus as WAV files."""
    cfg = _config(config_path, overrides, None)
    if cfg.synthetic is None:
        raise UsageError("config has no synthetic section")
    root = pipeline.prepare_output(out, force)
    manifest = pipeline.load_manifest(cfg)
    write_corpus(manifest, root)
    manifest.to_csv(root / "manifest.csv", {"config_hash": cfg.config_hash})
    click.echo(f"{len(manifest)} clips written to {root}")


@cli.command()
@config_option
@set_option
@workers_option
@seed_option
@click.option("--out", required=True, type=click.Path(file_okay=False))
def pseudolabel(config_path, overrides, workers, seed, out):
    """Build the feature space and cluster it into pseudo-labels."""
    cfg = _config(config_path, overrides, workers)
    if cfg.method in ("none", "ground_truth"):
        raise UsageError(f"method {cfg.method!r} uses no pseudo-labels")
    manifest = pipeline.load_manifest(cfg)
    feats = _features(cfg, manifest) if cfg.method == "class" else None
    with pipeline.Stage("pseudolabel"):
        table, _ = pipeline.build_pseudo_labels(cfg, manifest, seed, feats)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "pseudo_labels.csv", cfg.config_hash)
    pipeline.write_points(out / "points_2d.csv", table, manifest, cfg.config_hash)
    for (machine, domain), g in sorted(table.groups.items()):
        click.echo(f"{machine} {domain}: k={g.k_chosen}")


@cli.command("train")
@config_option
@set_option
@workers_option
@seed_option
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False),
              help="pseudo_labels.csv from the pseudolabel command.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train_cmd(config_path, overrides, workers, seed, labels_path, out):
    """Train the embedding networks and save scoring checkpoints."""
    cfg = _config(config_path, overrides, workers)
    manifest = pipeline.load_manifest(cfg)
    train_clips = manifest.select(split="train")
    table = None
    if cfg.method not in ("none", "ground_truth"):
        if labels_path is None:
            raise UsageError(f"method {cfg.method!r} needs --labels")
        _check_hash(_csv_hash(labels_path), cfg, labels_path)
        table = PseudoLabelTable.from_csv(labels_path)
    labels = training_labels(train_clips, cfg.method, table)
    feats = _features(cfg, train_clips)
    with pipeline.Stage("train"):
        result = train(train_clips, labels, cfg.spectral, dataclasses.replace(cfg.train, seed=seed), out_dir=out,
                       config_hash=cfg.config_hash, features=[feats[c.clip_id] for c in train_clips])
    result.log.to_csv(Path(out) / "train_log.csv")
    click.echo(f"final loss {result.log.losses[-1]:.4f}; checkpoints in {out}")


def _csv_hash(path) -> str:
    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh), None)
    return (row or {}).get("config_hash", "")


@cli.command()
@config_option
@set_option
@workers_option
@seed_option
@click.option("--checkpoints", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output scores CSV.")
def score(config_path, overrides, workers, seed, checkpoints, out):
    """Score test clips with the configured checkpoints and average across them."""
    cfg = _config(config_path, overrides, workers)
    manifest = pipeline.load_manifest(cfg)
    models = []
    for epoch in cfg.train.score_checkpoint_epochs:
        path = Path(checkpoints) / f"checkpoint_epoch={epoch}.npz"
        if not path.exists():
            raise DataError(f"missing checkpoint {path}")
        model, header = load_checkpoint(path)
        _check_hash(header.get("meta", {}).get("config_hash", ""), cfg, str(path))
        models.append(model)
    feats = _features(cfg, manifest)
    with pipeline.Stage("score"):
        scores = pipeline.score_models(cfg, models, manifest, feats, seed)
    pipeline.write_scores(out, manifest, scores, cfg.config_hash)
    click.echo(f"{len(scores)} scores written to {out}")


@cli.command("eval")
@config_option
@set_option
@click.option("--scores", "score_paths", required=True, multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Scores CSV per trial (repeatable).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def eval_cmd(config_path, overrides, score_paths, out):
    """Official metrics per trial and their mean (std) summary."""
    cfg = _config(config_path, overrides, None)
    manifest = pipeline.load_manifest(cfg)
    reports = []
    with pipeline.Stage("eval"):
        for i, path in enumerate(score_paths):
            report = pipeline.evaluate_scores(cfg, manifest, pipeline.read_scores(path, cfg.config_hash))
            report.meta["seed"] = i
            reports.append(report)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(reports):
        r.to_json(out / f"report_{i}.json")
    pipeline.write_summary(cfg, reports, out)
    click.echo((out / "report.txt").read_text(), nl=False)


@cli.command()
@click.option("--points", "points_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="points_2d.csv from a run or the pseudolabel command.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--color-by", type=click.Choice(["label", "cluster_id"]), default="label", show_default=True)
@click.option("--report", "report_path", type=click.Path(exists=True, dir_okay=False),
              help="Trial report.json; its per-machine score goes in the titles.")
def viz(points_path, out, color_by, report_path):
    """Scatter plots of the reduced feature space per (machine, domain)."""
    points = read_points(points_path, color_by)
    if not points:
        raise MissingPoints(f"{points_path} holds no points")
    with open(points_path, newline="") as fh:
        first = next(csv.DictReader(fh))
    scores = None
    if report_path:
        with open(report_path) as fh:
            tree = json.load(fh)
        scores = {m: v["hmean"] for m, v in tree.get("machines", {}).items()}
    for path in cmd_visualize(points, out, first["method"], scores, first.get("config_hash", "")):
        click.echo(path)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and translate failures into exit codes: 1 usage, 2 data, 3 numerical."""
    try:
        cli.main(args=argv, prog_name="asdkit", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except (click.ClickException, click.exceptions.Abort) as e:
        if isinstance(e, click.ClickException):
            e.show()
        return 1
    except ASDError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
