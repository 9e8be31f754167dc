"""Command-line pipeline: gen-data, train, hmc, predict, evaluate, compare.

Each command reads one JSON experiment config, writes its artifacts into a
self-describing output directory (data and reports as delimited text or
JSON, figures as PNG), and finishes with a manifest recording the config
snapshot, timings, and artifact hashes.  Commands are idempotent given the
same config and seed; metrics JSON is byte-stable across reruns.
"""

from __future__ import annotations

import json
import os
import sys
import time

import click
import numpy as np

from . import artifacts, figures
from .config import ExperimentConfig
from .errors import (
    ArtifactError,
    ConfigError,
    DomainError,
    ShapeError,
    StochensError,
)
from .hmc import load_posterior, run_hmc, save_posterior
from .masks import StochasticKind
from .metrics import PredictiveDistribution, evaluate as evaluate_metrics
from .net import Dataset
from .rng import derive_rng
from .toydata import eval_grid, load_dataset, load_grid, save_dataset, save_grid
from .training import EnsembleKind, load_ensemble, predict, save_ensemble, train_ensemble
from .vi import EnsembleFamilySpec, kl_deep_ensemble, kl_stochastic_ensemble

pass_config_path = click.option(
    "--config", "config_path", required=True, type=click.Path(), help="Experiment JSON."
)
output_option = click.option(
    "--output", "output", default=None, type=click.Path(), help="Output directory."
)
jobs_option = click.option("--jobs", default=1, show_default=True, help="Worker processes.")
figures_option = click.option(
    "--figures/--no-figures", "render_figures", default=True, show_default=True
)


@click.group()
def cli():
    """Stochastic-ensemble posterior approximation pipeline."""


def _outdir(config: ExperimentConfig, override, stage: str) -> str:
    path = override if override is not None else os.path.join(config.output_dir, stage)
    os.makedirs(path, exist_ok=True)
    return path


def _load_training_data(config: ExperimentConfig) -> Dataset:
    if isinstance(config.dataset, str):
        artifacts.verify_artifact_dir(os.path.dirname(config.dataset) or ".")
        return load_dataset(config.dataset)
    from .toydata import generate_toy

    return generate_toy(config.dataset)


@cli.command("gen-data")
@pass_config_path
@output_option
def cmd_gen_data(config_path, output):
    """Generate the toy dataset and both evaluation grids."""
    config = ExperimentConfig.from_file(config_path)
    if isinstance(config.dataset, str):
        raise ConfigError("gen-data needs an inline dataset spec, not a file path")
    outdir = _outdir(config, output, "data")
    start = time.perf_counter()
    data = _load_training_data(config)
    save_dataset(os.path.join(outdir, "train.csv"), data)
    save_grid(os.path.join(outdir, "grid_in.csv"), eval_grid("in", config.eval.resolution_in))
    save_grid(os.path.join(outdir, "grid_out.csv"), eval_grid("out", config.eval.resolution_out))
    artifacts.write_manifest(
        outdir, config.to_dict(), {"total_s": time.perf_counter() - start}
    )
    click.echo(f"wrote dataset + grids to {outdir}")


@cli.command("train")
@pass_config_path
@output_option
@jobs_option
def cmd_train(config_path, output, jobs):
    """Train the configured ensemble and store its members."""
    config = ExperimentConfig.from_file(config_path)
    if config.method == "hmc":
        raise ConfigError("method 'hmc' is sampled with the hmc command, not trained")
    outdir = _outdir(config, output, "model")
    start = time.perf_counter()
    data = _load_training_data(config)
    model = train_ensemble(
        data,
        EnsembleKind(config.method),
        config.k,
        config.train,
        config.prior,
        seed=config.seed,
        arch=config.arch,
        stochastic=config.resolved_stochastic() if config.method != "hmc" else None,
        jobs=jobs,
    )
    save_ensemble(outdir, model)
    artifacts.write_manifest(
        outdir, config.to_dict(), {"total_s": time.perf_counter() - start}
    )
    click.echo(f"trained {config.method} ensemble (K={config.k}) into {outdir}")


@cli.command("hmc")
@pass_config_path
@output_option
@jobs_option
def cmd_hmc(config_path, output, jobs):
    """Sample the ground-truth posterior with stacked NUTS chains."""
    config = ExperimentConfig.from_file(config_path)
    outdir = _outdir(config, output, "posterior")
    start = time.perf_counter()
    data = _load_training_data(config)
    posterior = run_hmc(data, config.prior, config.hmc_with_seed(), arch=config.arch, jobs=jobs)
    save_posterior(outdir, posterior)
    artifacts.write_manifest(
        outdir, config.to_dict(), {"total_s": time.perf_counter() - start}
    )
    chains = posterior.provenance["chains"]
    div = sum(c["divergences"] for c in chains)
    click.echo(
        f"stacked {posterior.n} samples into {outdir} "
        f"(divergences={div}, max_rhat={posterior.provenance.get('max_rhat', 'n/a')})"
    )


def _load_model(path):
    artifacts.verify_artifact_dir(path)
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise ArtifactError(f"missing artifact: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if "kind" in meta:
        return load_ensemble(path)
    return load_posterior(path)


def _load_points(config: ExperimentConfig, grid: str):
    if grid in ("in", "out"):
        resolution = config.eval.resolution_in if grid == "in" else config.eval.resolution_out
        return eval_grid(grid, resolution).points, grid
    artifacts.verify_artifact_dir(os.path.dirname(grid) or ".")
    try:
        return load_grid(grid), os.path.basename(grid)
    except ShapeError:
        return load_dataset(grid).points, os.path.basename(grid)


@cli.command("predict")
@pass_config_path
@output_option
@figures_option
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--grid", "grid", default="in", show_default=True,
              help="'in', 'out', or a CSV of points.")
def cmd_predict(config_path, output, render_figures, model_path, grid):
    """Predict on a grid; export probabilities, entropy, and mutual information."""
    config = ExperimentConfig.from_file(config_path)
    outdir = _outdir(config, output, f"predictions_{grid if grid in ('in', 'out') else 'custom'}")
    start = time.perf_counter()
    model = _load_model(model_path)
    points, grid_label = _load_points(config, grid)
    kind = getattr(model, "kind", None)
    rng = derive_rng(config.seed, "predict", grid_label, kind.value if kind else "posterior")
    pd = predict(
        model,
        points,
        inferences_per_member=config.eval.inferences_per_member,
        rng=rng,
        keep_stack=False,
    )
    from .metrics import mutual_information, predictive_entropy

    entropy = predictive_entropy(pd)
    mi = mutual_information(pd)
    artifacts.write_predictions_csv(
        os.path.join(outdir, "predictions.csv"), points, pd.probs, entropy, mi
    )
    if render_figures:
        squared = round(points.shape[0] ** 0.5) ** 2 == points.shape[0]
        if squared:
            figures.save_uncertainty_maps(
                os.path.join(outdir, "uncertainty.png"),
                points,
                entropy,
                mi,
                title=f"{kind.value if kind else 'posterior'} on {grid_label}",
            )
    artifacts.write_manifest(
        outdir, config.to_dict(), {"total_s": time.perf_counter() - start}
    )
    click.echo(f"wrote predictions for {points.shape[0]} points to {outdir}")


def _prediction_distribution(path) -> PredictiveDistribution:
    artifacts.verify_artifact_dir(os.path.dirname(path) or ".")
    raw = artifacts.read_predictions_csv(path)
    mean_member_entropy = raw["entropy"] - raw["mi"]
    return PredictiveDistribution(
        probs=raw["probs"], points=raw["points"], mean_member_entropy=mean_member_entropy
    )


@cli.command("evaluate")
@pass_config_path
@output_option
@figures_option
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True),
              help="Predictions CSV to score.")
@click.option("--ref", "ref_path", default=None, type=click.Path(exists=True),
              help="Reference predictions CSV (the sampler baseline).")
@click.option("--labels", "labels_path", default=None, type=click.Path(exists=True),
              help="Dataset CSV supplying labels for the predicted points.")
@click.option("--pred-out", "pred_out_path", default=None, type=click.Path(exists=True),
              help="Out-of-domain predictions CSV of the same method (for ODD).")
@click.option("--model", "model_path", default=None, type=click.Path(exists=True),
              help="Ensemble store; adds the KL term breakdown to the report.")
def cmd_evaluate(config_path, output, render_figures, pred_path, ref_path, labels_path,
                 pred_out_path, model_path):
    """Score predictions against labels and/or a reference predictive."""
    config = ExperimentConfig.from_file(config_path)
    outdir = _outdir(config, output, "metrics")
    start = time.perf_counter()
    pd = _prediction_distribution(pred_path)
    reference = _prediction_distribution(ref_path) if ref_path else None
    labels = None
    if labels_path:
        labeled = load_dataset(labels_path)
        if labeled.points.shape != pd.points.shape or not np.allclose(
            labeled.points, pd.points, atol=1e-12
        ):
            raise ShapeError(f"{labels_path}: labeled points do not match the predictions")
        labels = labeled.labels
    entropy_out = None
    if pred_out_path:
        entropy_out = artifacts.read_predictions_csv(pred_out_path)["entropy"]

    report = evaluate_metrics(pd, labels=labels, reference=reference, entropy_out=entropy_out)
    artifacts.write_metrics_json(os.path.join(outdir, "metrics.json"), report)
    if labels is not None:
        artifacts.write_calibration_csv(
            os.path.join(outdir, "calibration.csv"), report.calibration_curve
        )
        if render_figures:
            figures.save_calibration_figure(
                os.path.join(outdir, "calibration.png"), report.calibration_curve
            )
    if model_path:
        model = _load_model(model_path)
        if not hasattr(model, "members"):
            raise ConfigError("KL breakdown applies to ensemble stores, not posterior stores")
        breakdown = _kl_breakdown(config, model)
        artifacts.write_kl_json(os.path.join(outdir, "kl.json"), breakdown)
    artifacts.write_manifest(
        outdir, config.to_dict(), {"total_s": time.perf_counter() - start}
    )
    click.echo(f"wrote metrics to {outdir}")


def _kl_breakdown(config: ExperimentConfig, model):
    paired = model.stochastic.kind is StochasticKind.NP_EXCHANGE
    family = EnsembleFamilySpec(
        members=tuple(r[0] if paired else r for r in model.members),
        members_b=tuple(r[1] for r in model.members) if paired else None,
        sigma2=config.eval.sigma2,
        stochastic=model.stochastic,
        prior=model.prior,
    )
    if model.stochastic.kind is StochasticKind.NONE:
        return kl_deep_ensemble(family)
    rng = derive_rng(config.seed, "kl-overlap")
    return kl_stochastic_ensemble(family, rng=rng, rf_samples=20_000)


@cli.command("compare")
@pass_config_path
@output_option
@figures_option
@click.option("--report", "report_paths", multiple=True, required=True,
              type=click.Path(exists=True), help="metrics.json files (repeatable).")
@click.option("--name", "names", multiple=True,
              help="Row labels, one per report (defaults to parent directory names).")
def cmd_compare(config_path, output, render_figures, report_paths, names):
    """Consolidate metric reports into one table (CSV + aligned text)."""
    config = ExperimentConfig.from_file(config_path)
    outdir = _outdir(config, output, "compare")
    start = time.perf_counter()
    if names and len(names) != len(report_paths):
        raise ConfigError(f"got {len(names)} names for {len(report_paths)} reports")
    rows = []
    for i, path in enumerate(report_paths):
        artifacts.verify_artifact_dir(os.path.dirname(path) or ".")
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"corrupt metrics report: {path}") from exc
        label = names[i] if names else os.path.basename(os.path.dirname(path) or path)
        rows.append((label, payload))
    artifacts.write_compare_tables(
        os.path.join(outdir, "table.csv"), os.path.join(outdir, "table.txt"), rows
    )
    if render_figures:
        figures.save_compare_figure(os.path.join(outdir, "compare.png"), rows)
    artifacts.write_manifest(
        outdir, config.to_dict(), {"total_s": time.perf_counter() - start}
    )
    with open(os.path.join(outdir, "table.txt")) as fh:
        click.echo(fh.read().rstrip())


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except (ConfigError, ArtifactError, ShapeError, DomainError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except StochensError as exc:
        click.echo(f"compute failure: {exc}", err=True)
        sys.exit(2)
    except Exception as exc:  # numerical crashes map to the compute exit code
        click.echo(f"compute failure: {type(exc).__name__}: {exc}", err=True)
        sys.exit(2)
    return 0


if __name__ == "__main__":
    main()
