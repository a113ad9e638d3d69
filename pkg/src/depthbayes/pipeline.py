"""End-to-end experiment driver: generate, finetune, evaluate, report.

Every command is deterministic given the config and seeds; reruns reproduce
artifacts byte-for-byte. Artifact layout under the config root:

    dataset/                     train/test scene tensors + manifest
    model/base/                  base model parameters + manifest
    checkpoints/<variant>/seed<k>/   flattened subspace checkpoints
    reports/<variant>/<inference>/<seed>/   nll.csv, retention.csv
    reports/                     rank_sweep.csv, nll_summary.csv, *.svg

``<variant>`` is the method name plus ``-r<rank>`` for ranked methods.
Replicates may run as separate processes (``only_seed``) since they write to
disjoint directories. ``DEPTHBAYES_THREADS`` caps in-process evaluation
workers; results are identical regardless of the setting.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import load_split, load_tensor, make_split, save_split, save_tensor
from .errors import DomainError
from .evaluation import (
    mean_confidence_halfwidth,
    pixelwise_loss,
    posterior_predict,
    predictive_nll,
    rank_sweep,
    retention_curve,
)
from .model import build_model, load_model
from .peft import build_subspace, flatten
from .plots import svg_plot
from .posterior import (
    SampleSet,
    checkpoint_ensemble,
    deep_ensemble,
    fit_swag_diag,
    fit_swag_lowrank,
    sample,
)
from .train import TrainSchedule, finetune

__all__ = [
    "MissingArtifactError",
    "NumericalFailureError",
    "run_evaluate",
    "run_finetune",
    "run_generate",
    "run_report",
]


class MissingArtifactError(Exception):
    """A required on-disk artifact (dataset, model, checkpoints) is absent."""


class NumericalFailureError(Exception):
    """The posterior or its predictions produced non-finite values."""


@dataclass(frozen=True)
class CommandResult:
    detail: str
    artifacts: tuple[str, ...]


def _variant(config: ExperimentConfig) -> str:
    if config.rank is not None:
        return f"{config.method}-r{config.rank}"
    return config.method


def _dataset_dir(config) -> str:
    return os.path.join(config.root, "dataset")


def _model_dir(config) -> str:
    return os.path.join(config.root, "model", "base")


def _checkpoint_dir(config, seed: int) -> str:
    return os.path.join(config.root, "checkpoints", _variant(config), f"seed{seed}")


def _report_dir(config, seed_label: str) -> str:
    return os.path.join(config.root, "reports", _variant(config), config.inference, seed_label)


def _threads() -> int:
    raw = os.environ.get("DEPTHBAYES_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _fmt(x: float) -> str:
    return repr(float(x))


def run_generate(config: ExperimentConfig) -> CommandResult:
    """Write the synthetic dataset split; idempotent per seed."""
    split = make_split(
        config.data_seed,
        config.train_count,
        config.test_count,
        config.model.image_height,
        config.model.image_width,
    )
    target = _dataset_dir(config)
    os.makedirs(target, exist_ok=True)
    save_split(target, split)
    return CommandResult(
        detail=f"wrote {len(split.train)} train + {len(split.test)} test scenes",
        artifacts=(target,),
    )


def _load_dataset(config: ExperimentConfig):
    target = _dataset_dir(config)
    if not os.path.exists(os.path.join(target, "manifest.txt")):
        raise MissingArtifactError(f"dataset missing at {target}; run generate first")
    return load_split(target)


def _load_base_model(config: ExperimentConfig, init: bool):
    target = _model_dir(config)
    manifest = os.path.join(target, "manifest.txt")
    if not os.path.exists(manifest):
        if not init:
            raise MissingArtifactError(
                f"base model missing at {target}; rerun finetune with init enabled"
            )
        from .model import save_model

        save_model(target, build_model(config.model))
    model = load_model(target)
    if model.config != config.model:
        raise ConfigError(
            f"base model at {target} was built for {model.config}, config wants {config.model}"
        )
    return model


def _seed_targets(config: ExperimentConfig, only_seed):
    if only_seed is None:
        return list(config.seeds)
    if only_seed not in config.seeds:
        raise ConfigError(f"seed {only_seed} is not in configured seeds {config.seeds}")
    return [only_seed]


def run_finetune(config: ExperimentConfig, only_seed=None, init: bool = False) -> CommandResult:
    """Per replicate seed: attach the subspace, train, persist checkpoints."""
    split = _load_dataset(config)
    base = _load_base_model(config, init)
    dataset = [(scene.image, scene.disparity) for scene in split.train]
    written = []
    for seed in _seed_targets(config, only_seed):
        model = base.copy()
        desc = build_subspace(model, config.method, config.rank, seed=seed, cap_rank=True)
        sched = TrainSchedule(
            epochs=config.epochs,
            batch_size=config.batch_size,
            checkpoint_count=config.checkpoints,
            seed=seed,
        )
        checkpoints = finetune(model, desc, dataset, sched, lr=config.lr)
        target = _checkpoint_dir(config, seed)
        os.makedirs(target, exist_ok=True)
        lines = [
            f"method = {config.method}",
            f"rank = {'' if config.rank is None else config.rank}",
            f"dim = {desc.dim}",
            f"count = {len(checkpoints)}",
        ]
        for index, ckpt in enumerate(checkpoints):
            save_tensor(os.path.join(target, f"ckpt_{index:05}.tnsr"), ckpt.params)
            lines.append(f"{index} {ckpt.step} {_fmt(ckpt.loss)}")
        with open(os.path.join(target, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        written.append(target)
    return CommandResult(
        detail=f"trained {len(written)} replicate(s) of {_variant(config)}",
        artifacts=tuple(written),
    )


def _load_checkpoints(config: ExperimentConfig, seed: int) -> list[np.ndarray]:
    target = _checkpoint_dir(config, seed)
    manifest = os.path.join(target, "manifest.txt")
    if not os.path.exists(manifest):
        raise MissingArtifactError(f"checkpoints missing at {target}; run finetune first")
    with open(manifest, encoding="utf-8") as fh:
        entries = [line for line in (l.strip() for l in fh) if line and "=" not in line]
    return [
        load_tensor(os.path.join(target, f"ckpt_{int(entry.split()[0]):05}.tnsr"))
        for entry in entries
    ]


def _build_samples(config: ExperimentConfig, seed: int | None) -> SampleSet:
    if config.inference == "deep-ens":
        finals = [_load_checkpoints(config, s)[-1] for s in config.seeds]
        return deep_ensemble(finals)
    checkpoints = _load_checkpoints(config, seed)
    if config.inference == "ckpt-ens":
        return checkpoint_ensemble(checkpoints, min(config.samples, len(checkpoints)))
    if config.inference == "swag-d":
        return sample(fit_swag_diag(checkpoints), config.samples, seed=seed)
    if config.inference == "swag-lr":
        posterior = fit_swag_lowrank(checkpoints, jitter=config.jitter)
        return sample(posterior, config.samples, seed=seed)
    raise ConfigError(f"unsupported inference '{config.inference}'")


def _check_finite_samples(samples: SampleSet) -> None:
    for member in samples.members:
        if not np.all(np.isfinite(member)):
            raise NumericalFailureError(
                f"posterior produced non-finite parameter samples ({samples.provenance})"
            )


def _predict_over_split(model, desc, samples: SampleSet, scenes):
    """Per-image predictive summaries and NLLs; order follows ``scenes``."""

    def job(scene):
        worker = model.copy()
        summary = posterior_predict(worker, desc, samples, scene.image)
        nll = predictive_nll(summary, scene.disparity)
        return summary, nll, pixelwise_loss(summary, scene.disparity)

    threads = _threads()
    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(job, scenes))
        else:
            results = []
            for scene in scenes:
                summary = posterior_predict(model, desc, samples, scene.image)
                nll = predictive_nll(summary, scene.disparity)
                results.append((summary, nll, pixelwise_loss(summary, scene.disparity)))
    except DomainError as exc:
        raise NumericalFailureError(f"evaluation degenerated: {exc}") from exc
    for _, nll, _ in results:
        if not math.isfinite(nll):
            raise NumericalFailureError("non-finite predictive NLL")
    return results


def _write_rows(path: str, header: str, rows: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _evaluate_one(config: ExperimentConfig, base, scenes, seed: int | None, seed_label: str):
    model = base.copy()
    attach_seed = seed if seed is not None else config.seeds[0]
    desc = build_subspace(model, config.method, config.rank, seed=attach_seed, cap_rank=True)
    warm_start = flatten(model, desc)

    if config.inference == "deterministic":
        samples = SampleSet(members=(warm_start,), provenance="deterministic")
    else:
        samples = _build_samples(config, seed)
        _check_finite_samples(samples)

    rank_field = "" if config.rank is None else str(config.rank)
    seed_field = str(seed) if seed is not None else "-1"
    nll_rows: list[str] = []
    retention_rows: list[str] = []

    def emit(tag: str, sampleset: SampleSet):
        results = _predict_over_split(model, desc, sampleset, scenes)
        for image_id, (_, nll, _) in enumerate(results):
            nll_rows.append(
                f"{config.method},{tag},{rank_field},{seed_field},{image_id},{_fmt(nll)}"
            )
        curve = retention_curve(
            [summary.std_map for summary, _, _ in results],
            [losses for _, _, losses in results],
            config.quantiles,
        )
        for quantile, value in zip(curve.quantiles, curve.losses):
            retention_rows.append(
                f"{config.method},{tag},{rank_field},{seed_field},{_fmt(quantile)},{_fmt(value)}"
            )

    emit(config.inference, samples)
    if config.inference != "deterministic":
        baseline = SampleSet(members=(warm_start,), provenance="deterministic")
        emit("deterministic", baseline)

    target = _report_dir(config, seed_label)
    os.makedirs(target, exist_ok=True)
    _write_rows(os.path.join(target, "nll.csv"), "method,inference,rank,seed,image_id,nll", nll_rows)
    _write_rows(
        os.path.join(target, "retention.csv"),
        "method,inference,rank,seed,quantile,loss",
        retention_rows,
    )
    return target


def run_evaluate(config: ExperimentConfig, only_seed=None) -> CommandResult:
    """Build the configured posterior, sample, and score the test split."""
    split = _load_dataset(config)
    base = _load_base_model(config, init=False)
    written = []
    if config.inference == "deep-ens":
        if only_seed is not None:
            raise ConfigError("deep-ens evaluates all replicates together; drop the seed override")
        written.append(_evaluate_one(config, base, split.test, None, "ens"))
    else:
        for seed in _seed_targets(config, only_seed):
            written.append(_evaluate_one(config, base, split.test, seed, f"seed{seed}"))
    return CommandResult(
        detail=f"evaluated {_variant(config)} with {config.inference}",
        artifacts=tuple(written),
    )


def _scan_report_rows(config: ExperimentConfig, filename: str) -> list[dict]:
    base = os.path.join(config.root, "reports")
    rows: list[dict] = []
    if not os.path.isdir(base):
        return rows
    for variant in sorted(os.listdir(base)):
        vdir = os.path.join(base, variant)
        if not os.path.isdir(vdir):
            continue
        for inference in sorted(os.listdir(vdir)):
            idir = os.path.join(vdir, inference)
            if not os.path.isdir(idir):
                continue
            for label in sorted(os.listdir(idir)):
                path = os.path.join(idir, label, filename)
                if not os.path.exists(path):
                    continue
                with open(path, encoding="utf-8") as fh:
                    header = fh.readline().strip().split(",")
                    for line in fh:
                        if line.strip():
                            rows.append(dict(zip(header, line.strip().split(","))))
    return rows


def run_report(config: ExperimentConfig) -> CommandResult:
    """Aggregate evaluation CSVs across seeds into summary tables and plots."""
    nll_rows = _scan_report_rows(config, "nll.csv")
    retention_rows = _scan_report_rows(config, "retention.csv")
    if not nll_rows or not retention_rows:
        raise MissingArtifactError(
            f"no evaluation CSVs under {os.path.join(config.root, 'reports')}; run evaluate first"
        )

    # Mean NLL per (method, inference, rank, seed), then across seeds.
    per_seed: dict[tuple, list[float]] = {}
    for row in nll_rows:
        key = (row["method"], row["inference"], row["rank"], row["seed"])
        per_seed.setdefault(key, []).append(float(row["nll"]))
    grouped: dict[tuple, list[float]] = {}
    for (method, inference, rank, _), values in sorted(per_seed.items()):
        grouped.setdefault((method, inference, rank), []).append(float(np.mean(values)))

    reports_dir = os.path.join(config.root, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    summary_rows = []
    for (method, inference, rank), means in sorted(grouped.items()):
        summary_rows.append(
            f"{method},{inference},{rank},{len(means)},{_fmt(float(np.mean(means)))},"
            f"{_fmt(mean_confidence_halfwidth(means))}"
        )
    nll_summary = os.path.join(reports_dir, "nll_summary.csv")
    _write_rows(nll_summary, "method,inference,rank,seed_count,nll_mean,nll_ci95", summary_rows)

    sweep_input = [
        {
            "method": row["method"],
            "inference": row["inference"],
            "rank": int(row["rank"]),
            "quantile": float(row["quantile"]),
            "loss": float(row["loss"]),
        }
        for row in retention_rows
        if row["rank"] != "" and row["inference"] != "deterministic"
    ]
    sweep_path = os.path.join(reports_dir, "rank_sweep.csv")
    sweep_rows = [
        f"{r['method']},{r['inference']},{r['rank']},{_fmt(r['quantile'])},"
        f"{_fmt(r['loss_mean'])},{_fmt(r['loss_ci95'])}"
        for r in (rank_sweep(sweep_input) if sweep_input else [])
    ]
    _write_rows(sweep_path, "method,inference,rank,quantile,loss_mean,loss_ci95", sweep_rows)

    # NLL-by-method dot plot: one series per inference, methods on x.
    labels = sorted({(m, r) for m, _, r in grouped})
    label_index = {pair: i for i, pair in enumerate(labels)}
    series = []
    for inference in sorted({i for _, i, _ in grouped}):
        xs, ys, err = [], [], []
        for (method, inf, rank), means in sorted(grouped.items()):
            if inf != inference:
                continue
            xs.append(float(label_index[(method, rank)]))
            ys.append(float(np.mean(means)))
            err.append(mean_confidence_halfwidth(means))
        if xs:
            series.append({"label": inference, "xs": xs, "ys": ys, "err": err})
    nll_plot = os.path.join(reports_dir, "nll_by_method.svg")
    svg_plot(
        nll_plot,
        "Mean test NLL by method (x = method index; see data comments)",
        "method index",
        "NLL",
        series,
        connect=False,
    )

    # Retention curves: mean loss per quantile for each (method, inference).
    retention_groups: dict[tuple, dict[float, list[float]]] = {}
    for row in retention_rows:
        key = (row["method"], row["inference"], row["rank"])
        quantile = float(row["quantile"])
        retention_groups.setdefault(key, {}).setdefault(quantile, []).append(float(row["loss"]))
    retention_series = []
    for (method, inference, rank), by_quantile in sorted(retention_groups.items()):
        name = f"{method}-r{rank}" if rank else method
        quantiles = sorted(by_quantile)
        retention_series.append(
            {
                "label": f"{name}/{inference}",
                "xs": quantiles,
                "ys": [float(np.mean(by_quantile[q])) for q in quantiles],
                "err": [mean_confidence_halfwidth(by_quantile[q]) for q in quantiles],
            }
        )
    retention_plot = os.path.join(reports_dir, "retention_curves.svg")
    svg_plot(
        retention_plot,
        "Test loss on the most certain pixels",
        "retained quantile",
        "loss",
        retention_series,
    )

    return CommandResult(
        detail=f"aggregated {len(nll_rows)} NLL rows across {len(grouped)} run groups",
        artifacts=(nll_summary, sweep_path, nll_plot, retention_plot),
    )
