"""Training loop, evaluation metrics, invariance reporting, and ablations.

Training is single-threaded and fully deterministic given the seed: one
generator drives epoch shuffling, rotation augmentation, and dropout in a
fixed order, so identical configs reproduce identical loss curves and
metrics files byte for byte.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import view_angles
from .language import Vocabulary, category_token_matrix
from .model import (ModelConfig, ModelParams, batch_losses, forward_batch,
                    init_model, make_batch, model_parameters, predict)
from .optim import Adam
from .scenes import Sample, load_dataset, rotate_scene
from .nn import named_tensors

INVARIANCE_TOLERANCE = 1e-6


class ConfigError(ValueError):
    """Checkpoint and dataset disagree about vocabulary or categories."""


@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str | None = None
    epochs: int = 20
    batch_size: int = 24
    base_lr: float = 5e-4
    transformer_lr_multiplier: float = 0.1
    lr_decay_factor: float = 0.65
    lr_decay_every: int = 2
    lr_decay_start: int = 8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch under the step-decay schedule."""
    if epoch <= config.lr_decay_start:
        decays = 0
    else:
        decays = (epoch - config.lr_decay_start) // config.lr_decay_every
    return config.base_lr * config.lr_decay_factor**decays


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    overall: float
    easy: float
    hard: float
    view_dep: float
    view_indep: float
    counts: dict
    losses: dict = field(default_factory=dict)

    def as_row(self):
        return {
            "overall": self.overall, "easy": self.easy, "hard": self.hard,
            "view_dep": self.view_dep, "view_indep": self.view_indep,
        }


def _rate(hits, total):
    return hits / total if total else float("nan")


def compute_metrics(records) -> Metrics:
    """Accuracy per split from (correct, difficulty, view_tag) records."""
    total = len(records)
    hits = sum(1 for r in records if r[0])
    groups = {"easy": [0, 0], "hard": [0, 0], "dep": [0, 0], "indep": [0, 0]}
    for correct, difficulty, view in records:
        groups[difficulty][0] += int(correct)
        groups[difficulty][1] += 1
        groups[view][0] += int(correct)
        groups[view][1] += 1
    return Metrics(
        overall=_rate(hits, total),
        easy=_rate(*groups["easy"]),
        hard=_rate(*groups["hard"]),
        view_dep=_rate(*groups["dep"]),
        view_indep=_rate(*groups["indep"]),
        counts={
            "total": total, "easy": groups["easy"][1], "hard": groups["hard"][1],
            "view_dep": groups["dep"][1], "view_indep": groups["indep"][1],
        },
    )


def evaluate_model(params: ModelParams, config: ModelConfig, samples,
                   view_set=None, batch_size: int = 64) -> Metrics:
    """Argmax-accuracy evaluation; ``view_set`` overrides the view count."""
    records = []
    loss_sums = {"ref": 0.0, "text": 0.0, "obj": 0.0, "total": 0.0}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = make_batch(chunk, params)
        output = forward_batch(batch, params, config, view_set=view_set)
        losses = batch_losses(output, batch, config.alpha)
        for key in loss_sums:
            loss_sums[key] += float(losses[key].data) * len(chunk)
        predictions = predict(output, batch)
        for sample, guess in zip(chunk, predictions):
            records.append((int(guess) == sample.utterance.target_index,
                            sample.difficulty, sample.view_tag))
    metrics = compute_metrics(records)
    metrics.losses = {k: v / len(samples) for k, v in loss_sums.items()}
    return metrics


def evaluate(checkpoint_path, data_dir, split: str = "eval", view_set=None) -> Metrics:
    """Checkpoint-level evaluation against a stored dataset split."""
    params, model_config, _ = load_model(checkpoint_path)
    splits, metadata = load_dataset(data_dir)
    check_vocabulary(params, metadata)
    if split not in splits:
        raise ConfigError(f"dataset has no split {split!r}")
    return evaluate_model(params, model_config, splits[split].samples, view_set=view_set)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_tensors(params: ModelParams, optimizer: Adam | None = None) -> dict:
    tensors = {name: t.data for name, t in named_tensors(params)}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    return tensors


def save_model(path, params: ModelParams, model_config: ModelConfig,
               meta=None, optimizer: Adam | None = None):
    payload = dict(meta or {})
    payload.update({
        "model_config": model_config.to_dict(),
        "vocab": params.vocab.to_json(),
        "categories": list(params.categories),
        "optimizer_step": optimizer.state.step if optimizer else 0,
    })
    save_checkpoint(path, checkpoint_tensors(params, optimizer), payload)


def load_model(path):
    """Rebuild (params, model_config, meta) from a checkpoint file."""
    tensors, meta = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    params = init_model(np.random.default_rng(0), config, meta["categories"])
    params.vocab = Vocabulary.from_json(meta["vocab"])
    for name, tensor in named_tensors(params):
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tensor.shape:
            raise ValueError(f"checkpoint tensor {name!r} has shape "
                             f"{tensors[name].shape}, expected {tensor.shape}")
        tensor.data = np.ascontiguousarray(tensors[name])
    params.category_tokens = category_token_matrix(params.vocab, meta["categories"])
    return params, config, meta


def check_vocabulary(params: ModelParams, metadata) -> None:
    if list(params.categories) != list(metadata["categories"]):
        raise ConfigError("checkpoint categories do not match the dataset vocabulary")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    history: list
    best_metrics: Metrics
    best_epoch: int
    checkpoint_path: str | None


CSV_COLUMNS = (
    "epoch", "lr", "train_total", "train_ref", "train_text", "train_obj",
    "eval_overall", "eval_easy", "eval_hard", "eval_view_dep", "eval_view_indep",
)


def _history_csv(history) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(CSV_COLUMNS)
    for row in history:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in CSV_COLUMNS])
    return out.getvalue()


def train(config: TrainConfig, splits=None, metadata=None, quiet: bool = False) -> TrainResult:
    """Train from scratch on the configured dataset; keep the best-eval model.

    Aborts with a diagnostic on non-finite losses. When ``out_dir`` is set,
    writes ``metrics.csv``, ``vocab.json``, and ``best.ckpt``.
    """
    if splits is None:
        splits, metadata = load_dataset(config.data_dir)
    train_samples = splits["train"].samples
    eval_samples = splits["eval"].samples
    categories = metadata["categories"]

    rng = np.random.default_rng(config.seed)
    params = init_model(rng, config.model, categories)
    transformer_prefixes = ("language.", "fusion.", "pre_agg.")
    optimizer = Adam(
        model_parameters(params),
        lr=config.base_lr,
        lr_scales={p: config.transformer_lr_multiplier for p in transformer_prefixes},
    )

    history = []
    best = None
    for epoch in range(1, config.epochs + 1):
        lr = lr_for_epoch(config, epoch)
        order = rng.permutation(len(train_samples))
        sums = {"total": 0.0, "ref": 0.0, "text": 0.0, "obj": 0.0}
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_samples[i] for i in order[start : start + config.batch_size]]
            aug = None
            if config.model.rotation_augmentation:
                aug = rng.choice(view_angles(4), size=len(chunk))
            batch = make_batch(chunk, params, aug_angles=aug)
            optimizer.zero_grad()
            with Tape() as tape:
                output = forward_batch(batch, params, config.model, rng=rng, training=True)
                losses = batch_losses(output, batch, config.model.alpha)
            total = float(losses["total"].data)
            if not math.isfinite(total):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, step {n_batches}: "
                    + ", ".join(f"{k}={float(v.data):.4g}" for k, v in losses.items())
                )
            tape.backward(losses["total"])
            optimizer.step(lr=lr)
            for key in sums:
                sums[key] += float(losses[key].data)
            n_batches += 1

        metrics = evaluate_model(params, config.model, eval_samples,
                                 batch_size=max(config.batch_size, 64))
        row = {
            "epoch": epoch, "lr": lr,
            "train_total": sums["total"] / n_batches,
            "train_ref": sums["ref"] / n_batches,
            "train_text": sums["text"] / n_batches,
            "train_obj": sums["obj"] / n_batches,
            "eval_overall": metrics.overall, "eval_easy": metrics.easy,
            "eval_hard": metrics.hard, "eval_view_dep": metrics.view_dep,
            "eval_view_indep": metrics.view_indep,
        }
        history.append(row)
        if not quiet:
            print(f"epoch {epoch:3d}  lr {lr:.2e}  loss {row['train_total']:.4f}  "
                  f"eval {metrics.overall:.3f}", flush=True)
        if best is None or metrics.overall > best[1].overall:
            snapshot = {name: t.data.copy() for name, t in named_tensors(params)}
            best = (epoch, metrics, snapshot)

    best_epoch, best_metrics, snapshot = best
    for name, tensor in named_tensors(params):
        tensor.data = snapshot[name]

    checkpoint_path = None
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        checkpoint_path = os.path.join(config.out_dir, "best.ckpt")
        save_model(checkpoint_path, params, config.model,
                   meta={"epoch": best_epoch, "train_config": config.to_dict(),
                         "metrics": best_metrics.as_row()},
                   optimizer=optimizer)
        with open(os.path.join(config.out_dir, "metrics.csv"), "w") as fh:
            fh.write(_history_csv(history))
        with open(os.path.join(config.out_dir, "vocab.json"), "w") as fh:
            fh.write(params.vocab.to_json())
    return TrainResult(params=params, config=config, history=history,
                       best_metrics=best_metrics, best_epoch=best_epoch,
                       checkpoint_path=checkpoint_path)


# ---------------------------------------------------------------------------
# invariance report


def invariance_check(params: ModelParams, config: ModelConfig, samples,
                     rotations=None, off_grid_angles=(), limit=None,
                     batch_size: int = 64) -> dict:
    """Score deviation under view-grid rotations of the input scenes.

    PASS means every deviation stays under 1e-6. Rotations by angles off the
    view grid are reported separately and carry no pass requirement.
    """
    n_views = config.view_count
    if n_views < 2:
        return {"skipped": True,
                "reason": f"view count {n_views} has no nontrivial grid rotations"}
    if rotations is None:
        rotations = list(range(1, n_views))
    if limit is not None:
        samples = samples[:limit]

    def scores_for(sample_list, angle):
        rotated = [Sample(scene=rotate_scene(s.scene, angle), utterance=s.utterance)
                   for s in sample_list] if angle else sample_list
        rows = []
        for start in range(0, len(rotated), batch_size):
            chunk = rotated[start : start + batch_size]
            batch = make_batch(chunk, params)
            out = forward_batch(batch, params, config)
            for i, sample in enumerate(chunk):
                rows.append(out.scores.data[i, : len(sample.scene.objects)])
        return rows

    base = scores_for(samples, 0.0)
    per_rotation = {}
    deviations = []
    for k in rotations:
        angle = 2.0 * math.pi * k / n_views
        rotated = scores_for(samples, angle)
        devs = [np.abs(r - b).max() for r, b in zip(rotated, base)]
        per_rotation[k] = {"max": float(np.max(devs)), "mean": float(np.mean(devs))}
        deviations.extend(devs)

    report = {
        "skipped": False,
        "n_samples": len(samples),
        "rotations": rotations,
        "per_rotation": per_rotation,
        "max_deviation": float(np.max(deviations)),
        "mean_deviation": float(np.mean(deviations)),
        "tolerance": INVARIANCE_TOLERANCE,
        "passed": bool(np.max(deviations) < INVARIANCE_TOLERANCE),
    }
    if off_grid_angles:
        extra = {}
        for angle in off_grid_angles:
            rotated = scores_for(samples, float(angle))
            devs = [np.abs(r - b).max() for r, b in zip(rotated, base)]
            extra[repr(float(angle))] = {"max": float(np.max(devs)),
                                         "mean": float(np.mean(devs))}
        report["off_grid"] = extra
    return report


# ---------------------------------------------------------------------------
# ablation grid


ABLATION_AXES = ("view_count", "aggregation_fn", "aggregation_stage",
                 "rotation_augmentation", "alpha")
ABLATION_METRICS = ("overall", "easy", "hard", "view_dep", "view_indep")


def ablate(base_config: TrainConfig, grid: dict, splits=None, metadata=None,
           quiet: bool = True) -> list:
    """Train one model per grid cell (shared seed); returns result rows."""
    for key in grid:
        if key not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {key!r}; valid: {ABLATION_AXES}")
    if splits is None:
        splits, metadata = load_dataset(base_config.data_dir)
    axes = [(key, list(values)) for key, values in grid.items()]
    rows = []
    for combo in itertools.product(*[values for _, values in axes]):
        cell = dict(zip([key for key, _ in axes], combo))
        model_dict = base_config.model.to_dict()
        model_dict.update(cell)
        config = TrainConfig.from_dict({**base_config.to_dict(), "model": model_dict,
                                        "out_dir": None})
        result = train(config, splits=splits, metadata=metadata, quiet=quiet)
        row = {key: cell.get(key, getattr(base_config.model, key)) for key in ABLATION_AXES}
        row.update({name: getattr(result.best_metrics, name) for name in ABLATION_METRICS})
        rows.append(row)
    return rows


def ablation_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    header = list(ABLATION_AXES) + list(ABLATION_METRICS)
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in header])
    return out.getvalue()
