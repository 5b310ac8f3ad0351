"""Training loops and experiment protocols: single-fold training,
center-crop evaluation, k-fold cross-validation, the temperature sweep,
and the pooling ablation. Results serialize to JSON-lines and a flat CSV.

Determinism contract: a (spec, manifest, mode, config) tuple fully
determines fold assignment, weight initialization, shuffle order, dropout
masks, and therefore every reported accuracy. Fold f trains with seed
``config.seed + f`` so paired runs that differ only in the loss see
identical data order and initial weights. Wall-clock time is recorded
under a separate ``timing`` key that the canonical record excludes.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .architecture import Model, ModelSpec, build_model, count_parameters, spec_to_dict
from .data import (
    DatasetManifest,
    FoldSplit,
    center_crop,
    decode_grayscale,
    eight_crops,
    make_folds,
)
from .distillation import DistillationConfig, kd_loss
from .errors import ConfigurationError, ValidationError
from .layers import AdamState, adam_step, softmax_cross_entropy

CROPS_PER_IMAGE = 8
EVAL_BATCH = 256

TEMPERATURE_GRID = (2.0, 4.0, 8.0, 16.0, 20.0, 32.0, 64.0)

VARIANT_ORDER = ("v", "p1", "p2", "p12")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-4
    dropout: float = 0.5
    seed: int = 0
    distillation: Optional[DistillationConfig] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValidationError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
            "seed": self.seed,
            "distillation": self.distillation.to_dict() if self.distillation else None,
        }


@dataclass
class ExperimentResult:
    """One cross-validated run of one model configuration."""

    size_class: str
    variant: str
    mode: str
    temperature: Optional[float]
    lam: Optional[float]
    seed: int
    fold_accuracies: list[float]
    mean_accuracy: float
    confusion: list[list[int]]
    parameter_count: int
    train_config: dict
    model_spec: dict
    loss_histories: list[list[float]] = field(default_factory=list)
    best: bool = False
    wall_clock_sec: float = 0.0

    def to_record(self) -> dict:
        record = self.canonical_record()
        record["timing"] = {"wall_clock_sec": self.wall_clock_sec}
        return record

    def canonical_record(self) -> dict:
        """The deterministic portion of the record: everything but timing.
        Replaying the same configuration reproduces this byte for byte."""
        return {
            "size_class": self.size_class,
            "variant": self.variant,
            "mode": self.mode,
            "temperature": self.temperature,
            "lambda": self.lam,
            "seed": self.seed,
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "confusion": self.confusion,
            "parameter_count": self.parameter_count,
            "train_config": self.train_config,
            "model_spec": self.model_spec,
            "loss_histories": self.loss_histories,
            "best": self.best,
        }


def _ensure_decoded(cache: dict, manifest: DatasetManifest, ids) -> None:
    by_id = {s.id: s for s in manifest.samples}
    for sample_id in ids:
        if sample_id not in cache:
            cache[sample_id] = decode_grayscale(by_id[sample_id].image_path)


def _onehot(labels: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(labels), width), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _training_arrays(manifest: DatasetManifest, ids, cache, teacher, num_outputs: int):
    crops = []
    labels = []
    for sample_id in ids:
        sample = manifest.by_id(sample_id)
        crops.extend(eight_crops(cache[sample_id]))
        labels.extend([sample.label] * CROPS_PER_IMAGE)
    x = np.stack(crops)
    y = _onehot(np.asarray(labels), num_outputs)
    z = None
    if teacher is not None:
        z = np.repeat(teacher.matrix(ids), CROPS_PER_IMAGE, axis=0)
    return x, y, z


def _fit(model: Model, manifest: DatasetManifest, ids, cfg: TrainConfig, cache):
    """Train ``model`` in place on the eight crops of every id; returns the
    per-epoch mean loss history."""
    if not ids:
        raise ValidationError("training set is empty")
    dist = cfg.distillation
    if dist is not None and dist.teacher is None:
        raise ConfigurationError("distillation is configured but no teacher is bound")
    _ensure_decoded(cache, manifest, ids)
    x, y, z = _training_arrays(
        manifest, ids, cache, dist.teacher if dist else None, model.fc2.bias.shape[0]
    )
    rng = np.random.default_rng(cfg.seed)
    states = {
        name: AdamState.for_parameter(p, cfg.learning_rate)
        for name, p in model.parameters().items()
    }
    n = len(x)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            xb = x[sel]
            yb = y[sel]
            logits, fwd = model.forward(
                xb, training=True, dropout_rate=cfg.dropout, rng=rng
            )
            if dist is not None:
                loss, d_logits = kd_loss(logits, z[sel], yb, dist)
            else:
                loss, d_logits = softmax_cross_entropy(logits, yb)
            grads = model.backward(fwd, d_logits)
            for name, param in model.parameters().items():
                param[...] = adam_step(states[name], param, grads[name])
            total += loss * len(sel)
        history.append(total / n)
    return history


def train(
    model: Model,
    manifest: DatasetManifest,
    split: FoldSplit,
    fold: int,
    cfg: TrainConfig,
    image_cache: Optional[dict] = None,
):
    """Train on every fold except ``fold``; returns (model, loss_history)."""
    cache = image_cache if image_cache is not None else {}
    history = _fit(model, manifest, split.train_ids(fold), cfg, cache)
    return model, history


def train_full(
    model: Model,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    image_cache: Optional[dict] = None,
):
    """Train on the complete manifest (no held-out fold); used to fit
    teachers and exported models."""
    cache = image_cache if image_cache is not None else {}
    history = _fit(model, manifest, manifest.ids(), cfg, cache)
    return model, history


def evaluate(
    model: Model,
    manifest: DatasetManifest,
    split: FoldSplit,
    fold: int,
    image_cache: Optional[dict] = None,
):
    """Center-crop accuracy on the held-out fold.

    Predictions argmax over the declared classes only, so unused logit
    columns can never be predicted; ties resolve to the lowest index.
    Returns (accuracy, confusion) with confusion[true][predicted] counts.
    """
    test_ids = split.test_ids(fold)
    if not test_ids:
        raise ValidationError(f"fold {fold} holds no samples")
    cache = image_cache if image_cache is not None else {}
    _ensure_decoded(cache, manifest, test_ids)
    k = manifest.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    correct = 0
    for start in range(0, len(test_ids), EVAL_BATCH):
        chunk = test_ids[start : start + EVAL_BATCH]
        x = np.stack([center_crop(cache[i]) for i in chunk])
        logits = model.forward(x)
        preds = np.argmax(logits[:, :k], axis=1)
        for sample_id, pred in zip(chunk, preds):
            label = manifest.by_id(sample_id).label
            confusion[label, int(pred)] += 1
            correct += int(pred) == label
    return correct / len(test_ids), confusion


def predict_logits(model: Model, manifest: DatasetManifest, image_cache=None) -> np.ndarray:
    """Center-crop logits for every manifest sample, in manifest order."""
    cache = image_cache if image_cache is not None else {}
    ids = manifest.ids()
    _ensure_decoded(cache, manifest, ids)
    rows = []
    for start in range(0, len(ids), EVAL_BATCH):
        chunk = ids[start : start + EVAL_BATCH]
        x = np.stack([center_crop(cache[i]) for i in chunk])
        rows.append(np.atleast_2d(model.forward(x)))
    return np.concatenate(rows, axis=0)


def _check_fold_hygiene(split: FoldSplit, fold: int) -> None:
    overlap = set(split.train_ids(fold)) & set(split.test_ids(fold))
    if overlap:
        raise RuntimeError(
            f"fold {fold} leaks {len(overlap)} ids between train and test"
        )


def cross_validate(
    spec: ModelSpec,
    manifest: DatasetManifest,
    mode: str,
    cfg: TrainConfig,
    jobs: int = 1,
    image_cache: Optional[dict] = None,
    k: int = 10,
) -> ExperimentResult:
    """k-fold cross-validation of one configuration.

    Every fold builds a fresh model seeded with ``cfg.seed + fold`` and
    trains independently, so folds may run in parallel threads (``jobs``).
    """
    started = time.perf_counter()
    split = make_folds(manifest, mode, cfg.seed, k=k)
    cache = image_cache if image_cache is not None else {}
    _ensure_decoded(cache, manifest, manifest.ids())

    def run_fold(fold: int):
        _check_fold_hygiene(split, fold)
        fold_cfg = replace(cfg, seed=cfg.seed + fold)
        model = build_model(spec, fold_cfg.seed)
        _, history = train(model, manifest, split, fold, fold_cfg, cache)
        accuracy, confusion = evaluate(model, manifest, split, fold, cache)
        return accuracy, confusion, history

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_fold, range(k)))
    else:
        outcomes = [run_fold(f) for f in range(k)]

    accuracies = [float(acc) for acc, _, _ in outcomes]
    confusion = sum(conf for _, conf, _ in outcomes)
    histories = [[float(v) for v in hist] for _, _, hist in outcomes]
    dist = cfg.distillation
    return ExperimentResult(
        size_class=spec.size_class.value,
        variant=spec.variant.value,
        mode=mode,
        temperature=dist.temperature if dist else None,
        lam=dist.lam if dist else None,
        seed=cfg.seed,
        fold_accuracies=accuracies,
        mean_accuracy=sum(accuracies) / len(accuracies),
        confusion=[[int(v) for v in row] for row in confusion],
        parameter_count=count_parameters(spec),
        train_config=cfg.to_dict(),
        model_spec=spec_to_dict(spec),
        loss_histories=histories,
        wall_clock_sec=time.perf_counter() - started,
    )


def temperature_sweep(
    spec: ModelSpec,
    manifest: DatasetManifest,
    mode: str,
    cfg: TrainConfig,
    temperatures=TEMPERATURE_GRID,
    jobs: int = 1,
    image_cache: Optional[dict] = None,
    k: int = 10,
) -> list[ExperimentResult]:
    """Cross-validate once per temperature; the best mean accuracy gets its
    record's ``best`` flag set, ties resolving to the lowest temperature."""
    dist = cfg.distillation
    if dist is None or dist.teacher is None:
        raise ConfigurationError("temperature sweep needs teacher logits bound")
    if not temperatures:
        raise ValidationError("temperature grid is empty")
    cache = image_cache if image_cache is not None else {}
    results = []
    for t in temperatures:
        swept = replace(cfg, distillation=replace(dist, temperature=float(t)))
        results.append(
            cross_validate(spec, manifest, mode, swept, jobs=jobs, image_cache=cache, k=k)
        )
    flag_best(results)
    return results


def flag_best(results: list[ExperimentResult]) -> int:
    """Mark the record with the highest mean accuracy as best (ties resolve
    to the lowest temperature) and return its index."""
    if not results:
        raise ValidationError("no results to flag")
    best = min(
        range(len(results)),
        key=lambda i: (-results[i].mean_accuracy, results[i].temperature),
    )
    for r in results:
        r.best = False
    results[best].best = True
    return best


def pooling_ablation(
    size_class,
    manifest: DatasetManifest,
    mode: str,
    cfg: TrainConfig,
    jobs: int = 1,
    image_cache: Optional[dict] = None,
    k: int = 10,
) -> list[ExperimentResult]:
    """Cross-validate all four pooling variants of one size class, in the
    fixed order v, p1, p2, p12."""
    cache = image_cache if image_cache is not None else {}
    results = []
    for variant in VARIANT_ORDER:
        spec = ModelSpec(size_class, variant)
        results.append(
            cross_validate(spec, manifest, mode, cfg, jobs=jobs, image_cache=cache, k=k)
        )
    return results


def loss_trend_ok(history) -> bool:
    """True when the tail-decile mean loss sits below the head-decile mean:
    a cheap convergence sanity check."""
    if not history:
        return False
    span = max(1, len(history) // 10)
    head = sum(history[:span]) / span
    tail = sum(history[-span:]) / span
    return tail < head


def write_results_jsonl(results, path) -> None:
    """One result record per line. Records are canonical except for the
    trailing ``timing`` key, which replays are allowed to differ in."""
    with open(path, "w") as fh:
        for result in results:
            fh.write(json.dumps(result.to_record(), sort_keys=True) + "\n")


def read_results_jsonl(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_results_csv(results, path) -> None:
    """Flat per-fold export with header spec,variant,mode,T,fold,accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spec", "variant", "mode", "T", "fold", "accuracy"])
        for result in results:
            record = result.to_record() if isinstance(result, ExperimentResult) else result
            t = record["temperature"]
            for fold, accuracy in enumerate(record["fold_accuracies"]):
                writer.writerow(
                    [
                        record["size_class"],
                        record["variant"],
                        record["mode"],
                        "" if t is None else repr(float(t)),
                        fold,
                        repr(float(accuracy)),
                    ]
                )
