"""Dice scoring, cross-domain evaluation, and the ablation results table."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Sample, normalize_zscore
from .segmenter import Segmenter, predict_mask


def dice_score(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class Dice overlap of two integer masks.

    A class absent from both masks scores 1.0, so empty structures do not
    drag the average down. Works on masks of any rank (slices or volumes).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    scores = np.empty(num_classes, dtype=np.float64)
    for k in range(num_classes):
        p = pred == k
        t = target == k
        denom = int(p.sum()) + int(t.sum())
        scores[k] = 1.0 if denom == 0 else 2.0 * int(np.logical_and(p, t).sum()) / denom
    return scores


def mean_foreground_dice(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    """Dice averaged over classes 1..K-1; class 0 is background by convention."""
    if num_classes < 2:
        raise ValueError("need at least one foreground class")
    return float(dice_score(pred, target, num_classes)[1:].mean())


def predict_samples(segmenter: Segmenter, samples: list[Sample],
                    batch_size: int = 16) -> list[np.ndarray]:
    """Z-score each sample image and run batched inference; returns int masks."""
    was_training = segmenter.training
    segmenter.eval()
    out: list[np.ndarray] = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            arr = np.stack([normalize_zscore(s.image) for s in chunk]).astype(np.float32)
            pred = segmenter(torch.from_numpy(arr).unsqueeze(1))
            out.extend(list(predict_mask(pred)))
    if was_training:
        segmenter.train()
    return out


def mean_sample_dice(segmenter: Segmenter, samples: list[Sample],
                     batch_size: int = 16) -> float:
    """Mean foreground Dice, one score per sample. Used for validation."""
    if not samples:
        raise ValueError("no samples to evaluate")
    preds = predict_samples(segmenter, samples, batch_size=batch_size)
    k = segmenter.num_classes
    return float(np.mean([mean_foreground_dice(p, s.mask, k)
                          for p, s in zip(preds, samples)]))


def _group_volumes(samples: list[Sample]) -> list[list[int]]:
    # standalone samples (no volume id) count as one-slice volumes
    groups: dict[object, list[int]] = {}
    for i, s in enumerate(samples):
        key = s.volume_id if s.volume_id is not None else f"__sample_{i}"
        groups.setdefault(key, []).append(i)
    return list(groups.values())


def per_class_volume_dice(preds: list[np.ndarray], samples: list[Sample],
                          num_classes: int) -> dict[int, float]:
    """Foreground-class Dice, pooled per volume then averaged over volumes."""
    if num_classes < 2:
        raise ValueError("need at least one foreground class")
    per_class = {k: [] for k in range(1, num_classes)}
    for idx in _group_volumes(samples):
        p = np.stack([preds[i] for i in idx])
        t = np.stack([samples[i].mask for i in idx])
        scores = dice_score(p, t, num_classes)
        for k in range(1, num_classes):
            per_class[k].append(scores[k])
    return {k: float(np.mean(v)) for k, v in per_class.items()}


@dataclass
class ResultsRow:
    """One method's scores: `cells[target][label][i]` is seed `seeds[i]`.

    `target_avg` and `overall_avg` are stored, not recomputed on the fly, so
    `ResultsTable.validate` can check that emitted averages really equal the
    mean of their constituent cells.
    """

    name: str
    seeds: tuple[int, ...]
    cells: dict[str, dict[str, tuple[float, ...]]]
    target_avg: dict[str, tuple[float, ...]]
    overall_avg: tuple[float, ...]

    @classmethod
    def build(cls, name: str, seeds: tuple[int, ...],
              cells: dict[str, dict[str, tuple[float, ...]]]) -> "ResultsRow":
        target_avg = {}
        for tag, by_label in cells.items():
            grid = np.asarray(list(by_label.values()), dtype=np.float64)
            target_avg[tag] = tuple(float(v) for v in grid.mean(axis=0))
        overall = np.asarray(list(target_avg.values()), dtype=np.float64).mean(axis=0)
        return cls(name=name, seeds=seeds, cells=cells, target_avg=target_avg,
                   overall_avg=tuple(float(v) for v in overall))


def _mean_std(values: tuple[float, ...]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class ResultsTable:
    """Method rows against per-class, per-target-domain Dice columns."""

    targets: tuple[str, ...]
    class_labels: tuple[str, ...]
    rows: list[ResultsRow]
    config_hash: str | None = None

    def row(self, name: str) -> ResultsRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(f"no results row named {name!r}")

    def validate(self) -> None:
        if not self.rows:
            raise ValueError("results table is empty")
        for r in self.rows:
            if set(r.cells) != set(self.targets):
                raise ValueError(f"row {r.name!r} does not cover targets {self.targets}")
            n = len(r.seeds)
            for tag in self.targets:
                by_label = r.cells[tag]
                if set(by_label) != set(self.class_labels):
                    raise ValueError(f"row {r.name!r} target {tag!r} does not cover "
                                     f"classes {self.class_labels}")
                for label, vals in by_label.items():
                    if len(vals) != n:
                        raise ValueError(f"cell ({r.name}, {tag}, {label}) has "
                                         f"{len(vals)} values for {n} seeds")
                    if any(v < 0.0 or v > 1.0 for v in vals):
                        raise ValueError(f"dice out of [0, 1] in cell "
                                         f"({r.name}, {tag}, {label})")
                grid = np.asarray(list(by_label.values()), dtype=np.float64)
                want = grid.mean(axis=0)
                got = np.asarray(r.target_avg[tag], dtype=np.float64)
                if np.abs(want - got).max() > 1e-6:
                    raise ValueError(f"stored average for ({r.name}, {tag}) does not "
                                     "equal the mean of its cells")
            grid = np.asarray([r.target_avg[t] for t in self.targets], dtype=np.float64)
            got = np.asarray(r.overall_avg, dtype=np.float64)
            if np.abs(grid.mean(axis=0) - got).max() > 1e-6:
                raise ValueError(f"stored overall average for {r.name!r} does not "
                                 "equal the mean of its target averages")

    def as_tsv(self) -> str:
        self.validate()
        header = ["method"]
        for tag in self.targets:
            for label in self.class_labels:
                header += [f"{tag}/{label}_mean", f"{tag}/{label}_std"]
            header += [f"{tag}/avg_mean", f"{tag}/avg_std"]
        header += ["overall_mean", "overall_std"]
        lines = ["\t".join(header)]
        for r in self.rows:
            cells = [r.name]
            for tag in self.targets:
                for label in self.class_labels:
                    m, s = _mean_std(r.cells[tag][label])
                    cells += [f"{m:.4f}", f"{s:.4f}"]
                m, s = _mean_std(r.target_avg[tag])
                cells += [f"{m:.4f}", f"{s:.4f}"]
            m, s = _mean_std(r.overall_avg)
            cells += [f"{m:.4f}", f"{s:.4f}"]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        """Aligned human-readable table, Dice in percent, mean +/- std."""
        self.validate()
        cols = ["method"] + [f"{t}" for t in self.targets] + ["overall"]
        body = []
        for r in self.rows:
            cells = [r.name]
            for t in self.targets:
                m, s = _mean_std(r.target_avg[t])
                cells.append(f"{100 * m:.2f} +/- {100 * s:.2f}")
            m, s = _mean_std(r.overall_avg)
            cells.append(f"{100 * m:.2f} +/- {100 * s:.2f}")
            body.append(cells)
        widths = [max(len(row[i]) for row in [cols] + body) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        for cells in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
        return "\n".join(lines) + "\n"


def _class_labels(num_classes: int, label_names: list[str] | None) -> tuple[str, ...]:
    if label_names is not None:
        if len(label_names) != num_classes:
            raise ValueError(f"expected {num_classes} label names, got {len(label_names)}")
        return tuple(label_names[1:])
    return tuple(f"class_{k}" for k in range(1, num_classes))


def evaluate_cross_domain(model, domains: dict[str, list[Sample]],
                          batch_size: int = 16,
                          label_names: list[str] | None = None,
                          row_name: str | None = None) -> ResultsTable:
    """Score a trained segmenter on each held-out domain.

    `model` is a Segmenter, a Checkpoint, or a checkpoint path. Dice is
    pooled per volume then averaged over volumes, so long and short volumes
    weigh the same. Returns a one-row table; the row is named after the
    checkpoint's training mode when one is available.
    """
    if not domains:
        raise ValueError("no domains to evaluate")
    segmenter, default_name, seed = _resolve_segmenter(model)
    k = segmenter.num_classes
    labels = _class_labels(k, label_names)
    cells: dict[str, dict[str, tuple[float, ...]]] = {}
    for tag, samples in domains.items():
        if not samples:
            raise ValueError(f"domain {tag!r} has no samples")
        worst = max(int(s.mask.max()) for s in samples)
        if worst >= k:
            raise ValueError(f"domain {tag!r} has label {worst} but the model "
                             f"predicts {k} classes")
        preds = predict_samples(segmenter, samples, batch_size=batch_size)
        by_class = per_class_volume_dice(preds, samples, k)
        cells[tag] = {labels[i]: (by_class[i + 1],) for i in range(len(labels))}
    row = ResultsRow.build(row_name or default_name, (seed,), cells)
    table = ResultsTable(targets=tuple(domains), class_labels=labels, rows=[row])
    table.validate()
    return table


def _resolve_segmenter(model) -> tuple[Segmenter, str, int]:
    if isinstance(model, Segmenter):
        return model, "model", 0
    from .trainer import Checkpoint, load_checkpoint

    if isinstance(model, (str, Path, Checkpoint)):
        loaded = load_checkpoint(model)
        return loaded.segmenter, loaded.config.mode, loaded.config.seed
    raise TypeError(f"cannot evaluate object of type {type(model).__name__}")


def run_ablation(base_config, split, target_domains: dict[str, list[Sample]],
                 modes: tuple[str, ...] = ("full", "no_adversarial", "no_mi", "erm"),
                 seeds: tuple[int, ...] = (0, 1, 2),
                 label_names: list[str] | None = None,
                 out_dir: str | Path | None = None) -> ResultsTable:
    """Train every (mode, seed) pair on one split and score all target domains.

    All modes share the seed list, so data order and weight draws are matched
    across rows. Checkpoint selection uses source-val Dice only; target
    domains never influence which checkpoint is scored.
    """
    from .config import config_hash, train_config_to_flat
    from .trainer import load_checkpoint, run_training, select_checkpoint

    root = Path(out_dir) if out_dir is not None else None
    targets = tuple(target_domains)
    rows = []
    labels = None
    for mode in modes:
        cells: dict[str, dict[str, list[float]]] = {}
        for seed in seeds:
            config = dataclasses.replace(base_config, mode=mode, seed=seed)
            run_dir = root / f"{mode}_seed{seed}" if root is not None else None
            ckpts = run_training(config, split, out_dir=run_dir)
            best = select_checkpoint(ckpts)
            segmenter = load_checkpoint(best).segmenter
            one = evaluate_cross_domain(segmenter, target_domains,
                                        batch_size=base_config.batch_size,
                                        label_names=label_names)
            labels = one.class_labels
            for tag in targets:
                for label, vals in one.rows[0].cells[tag].items():
                    cells.setdefault(tag, {}).setdefault(label, []).append(vals[0])
        frozen = {tag: {lb: tuple(v) for lb, v in by.items()} for tag, by in cells.items()}
        rows.append(ResultsRow.build(mode, tuple(seeds), frozen))
    table = ResultsTable(targets=targets, class_labels=labels, rows=rows,
                         config_hash=config_hash(train_config_to_flat(base_config)))
    table.validate()
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        (root / "results.tsv").write_text(table.as_tsv())
    return table
