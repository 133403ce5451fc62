"""Evaluation toolkit: accuracy/earliness metrics, non-learned halting
baselines over key-correlation-only masks, hyperparameter sweeps with
per-point failure capture, attention-weight split analysis, and halting
position histograms. All outputs are plain data plus CSV writers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .encoder import assign_slots, input_embedding, attention_stack
from .sequence import assemble_mask
from .training import _episode_pass

INF = math.inf


def harmonic_mean(accuracy, earliness):
    """2(1-E)A / ((1-E)+A); zero when the denominator vanishes."""
    usefulness = 1.0 - earliness
    denom = usefulness + accuracy
    if denom == 0.0:
        return 0.0
    return 2.0 * usefulness * accuracy / denom


@dataclass
class EvalResult:
    """Per-key outcomes plus the aggregate metric block."""

    count: int
    earliness: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    hm: float
    outcomes: list = field(default_factory=list, repr=False)

    def row(self):
        return {key: getattr(self, key)
                for key in ("count", "earliness", "accuracy", "precision",
                            "recall", "f1", "hm")}


def metrics(results, class_count=None):
    """Aggregate per-key outcomes (objects with n, seq_len, predicted,
    truth, key, halt_arrival) into an EvalResult."""
    results = list(results)
    if not results:
        raise ValueError("metrics need at least one outcome")
    fractions = [r.n / r.seq_len for r in results]
    earliness = sum(fractions) / len(results)
    accuracy = sum(r.predicted == r.truth for r in results) / len(results)
    if class_count is None:
        class_count = max(max(r.truth, r.predicted) for r in results)
    precisions, recalls, f1s = [], [], []
    for label in range(1, class_count + 1):
        tp = sum(r.predicted == label and r.truth == label for r in results)
        fp = sum(r.predicted == label and r.truth != label for r in results)
        fn = sum(r.predicted != label and r.truth == label for r in results)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    return EvalResult(
        count=len(results),
        earliness=earliness,
        accuracy=accuracy,
        precision=sum(precisions) / class_count,
        recall=sum(recalls) / class_count,
        f1=sum(f1s) / class_count,
        hm=harmonic_mean(accuracy, earliness),
        outcomes=results,
    )


class _FrozenView:
    """A model with a different mask/config sharing the same parameters."""

    def __init__(self, model, config):
        self.config = config
        self.store = model.store
        self.baseline = model.baseline


def key_only_view(model):
    """The same frozen model restricted to key-correlation-only masks."""
    return _FrozenView(model, replace(model.config, value_correlation=False))


def _collect(model, tangles, mode, param=None, rng=None, chunk=128):
    episodes = []
    for seq in tangles:
        batch, _ = _episode_pass(model, seq, mode=mode, rng=rng, param=param,
                                 chunk=chunk)
        episodes.extend(batch)
    return episodes


def evaluate(model, tangles, mode="threshold", param=None, rng=None,
             chunk=128):
    """Deterministic evaluation (threshold policy by default) -> EvalResult."""
    episodes = _collect(model, tangles, mode, param=param, rng=rng,
                        chunk=chunk)
    return metrics(episodes, class_count=model.config.class_count)


def halting_baseline(model, tangles, kind, threshold, chunk=128):
    """Non-learned halting over the key-correlation-only (per-key) mask.

    kind 'fixed': halt every key at step min(threshold, |S_k|), threshold
    >= 1 (inf = observe everything). kind 'confidence': halt once the
    classifier's top probability reaches threshold in [0, 1], else at the
    key's end.
    """
    if kind == "fixed":
        mode = "fixed"
        if threshold != INF and (threshold < 1 or int(threshold) != threshold):
            raise ValueError(f"fixed halting step must be >= 1, got {threshold}")
    elif kind == "confidence":
        mode = "confidence"
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(
                f"confidence threshold must lie in [0, 1], got {threshold}")
    else:
        raise ValueError(f"unknown halting baseline kind {kind!r}")
    view = key_only_view(model)
    episodes = _collect(view, tangles, mode, param=threshold, chunk=chunk)
    return metrics(episodes, class_count=model.config.class_count)


@dataclass
class CurvePoint:
    parameter: str
    value: float
    earliness: float
    accuracy: float
    hm: float
    seed: int


def sweep(runner, parameter, grid, seeds=(0,)):
    """One point per (grid value, seed); failures recorded, sweep continues.

    runner(value, seed) -> EvalResult (or anything with earliness, accuracy,
    hm attributes). Returns (points sorted by earliness, failures).
    """
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid must be non-empty")
    points, failures = [], []
    for value in grid:
        for seed in seeds:
            try:
                result = runner(value, seed)
            except Exception as exc:  # noqa: BLE001 - point isolation
                failures.append({"parameter": parameter, "value": value,
                                 "seed": seed, "error": str(exc)})
                continue
            points.append(CurvePoint(
                parameter=parameter, value=value,
                earliness=result.earliness, accuracy=result.accuracy,
                hm=result.hm, seed=seed))
    points.sort(key=lambda p: (p.earliness, p.value, p.seed))
    return points, failures


def attention_split(model, tangles, bins=10, rows_per_key=None):
    """Same-key vs cross-key attention mass along each key's lifetime.

    For every attention row belonging to a step some key actually observed
    (threshold policy), internal = summed weights on same-key positions
    (diagonal included), external = summed weights on other keys' positions.
    Rows are averaged inside `bins` equal step-fraction bins. Returns bin
    rows plus the largest |internal + external - 1| seen.
    """
    cfg = model.config
    sums = np.zeros((bins, 2))
    counts = np.zeros(bins, dtype=np.int64)
    max_row_error = 0.0
    with nm.no_grad():
        for seq in tangles:
            episodes, _ = _episode_pass(model, seq, mode="threshold")
            slots = assign_slots(seq, cfg.slot_count)
            e0 = input_embedding(seq, range(1, len(seq) + 1), model.store,
                                 cfg, slots)
            mask = assemble_mask(seq, window=cfg.window,
                                 key_correlation=cfg.key_correlation,
                                 value_correlation=cfg.value_correlation)
            collected = []
            attention_stack(e0, mask, model.store, cfg,
                            collect_attention=collected)
            weights = [w.data for w in collected]
            for ep in episodes:
                positions = seq.key_positions(ep.key)
                mine = np.zeros(len(seq), dtype=bool)
                mine[np.asarray(positions) - 1] = True
                steps = positions[:ep.n]
                if rows_per_key is not None:
                    steps = steps[:rows_per_key]
                for step_idx, pos in enumerate(steps, start=1):
                    slot = min(bins - 1,
                               max(0, math.ceil(step_idx / ep.seq_len * bins) - 1))
                    for w in weights:
                        row = w[pos - 1]
                        internal = float(row[mine].sum())
                        external = float(row[~mine].sum())
                        max_row_error = max(max_row_error,
                                            abs(internal + external - 1.0))
                        sums[slot] += (internal, external)
                        counts[slot] += 1
    rows = []
    for b in range(bins):
        if counts[b]:
            internal, external = sums[b] / counts[b]
        else:
            internal = external = 0.0
        rows.append({"bin_low": b / bins, "bin_high": (b + 1) / bins,
                     "internal": internal, "external": external,
                     "rows": int(counts[b])})
    return {"bins": rows, "max_row_error": max_row_error,
            "rows_checked": int(counts.sum())}


def halting_histogram(results, bins=10):
    """Normalized halt-position histogram over n_k/|S_k| with the median.

    Bins are left-open, right-closed slices of (0, 1], so a halt exactly at
    a bin edge (first item of a 10-item key, bins=10) lands in the lower bin.
    """
    fractions = [r.n / r.seq_len for r in results]
    if not fractions:
        raise ValueError("histogram needs at least one outcome")
    mass = np.zeros(bins)
    for f in fractions:
        mass[min(bins - 1, max(0, math.ceil(f * bins) - 1))] += 1
    mass /= len(fractions)
    rows = [{"bin_low": b / bins, "bin_high": (b + 1) / bins,
             "mass": float(mass[b])} for b in range(bins)]
    return {"bins": rows, "median": float(np.median(fractions)),
            "count": len(fractions)}


# --------------------------------------------------------------- CSV output

def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_metrics(labeled_results, path):
    """metrics.csv: one row per (label, EvalResult)."""
    header = ("config", "count", "earliness", "accuracy", "precision",
              "recall", "f1", "hm")
    rows = [(label, *[result.row()[k] for k in header[1:]])
            for label, result in labeled_results]
    _write_rows(path, header, rows)


def write_curve(points, path):
    """curve.csv: CurvePoints, already sorted by earliness."""
    header = ("parameter", "value", "earliness", "accuracy", "hm", "seed")
    rows = [(p.parameter, p.value, p.earliness, p.accuracy, p.hm, p.seed)
            for p in points]
    _write_rows(path, header, rows)


def write_attention_split(split, path):
    header = ("bin_low", "bin_high", "internal", "external", "rows")
    rows = [tuple(b[k] for k in header) for b in split["bins"]]
    _write_rows(path, header, rows)


def write_halting_hist(hist, path):
    header = ("bin_low", "bin_high", "mass")
    rows = [tuple(b[k] for k in header) for b in hist["bins"]]
    _write_rows(path, header, rows)
