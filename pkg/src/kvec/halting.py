"""Halting policy, classifier head, reward, and baseline value network.

All heads read the per-key state vector s (fusion width h). The policy is a
single sigmoid unit over s; actions are sampled during training and
thresholded at 0.5 for deterministic evaluation. The classifier is a linear
layer plus softmax with 1-based labels (ties break to the lowest class).
The baseline is a small two-layer net trained by regression only; it never
backpropagates into the encoder.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm

HALT = "halt"
WAIT = "wait"


PROB_FLOOR = 1e-12


def halt_probability(store, s):
    """P(Halt | s) as a (1, B) tensor, strictly inside (0, 1).

    Saturated sigmoids round to exactly 0 or 1 in floating point; the clamp
    keeps log terms finite everywhere downstream.
    """
    w = store["policy.w"]
    if s.shape[0] != w.shape[1]:
        raise ValueError(f"state width {s.shape[0]} != policy width {w.shape[1]}")
    raw = nm.sigmoid(nm.affine(s, w, store["policy.b"]))
    return nm.clamp(raw, PROB_FLOOR, 1.0 - PROB_FLOOR)


def decide(p, mode="threshold", rng=None):
    """Map a halt probability to an action.

    sample mode draws Halt with probability p from the given generator;
    threshold mode returns Halt iff p >= 0.5.
    """
    p = float(p)
    if mode == "threshold":
        return HALT if p >= 0.5 else WAIT
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        return HALT if rng.random() < p else WAIT
    raise ValueError(f"unknown decision mode {mode!r}")


def class_distribution(store, s):
    """Softmax over class logits, batched: s (h, B) -> distribution (C, B)."""
    w = store["classifier.w"]
    if s.shape[0] != w.shape[1]:
        raise ValueError(
            f"state width {s.shape[0]} != classifier width {w.shape[1]}"
        )
    logits = nm.affine(s, w, store["classifier.b"])
    return nm.transpose(nm.masked_softmax(nm.transpose(logits)))


def predicted_labels(dist):
    """1-based argmax per column; ties break to the lowest class index."""
    return np.argmax(dist.data, axis=0).astype(np.int64) + 1


def classify(store, s):
    """(distribution (C, 1), predicted 1-based label) for a single state."""
    dist = class_distribution(store, s)
    return dist, int(predicted_labels(dist)[0])


def reward_of(predicted, truth, class_count):
    """+1 for a correct prediction, -1 otherwise."""
    for label in (predicted, truth):
        if not 1 <= label <= class_count:
            raise ValueError(f"label {label} outside 1..{class_count}")
    return 1 if predicted == truth else -1


def baseline_value(baseline_store, s):
    """Scalar state value per column: two-layer ReLU net, (h, B) -> (1, B)."""
    hidden = nm.relu(nm.affine(s, baseline_store["baseline.w1"],
                               baseline_store["baseline.b1"]))
    return nm.affine(hidden, baseline_store["baseline.w2"],
                     baseline_store["baseline.b2"])
