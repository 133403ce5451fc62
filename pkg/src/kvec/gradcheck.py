"""Finite-difference gradient audit over a miniature end-to-end model.

Runs central-difference checks of every parameter entry against the tape's
analytic gradients, through the full episode pipeline (embeddings, masked
attention, FFN, fusion gates, policy and classifier heads) under each loss
component, plus the baseline net under its regression loss. Results are
aggregated per layer family so a regression in any layer's backward rule
shows up as a named row.

Deterministic by construction: threshold-mode episodes, no dropout, 64-bit
parameters. A guard asserts every halt probability keeps a safe margin from
the 0.5 decision boundary so the +/-h perturbations cannot flip an action.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from . import halting as ht
from .model import Model, ModelConfig
from .sequence import (DimSpec, ValueSchema, TangledSequence, CATEGORICAL,
                       NUMERIC)
from .training import _episode_pass, loss_total

TOLERANCE = 1e-4

_FAMILIES = (
    ("embeddings", lambda n: n.startswith("emb.")),
    ("ffn", lambda n: ".ffn." in n),
    ("attention", lambda n: n.startswith("block")),
    ("fusion gates", lambda n: n.startswith("fuse.")),
    ("policy head", lambda n: n.startswith("policy.")),
    ("classifier head", lambda n: n.startswith("classifier.")),
    ("baseline net", lambda n: n.startswith("baseline.")),
)


def _family(name):
    for family, match in _FAMILIES:
        if match(name):
            return family
    return "other"


def _suite_sequence(seed, items, keys):
    schema = ValueSchema(
        dims=(
            DimSpec(kind=CATEGORICAL, cardinality=2, name="direction"),
            DimSpec(kind=CATEGORICAL, cardinality=5, name="kind"),
            DimSpec(kind=NUMERIC, mean=100.0, std=25.0, name="size"),
        ),
        session_dim=0,
    )
    rng = np.random.default_rng(seed)
    seq = TangledSequence(schema)
    names = [f"k{i}" for i in range(keys)]
    for _ in range(items):
        seq.ingest(names[rng.integers(keys)], (
            int(rng.integers(2)),
            int(rng.integers(5)),
            float(rng.normal(100.0, 25.0)),
        ))
    for key in seq.keys():
        seq.set_label(key, int(rng.integers(2)) + 1)
    return schema, seq


def run_suite(seed=18, items=18, keys=3, step=1e-5, tolerance=TOLERANCE,
              alpha=1.0, beta=0.5, floor=1e-5):
    """Full audit -> (rows, passed). Each row: layer/loss, error, verdict.

    `floor` bounds the relative-error denominator: gradient entries smaller
    than it are held to tolerance*floor = 1e-9 ABSOLUTE agreement instead of
    four relative digits. Central differences at step h carry ~h^2 truncation
    noise (~1e-10 here), so demanding relative precision of entries near zero
    only measures that noise; 1e-9 absolute still catches any real backward
    defect on such entries, which would be off by the entry's own magnitude.
    """
    schema, seq = _suite_sequence(seed, items, keys)
    config = ModelConfig(
        schema=schema, class_count=2, d=8, blocks=2, ffn_width=16,
        fusion_width=10, window=None, slot_count=4, max_seq_pos=8,
        time_table_size=12, dropout=0.0, dtype="float64")
    model = Model(config, seed=seed)

    # Threshold decisions and reward signs must be locally constant under
    # +/-step perturbations or the loss is not differentiable at this point.
    episodes, bundle = _episode_pass(model, seq, mode="threshold", tape=True)
    margin = min(abs(p - 0.5) for ep in episodes for p in ep.halt_probs)
    gap = min(float(np.abs(np.diff(np.sort(ep.dist, axis=0), axis=0)).min())
              for ep in episodes)
    if margin < 100 * step or gap < 100 * step:
        raise nm.NumericalError(
            f"decision margin {min(margin, gap):.2e} too close to a "
            "halt/classify boundary; pick a different suite seed")

    family_errors = {}
    rows = []

    def record(label, errors, params):
        for name, err in errors.items():
            family = _family(name)
            family_errors[family] = max(family_errors.get(family, 0.0), err)
        rows.append({"layer": label, "max_rel_error": max(errors.values()),
                     "params": params})

    targets = np.asarray(
        [[ep.returns[s - 1] for ep in episodes for s in range(1, ep.n + 1)]],
        dtype=bundle.states.dtype)
    states = nm.Tensor(bundle.states.copy())

    def baseline_fn():
        pred = ht.baseline_value(model.baseline, states)
        diff = nm.sub(pred, nm.Tensor(targets))
        return nm.scale(nm.sum_all(nm.mul(diff, diff)), 1.0 / targets.size)

    record("loss: baseline regression",
           nm.finite_diff_check(baseline_fn, model.baseline, step=step,
                                floor=floor),
           model.baseline.param_count())

    def loss_fn(a, b):
        def fn():
            eps, tape = _episode_pass(model, seq, mode="threshold", tape=True)
            return loss_total(model, eps, tape, a, b)[0]
        return fn

    for label, a, b in (("loss: classification", 0.0, 0.0),
                        ("loss: classification+delay", 0.0, beta)):
        record(label, nm.finite_diff_check(loss_fn(a, b), model.store,
                                           step=step, floor=floor),
               model.store.param_count())

    # The policy term weights each log-probability by (return - baseline)
    # where the baseline value is held constant by design; full-graph finite
    # differences would measure that frozen pathway too. Silence the baseline
    # net (zero output layer => value 0 for every state) so the weights are
    # genuine constants, then restore it.
    saved = {name: model.baseline[name].data.copy()
             for name in ("baseline.w2", "baseline.b2")}
    try:
        for name in saved:
            model.baseline[name].data[:] = 0.0
        record("loss: classification+policy",
               nm.finite_diff_check(loss_fn(alpha, 0.0), model.store,
                                    step=step, floor=floor),
               model.store.param_count())
    finally:
        for name, data in saved.items():
            model.baseline[name].data[:] = data

    for family, _ in _FAMILIES:
        if family in family_errors:
            rows.append({"layer": family,
                         "max_rel_error": family_errors[family]})
    for row in rows:
        row["pass"] = row["max_rel_error"] <= tolerance
    return rows, all(row["pass"] for row in rows)


def format_table(rows, tolerance=TOLERANCE):
    width = max(len(row["layer"]) for row in rows)
    lines = [f"{'layer / loss':<{width}}  max rel error  verdict"]
    for row in rows:
        verdict = "pass" if row["pass"] else f"FAIL (> {tolerance:g})"
        lines.append(
            f"{row['layer']:<{width}}  {row['max_rel_error']:13.3e}  {verdict}")
    return "\n".join(lines)
