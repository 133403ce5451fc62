"""Synthetic tangled-sequence datasets with planted stop signals.

Flows (per-key sequences) carry a class-discriminative signal segment at a
configurable position; everything outside the segment is class-neutral
padding. Flows are split by key 8:1:1, grouped into class-biased pools, and
interleaved into tangled sequences at a configured concurrency.

Value layout (3 dims): direction (categorical, the session dimension, runs
with geometric length targeting the 2.1 average), kind (categorical: per-
class signal code ranges plus shared neutral codes), size (numeric,
class-neutral). The kind dimension is the only class-informative one; a
small wrong-class noise rate keeps single items ambiguous early on, and the
first `weak_len` signal items are noisier than the rest so halting a little
later pays off. Concurrent flows in one tangle are biased toward a dominant
class, so cross-key (value-correlated) context carries usable signal.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, asdict, field

import numpy as np

from .sequence import (
    DimSpec, ValueSchema, TangledSequence, CATEGORICAL, NUMERIC,
)

DATASET_FORMAT = "kvec.dataset/1"
SPLIT_NAMES = ("train", "validation", "test")


@dataclass
class SyntheticConfig:
    """Generator knobs. Defaults match the desk-scale reproduction setup."""

    classes: int = 2
    flows: int = 1000
    flow_len: int = 100
    signal_len: int = 10
    signal_pos: str = "early"
    concurrency: int = 10
    flows_per_tangle: int = 20
    homophily: float = 0.8
    session_continue: float = 1.0 - 1.0 / 2.1
    codes_per_class: int = 3
    neutral_codes: int = 4
    noise_weak: float = 0.25
    weak_len: int = 5
    noise_strong: float = 0.02
    size_mean: float = 100.0
    size_std: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.signal_len > self.flow_len:
            raise ValueError("signal length exceeds flow length")
        if self.signal_pos not in ("early", "late"):
            raise ValueError(f"signal_pos must be early or late, got {self.signal_pos!r}")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if not 0.0 < self.session_continue < 1.0:
            raise ValueError("session_continue must be in (0,1)")

    @property
    def kind_cardinality(self):
        return self.classes * self.codes_per_class + self.neutral_codes

    def signal_codes(self, label):
        lo = (label - 1) * self.codes_per_class
        return range(lo, lo + self.codes_per_class)

    @property
    def neutral_range(self):
        lo = self.classes * self.codes_per_class
        return range(lo, lo + self.neutral_codes)


def schema_of(config):
    return ValueSchema(
        dims=(
            DimSpec(kind=CATEGORICAL, cardinality=2, name="direction"),
            DimSpec(kind=CATEGORICAL, cardinality=config.kind_cardinality,
                    name="kind"),
            DimSpec(kind=NUMERIC, mean=config.size_mean, std=config.size_std,
                    name="size"),
        ),
        session_dim=0,
    )


def kind_class(config, code):
    """Class (1-based) owning a signal code, or 0 for neutral codes."""
    if code >= config.classes * config.codes_per_class:
        return 0
    return code // config.codes_per_class + 1


@dataclass
class Flow:
    """One key's full item sequence plus its label and signal span."""

    key: str
    label: int
    values: list = field(default_factory=list)
    signal_lo: int = 0
    signal_hi: int = 0


def generate_flows(config, rng):
    """Labeled flows with planted signal segments, classes balanced."""
    flows = []
    if config.signal_pos == "early":
        lo = 0
    else:
        lo = config.flow_len - config.signal_len
    hi = lo + config.signal_len
    for idx in range(config.flows):
        label = idx % config.classes + 1
        flow = Flow(key=f"f{idx:05d}", label=label, signal_lo=lo, signal_hi=hi)
        direction = int(rng.integers(2))
        wrong_codes = [
            c for cls in range(1, config.classes + 1) if cls != label
            for c in config.signal_codes(cls)
        ]
        own_codes = list(config.signal_codes(label))
        neutral = list(config.neutral_range)
        for pos in range(config.flow_len):
            if pos > 0 and rng.random() >= config.session_continue:
                direction = 1 - direction
            if lo <= pos < hi:
                eps = (config.noise_weak if pos - lo < config.weak_len
                       else config.noise_strong)
                pool = wrong_codes if rng.random() < eps else own_codes
                kind = int(pool[rng.integers(len(pool))])
            else:
                kind = int(neutral[rng.integers(len(neutral))])
            size = float(rng.normal(config.size_mean, config.size_std))
            flow.values.append((direction, kind, size))
        flows.append(flow)
    return flows


def frequency_oracle_accuracy(config, flows):
    """Count signal-code class votes over each flow's signal segment.

    The learnability floor: if this cheap census cannot classify the flows,
    no model will. Neutral codes cast no vote; ties break to the lowest class.
    """
    correct = 0
    for flow in flows:
        votes = Counter()
        for value in flow.values[flow.signal_lo:flow.signal_hi]:
            owner = kind_class(config, value[1])
            if owner:
                votes[owner] += 1
        if votes:
            top = max(votes.values())
            pred = min(cls for cls, n in votes.items() if n == top)
        else:
            pred = 1
        correct += pred == flow.label
    return correct / len(flows)


def interleave(flows, concurrency, rng, schema):
    """Mix flows chronologically into one tangled sequence.

    Keeps `concurrency` flows active; each step emits the next item of a
    uniformly chosen active flow; finished flows are replaced from the pool
    until it runs dry. Per-flow item order is preserved.
    """
    if not flows:
        raise ValueError("empty flow pool")
    pool = list(flows)
    pool_next = 0
    active = []
    cursors = []
    seq = TangledSequence(schema)
    while pool_next < len(pool) and len(active) < concurrency:
        active.append(pool[pool_next])
        cursors.append(0)
        pool_next += 1
    while active:
        pick = int(rng.integers(len(active)))
        flow = active[pick]
        seq.ingest(flow.key, flow.values[cursors[pick]])
        cursors[pick] += 1
        if cursors[pick] == len(flow.values):
            if pool_next < len(pool):
                active[pick] = pool[pool_next]
                cursors[pick] = 0
                pool_next += 1
            else:
                active.pop(pick)
                cursors.pop(pick)
    for flow in flows:
        seq.set_label(flow.key, flow.label)
    return seq


def split_flows(flows, seed):
    """Disjoint 8:1:1 key split; deterministic in the seed."""
    if len(flows) < 10:
        raise ValueError("need at least 10 keys to split 8:1:1")
    order = list(range(len(flows)))
    np.random.default_rng([seed, 101]).shuffle(order)
    n = len(flows)
    n_val = max(1, round(n / 10))
    n_test = max(1, round(n / 10))
    val_idx = set(order[:n_val])
    test_idx = set(order[n_val:n_val + n_test])
    splits = {"train": [], "validation": [], "test": []}
    for i, flow in enumerate(flows):
        if i in val_idx:
            splits["validation"].append(flow)
        elif i in test_idx:
            splits["test"].append(flow)
        else:
            splits["train"].append(flow)
    return splits


def group_flows(flows, config, rng):
    """Partition one split's flows into class-biased tangle groups.

    Each group has a dominant class; a slot draws from the dominant class's
    remaining flows with probability `homophily`, else from any class. The
    bias is what makes cross-key context informative.
    """
    queues = {cls: [] for cls in range(1, config.classes + 1)}
    order = list(flows)
    rng.shuffle(order)
    for flow in order:
        queues[flow.label].append(flow)
    total = len(flows)
    groups = []
    dominant = 1 + int(rng.integers(config.classes))
    while total > 0:
        group = []
        for _ in range(min(config.flows_per_tangle, total)):
            if rng.random() < config.homophily and queues[dominant]:
                source = dominant
            else:
                candidates = [c for c, q in queues.items() if q]
                source = candidates[int(rng.integers(len(candidates)))]
            group.append(queues[source].pop())
            total -= 1
        groups.append(group)
        dominant = dominant % config.classes + 1
    return groups


def build_split(flows, config, rng, schema=None):
    """Group and interleave one split's flows into tangled sequences."""
    schema = schema or schema_of(config)
    groups = group_flows(flows, config, rng)
    return [interleave(g, config.concurrency, rng, schema) for g in groups]


def avg_session_length(tangles):
    total, count = 0, 0
    for seq in tangles:
        for key in seq.keys():
            for _value, positions in seq.sessions(key):
                total += len(positions)
                count += 1
    return total / count if count else 0.0


def numeric_stats_of(tangles, schema):
    """Per-dim (mean, std) measured over a split; None for categorical dims."""
    stats = []
    for dim, spec in enumerate(schema.dims):
        if spec.is_categorical:
            stats.append(None)
            continue
        values = np.array([
            item.value[dim] for seq in tangles for item in seq.items
        ])
        std = float(values.std())
        stats.append((float(values.mean()), std if std > 0 else 1.0))
    return stats


@dataclass
class Dataset:
    """Manifest plus per-split tangled sequences."""

    manifest: dict
    splits: dict

    @property
    def schema(self):
        return ValueSchema.from_dict(self.manifest["schema"])


def build_synthetic(config):
    """The full pipeline: generate, split by key, group, interleave, measure."""
    schema = schema_of(config)
    flows = generate_flows(config, np.random.default_rng([config.seed, 7]))
    splits_flows = split_flows(flows, config.seed)
    splits = {}
    for name, part in splits_flows.items():
        rng = np.random.default_rng([config.seed, 13, SPLIT_NAMES.index(name)])
        splits[name] = build_split(part, config, rng, schema)
    manifest = {
        "format": DATASET_FORMAT,
        "schema": schema.to_dict(),
        "class_count": config.classes,
        "generator": asdict(config),
        "numeric_stats": [
            None if s is None else list(s)
            for s in numeric_stats_of(splits["train"], schema)
        ],
        "avg_session_length": avg_session_length(splits["train"]),
        "oracle_accuracy": frequency_oracle_accuracy(config, flows),
        "splits": {
            name: {
                "flows": len(splits_flows[name]),
                "items": sum(len(s) for s in splits[name]),
                "tangle_item_counts": [len(s) for s in splits[name]],
            }
            for name in SPLIT_NAMES
        },
    }
    return Dataset(manifest=manifest, splits=splits)


# -------------------------------------------------------------- persistence

def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(dataset, path):
    """manifest.json at the root; items.jsonl + labels.jsonl per split."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(_dump(dataset.manifest))
        fh.write("\n")
    for name, tangles in dataset.splits.items():
        split_dir = os.path.join(path, name)
        os.makedirs(split_dir, exist_ok=True)
        with open(os.path.join(split_dir, "items.jsonl"), "w",
                  encoding="utf-8") as fh:
            for seq in tangles:
                for item in seq.items:
                    fh.write(_dump({
                        "t": item.arrival_index,
                        "key": item.key,
                        "v": list(item.value),
                    }))
                    fh.write("\n")
        with open(os.path.join(split_dir, "labels.jsonl"), "w",
                  encoding="utf-8") as fh:
            for seq in tangles:
                for key in seq.keys():
                    fh.write(_dump({"key": key, "label": seq.labels[key]}))
                    fh.write("\n")


def _parse_lines(path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(
                    f"{path}: malformed record at line {line_no}: {err}"
                ) from err


def load_dataset(path):
    """Rebuild a Dataset; rejects gaps, schema violations, unlabeled keys."""
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unknown dataset format {manifest.get('format')!r}")
    schema = ValueSchema.from_dict(manifest["schema"])
    splits = {}
    for name, info in manifest["splits"].items():
        counts = info["tangle_item_counts"]
        tangles = [TangledSequence(schema) for _ in counts]
        boundaries = np.cumsum([0] + list(counts))
        items_path = os.path.join(path, name, "items.jsonl")
        row = 0
        for line_no, record in _parse_lines(items_path):
            tangle_idx = int(np.searchsorted(boundaries, row, side="right")) - 1
            if tangle_idx >= len(tangles):
                raise ValueError(f"{items_path}: more items than the manifest declares")
            seq = tangles[tangle_idx]
            expected_t = row - int(boundaries[tangle_idx]) + 1
            if record["t"] != expected_t:
                raise ValueError(
                    f"{items_path}: line {line_no}: t={record['t']} breaks "
                    f"density (expected {expected_t})"
                )
            try:
                seq.ingest(record["key"], tuple(record["v"]))
            except ValueError as err:
                raise ValueError(
                    f"{items_path}: line {line_no}: {err}"
                ) from err
            row += 1
        if row != int(boundaries[-1]):
            raise ValueError(
                f"{items_path}: {row} items but manifest declares "
                f"{int(boundaries[-1])}"
            )
        labels_path = os.path.join(path, name, "labels.jsonl")
        labels = {}
        for line_no, record in _parse_lines(labels_path):
            labels[record["key"]] = record["label"]
        for seq in tangles:
            for key in seq.keys():
                if key not in labels:
                    raise ValueError(f"{labels_path}: missing label for key {key!r}")
                seq.set_label(key, labels[key])
            seq.check_labels()
        splits[name] = tangles
    return Dataset(manifest=manifest, splits=splits)
