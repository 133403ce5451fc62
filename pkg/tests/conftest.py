"""Shared builders for the test suite: schemas, random tangles, tiny models."""

import numpy as np

from kvec.sequence import DimSpec, ValueSchema, TangledSequence, CATEGORICAL, NUMERIC
from kvec.model import ModelConfig, Model


def simple_schema(session_card=2, kind_card=5):
    """direction (categorical, session dim) / kind (categorical) / size (numeric)."""
    return ValueSchema(
        dims=(
            DimSpec(kind=CATEGORICAL, cardinality=session_card, name="direction"),
            DimSpec(kind=CATEGORICAL, cardinality=kind_card, name="kind"),
            DimSpec(kind=NUMERIC, mean=100.0, std=25.0, name="size"),
        ),
        session_dim=0,
    )


def ingest_all(schema, rows):
    seq = TangledSequence(schema)
    for key, value in rows:
        seq.ingest(key, value)
    return seq


def random_tangle(rng, length, n_keys, session_card=2, kind_card=5,
                  labeled=False):
    schema = simple_schema(session_card, kind_card)
    seq = TangledSequence(schema)
    keys = [f"k{i}" for i in range(n_keys)]
    for _ in range(length):
        key = keys[rng.integers(n_keys)]
        value = (
            int(rng.integers(session_card)),
            int(rng.integers(kind_card)),
            float(rng.normal(100.0, 25.0)),
        )
        seq.ingest(key, value)
    if labeled:
        for key in seq.keys():
            seq.set_label(key, int(rng.integers(2)) + 1)
    return seq


def tiny_config(schema=None, **overrides):
    """Smallest config that still exercises every code path (h != d)."""
    base = dict(
        class_count=2, d=8, blocks=2, ffn_width=16, fusion_width=10,
        window=None, slot_count=8, max_seq_pos=16, time_table_size=32,
        dropout=0.0, dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(schema=schema or simple_schema(), **base)


def tiny_model(seed=0, **overrides):
    return Model(tiny_config(**overrides), seed=seed)
