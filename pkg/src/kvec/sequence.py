"""Tangled key-value streams: sessions, correlation predicates, dynamic mask.

A tangled sequence is one chronological stream whose items each carry a key
and a value vector. Items sharing a key form that key's sequence; a *session*
is a maximal run of consecutive same-key items whose designated session
dimension holds one value. Two items may attend to each other when they are
key-correlated (same key) or value-correlated (appending the later item,
re-keyed, to the earlier item's sequence would land it in the earlier item's
current trailing session). The dynamic mask materializes these predicates as
causal row-wise visibility.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass

import numpy as np

CATEGORICAL = "categorical"
NUMERIC = "numeric"


@dataclass(frozen=True)
class DimSpec:
    """One dimension of an item's value vector.

    Categorical dims hold integer codes in [0, cardinality); numeric dims hold
    finite reals, with mean/std recorded for standardization at embedding time.
    """

    kind: str
    cardinality: int = 0
    mean: float = 0.0
    std: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NUMERIC):
            raise ValueError(f"unknown dim kind {self.kind!r}")
        if self.kind == CATEGORICAL and self.cardinality < 1:
            raise ValueError("categorical dim needs cardinality >= 1")
        if self.kind == NUMERIC and not (np.isfinite(self.mean) and self.std > 0):
            raise ValueError("numeric dim needs finite mean and std > 0")

    @property
    def is_categorical(self):
        return self.kind == CATEGORICAL


@dataclass(frozen=True)
class ValueSchema:
    """Per-dimension value spaces plus the index of the session dimension."""

    dims: tuple[DimSpec, ...]
    session_dim: int

    def __post_init__(self):
        if not self.dims:
            raise ValueError("schema needs at least one value dimension")
        if not 0 <= self.session_dim < len(self.dims):
            raise ValueError("session_dim out of range")
        if self.dims[self.session_dim].kind != CATEGORICAL:
            raise ValueError("session dimension must be categorical")

    @property
    def width(self):
        return len(self.dims)

    def check_value(self, value):
        """Raise ValueError unless `value` matches arity and per-dim domains."""
        if len(value) != len(self.dims):
            raise ValueError(
                f"value arity {len(value)} != schema arity {len(self.dims)}"
            )
        for pos, (dim, v) in enumerate(zip(self.dims, value)):
            if dim.kind == CATEGORICAL:
                code = int(v)
                if code != v or not 0 <= code < dim.cardinality:
                    raise ValueError(
                        f"dim {pos}: code {v!r} outside [0, {dim.cardinality})"
                    )
            else:
                if not np.isfinite(v):
                    raise ValueError(f"dim {pos}: non-finite numeric value {v!r}")

    def to_dict(self):
        return {
            "session_dim": self.session_dim,
            "dims": [
                {
                    "kind": d.kind,
                    "cardinality": d.cardinality,
                    "mean": d.mean,
                    "std": d.std,
                    "name": d.name,
                }
                for d in self.dims
            ],
        }

    @classmethod
    def from_dict(cls, obj):
        dims = tuple(
            DimSpec(
                kind=d["kind"],
                cardinality=d.get("cardinality", 0),
                mean=d.get("mean", 0.0),
                std=d.get("std", 1.0),
                name=d.get("name", ""),
            )
            for d in obj["dims"]
        )
        return cls(dims=dims, session_dim=obj["session_dim"])


@dataclass(frozen=True)
class Item:
    """One key-value event in the tangled stream. Indices are 1-based."""

    key: str
    value: tuple
    arrival_index: int
    seq_index: int


class _Session:
    """A maximal run of same-key items sharing one session-dim value."""

    __slots__ = ("value", "positions")

    def __init__(self, value, first_position):
        self.value = value
        self.positions = [first_position]


class TangledSequence:
    """Append-only tangled stream with per-key labels and session bookkeeping.

    Single writer; once a prefix is ingested, reads on that prefix are pure.
    Mask rows are stable under later ingests: row i depends only on items
    1..i, reconstructed from session history as it stood at time i.
    """

    def __init__(self, schema, labels=None, name=""):
        self.schema = schema
        self.name = name
        self.items = []
        self.labels = dict(labels or {})
        self._key_positions = {}  # key -> ascending arrival indices
        self._sessions = {}  # key -> list of _Session
        self._session_ord = {}  # key -> session ordinal of each same-key item

    def __len__(self):
        return len(self.items)

    def item(self, i):
        """Item at 1-based arrival index i."""
        if not 1 <= i <= len(self.items):
            raise IndexError(f"arrival index {i} outside 1..{len(self.items)}")
        return self.items[i - 1]

    def keys(self):
        return list(self._key_positions)

    def key_positions(self, key):
        """Ascending arrival indices of a key's items."""
        return list(self._key_positions.get(key, ()))

    def key_length(self, key):
        return len(self._key_positions.get(key, ()))

    def sessions(self, key):
        """List of (session value, arrival positions) runs for a key."""
        return [(s.value, list(s.positions)) for s in self._sessions.get(key, ())]

    def set_label(self, key, label):
        if int(label) != label or label < 1:
            raise ValueError(f"label must be a positive integer, got {label!r}")
        self.labels[key] = int(label)

    def check_labels(self):
        """Raise ValueError if any ingested key lacks a label."""
        missing = [k for k in self._key_positions if k not in self.labels]
        if missing:
            raise ValueError(f"keys without labels: {missing[:5]}")

    def ingest(self, key, value):
        """Append one item; assign indices; extend or open its key's session."""
        if not isinstance(key, str) or not key:
            raise ValueError("key must be a non-empty string")
        value = tuple(value)
        self.schema.check_value(value)
        arrival = len(self.items) + 1
        positions = self._key_positions.setdefault(key, [])
        item = Item(key=key, value=value, arrival_index=arrival,
                    seq_index=len(positions) + 1)
        self.items.append(item)
        positions.append(arrival)
        sess_value = value[self.schema.session_dim]
        runs = self._sessions.setdefault(key, [])
        ords = self._session_ord.setdefault(key, [])
        if runs and runs[-1].value == sess_value:
            runs[-1].positions.append(arrival)
        else:
            runs.append(_Session(sess_value, arrival))
        ords.append(len(runs) - 1)
        return item

    def _trailing_run_before(self, key, i):
        """The trailing session of `key` as it stood just before arrival i.

        Returns (session value, positions < i) or None if the key had no
        items before i. Sessions only grow at their end, so the session of
        the key's last pre-i item, truncated to positions < i, is exactly
        the maximal equal-valued suffix at time i.
        """
        positions = self._key_positions.get(key)
        if not positions:
            return None
        last = bisect_left(positions, i) - 1
        if last < 0:
            return None
        run = self._sessions[key][self._session_ord[key][last]]
        cut = bisect_right(run.positions, positions[last])
        return run.value, run.positions[:cut]


def key_correlated(a, b):
    """True iff the two items share a key (byte-exact string equality)."""
    return a.key == b.key


def value_correlated(seq, i, j):
    """True iff item j sits in the trailing run of its own key (as of time i)
    whose session value equals item i's session value.

    Equivalent to: re-keying item i to item j's key and appending it to that
    key's sequence as observed up to time i would place both in one session.
    Requires j < i and different keys.
    """
    if j >= i:
        raise ValueError(f"value correlation needs j < i, got j={j}, i={i}")
    item_i, item_j = seq.item(i), seq.item(j)
    if item_i.key == item_j.key:
        raise ValueError("same-key pairs are handled by key correlation")
    trailing = seq._trailing_run_before(item_j.key, i)
    if trailing is None:
        return False
    run_value, run_positions = trailing
    if run_value != item_i.value[seq.schema.session_dim]:
        return False
    return j in run_positions


def mask_row(seq, i, window=None, key_correlation=True, value_correlation=True):
    """Visible arrival indices for row i of the dynamic mask, ascending.

    Row i contains i itself, prior same-key items (when key correlation is
    on), and prior items lying in another key's trailing equal-value session
    run (when value correlation is on) -- all restricted to the most recent
    `window` global positions when a window is given.
    """
    if not 1 <= i <= len(seq):
        raise IndexError(f"row {i} exceeds ingested length {len(seq)}")
    lo = 1 if window is None else max(1, i - window + 1)
    item_i = seq.item(i)
    visible = [i]
    if key_correlation:
        positions = seq._key_positions[item_i.key]
        start = bisect_left(positions, lo)
        stop = bisect_left(positions, i)
        visible.extend(positions[start:stop])
    if value_correlation:
        sess_value = item_i.value[seq.schema.session_dim]
        for key in seq._key_positions:
            if key == item_i.key:
                continue
            trailing = seq._trailing_run_before(key, i)
            if trailing is None or trailing[0] != sess_value:
                continue
            visible.extend(p for p in trailing[1] if p >= lo)
    visible.sort()
    return np.asarray(visible, dtype=np.int64)


class DynamicMask:
    """Row-wise causal visibility; entries addressed 1-based as (i, j)."""

    def __init__(self, rows, window=None):
        self.rows = [np.asarray(r, dtype=np.int64) for r in rows]
        self.window = window
        for i, row in enumerate(self.rows, start=1):
            if i not in row:
                raise ValueError(f"diagonal entry ({i},{i}) must be visible")
            if row.size and (row[0] < 1 or row[-1] > i):
                raise ValueError(f"row {i} breaks causality bounds")

    @property
    def t(self):
        return len(self.rows)

    def visible(self, i, j):
        if not (1 <= i <= self.t and j >= 1):
            raise IndexError(f"mask entry ({i},{j}) out of range")
        if j > i:
            return False
        row = self.rows[i - 1]
        pos = np.searchsorted(row, j)
        return pos < row.size and row[pos] == j

    def dense(self):
        """Boolean (t, t) matrix; [i-1, j-1] = visible(i, j)."""
        out = np.zeros((self.t, self.t), dtype=bool)
        for i, row in enumerate(self.rows):
            out[i, row - 1] = True
        return out

    def __eq__(self, other):
        if not isinstance(other, DynamicMask):
            return NotImplemented
        return self.t == other.t and all(
            np.array_equal(a, b) for a, b in zip(self.rows, other.rows)
        )


def assemble_mask(seq, t=None, window=None, key_correlation=True,
                  value_correlation=True):
    """DynamicMask for the first t items, assembled row by row via mask_row."""
    t = len(seq) if t is None else t
    rows = [
        mask_row(seq, i, window=window, key_correlation=key_correlation,
                 value_correlation=value_correlation)
        for i in range(1, t + 1)
    ]
    return DynamicMask(rows, window=window)


def mask_oracle(seq, t=None, window=None, key_correlation=True,
                value_correlation=True):
    """Brute-force mask recomputed per row from raw items alone.

    Carries no state across rows: for each row i it rebuilds every key's
    pre-i item list from scratch and re-derives the trailing run by backward
    scan, i.e. it simulates the re-key-and-re-segment definition directly.
    Ground truth for assemble_mask.
    """
    t = len(seq) if t is None else t
    sdim = seq.schema.session_dim
    items = [seq.item(i) for i in range(1, t + 1)]
    rows = []
    for i in range(1, t + 1):
        by_key_pos = {}
        by_key_val = {}
        for it in items[: i - 1]:
            by_key_pos.setdefault(it.key, []).append(it.arrival_index)
            by_key_val.setdefault(it.key, []).append(it.value[sdim])
        item_i = items[i - 1]
        sess_value = item_i.value[sdim]
        lo = 1 if window is None else max(1, i - window + 1)
        visible = [i]
        for key, positions in by_key_pos.items():
            values = by_key_val[key]
            if key == item_i.key:
                if key_correlation:
                    visible.extend(p for p in positions if p >= lo)
            elif value_correlation:
                if values[-1] != sess_value:
                    continue
                run_start = len(values) - 1
                while run_start > 0 and values[run_start - 1] == sess_value:
                    run_start -= 1
                visible.extend(p for p in positions[run_start:] if p >= lo)
        visible.sort()
        rows.append(np.asarray(visible, dtype=np.int64))
    return DynamicMask(rows, window=window)
