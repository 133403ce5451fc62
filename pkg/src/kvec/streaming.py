"""Real-time inference over a live stream: one new encoder column per item.

Every earlier column is immutable because the mask is causal, so the engine
keeps per-layer caches of already-computed columns and, for each arriving
item, computes exactly one attention row per block against the cached
context window, one FFN column, one fusion step, and one policy decision.
Work per item is O(blocks * window * d) and flat once the window fills; the
naive alternative re-encodes the whole prefix at every timestamp.

Items for keys that already halted still enter the stream and the caches
(they remain visible context for other keys) but trigger no fusion or
decision; they are counted in the engine stats.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import halting as ht
from .sequence import TangledSequence, mask_row, assemble_mask
from .encoder import (assign_slots, input_embedding, additive_mask, _attend,
                      attention_stack, zero_state, fuse_batch)


class _LayerCache:
    """Append-only column store with logical FIFO eviction.

    Columns are indexed by 1-based global arrival position. Eviction is
    logical (advances `lo`); the physical buffer compacts once the dead
    prefix outgrows the live region, so memory stays O(window).
    """

    def __init__(self, d, dtype, capacity=64):
        self._buf = np.empty((d, capacity), dtype=dtype)
        self._base = 1
        self.lo = 1
        self.hi = 0

    @property
    def count(self):
        return self.hi - self.lo + 1

    def append(self, col):
        used = self.hi - self._base + 1
        if used == self._buf.shape[1]:
            dead = self.lo - self._base
            if dead > max(64, self.count):
                self._buf[:, :self.count] = self._buf[:, dead:dead + self.count]
                self._base = self.lo
            else:
                bigger = np.empty((self._buf.shape[0], 2 * self._buf.shape[1]),
                                  dtype=self._buf.dtype)
                bigger[:, :used] = self._buf[:, :used]
                self._buf = bigger
            used = self.hi - self._base + 1
        self._buf[:, used] = col
        self.hi += 1

    def evict_to(self, lo):
        if lo > self.lo:
            self.lo = min(lo, self.hi + 1)

    def view(self, a, b):
        """Columns for global positions a..b inclusive -> (d, b - a + 1)."""
        if a < self.lo or b > self.hi:
            raise IndexError(f"positions {a}..{b} outside cached "
                             f"{self.lo}..{self.hi}")
        return self._buf[:, a - self._base:b - self._base + 1]


@dataclass
class StepOutcome:
    """Result of feeding one item to the engine."""

    key: str
    position: int
    step: int
    action: str = None
    p_halt: float = None
    label: int = None
    confidence: float = None
    dist: np.ndarray = None
    skipped: bool = False
    attention: list = None


@dataclass
class StreamStats:
    items: int = 0
    skipped: int = 0
    halted: int = 0


class StreamEngine:
    """Single-stream incremental encoder + halting policy over a frozen model.

    `cache_projections=True` additionally caches each layer's K/V projection
    columns, trading memory for the per-step projection recompute.
    """

    def __init__(self, model, cache_projections=False):
        self.model = model
        cfg = model.config
        self.seq = TangledSequence(cfg.schema)
        self.slots = {}
        self.states = {}
        self.halted = {}
        self.stats = StreamStats()
        self.caches = [_LayerCache(cfg.d, cfg.np_dtype)
                       for _ in range(cfg.blocks + 1)]
        self.cache_projections = cache_projections
        if cache_projections:
            self.kv_caches = [(_LayerCache(cfg.d, cfg.np_dtype),
                               _LayerCache(cfg.d, cfg.np_dtype))
                              for _ in range(cfg.blocks)]
        self.flops = []

    def _encode_column(self, t, collect=None):
        """One new column through every block; returns the top column (d, 1)."""
        cfg = self.model.config
        store = self.model.store
        window = cfg.window
        a = 1 if window is None else max(1, t - window + 1)
        m = t - a + 1
        visible = mask_row(self.seq, t, window=window,
                           key_correlation=cfg.key_correlation,
                           value_correlation=cfg.value_correlation)
        row = additive_mask([np.asarray(visible)], a - 1, m, cfg.np_dtype)

        e0 = input_embedding(self.seq, [t], store, cfg, self.slots)
        self.caches[0].append(e0.data[:, 0])
        x_query = e0
        macs = 0
        for b in range(cfg.blocks):
            prefix = f"block{b}"
            if self.cache_projections:
                k_cache, v_cache = self.kv_caches[b]
                k_cache.append(nm.matmul(store[f"{prefix}.wk"],
                                         x_query).data[:, 0])
                v_cache.append(nm.matmul(store[f"{prefix}.wv"],
                                         x_query).data[:, 0])
                q = nm.matmul(store[f"{prefix}.wq"], x_query)
                k = nm.Tensor(k_cache.view(a, t))
                v = nm.Tensor(v_cache.view(a, t))
                scores = nm.scale(nm.matmul(nm.transpose(q), k),
                                  1.0 / np.sqrt(cfg.d))
                weights = nm.masked_softmax(scores, row)
                if collect is not None:
                    collect.append(weights.data.copy())
                attended = nm.matmul(v, nm.transpose(weights))
                if cfg.residual:
                    attended = nm.add(attended, x_query)
                hidden = nm.relu(nm.add(
                    nm.matmul(store[f"{prefix}.ffn.w1"], attended),
                    store[f"{prefix}.ffn.b1"]))
                out = nm.add(nm.matmul(store[f"{prefix}.ffn.w2"], hidden),
                             store[f"{prefix}.ffn.b2"])
                if cfg.residual:
                    out = nm.add(out, attended)
                macs += cfg.d * cfg.d * 3 + 2 * cfg.d * m
            else:
                x_ctx = nm.Tensor(self.caches[b].view(a, t))
                out = _attend(x_ctx, x_query, row, store, prefix, cfg,
                              False, None, collect=collect)
                if collect is not None:
                    collect[-1] = collect[-1].data.copy()
                macs += cfg.d * cfg.d * (1 + 2 * m) + 2 * cfg.d * m
            macs += 2 * cfg.d * cfg.ffn_width
            self.caches[b + 1].append(out.data[:, 0])
            x_query = out
        if window is not None:
            for cache in self.caches:
                cache.evict_to(t - window + 1)
            if self.cache_projections:
                for k_cache, v_cache in self.kv_caches:
                    k_cache.evict_to(t - window + 1)
                    v_cache.evict_to(t - window + 1)
        self.flops.append(macs)
        return x_query

    def step(self, key, value, collect_attention=False):
        """Feed one item; encode it; decide for its key unless already halted."""
        cfg = self.model.config
        store = self.model.store
        self.stats.items += 1
        with nm.no_grad():
            item = self.seq.ingest(key, value)
            if key not in self.slots:
                self.slots[key] = len(self.slots) % cfg.slot_count
            collect = [] if collect_attention else None
            top = self._encode_column(item.arrival_index, collect=collect)
            if key in self.halted:
                self.stats.skipped += 1
                return StepOutcome(key=key, position=item.arrival_index,
                                   step=self.states[key].n, skipped=True,
                                   attention=collect)
            state = self.states.get(key)
            if state is None:
                state = self.states[key] = zero_state(cfg)
            state.s, state.cell = fuse_batch(state.s, state.cell, top, store)
            state.n += 1
            p = ht.halt_probability(store, state.s).item()
            outcome = StepOutcome(key=key, position=item.arrival_index,
                                  step=state.n, p_halt=p, attention=collect)
            if p >= 0.5:
                dist, label = ht.classify(store, state.s)
                outcome.action = ht.HALT
                outcome.label = label
                outcome.dist = dist.data[:, 0].copy()
                outcome.confidence = float(outcome.dist.max())
                self.halted[key] = label
                state.halted = True
                self.stats.halted += 1
            else:
                outcome.action = ht.WAIT
        return outcome

    def run(self, items):
        """Feed (key, value) pairs in order; return every outcome."""
        return [self.step(key, value) for key, value in items]


def stream_step(engine, item):
    """Feed one (key, value) pair (or an object with .key/.value)."""
    if isinstance(item, tuple):
        key, value = item
    else:
        key, value = item.key, item.value
    return engine.step(key, value)


def naive_step_flops(config, t):
    """Analytic multiply-accumulate count of re-encoding a t-item prefix."""
    d, ffn = config.d, config.ffn_width
    return config.blocks * (3 * d * d * t + 2 * d * t * t + 2 * d * ffn * t)


@dataclass
class EquivalenceReport:
    max_deviation: float
    layer_deviation: list
    state_deviation: float
    prob_deviation: float
    dist_deviation: float
    decisions_match: bool
    rows: list = field(default_factory=list)


def _batch_walk(model, seq, layers):
    """Batch-mode per-key fusion walk over precomputed encoder layers.

    Returns per-position (key, step, state vector, halt prob) for live keys
    and the per-key (halt position, label, distribution).
    """
    cfg = model.config
    store = model.store
    states = {}
    halted = {}
    steps = []
    top = layers[-1]
    with nm.no_grad():
        for pos in range(1, len(seq) + 1):
            key = seq.item(pos).key
            if key in halted:
                steps.append(None)
                continue
            state = states.get(key)
            if state is None:
                state = states[key] = zero_state(cfg)
            col = nm.slice_cols(top, pos - 1, pos)
            state.s, state.cell = fuse_batch(state.s, state.cell, col, store)
            state.n += 1
            p = ht.halt_probability(store, state.s).item()
            steps.append((key, state.n, state.s.data[:, 0].copy(), p))
            if p >= 0.5:
                dist, label = ht.classify(store, state.s)
                halted[key] = (pos, label, dist.data[:, 0].copy())
    return steps, halted


def verify_equivalence(model, seq, tolerance=1e-9):
    """Run streaming and batch modes side by side over one tangled sequence.

    Requires an unwindowed model or window >= stream length so both paths
    see identical context. Returns an EquivalenceReport; callers assert on
    max_deviation <= tolerance and decisions_match.
    """
    cfg = model.config
    t = len(seq)
    if cfg.window is not None and cfg.window < t:
        raise ValueError(
            f"window {cfg.window} shorter than stream length {t}; "
            "equivalence needs identical context")

    engine = StreamEngine(model)
    stream_outcomes = [engine.step(item.key, item.value)
                       for item in (seq.item(i) for i in range(1, t + 1))]

    with nm.no_grad():
        slots = assign_slots(seq, cfg.slot_count)
        e0 = input_embedding(seq, range(1, t + 1), model.store, cfg, slots)
        mask = assemble_mask(seq, window=cfg.window,
                             key_correlation=cfg.key_correlation,
                             value_correlation=cfg.value_correlation)
        layers = attention_stack(e0, mask, model.store, cfg,
                                 return_layers=True)
    batch_steps, batch_halts = _batch_walk(model, seq, layers)

    layer_dev = []
    per_position = np.zeros(t)
    for idx, layer in enumerate(layers):
        cached = engine.caches[idx].view(1, t)
        diff = np.abs(layer.data - cached).max(axis=0)
        per_position = np.maximum(per_position, diff)
        layer_dev.append(float(diff.max()) if t else 0.0)

    state_dev = 0.0
    prob_dev = 0.0
    decisions_match = True
    for pos, (batch, outcome) in enumerate(zip(batch_steps, stream_outcomes),
                                           start=1):
        if batch is None or outcome.skipped:
            decisions_match &= batch is None and outcome.skipped
            continue
        key, step, s, p = batch
        decisions_match &= key == outcome.key and step == outcome.step
        engine_state = engine.states[key]
        if step == engine_state.n:
            state_dev = max(state_dev,
                            float(np.abs(s - engine_state.s.data[:, 0]).max()))
        gap = abs(p - outcome.p_halt)
        prob_dev = max(prob_dev, gap)
        per_position[pos - 1] = max(per_position[pos - 1], gap)
        decisions_match &= (p >= 0.5) == (outcome.action == ht.HALT)

    dist_dev = 0.0
    stream_halts = {o.key: o for o in stream_outcomes
                    if o.action == ht.HALT}
    decisions_match &= set(stream_halts) == set(batch_halts)
    for key, (pos, label, dist) in batch_halts.items():
        outcome = stream_halts.get(key)
        if outcome is None:
            continue
        decisions_match &= outcome.position == pos and outcome.label == label
        dist_dev = max(dist_dev, float(np.abs(dist - outcome.dist).max()))

    rows = [{"position": i + 1, "deviation": float(per_position[i])}
            for i in range(t)]
    return EquivalenceReport(
        max_deviation=float(max(max(layer_dev, default=0.0), state_dev,
                                prob_dev, dist_dev)),
        layer_deviation=layer_dev,
        state_deviation=state_dev,
        prob_deviation=prob_dev,
        dist_deviation=dist_dev,
        decisions_match=bool(decisions_match),
        rows=rows,
    )


def benchmark_stream(model, seq):
    """Wall-clock streaming vs re-encoding the whole prefix every timestamp.

    The strawman rebuilds embeddings, mask, and the full attention stack for
    positions 1..t at every arrival t, reading only the newest column; the
    engine does incremental work. Returns timing and analytic counts.
    """
    cfg = model.config
    items = [(seq.item(i).key, seq.item(i).value)
             for i in range(1, len(seq) + 1)]

    engine = StreamEngine(model)
    start = time.perf_counter()
    for key, value in items:
        engine.step(key, value)
    stream_seconds = time.perf_counter() - start

    prefix = TangledSequence(cfg.schema)
    start = time.perf_counter()
    with nm.no_grad():
        for key, value in items:
            prefix.ingest(key, value)
            t = len(prefix)
            slots = assign_slots(prefix, cfg.slot_count)
            e0 = input_embedding(prefix, range(1, t + 1), model.store, cfg,
                                 slots)
            mask = assemble_mask(prefix, window=cfg.window,
                                 key_correlation=cfg.key_correlation,
                                 value_correlation=cfg.value_correlation)
            attention_stack(e0, mask, model.store, cfg)
    naive_seconds = time.perf_counter() - start

    return {
        "items": len(items),
        "stream_seconds": stream_seconds,
        "naive_seconds": naive_seconds,
        "speedup": naive_seconds / stream_seconds,
        "stream_macs": int(sum(engine.flops)),
        "naive_macs": int(sum(naive_step_flops(cfg, t)
                              for t in range(1, len(items) + 1))),
    }
