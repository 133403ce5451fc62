"""Tangled-sequence encoder: summed input embeddings, masked attention
blocks with position-wise FFNs, and the gated fusion cell that folds each
key's embedding columns into a per-key state vector.

Matrices are column-major over positions: an embedding matrix is (d, t)
with one column per item. Two encoding paths share the same math:

- `attention_stack` materializes the whole (t, t) attention problem; the
  readable reference used by tests and the streaming equivalence check.
- `ChunkedEncoder` computes columns lazily in chunks, attending only over
  the visibility window, so long tangled streams cost O(t * W) not O(t^2).
  Prefix stability (causal masking) makes the two paths agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .sequence import mask_row, DynamicMask


def assign_slots(seq, slot_count):
    """Key -> membership slot, in first-appearance order, wrapping modulo
    slot_count so unseen keys never overflow the table."""
    slots = {}
    for item in seq.items:
        if item.key not in slots:
            slots[item.key] = len(slots) % slot_count
    return slots


def _standardize(value, stats):
    mean, std = stats
    return (value - mean) / std


def input_embedding(seq, positions, store, config, slots):
    """Summed embedding columns for the given 1-based positions -> (d, n).

    Each column is the sum of per-dimension value embeddings, the key's
    membership embedding, the relative-position embedding at the item's
    within-key index, and the time embedding at its arrival index. Position
    and time lookups clamp to the last table row beyond range.
    """
    positions = list(positions)
    items = [seq.item(i) for i in positions]
    dtype = config.np_dtype
    total = None

    def accumulate(part):
        nonlocal total
        total = part if total is None else nm.add(total, part)

    for dim, spec in enumerate(seq.schema.dims):
        if spec.is_categorical:
            codes = np.array([it.value[dim] for it in items], dtype=np.int64)
            accumulate(nm.gather_cols(store[f"emb.value{dim}"], codes))
        else:
            stats = config.numeric_stats[dim]
            row = np.array(
                [[_standardize(it.value[dim], stats) for it in items]],
                dtype=dtype,
            )
            part = nm.matmul(store[f"emb.value{dim}.w"], nm.Tensor(row))
            accumulate(nm.add(part, store[f"emb.value{dim}.b"]))

    member_idx = np.array([slots[it.key] for it in items], dtype=np.int64)
    accumulate(nm.gather_cols(store["emb.member"], member_idx))

    rel_idx = np.array(
        [min(it.seq_index, config.max_seq_pos) - 1 for it in items],
        dtype=np.int64,
    )
    accumulate(nm.gather_cols(store["emb.relpos"], rel_idx))

    time_idx = np.array(
        [min(it.arrival_index, config.time_table_size) - 1 for it in items],
        dtype=np.int64,
    )
    accumulate(nm.gather_cols(store["emb.time"], time_idx))
    return total


def additive_mask(visible_rows, col_lo, col_count, dtype):
    """Dense additive mask from 1-based visible index arrays.

    Row r gets 0.0 at local column (j - 1 - col_lo) for each visible global
    position j, and the finite sentinel elsewhere.
    """
    mask = np.full((len(visible_rows), col_count), nm.sentinel(dtype), dtype=dtype)
    for r, row in enumerate(visible_rows):
        mask[r, row - 1 - col_lo] = 0.0
    return mask


def _attend(x_ctx, x_query, mask, store, prefix, config, training, rng,
            collect=None):
    """One block applied to query columns against context columns."""
    q = nm.matmul(store[f"{prefix}.wq"], x_query)
    k = nm.matmul(store[f"{prefix}.wk"], x_ctx)
    v = nm.matmul(store[f"{prefix}.wv"], x_ctx)
    scores = nm.scale(nm.matmul(nm.transpose(q), k), 1.0 / math.sqrt(config.d))
    weights = nm.masked_softmax(scores, mask)
    if collect is not None:
        collect.append(weights)
    attended = nm.matmul(v, nm.transpose(weights))
    if config.residual:
        attended = nm.add(attended, x_query)
    hidden = nm.relu(nm.add(nm.matmul(store[f"{prefix}.ffn.w1"], attended),
                            store[f"{prefix}.ffn.b1"]))
    out = nm.add(nm.matmul(store[f"{prefix}.ffn.w2"], hidden),
                 store[f"{prefix}.ffn.b2"])
    if config.residual:
        out = nm.add(out, attended)
    if training and config.dropout > 0.0:
        out = nm.dropout(out, config.dropout, rng)
    return out


def attention_stack(e0, mask, store, config, training=False, rng=None,
                    collect_attention=None, return_layers=False):
    """Reference full-matrix encoder: all blocks over all t columns at once.

    `mask` is a DynamicMask (or a prebuilt additive array). Column i of the
    output depends only on columns visible in row i, every block.
    """
    if isinstance(mask, DynamicMask):
        if mask.t != e0.shape[1]:
            raise ValueError(
                f"mask covers {mask.t} items, embeddings carry {e0.shape[1]}"
            )
        mask = additive_mask(mask.rows, 0, mask.t, config.np_dtype)
    elif mask.shape != (e0.shape[1], e0.shape[1]):
        raise ValueError(f"additive mask shape {mask.shape} does not match t")
    layers = [e0]
    x = e0
    for b in range(config.blocks):
        x = _attend(x, x, mask, store, f"block{b}", config, training, rng,
                    collect=collect_attention)
        layers.append(x)
    return layers if return_layers else x


class ChunkedEncoder:
    """Lazy, windowed, tape-compatible encoder over one tangled sequence.

    Columns are computed once, in order, chunk by chunk; each layer keeps
    its computed output columns so later chunks attend over cached context.
    With a window W the context never exceeds W columns, and prefix
    stability guarantees agreement with `attention_stack`.
    """

    def __init__(self, seq, store, config, training=False, rng=None,
                 chunk=128):
        self.seq = seq
        self.store = store
        self.config = config
        self.training = training
        self.rng = rng
        self.chunk = chunk
        self.slots = assign_slots(seq, config.slot_count)
        self._done = 0
        # one chunk list per layer; layer 0 is the input embedding
        self._chunks = [[] for _ in range(config.blocks + 1)]
        self._offsets = [[] for _ in range(config.blocks + 1)]

    def _cols(self, layer, lo, hi):
        """Concatenate computed columns [lo, hi) (0-based) of a layer."""
        pieces = []
        for off, tensor in zip(self._offsets[layer], self._chunks[layer]):
            width = tensor.shape[1]
            a, b = max(lo, off), min(hi, off + width)
            if a >= b:
                continue
            if a == off and b == off + width:
                pieces.append(tensor)
            else:
                pieces.append(nm.slice_cols(tensor, a - off, b - off))
        if not pieces:
            raise ValueError(f"no computed columns in [{lo}, {hi})")
        return pieces[0] if len(pieces) == 1 else nm.concat_cols(pieces)

    def ensure(self, t):
        """Compute final-layer columns through position t (1-based)."""
        if t > len(self.seq):
            raise IndexError(f"position {t} beyond ingested length {len(self.seq)}")
        while self._done < t:
            self._advance(min(self.chunk, t - self._done))

    def _advance(self, n):
        cfg = self.config
        lo = self._done
        hi = lo + n
        positions = range(lo + 1, hi + 1)
        e0 = input_embedding(self.seq, positions, self.store, cfg, self.slots)
        self._chunks[0].append(e0)
        self._offsets[0].append(lo)
        window = cfg.window
        ctx_lo = 0 if window is None else max(0, lo - (window - 1))
        rows = [
            mask_row(self.seq, i, window=window,
                     key_correlation=cfg.key_correlation,
                     value_correlation=cfg.value_correlation)
            for i in positions
        ]
        mask = additive_mask(rows, ctx_lo, hi - ctx_lo, cfg.np_dtype)
        for b in range(cfg.blocks):
            x_ctx = self._cols(b, ctx_lo, hi)
            x_query = (x_ctx if ctx_lo == lo
                       else nm.slice_cols(x_ctx, lo - ctx_lo, hi - ctx_lo))
            out = _attend(x_ctx, x_query, mask, self.store, f"block{b}", cfg,
                          self.training, self.rng)
            self._chunks[b + 1].append(out)
            self._offsets[b + 1].append(lo)
        self._done = hi

    def column(self, i, layer=None):
        """Final-layer (default) embedding column for position i -> (d, 1)."""
        self.ensure(i)
        layer = self.config.blocks if layer is None else layer
        return self._cols(layer, i - 1, i)

    def columns(self, indices, layer=None):
        """Batched lookup -> (d, len(indices)), tape-connected."""
        top = max(indices)
        self.ensure(top)
        layer = self.config.blocks if layer is None else layer
        cols = [self._cols(layer, i - 1, i) for i in indices]
        return cols[0] if len(cols) == 1 else nm.concat_cols(cols)


# ------------------------------------------------------------------- fusion

@dataclass
class SequenceState:
    """Per-key running state: representation s, memory cell, item count."""

    s: nm.Tensor
    cell: nm.Tensor
    n: int = 0
    halted: bool = False


def zero_state(config):
    h = config.fusion_width
    dtype = config.np_dtype
    return SequenceState(
        s=nm.Tensor(np.zeros((h, 1), dtype=dtype)),
        cell=nm.Tensor(np.zeros((h, 1), dtype=dtype)),
    )


def fuse_batch(s, cell, e, store):
    """Gated fusion of embedding columns into states, batched over columns.

    s, cell: (h, B); e: (d, B). Gates f, i, o and the candidate all read the
    concatenated [state; embedding] input. Returns (s', cell').
    """
    z = nm.concat_rows([s, e])
    f = nm.sigmoid(nm.affine(z, store["fuse.wf"], store["fuse.bf"]))
    i = nm.sigmoid(nm.affine(z, store["fuse.wi"], store["fuse.bi"]))
    o = nm.sigmoid(nm.affine(z, store["fuse.wo"], store["fuse.bo"]))
    cand = nm.tanh(nm.affine(z, store["fuse.wc"], store["fuse.bc"]))
    new_cell = nm.add(nm.mul(f, cell), nm.mul(i, cand))
    new_s = nm.mul(o, nm.tanh(new_cell))
    return new_s, new_cell


def fuse(state, e, store):
    """Fold one embedding column into one key's state -> new SequenceState."""
    if state.halted:
        raise ValueError("cannot fuse into a halted sequence state")
    if e.shape[0] != store["fuse.wf"].shape[1] - state.s.shape[0]:
        raise ValueError(
            f"embedding width {e.shape[0]} does not match fusion input"
        )
    new_s, new_cell = fuse_batch(state.s, state.cell, e, store)
    return replace(state, s=new_s, cell=new_cell, n=state.n + 1)


def encode_step(store, config, seq, t, states):
    """Reference single-step encoding: recompute the full prefix through t,
    fuse column t into its key's state (in `states`, keyed by key).

    The batch-replay semantics the streaming engine must match. Other keys'
    states are untouched.
    """
    item = seq.item(t)
    state = states.get(item.key)
    if state is None:
        state = zero_state(config)
    if state.halted:
        raise ValueError(f"key {item.key!r} already halted")
    slots = assign_slots(seq, config.slot_count)
    e0 = input_embedding(seq, range(1, t + 1), store, config, slots)
    mask = additive_mask(
        [mask_row(seq, i, window=config.window,
                  key_correlation=config.key_correlation,
                  value_correlation=config.value_correlation)
         for i in range(1, t + 1)],
        0, t, config.np_dtype,
    )
    final = attention_stack(e0, mask, store, config)
    column = nm.slice_cols(final, t - 1, t)
    states[item.key] = fuse(state, column, store)
    return states[item.key]
