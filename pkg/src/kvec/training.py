"""Episode generation over tangled sequences, the three-part loss, and the
policy-gradient training loop.

An episode is one key's trajectory: states after each fused item, the
action taken at each state, the uniform +/-1 reward assigned at halt, and
suffix-sum returns. Episode generation walks the stream in arrival order in
blocks, fusing the current item of every live key as one batched step, so
the number of graph nodes grows with block count rather than item count.
Items belonging to already-halted keys stay visible to attention but are
never fused or acted on.

The loss is assembled after all of a tangle's episodes finish:

    classification   -sum_k log p_k[y_k]            (cross-entropy at halt)
    policy           -sum_k sum_i (R - b) log P(a|s) (REINFORCE, baseline
                                                      treated as constant)
    delay            -sum_k sum_i log P(Halt|s)      (earliness pressure)
    total            classification + alpha * policy + beta * delay

The baseline value net regresses onto the returns by MSE with its own
optimizer, from detached states, strictly after the main update.
"""

from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import halting as ht
from .encoder import ChunkedEncoder, fuse_batch
from .halting import HALT, WAIT

PROB_FLOOR = ht.PROB_FLOOR


def compute_returns(rewards):
    """Suffix sums excluding the current step: R[i] = sum of rewards after i."""
    if not rewards:
        raise ValueError("empty reward list")
    total = sum(rewards)
    out = []
    running = 0
    for r in rewards:
        running += r
        out.append(total - running)
    return out


@dataclass
class Episode:
    """One key's halt trajectory through a tangled sequence."""

    key: str
    truth: int
    predicted: int
    n: int
    seq_len: int
    halt_arrival: int
    actions: list
    rewards: list
    returns: list
    halt_probs: list
    dist: np.ndarray
    forced: bool

    def check(self):
        assert len(self.actions) == len(self.rewards) == len(self.returns) == self.n
        assert self.actions[-1] == HALT
        assert min(self.rewards) == max(self.rewards)
        assert self.returns[-1] == 0


@dataclass
class TapeBundle:
    """Tape handles gathered while generating one tangle's episodes."""

    policy_steps: list = field(default_factory=list)
    dist: nm.Tensor = None
    halt_keys: list = field(default_factory=list)
    states: np.ndarray = None
    state_map: list = field(default_factory=list)


class _KeyTrack:
    __slots__ = ("s", "cell", "step", "actions", "probs", "positions")

    def __init__(self, h, dtype):
        self.s = nm.Tensor(np.zeros((h, 1), dtype=dtype))
        self.cell = nm.Tensor(np.zeros((h, 1), dtype=dtype))
        self.step = 0
        self.actions = []
        self.probs = []
        self.positions = []


def _episode_pass(model, seq, mode="sample", rng=None, tape=False, param=None,
                  chunk=128, explore=0.0):
    """Generate episodes for every key of one tangled sequence.

    mode: 'sample' draws actions from the policy (training), 'threshold'
    halts at p >= 0.5, 'fixed' halts every key at step min(param, length),
    'confidence' halts when the classifier's top probability reaches param.
    With tape=True the returned TapeBundle carries graph handles for the
    loss; otherwise everything runs without building a graph.

    explore (sample mode only) mixes a uniform halt floor into the behavior
    policy: halt is drawn with probability explore + (1 - explore) * p. The
    loss still scores the model's own p, so the floor only widens the range
    of halt depths the classifier and baseline get trained on; without it a
    key class whose halt probability collapses to 0 becomes an absorbing
    state that no gradient can rescue (its halt states are never visited).
    """
    if mode not in ("sample", "threshold", "fixed", "confidence"):
        raise ValueError(f"unknown episode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs a random generator")
    if mode == "fixed" and (param is None or param < 1):
        raise ValueError("fixed mode needs a halting step >= 1")
    if mode == "confidence" and (param is None or not 0.0 <= param <= 1.0):
        raise ValueError("confidence mode needs a threshold in [0, 1]")
    if not 0.0 <= explore < 1.0:
        raise ValueError("explore must be in [0, 1)")
    seq.check_labels()
    cfg = model.config
    store = model.store
    h = cfg.fusion_width
    dtype = cfg.np_dtype
    all_keys = seq.keys()
    last_position = {k: seq.key_positions(k)[-1] for k in all_keys}

    bundle = TapeBundle() if tape else None
    tracks = {}
    halted = set()
    halt_entries = []          # (key, state tensor, dist column or None)
    state_cols = []
    guard = contextlib.nullcontext() if tape else nm.no_grad()
    with guard:
        encoder = ChunkedEncoder(seq, store, cfg, training=tape, rng=rng,
                                 chunk=chunk)
        pos = 1
        t_len = len(seq)
        while pos <= t_len and len(halted) < len(all_keys):
            block_end = min(pos + chunk - 1, t_len)
            per_key = {}
            for p in range(pos, block_end + 1):
                key = seq.item(p).key
                if key in halted:
                    continue
                per_key.setdefault(key, []).append(p)
            rounds = max((len(v) for v in per_key.values()), default=0)
            for j in range(rounds):
                entries = sorted(
                    (positions[j], key)
                    for key, positions in per_key.items()
                    if len(positions) > j and key not in halted
                )
                if not entries:
                    continue
                positions = [p for p, _ in entries]
                keys = [k for _, k in entries]
                for key in keys:
                    if key not in tracks:
                        tracks[key] = _KeyTrack(h, dtype)
                cols = encoder.columns(positions)
                s_in = nm.concat_cols([tracks[k].s for k in keys])
                c_in = nm.concat_cols([tracks[k].cell for k in keys])
                s_out, c_out = fuse_batch(s_in, c_in, cols, store)
                p_halt = ht.halt_probability(store, s_out)
                dist_here = None
                if mode == "confidence":
                    dist_here = ht.class_distribution(store, s_out)
                halt_flags = np.zeros(len(keys), dtype=bool)
                for col, (p_arr, key) in enumerate(entries):
                    track = tracks[key]
                    track.s = nm.slice_cols(s_out, col, col + 1)
                    track.cell = nm.slice_cols(c_out, col, col + 1)
                    track.step += 1
                    track.positions.append(p_arr)
                    prob = float(p_halt.data[0, col])
                    track.probs.append(prob)
                    if mode == "sample":
                        halts = rng.random() < explore + (1.0 - explore) * prob
                    elif mode == "threshold":
                        halts = prob >= 0.5
                    elif mode == "fixed":
                        halts = track.step >= param
                    else:
                        halts = float(dist_here.data[:, col].max()) >= param
                    forced = False
                    if not halts and p_arr == last_position[key]:
                        halts, forced = True, True
                    track.actions.append(HALT if halts else WAIT)
                    if halts:
                        halted.add(key)
                        halt_flags[col] = True
                        column = (None if dist_here is None
                                  else dist_here.data[:, col].copy())
                        halt_entries.append((key, track.s, column, forced))
                if tape:
                    bundle.policy_steps.append({
                        "p": p_halt,
                        "keys": keys,
                        "steps": [tracks[k].step for k in keys],
                        "halt": halt_flags,
                    })
                    state_cols.append(s_out.data.copy())
                    bundle.state_map.extend(
                        (k, tracks[k].step) for k in keys)
            pos = block_end + 1

        halt_states = nm.concat_cols([entry[1] for entry in halt_entries])
        if mode == "confidence":
            dist_data = np.stack([entry[2] for entry in halt_entries], axis=1)
            dist = nm.Tensor(dist_data)
        else:
            dist = ht.class_distribution(store, halt_states)
        preds = ht.predicted_labels(dist)

    episodes = []
    for idx, (key, _state, _dist_col, forced) in enumerate(halt_entries):
        track = tracks[key]
        truth = seq.labels[key]
        predicted = int(preds[idx])
        reward = ht.reward_of(predicted, truth, cfg.class_count)
        rewards = [reward] * track.step
        episodes.append(Episode(
            key=key,
            truth=truth,
            predicted=predicted,
            n=track.step,
            seq_len=seq.key_length(key),
            halt_arrival=track.positions[-1],
            actions=track.actions,
            rewards=rewards,
            returns=compute_returns(rewards),
            halt_probs=track.probs,
            dist=dist.data[:, idx].copy(),
            forced=forced,
        ))
    if tape:
        bundle.dist = dist
        bundle.halt_keys = [entry[0] for entry in halt_entries]
        bundle.states = np.concatenate(state_cols, axis=1)
    return episodes, bundle


def run_episode(model, seq, rng=None, mode="sample", param=None, chunk=128,
                explore=0.0):
    """Episodes for one tangled sequence, no gradient tape."""
    episodes, _ = _episode_pass(model, seq, mode=mode, rng=rng, param=param,
                                chunk=chunk, explore=explore)
    return episodes


@dataclass
class LossBreakdown:
    classification: float
    policy: float
    delay: float
    total: float


def loss_total(model, episodes, bundle, alpha, beta):
    """Assemble the combined loss on the tape -> (scalar tensor, breakdown).

    Baseline values enter only as constants inside the policy weights; the
    classifier term uses the batched halt distributions from the bundle.
    """
    by_key = {ep.key: ep for ep in episodes}
    truth_idx = np.array([by_key[k].truth - 1 for k in bundle.halt_keys])
    onehot = np.zeros(bundle.dist.shape, dtype=bundle.dist.dtype)
    onehot[truth_idx, np.arange(len(bundle.halt_keys))] = 1.0
    log_dist = nm.log(nm.clamp(bundle.dist, PROB_FLOOR, 1.0))
    l1 = nm.neg(nm.sum_all(nm.mul(nm.Tensor(onehot), log_dist)))

    with nm.no_grad():
        values = ht.baseline_value(model.baseline,
                                   nm.Tensor(bundle.states)).data[0]
    advantage = {}
    for (key, step), value in zip(bundle.state_map, values):
        advantage[(key, step)] = by_key[key].returns[step - 1] - float(value)

    l2 = None
    l3 = None
    for record in bundle.policy_steps:
        p = record["p"]
        log_halt = nm.log(p)
        log_wait = nm.log(nm.sub(nm.Tensor(np.ones((1, 1), dtype=p.dtype)), p))
        chose_halt = record["halt"].astype(p.dtype).reshape(1, -1)
        log_action = nm.add(nm.mul(nm.Tensor(chose_halt), log_halt),
                            nm.mul(nm.Tensor(1.0 - chose_halt), log_wait))
        weights = np.array([[advantage[(k, s)] for k, s in
                             zip(record["keys"], record["steps"])]],
                           dtype=p.dtype)
        l2_part = nm.neg(nm.sum_all(nm.mul(nm.Tensor(weights), log_action)))
        l3_part = nm.neg(nm.sum_all(log_halt))
        l2 = l2_part if l2 is None else nm.add(l2, l2_part)
        l3 = l3_part if l3 is None else nm.add(l3, l3_part)

    total = nm.add(l1, nm.add(nm.scale(l2, alpha), nm.scale(l3, beta)))
    breakdown = LossBreakdown(
        classification=l1.item(), policy=l2.item(), delay=l3.item(),
        total=total.item(),
    )
    return total, breakdown


def baseline_regression_step(model, states, targets, learning_rate):
    """One MSE regression step of the baseline net onto returns.

    states: (h, N) plain array (already detached); targets: length-N returns.
    Returns the pre-step MSE.
    """
    model.baseline.zero_grads()
    targets = np.asarray(targets, dtype=states.dtype).reshape(1, -1)
    pred = ht.baseline_value(model.baseline, nm.Tensor(states))
    diff = nm.sub(pred, nm.Tensor(targets))
    mse = nm.scale(nm.sum_all(nm.mul(diff, diff)), 1.0 / targets.size)
    value = mse.item()
    mse.backward()
    nm.adam_step(model.baseline, learning_rate)
    return value


def _bundle_targets(bundle, episodes):
    by_key = {ep.key: ep for ep in episodes}
    return [by_key[key].returns[step - 1] for key, step in bundle.state_map]


def episode_stats(episodes):
    """(accuracy, earliness) over one batch of episodes."""
    correct = sum(ep.predicted == ep.truth for ep in episodes)
    fraction = sum(ep.n / ep.seq_len for ep in episodes)
    return correct / len(episodes), fraction / len(episodes)


@dataclass
class TrainConfig:
    """Optimization knobs; model widths live in ModelConfig."""

    learning_rate: float = 1e-4
    baseline_learning_rate: float = 1e-4
    epochs: int = 100
    alpha: float = 0.1
    beta: float = 0.1
    update_every: int = 1
    seed: int = 0
    chunk: int = 128
    shuffle: bool = True
    explore: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.baseline_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.explore < 1.0:
            raise ValueError("explore must be in [0, 1)")


def train(model, tangles, config, on_epoch=None):
    """Policy-gradient training over a list of tangled sequences.

    Per tangled sequence: generate episodes, backpropagate the combined
    loss, Adam-step after every `update_every` sequences, then regress the
    baseline independently. Returns per-epoch history rows.
    """
    if not tangles:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    history = []
    order = list(range(len(tangles)))
    model.zero_grads()
    for epoch in range(1, config.epochs + 1):
        if config.shuffle:
            rng.shuffle(order)
        sums = np.zeros(4)
        correct = 0
        fraction = 0.0
        count = 0
        pending = 0
        for seq_idx in order:
            seq = tangles[seq_idx]
            episodes, bundle = _episode_pass(
                model, seq, mode="sample", rng=rng, tape=True,
                chunk=config.chunk, explore=config.explore)
            total, breakdown = loss_total(model, episodes, bundle,
                                          config.alpha, config.beta)
            if not np.isfinite(breakdown.total):
                raise nm.NumericalError(
                    f"non-finite loss at epoch {epoch}, tangled sequence "
                    f"{seq_idx}: classification={breakdown.classification}, "
                    f"policy={breakdown.policy}, delay={breakdown.delay}"
                )
            total.backward()
            pending += 1
            if pending == config.update_every:
                nm.adam_step(model.store, config.learning_rate)
                pending = 0
            baseline_regression_step(
                model, bundle.states, _bundle_targets(bundle, episodes),
                config.baseline_learning_rate)
            sums += (breakdown.classification, breakdown.policy,
                     breakdown.delay, breakdown.total)
            correct += sum(ep.predicted == ep.truth for ep in episodes)
            fraction += sum(ep.n / ep.seq_len for ep in episodes)
            count += len(episodes)
        if pending:
            nm.adam_step(model.store, config.learning_rate)
        row = {
            "epoch": epoch,
            "classification": sums[0] / len(order),
            "policy": sums[1] / len(order),
            "delay": sums[2] / len(order),
            "total": sums[3] / len(order),
            "accuracy": correct / count,
            "earliness": fraction / count,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(model, row)
    return history


# column names of the emitted history file; the three loss parts are written
# under their short wire names
HISTORY_COLUMNS = ("epoch", "l1", "l2", "l3", "total", "accuracy", "earliness")
_HISTORY_FIELD = {"l1": "classification", "l2": "policy", "l3": "delay"}


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(row[_HISTORY_FIELD.get(col, col)]
                            for col in HISTORY_COLUMNS)
