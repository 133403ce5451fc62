"""Streaming engine: incremental equality with batch encoding, cache
discipline, halting parity, and the speedup over prefix recomputation."""

import numpy as np
import pytest

from kvec.halting import HALT, WAIT
from kvec.streaming import (StreamEngine, stream_step, verify_equivalence,
                            benchmark_stream, naive_step_flops, _LayerCache)
from kvec.training import run_episode

from conftest import random_tangle, tiny_model


def stream_items(seq):
    return [(seq.item(i).key, seq.item(i).value)
            for i in range(1, len(seq) + 1)]


def feed(engine, seq):
    return [engine.step(key, value) for key, value in stream_items(seq)]


class TestLayerCache:
    def test_append_view_round_trip(self):
        cache = _LayerCache(3, np.float64, capacity=2)
        cols = [np.array([i, i + 0.5, -i]) for i in range(20)]
        for col in cols:
            cache.append(col)
        assert cache.count == 20
        assert np.array_equal(cache.view(1, 20), np.stack(cols, axis=1))
        assert np.array_equal(cache.view(7, 7)[:, 0], cols[6])

    def test_eviction_is_logical_and_compacts(self):
        cache = _LayerCache(2, np.float64, capacity=4)
        for i in range(300):
            cache.append(np.array([i, -i]))
            cache.evict_to(i - 3)
        assert cache.count <= 5
        assert cache._buf.shape[1] < 300
        assert np.array_equal(cache.view(298, 300)[0], [297, 298, 299])
        with pytest.raises(IndexError):
            cache.view(1, 2)


class TestStreamStep:
    def test_first_item_attends_only_to_itself(self):
        model = tiny_model(seed=1)
        engine = StreamEngine(model)
        outcome = engine.step("a", (0, 1, 100.0), collect_attention=True)
        assert outcome.step == 1
        assert len(outcome.attention) == model.config.blocks
        for weights in outcome.attention:
            assert weights.shape == (1, 1)
            assert weights[0, 0] == 1.0

    def test_outcome_fields_on_wait_and_halt(self):
        model = tiny_model(seed=1)
        model.store["policy.b"].data[:] = -20.0
        engine = StreamEngine(model)
        wait = engine.step("a", (0, 1, 100.0))
        assert wait.action == WAIT
        assert wait.label is None and wait.dist is None
        assert 0.0 < wait.p_halt < 0.5

        model = tiny_model(seed=1)
        model.store["policy.b"].data[:] = 20.0
        engine = StreamEngine(model)
        halt = engine.step("a", (0, 1, 100.0))
        assert halt.action == HALT
        assert halt.label in (1, 2)
        assert halt.confidence == pytest.approx(halt.dist.max())
        assert abs(halt.dist.sum() - 1.0) < 1e-12

    def test_items_after_halt_are_skipped_and_counted(self):
        model = tiny_model(seed=1)
        model.store["policy.b"].data[:] = 20.0
        engine = StreamEngine(model)
        rng = np.random.default_rng(3)
        seq = random_tangle(rng, 30, 3)
        outcomes = feed(engine, seq)
        halts = [o for o in outcomes if o.action == HALT]
        skips = [o for o in outcomes if o.skipped]
        assert len(halts) == len(seq.keys())
        assert len(skips) == 30 - len(halts)
        assert engine.stats.items == 30
        assert engine.stats.skipped == len(skips)
        assert engine.stats.halted == len(halts)
        for outcome in skips:
            assert outcome.action is None and outcome.p_halt is None
        # skipped items still extend the visible stream
        assert len(engine.seq) == 30

    def test_stream_step_accepts_tuples_and_items(self):
        model = tiny_model(seed=1)
        engine = StreamEngine(model)
        rng = np.random.default_rng(3)
        seq = random_tangle(rng, 4, 2)
        first = stream_step(engine, (seq.item(1).key, seq.item(1).value))
        second = stream_step(engine, seq.item(2))
        assert first.position == 1
        assert second.position == 2

    def test_cache_never_exceeds_window(self):
        model = tiny_model(seed=1, window=8)
        model.store["policy.b"].data[:] = -20.0
        engine = StreamEngine(model, cache_projections=True)
        rng = np.random.default_rng(5)
        seq = random_tangle(rng, 50, 4)
        feed(engine, seq)
        for cache in engine.caches:
            assert cache.count <= 8
        for k_cache, v_cache in engine.kv_caches:
            assert k_cache.count <= 8
            assert v_cache.count <= 8

    def test_per_step_work_is_flat_once_window_fills(self):
        model = tiny_model(seed=1, window=8)
        engine = StreamEngine(model)
        rng = np.random.default_rng(5)
        seq = random_tangle(rng, 40, 3)
        feed(engine, seq)
        flops = engine.flops
        assert len(set(flops[7:])) == 1
        assert all(a < b for a, b in zip(flops[:7], flops[1:8]))

    def test_naive_work_keeps_growing(self):
        cfg = tiny_model(seed=1).config
        assert naive_step_flops(cfg, 80) > 2 * naive_step_flops(cfg, 40)
        engine_like = [naive_step_flops(cfg, t) for t in (10, 20, 40, 80)]
        assert all(a < b for a, b in zip(engine_like, engine_like[1:]))


class TestEquivalence:
    def test_unwindowed_64bit_matches_batch(self):
        model = tiny_model(seed=2)
        rng = np.random.default_rng(7)
        seq = random_tangle(rng, 120, 5)
        report = verify_equivalence(model, seq)
        assert report.max_deviation <= 1e-9
        assert report.decisions_match
        assert len(report.rows) == 120
        assert report.rows[0]["deviation"] <= 1e-9

    def test_window_covering_stream_matches_batch(self):
        model = tiny_model(seed=2, window=256)
        rng = np.random.default_rng(8)
        seq = random_tangle(rng, 100, 4)
        report = verify_equivalence(model, seq)
        assert report.max_deviation <= 1e-9
        assert report.decisions_match

    def test_float32_stays_within_loose_tolerance(self):
        model = tiny_model(seed=2, dtype="float32")
        rng = np.random.default_rng(9)
        seq = random_tangle(rng, 200, 5)
        report = verify_equivalence(model, seq)
        assert report.max_deviation <= 1e-4

    def test_short_window_rejected(self):
        model = tiny_model(seed=2, window=8)
        rng = np.random.default_rng(7)
        seq = random_tangle(rng, 30, 3)
        with pytest.raises(ValueError, match="window"):
            verify_equivalence(model, seq)

    def test_value_ablated_model_also_matches(self):
        model = tiny_model(seed=2, value_correlation=False)
        rng = np.random.default_rng(10)
        seq = random_tangle(rng, 80, 4)
        report = verify_equivalence(model, seq)
        assert report.max_deviation <= 1e-9
        assert report.decisions_match


class TestHaltingParity:
    def check_parity(self, model, seq):
        engine = StreamEngine(model)
        outcomes = feed(engine, seq)
        by_key = {}
        for outcome in outcomes:
            if not outcome.skipped:
                by_key.setdefault(outcome.key, []).append(outcome)
        episodes = {ep.key: ep
                    for ep in run_episode(model, seq, mode="threshold")}
        assert set(by_key) == set(episodes)
        for key, episode in episodes.items():
            probs = [o.p_halt for o in by_key[key]]
            assert len(probs) == episode.n
            for stream_p, batch_p in zip(probs, episode.halt_probs):
                assert abs(stream_p - batch_p) <= 1e-9
            # the episode engine force-halts at a key's final item; a live
            # stream cannot know the key ended, so it stays waiting there
            last = by_key[key][-1]
            assert (last.action == HALT) == (not episode.forced)
            if last.action == HALT:
                assert last.label == episode.predicted

    def test_parity_unwindowed(self):
        model = tiny_model(seed=3)
        rng = np.random.default_rng(11)
        seq = random_tangle(rng, 90, 4, labeled=True)
        self.check_parity(model, seq)

    def test_parity_with_eviction_inside_window(self):
        # window far shorter than the stream: eviction must not disturb
        # positions whose visible set lies inside the window
        model = tiny_model(seed=3, window=8)
        rng = np.random.default_rng(12)
        seq = random_tangle(rng, 80, 4, labeled=True)
        self.check_parity(model, seq)


class TestProjectionCache:
    def test_agrees_with_recompute_path(self):
        rng = np.random.default_rng(13)
        seq = random_tangle(rng, 60, 4)
        plain = StreamEngine(tiny_model(seed=4))
        cached = StreamEngine(tiny_model(seed=4), cache_projections=True)
        for plain_out, cached_out in zip(feed(plain, seq), feed(cached, seq)):
            assert plain_out.skipped == cached_out.skipped
            if plain_out.skipped:
                continue
            assert abs(plain_out.p_halt - cached_out.p_halt) <= 1e-9
            assert plain_out.action == cached_out.action


class TestBenchmark:
    def test_streaming_at_least_twice_as_fast(self):
        model = tiny_model(seed=5, d=16, ffn_width=32, blocks=2)
        rng = np.random.default_rng(14)
        seq = random_tangle(rng, 120, 5)
        result = benchmark_stream(model, seq)
        assert result["items"] == 120
        assert result["speedup"] >= 2.0
        assert result["naive_macs"] > 2 * result["stream_macs"]
