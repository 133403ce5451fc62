"""Episode generation, loss assembly, baseline regression, and the train loop."""

import csv
import math

import numpy as np
import pytest

import kvec.numerics as nm
import kvec.training as tr
from kvec.halting import HALT, WAIT
from kvec.training import (Episode, TrainConfig, compute_returns, loss_total,
                           run_episode, train, _episode_pass,
                           baseline_regression_step, episode_stats,
                           write_history)

from conftest import random_tangle, tiny_model


def labeled_tangle(seed=0, length=48, n_keys=4):
    rng = np.random.default_rng(seed)
    return random_tangle(rng, length, n_keys, labeled=True)


def set_policy_bias(model, value):
    model.store["policy.b"].data[:] = value


def zero_baseline(model):
    for name in ("baseline.w1", "baseline.b1", "baseline.w2", "baseline.b2"):
        model.baseline[name].data[:] = 0.0


class TestReturns:
    def test_positive_rewards(self):
        assert compute_returns([1, 1, 1]) == [2, 1, 0]

    def test_negative_rewards(self):
        assert compute_returns([-1, -1, -1]) == [-2, -1, 0]

    def test_single_step(self):
        assert compute_returns([5]) == [0]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_returns([])

    def test_last_return_always_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            rewards = [int(r) for r in rng.integers(-3, 4, size=rng.integers(1, 9))]
            assert compute_returns(rewards)[-1] == 0


class TestEpisodeGeneration:
    def test_invariants_under_sampling(self):
        model = tiny_model(seed=1)
        seq = labeled_tangle(seed=2)
        episodes = run_episode(model, seq, rng=np.random.default_rng(7))
        assert {ep.key for ep in episodes} == set(seq.keys())
        for ep in episodes:
            ep.check()
            assert 1 <= ep.n <= ep.seq_len
            assert ep.halt_arrival == seq.key_positions(ep.key)[ep.n - 1]
            assert len(ep.halt_probs) == ep.n
            assert all(0.0 < p < 1.0 for p in ep.halt_probs)
            assert ep.dist.shape == (2,)
            assert abs(ep.dist.sum() - 1.0) < 1e-12

    def test_high_bias_halts_every_key_at_first_item(self):
        model = tiny_model(seed=1)
        set_policy_bias(model, 20.0)
        seq = labeled_tangle(seed=2)
        for ep in run_episode(model, seq, mode="threshold"):
            assert ep.n == 1
            assert ep.actions == [HALT]
            assert not ep.forced or ep.seq_len == 1
            assert ep.halt_arrival == seq.key_positions(ep.key)[0]

    def test_low_bias_forces_halt_at_sequence_end(self):
        model = tiny_model(seed=1)
        set_policy_bias(model, -20.0)
        seq = labeled_tangle(seed=2)
        for ep in run_episode(model, seq, mode="threshold"):
            assert ep.n == ep.seq_len
            assert ep.forced
            assert ep.actions[-1] == HALT
            assert all(a == WAIT for a in ep.actions[:-1])
            assert ep.halt_arrival == seq.key_positions(ep.key)[-1]

    def test_rewards_match_prediction_and_are_uniform(self):
        model = tiny_model(seed=5)
        seq = labeled_tangle(seed=6)
        for ep in run_episode(model, seq, rng=np.random.default_rng(1)):
            expected = 1 if ep.predicted == ep.truth else -1
            assert set(ep.rewards) == {expected}
            assert ep.returns == [expected * (ep.n - i) for i in range(1, ep.n + 1)]

    def test_sampling_is_seed_deterministic(self):
        def trial():
            model = tiny_model(seed=3)
            seq = labeled_tangle(seed=4)
            return run_episode(model, seq, rng=np.random.default_rng(11))

        first, second = trial(), trial()
        for a, b in zip(first, second):
            assert (a.key, a.n, a.actions, a.predicted) == \
                (b.key, b.n, b.actions, b.predicted)
            assert a.halt_probs == b.halt_probs
            assert np.array_equal(a.dist, b.dist)

    def test_fixed_mode_halts_at_tau(self):
        model = tiny_model(seed=1)
        set_policy_bias(model, -20.0)
        seq = labeled_tangle(seed=2)
        for ep in run_episode(model, seq, mode="fixed", param=3):
            assert ep.n == min(3, ep.seq_len)
            assert ep.actions[-1] == HALT

    def test_explore_floor_halts_despite_collapsed_policy(self):
        # A policy whose halt probability has collapsed to ~0 never visits
        # mid-sequence halt states; the explore floor keeps sampling them
        # while halt_probs still record the model's own probabilities.
        model = tiny_model(seed=1)
        set_policy_bias(model, -20.0)
        seq = labeled_tangle(seed=2, length=60)
        rng = np.random.default_rng(0)
        plain = run_episode(model, seq, rng=rng)
        assert all(ep.n == ep.seq_len and ep.forced for ep in plain)

        rng = np.random.default_rng(0)
        floored = run_episode(model, seq, rng=rng, explore=0.5)
        assert any(ep.n < ep.seq_len for ep in floored)
        for ep in floored:
            assert all(p < 1e-6 for p in ep.halt_probs)

    def test_explore_zero_reproduces_default_sampling(self):
        def trial(**kwargs):
            model = tiny_model(seed=3)
            seq = labeled_tangle(seed=4)
            return run_episode(model, seq, rng=np.random.default_rng(11),
                               **kwargs)

        for a, b in zip(trial(), trial(explore=0.0)):
            assert (a.key, a.n, a.actions) == (b.key, b.n, b.actions)

    def test_explore_validation(self):
        model = tiny_model()
        seq = labeled_tangle()
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="explore"):
                run_episode(model, seq, rng=np.random.default_rng(0),
                            explore=bad)

    def test_confidence_zero_halts_immediately(self):
        model = tiny_model(seed=1)
        seq = labeled_tangle(seed=2)
        for ep in run_episode(model, seq, mode="confidence", param=0.0):
            assert ep.n == 1

    def test_confidence_one_waits_to_the_end(self):
        model = tiny_model(seed=1)
        seq = labeled_tangle(seed=2)
        for ep in run_episode(model, seq, mode="confidence", param=1.0):
            assert ep.n == ep.seq_len
            assert ep.forced

    def test_mode_validation(self):
        model = tiny_model()
        seq = labeled_tangle()
        with pytest.raises(ValueError, match="mode"):
            run_episode(model, seq, mode="surprise")
        with pytest.raises(ValueError, match="random"):
            run_episode(model, seq, mode="sample")
        with pytest.raises(ValueError, match="halting step"):
            run_episode(model, seq, mode="fixed")
        with pytest.raises(ValueError, match="threshold"):
            run_episode(model, seq, mode="confidence", param=1.5)

    def test_unlabeled_key_rejected(self):
        model = tiny_model()
        rng = np.random.default_rng(0)
        seq = random_tangle(rng, 20, 3, labeled=False)
        with pytest.raises(ValueError, match="label"):
            run_episode(model, seq, mode="threshold")

    def test_tape_bundle_alignment(self):
        model = tiny_model(seed=1)
        seq = labeled_tangle(seed=2)
        episodes, bundle = _episode_pass(
            model, seq, rng=np.random.default_rng(5), tape=True)
        total_steps = sum(ep.n for ep in episodes)
        assert bundle.states.shape == (model.config.fusion_width, total_steps)
        assert len(bundle.state_map) == total_steps
        assert sum(r["p"].shape[1] for r in bundle.policy_steps) == total_steps
        seen = {}
        for key, step in bundle.state_map:
            assert step == seen.get(key, 0) + 1
            seen[key] = step
        assert seen == {ep.key: ep.n for ep in episodes}
        assert bundle.halt_keys == [ep.key for ep in episodes]
        assert bundle.dist.shape == (2, len(episodes))


class TestLossTotal:
    @staticmethod
    def tape(model, seed=2, rng_seed=5):
        seq = labeled_tangle(seed=seed)
        return _episode_pass(model, seq, rng=np.random.default_rng(rng_seed),
                             tape=True)

    def test_uniform_classifier_gives_log_two_per_key(self):
        model = tiny_model(seed=1)
        model.store["classifier.w"].data[:] = 0.0
        model.store["classifier.b"].data[:] = 0.0
        episodes, bundle = self.tape(model)
        _, breakdown = loss_total(model, episodes, bundle, 0.1, 0.1)
        assert abs(breakdown.classification - len(episodes) * math.log(2)) < 1e-12

    def test_certain_halting_zeroes_the_delay_loss(self):
        model = tiny_model(seed=1)
        set_policy_bias(model, 50.0)
        episodes, bundle = self.tape(model)
        _, breakdown = loss_total(model, episodes, bundle, 0.1, 0.1)
        assert abs(breakdown.delay) < 1e-9

    def test_zero_weights_reduce_total_to_classification(self):
        model = tiny_model(seed=1)
        episodes, bundle = self.tape(model)
        total, breakdown = loss_total(model, episodes, bundle, 0.0, 0.0)
        assert total.item() == breakdown.classification
        assert breakdown.total == breakdown.classification

    def test_breakdown_matches_total(self):
        model = tiny_model(seed=1)
        episodes, bundle = self.tape(model)
        alpha, beta = 0.3, 0.7
        _, breakdown = loss_total(model, episodes, bundle, alpha, beta)
        recomposed = (breakdown.classification + alpha * breakdown.policy
                      + beta * breakdown.delay)
        assert abs(breakdown.total - recomposed) < 1e-12

    def test_policy_gradient_matches_finite_differences(self):
        model = tiny_model(seed=1)
        zero_baseline(model)
        episodes, bundle = self.tape(model)
        by_key = {ep.key: ep for ep in episodes}
        model.zero_grads()
        total, _ = loss_total(model, episodes, bundle, 1.0, 0.0)
        total.backward()

        def surrogate(w, b):
            value = 0.0
            for (key, step), s in zip(bundle.state_map, bundle.states.T):
                ep = by_key[key]
                z = float((w @ s.reshape(-1, 1) + b)[0, 0])
                p = min(max(1.0 / (1.0 + math.exp(-z)), 1e-12), 1.0 - 1e-12)
                chosen = p if ep.actions[step - 1] == HALT else 1.0 - p
                value -= ep.returns[step - 1] * math.log(chosen)
            return value

        for name in ("policy.w", "policy.b"):
            param = model.store[name]
            grad = param.grad
            assert grad is not None
            flat = param.data.reshape(-1)
            for idx in range(flat.size):
                keep = flat[idx]
                step = 1e-5
                flat[idx] = keep + step
                hi = surrogate(model.store["policy.w"].data,
                               model.store["policy.b"].data)
                flat[idx] = keep - step
                lo = surrogate(model.store["policy.w"].data,
                               model.store["policy.b"].data)
                flat[idx] = keep
                numeric = (hi - lo) / (2 * step)
                analytic = grad.reshape(-1)[idx]
                scale = max(abs(numeric), abs(analytic), 1e-8)
                assert abs(numeric - analytic) / scale < 1e-4, (name, idx)

    def test_delay_pressure_grows_with_beta(self):
        magnitudes = []
        for beta in (0.25, 1.0, 4.0):
            model = tiny_model(seed=1)
            episodes, bundle = self.tape(model)
            model.zero_grads()
            total, _ = loss_total(model, episodes, bundle, 0.0, beta)
            total.backward()
            magnitudes.append(abs(float(model.store["policy.b"].grad[0, 0])))
        assert magnitudes[0] <= magnitudes[1] <= magnitudes[2]
        assert magnitudes[2] > magnitudes[0]

    def test_policy_step_raises_chosen_action_probabilities(self):
        # well-separated frozen states, baseline zero, shared positive return
        rng = np.random.default_rng(9)
        h, batch, gain = 6, 4, 2.0
        states = np.zeros((h, batch))
        states[:batch, :] = np.eye(batch) * 10.0
        store = nm.ParameterStore()
        store.add("w", rng.normal(0.0, 0.1, size=(1, h)))
        store.add("b", np.zeros((1, 1)))
        actions = [HALT, WAIT, HALT, WAIT]

        def log_probs():
            z = store["w"].data @ states + store["b"].data
            p = 1.0 / (1.0 + np.exp(-z))
            return np.log(np.where([a == HALT for a in actions], p, 1.0 - p))

        before = log_probs()
        s = nm.Tensor(states)
        p = nm.clamp(nm.sigmoid(nm.affine(s, store["w"], store["b"])),
                     1e-12, 1.0 - 1e-12)
        halt_row = nm.Tensor(np.array([[1.0 if a == HALT else 0.0
                                        for a in actions]]))
        wait_row = nm.Tensor(1.0 - halt_row.data)
        log_action = nm.add(nm.mul(halt_row, nm.log(p)),
                            nm.mul(wait_row, nm.log(nm.sub(nm.Tensor(1.0), p))))
        loss = nm.neg(nm.scale(nm.sum_all(log_action), gain))
        loss.backward()
        for name in ("w", "b"):
            store[name].data -= 1e-3 * store[name].grad
        after = log_probs()
        assert np.all(after > before)


class TestBaselineRegression:
    def test_fits_constant_returns(self):
        model = tiny_model(seed=4)
        rng = np.random.default_rng(0)
        states = rng.normal(size=(model.config.fusion_width, 64))
        targets = np.full(64, 3.0)
        first = baseline_regression_step(model, states, targets, 5e-2)
        for _ in range(199):
            last = baseline_regression_step(model, states, targets, 5e-2)
        assert first > last
        assert last < 0.01

    def test_reports_pre_step_mse(self):
        model = tiny_model(seed=4)
        zero_baseline(model)
        states = np.ones((model.config.fusion_width, 5))
        mse = baseline_regression_step(model, states, np.full(5, 2.0), 1e-3)
        assert abs(mse - 4.0) < 1e-12


class TestEpisodeStats:
    def test_hand_values(self):
        eps = [
            Episode("a", 1, 1, 2, 10, 5, [WAIT, HALT], [1, 1], [1, 0],
                    [0.4, 0.6], np.array([0.9, 0.1]), False),
            Episode("b", 2, 1, 5, 10, 9, [WAIT] * 4 + [HALT], [-1] * 5,
                    [-4, -3, -2, -1, 0], [0.1] * 5, np.array([0.8, 0.2]),
                    False),
        ]
        accuracy, earliness = episode_stats(eps)
        assert accuracy == 0.5
        assert abs(earliness - (0.2 + 0.5) / 2) < 1e-12


class TestTrainLoop:
    @staticmethod
    def tangles(count=2, length=36, seed=0):
        return [labeled_tangle(seed=seed + i, length=length, n_keys=3)
                for i in range(count)]

    def test_two_epochs_produce_history(self):
        model = tiny_model(seed=2)
        history = train(model, self.tangles(), TrainConfig(
            learning_rate=1e-3, epochs=2, seed=1))
        assert [row["epoch"] for row in history] == [1, 2]
        for row in history:
            for field in ("classification", "policy", "delay", "total"):
                assert np.isfinite(row[field])
            assert 0.0 <= row["accuracy"] <= 1.0
            assert 0.0 < row["earliness"] <= 1.0

    def test_training_is_seed_deterministic(self):
        def trial():
            model = tiny_model(seed=2)
            history = train(model, self.tangles(), TrainConfig(
                learning_rate=1e-3, epochs=2, seed=9))
            return model, history

        model_a, hist_a = trial()
        model_b, hist_b = trial()
        assert hist_a == hist_b
        for name, param in model_a.store.items():
            assert np.array_equal(param.data, model_b.store[name].data), name
        for name, param in model_a.baseline.items():
            assert np.array_equal(param.data, model_b.baseline[name].data)

    def test_parameters_move(self):
        model = tiny_model(seed=2)
        before = {name: p.data.copy() for name, p in model.store.items()}
        train(model, self.tangles(), TrainConfig(learning_rate=1e-3, epochs=1,
                                                 seed=1))
        moved = [name for name, p in model.store.items()
                 if not np.array_equal(before[name], p.data)]
        assert "policy.w" in moved
        assert "classifier.w" in moved
        assert any(name.startswith("fuse.") for name in moved)

    def test_update_every_batches_gradients(self):
        model = tiny_model(seed=2)
        history = train(model, self.tangles(count=3), TrainConfig(
            learning_rate=1e-3, epochs=1, update_every=2, seed=1))
        assert len(history) == 1

    def test_epoch_callback_sees_every_row(self):
        model = tiny_model(seed=2)
        seen = []
        train(model, self.tangles(), TrainConfig(learning_rate=1e-3, epochs=3,
                                                 seed=1),
              on_epoch=lambda _, row: seen.append(row["epoch"]))
        assert seen == [1, 2, 3]

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train(tiny_model(), [], TrainConfig())

    def test_non_finite_loss_names_epoch_and_sequence(self, monkeypatch):
        model = tiny_model(seed=2)
        bad = tr.LossBreakdown(float("nan"), 0.0, 0.0, float("nan"))
        monkeypatch.setattr(tr, "loss_total", lambda *a, **k: (None, bad))
        with pytest.raises(nm.NumericalError, match="epoch 1"):
            train(model, self.tangles(count=1), TrainConfig(epochs=1, seed=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(explore=1.0)

    def test_history_csv_round_trip(self, tmp_path):
        model = tiny_model(seed=2)
        history = train(model, self.tangles(), TrainConfig(
            learning_rate=1e-3, epochs=2, seed=1))
        path = tmp_path / "history.csv"
        write_history(history, path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert list(rows[0]) == ["epoch", "l1", "l2", "l3", "total",
                                 "accuracy", "earliness"]
        assert float(rows[1]["l1"]) == pytest.approx(
            history[1]["classification"])
        assert int(rows[0]["epoch"]) == 1
