"""Sequence predictor: exact gradients, training behavior, ranking."""

from __future__ import annotations

import numpy as np
import pytest

from tplad.errors import DivergedLoss, ShapeMismatch
from tplad.seqmodel import (
    TENSOR_NAMES,
    AdamState,
    ModelWeights,
    SeqModelConfig,
    clip_gradients,
    forward,
    grad_check,
    init_weights,
    loss_and_grads,
    top_candidates,
    train,
)


def tiny_cfg(**overrides) -> SeqModelConfig:
    base = dict(input_dim=4, classes=4, hidden=6, window=3,
                attention_dim=5, lr=0.01, epochs=2, batch_size=8, seed=3)
    base.update(overrides)
    return SeqModelConfig(**base)


def cycle_task(n=80, classes=4, window=3, seed=0):
    """Windows of one-hot class codes; the label continues the cycle."""
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, classes, size=n)
    x = np.zeros((n, window, classes))
    y = np.zeros(n, dtype=np.int64)
    for i, start in enumerate(starts):
        for t in range(window):
            x[i, t, (start + t) % classes] = 1.0
        y[i] = (start + window) % classes
    return x, y


# --- construction -------------------------------------------------------------------


class TestConstruction:
    def test_tensor_inventory_and_shapes(self):
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        assert sorted(weights.tensors) == sorted(TENSOR_NAMES)
        d, h, a, c = cfg.input_dim, cfg.hidden, cfg.attn, cfg.classes
        assert weights["wx_f"].shape == (d, 4 * h)
        assert weights["wh_b"].shape == (h, 4 * h)
        assert weights["wa"].shape == (2 * h, a)
        assert weights["va"].shape == (a,)
        assert weights["wo"].shape == (2 * h, c)
        assert weights["bo"].shape == (c,)

    def test_forget_gate_bias_starts_open(self):
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        h = cfg.hidden
        for name in ("b_f", "b_b"):
            bias = weights[name]
            assert np.all(bias[h:2 * h] == 1.0)
            assert not np.any(bias[:h])
            assert not np.any(bias[2 * h:])

    def test_attention_width_defaults_to_hidden(self):
        cfg = SeqModelConfig(input_dim=4, classes=3, hidden=9)
        assert cfg.attn == 9
        assert SeqModelConfig(input_dim=4, classes=3, hidden=9,
                              attention_dim=5).attn == 5

    def test_derived_size_properties(self):
        weights = init_weights(tiny_cfg())
        assert weights.input_dim == 4
        assert weights.hidden == 6
        assert weights.classes == 4

    def test_copy_is_independent(self):
        weights = init_weights(tiny_cfg())
        clone = weights.copy()
        clone["bo"] = clone["bo"] + 1.0
        assert not np.array_equal(clone["bo"], weights["bo"])


# --- forward pass -------------------------------------------------------------------


class TestForward:
    def test_single_window_gives_a_distribution(self):
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        x = np.random.default_rng(0).standard_normal((cfg.window, cfg.input_dim))
        probs = forward(weights, x)
        assert probs.shape == (cfg.classes,)
        assert np.all(probs >= 0)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_attention_weights_form_a_distribution(self):
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        x = np.random.default_rng(1).standard_normal((cfg.window, cfg.input_dim))
        _, alpha = forward(weights, x, return_attention=True)
        assert alpha.shape == (cfg.window,)
        assert np.all(alpha >= 0)
        assert alpha.sum() == pytest.approx(1.0, abs=1e-12)

    def test_batch_agrees_with_single_windows(self):
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        batch = np.random.default_rng(2).standard_normal(
            (5, cfg.window, cfg.input_dim))
        together = forward(weights, batch)
        assert together.shape == (5, cfg.classes)
        for i in range(5):
            alone = forward(weights, batch[i])
            assert alone == pytest.approx(together[i], abs=1e-12)


# --- gradients ----------------------------------------------------------------------


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_analytic_gradients_match_finite_differences(self, seed):
        assert grad_check(seed=seed) < 1e-4

    def test_loss_is_mean_cross_entropy(self):
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        x = np.random.default_rng(3).standard_normal(
            (4, cfg.window, cfg.input_dim))
        y = np.array([0, 1, 2, 3])
        loss, grads = loss_and_grads(weights, x, y)
        probs = forward(weights, x)
        expected = -np.log(probs[np.arange(4), y] + 1e-12).mean()
        assert loss == pytest.approx(expected, abs=1e-12)
        assert sorted(grads) == sorted(TENSOR_NAMES)

    def test_clip_scales_down_large_gradients(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
        norm = clip_gradients(grads, clip_norm=1.0)
        assert norm == pytest.approx(5.0)
        clipped = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert clipped == pytest.approx(1.0)

    def test_clip_leaves_small_gradients_alone(self):
        grads = {"a": np.array([0.3, 0.4])}
        norm = clip_gradients(grads, clip_norm=5.0)
        assert norm == pytest.approx(0.5)
        assert grads["a"] == pytest.approx([0.3, 0.4])


# --- training -----------------------------------------------------------------------


class TestTraining:
    def test_training_is_deterministic(self):
        x, y = cycle_task()
        a, losses_a = train(x, y, tiny_cfg(epochs=3))
        b, losses_b = train(x, y, tiny_cfg(epochs=3))
        assert losses_a == losses_b
        for name in TENSOR_NAMES:
            assert np.array_equal(a[name], b[name])

    def test_learnable_task_is_learned(self):
        x, y = cycle_task(n=120)
        cfg = tiny_cfg(hidden=12, lr=0.02, epochs=40, batch_size=16)
        weights, losses = train(x, y, cfg)
        assert losses[-1] < 0.1
        assert losses[-1] < losses[0]
        predicted = forward(weights, x).argmax(axis=1)
        assert (predicted == y).mean() == 1.0

    def test_zero_learning_rate_changes_nothing(self):
        x, y = cycle_task(n=24)
        cfg = tiny_cfg(lr=0.0, epochs=2)
        start = init_weights(cfg)
        reference = start.copy()
        trained, _ = train(x, y, cfg, weights=start)
        for name in TENSOR_NAMES:
            assert np.array_equal(trained[name], reference[name])

    def test_input_noise_changes_the_run_but_still_converges(self):
        x, y = cycle_task(n=120)
        clean_cfg = tiny_cfg(hidden=12, lr=0.02, epochs=40, batch_size=16)
        noisy_cfg = tiny_cfg(hidden=12, lr=0.02, epochs=40, batch_size=16,
                             train_noise=0.1)
        clean, _ = train(x, y, clean_cfg)
        noisy, losses = train(x, y, noisy_cfg)
        assert not np.array_equal(clean["wo"], noisy["wo"])
        predicted = forward(noisy, x).argmax(axis=1)
        assert (predicted == y).mean() >= 0.95

    def test_non_finite_loss_is_reported(self):
        x, y = cycle_task(n=16)
        cfg = tiny_cfg()
        weights = init_weights(cfg)
        weights["wo"] = np.full_like(weights["wo"], np.nan)
        with pytest.raises(DivergedLoss):
            train(x, y, cfg, weights=weights)

    def test_wrong_rank_input_is_rejected(self):
        with pytest.raises(ShapeMismatch):
            train(np.zeros((8, 4)), np.zeros(8, dtype=int), tiny_cfg())

    def test_mismatched_target_count_is_rejected(self):
        with pytest.raises(ShapeMismatch):
            train(np.zeros((8, 3, 4)), np.zeros(7, dtype=int), tiny_cfg())

    def test_adam_moves_toward_lower_loss(self):
        x, y = cycle_task(n=32)
        cfg = tiny_cfg(lr=0.05)
        weights = init_weights(cfg)
        adam = AdamState(weights)
        before, grads = loss_and_grads(weights, x, y)
        adam.update(weights, grads, cfg)
        after, _ = loss_and_grads(weights, x, y)
        assert after < before


# --- candidate ranking -----------------------------------------------------------------


class TestTopCandidates:
    def test_descending_probability_order(self):
        probs = np.array([0.1, 0.5, 0.2, 0.2])
        assert top_candidates(probs, 2) == [1, 2]

    def test_probability_ties_break_toward_the_smaller_id(self):
        probs = np.array([0.25, 0.25, 0.25, 0.25])
        assert top_candidates(probs, 3) == [0, 1, 2]

    def test_count_beyond_classes_returns_everything(self):
        probs = np.array([0.6, 0.4])
        assert top_candidates(probs, 10) == [0, 1]

    def test_zero_count_returns_nothing(self):
        assert top_candidates(np.array([1.0]), 0) == []
