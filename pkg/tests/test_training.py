import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longsum.model import Model, ModelConfig, load_checkpoint
from longsum.tensor import Tensor, precision, softmax_rows
from longsum.text import Batch, CorpusPair, build_vocab, collate, synthetic_pairs, tokenize
from longsum.training import (
    TrainConfig,
    TrainingError,
    TrainState,
    batch_for_step,
    batch_loss,
    clip_gradient,
    clip_gradients,
    cross_entropy_from_logits,
    cross_entropy_loss,
    read_history,
    train,
    train_step,
)


def small_model_config(vocab=20, **kw):
    base = dict(vocab_size=vocab, d_model=16, heads=2, encoder_layers=1, decoder_layers=1, d_ff=32,
                max_input_len=32, max_summary_len=8, window=2, seed=1)
    base.update(kw)
    return ModelConfig(**base)


def toy_pairs(n=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        doc = [4] + rng.integers(5, 20, int(rng.integers(4, 12))).tolist()
        out.append(CorpusPair(doc, doc[1:4], i + 1))
    return out


class TestCrossEntropy:
    def test_perfect_prediction(self):
        probs = np.eye(5)[[1, 3, 4]]
        assert cross_entropy_loss(probs, [1, 3, 4]).item() == 0.0

    def test_uniform_vocab4(self):
        loss = cross_entropy_loss(np.full((2, 4), 0.25), [0, 3]).item()
        assert loss == pytest.approx(math.log(4), abs=1e-6)
        assert loss == pytest.approx(1.3863, abs=1e-4)

    def test_sum_reduction(self):
        loss = cross_entropy_loss(np.full((2, 4), 0.25), [0, 3], reduction="sum").item()
        assert loss == pytest.approx(2 * math.log(4), abs=1e-6)

    def test_mask_equals_recompute(self):
        rng = np.random.default_rng(0)
        with precision(np.float64):
            p = softmax_rows(rng.standard_normal((5, 6))).data
            t = rng.integers(0, 6, 5)
            mask = np.array([1, 0, 1, 1, 0], dtype=bool)
            a = cross_entropy_loss(p, t, mask).item()
            b = cross_entropy_loss(p[mask], t[mask]).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_no_unmasked_steps(self):
        with pytest.raises(ValueError, match="unmasked"):
            cross_entropy_loss(np.full((2, 4), 0.25), [0, 1], np.zeros(2, dtype=bool))

    def test_zero_probability_is_finite(self):
        loss = cross_entropy_loss(np.array([[1.0, 0.0]]), [1]).item()
        assert loss == pytest.approx(-math.log(np.finfo(np.float32).tiny), rel=1e-6)

    def test_logits_path_survives_underflow(self):
        z = np.array([[0.0, -2000.0]])
        assert cross_entropy_from_logits(z, [1]).item() == pytest.approx(2000.0, rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 2**31 - 1))
    def test_probs_and_logits_agree(self, m, V, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((2, m, V)) * 3
        t = rng.integers(0, V, (2, m))
        mask = rng.random((2, m)) > 0.3
        mask[0, 0] = True
        a = cross_entropy_loss(softmax_rows(z), t, mask).item()
        b = cross_entropy_from_logits(z, t, mask).item()
        assert abs(a - b) <= 1e-5

    def test_gradient_flows(self):
        z = Tensor(np.zeros((2, 3)), requires_grad=True)
        cross_entropy_from_logits(z, [0, 2]).backward()
        np.testing.assert_allclose(z.grad, [[-1 / 3, 1 / 6, 1 / 6], [1 / 6, 1 / 6, -1 / 3]], atol=1e-7)


class TestClip:
    def test_three_four(self):
        out = clip_gradient(np.array([3.0, 4.0]), 1.0)
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-12)
        assert np.linalg.norm(out) <= 1.0

    def test_below_cap_unchanged(self):
        g = np.array([0.3, 0.4])
        assert clip_gradient(g, 1.0) is g

    def test_zero_gradient(self):
        g = np.zeros(4)
        np.testing.assert_array_equal(clip_gradient(g, 0.5), g)

    def test_rejects_non_positive_cap(self):
        with pytest.raises(ValueError):
            clip_gradient(np.ones(2), 0.0)

    def test_tensor_in_tensor_out(self):
        out = clip_gradient(Tensor([30.0, 40.0]), 5.0)
        assert isinstance(out, Tensor)
        np.testing.assert_allclose(out.data, [3.0, 4.0], atol=1e-5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 60), st.floats(1e-3, 1e3), st.floats(0.01, 10), st.integers(0, 2**31 - 1),
           st.sampled_from([np.float32, np.float64]))
    def test_norm_direction_idempotence(self, size, scale, C, seed, dtype):
        g = (np.random.default_rng(seed).standard_normal(size) * scale).astype(dtype)
        c = clip_gradient(g, C)
        norm = np.linalg.norm(c.astype(np.float64))
        assert norm <= C + 1e-6
        assert norm == pytest.approx(min(np.linalg.norm(g.astype(np.float64)), C), rel=1e-5)
        cos = np.dot(c.astype(np.float64), g.astype(np.float64)) / (norm * np.linalg.norm(g.astype(np.float64)))
        assert cos >= 1 - 1e-6
        np.testing.assert_array_equal(clip_gradient(c, C), c)

    def test_per_tensor_vs_global(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([0.1, 0.0])}
        per = clip_gradients(grads, 1.0)
        np.testing.assert_allclose(per["a"], [0.6, 0.8])
        np.testing.assert_array_equal(per["b"], grads["b"])
        glob = clip_gradients(grads, 1.0, global_norm=True)
        total = math.sqrt(25.01)
        np.testing.assert_allclose(glob["b"], [0.1 / total, 0.0])


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"clip_cap": 0}, {"batch_size": 0}, {"learning_rate": -1}, {"max_steps": -1}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrainStep:
    def test_zero_learning_rate(self):
        m = Model(small_model_config())
        before = {k: t.data.copy() for k, t in m.params.items()}
        cfg = TrainConfig(learning_rate=0.0, batch_size=4)
        loss = train_step(collate(toy_pairs(), [0, 1, 2, 3]), m, TrainState(), cfg)
        assert math.isfinite(loss) and loss > 0
        assert all(np.array_equal(before[k], t.data) for k, t in m.params.items())

    def test_returns_pre_update_loss_and_records_sum(self):
        m = Model(small_model_config())
        batch = collate(toy_pairs(), [0, 1])
        expected = batch_loss(m, batch).item()
        state = TrainState()
        assert train_step(batch, m, state, TrainConfig()) == expected
        assert state.last_loss_sum == pytest.approx(expected * batch.target_mask.sum())
        assert state.step == 1 and state.history == [(1, expected)]
        assert {k: v.shape for k, v in state.m.items()} == {k: t.shape for k, t in m.trainable()}

    def test_post_clip_norms(self):
        m = Model(small_model_config())
        state = TrainState()
        cfg = TrainConfig(learning_rate=1e-2, clip_cap=0.05, batch_size=4)
        for s in range(5):
            train_step(batch_for_step(toy_pairs(), cfg, s), m, state, cfg)
            assert max(state.last_grad_norms.values()) <= cfg.clip_cap + 1e-6
            assert all(np.all(np.isfinite(t.data)) for t in m.params.values())

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            train_step(_empty_batch(), Model(small_model_config()), TrainState(), TrainConfig())

    def test_non_finite_loss_diagnostic(self):
        m = Model(small_model_config())
        m.params["head.b"].data[:] = np.nan
        with pytest.raises(TrainingError, match=r"step 1.*batch rows \[0, 1\]"):
            train_step(collate(toy_pairs(), [0, 1]), m, TrainState(), TrainConfig())

    def test_overfit_single_pair(self):
        pair = toy_pairs(1)[0]
        m = Model(small_model_config())
        state = TrainState()
        cfg = TrainConfig(learning_rate=3e-3, batch_size=1)
        batch = collate([pair], [0])
        losses = [train_step(batch, m, state, cfg) for _ in range(200)]
        assert losses[199] < losses[0]
        best = np.minimum.accumulate(losses)
        assert np.all(np.diff(best[::100]) <= 0)


def _empty_batch():
    z = np.zeros((0, 1), dtype=np.int64)
    return Batch(z, z.astype(bool), z, z, z.astype(bool), np.zeros(0, dtype=np.int64))


class TestBatchOrder:
    def test_epoch_covers_corpus(self):
        cfg = TrainConfig(batch_size=5, seed=3)
        pairs = toy_pairs(12)
        seen = np.concatenate([batch_for_step(pairs, cfg, s).indices for s in range(3)])
        assert sorted(seen.tolist()) == list(range(12))

    def test_seeded(self):
        pairs = toy_pairs(12)
        a = batch_for_step(pairs, TrainConfig(batch_size=4, seed=1), 5).indices
        b = batch_for_step(pairs, TrainConfig(batch_size=4, seed=1), 5).indices
        c = batch_for_step(pairs, TrainConfig(batch_size=4, seed=2), 5).indices
        assert a.tolist() == b.tolist() and a.tolist() != c.tolist()


class TestTrain:
    def test_zero_steps(self, tmp_path):
        res = train(toy_pairs(), small_model_config(), TrainConfig(max_steps=0), tmp_path)
        assert res.history == []
        assert read_history(tmp_path / "history.csv") == []
        init = Model(small_model_config())
        back = load_checkpoint(res.checkpoint)
        assert all(np.array_equal(init.params[k].data, back.params[k].data) for k in init.params)

    def test_history_csv_and_checkpoints(self, tmp_path):
        cfg = TrainConfig(max_steps=6, batch_size=4, checkpoint_every=3)
        res = train(toy_pairs(), small_model_config(), cfg, tmp_path)
        text = (tmp_path / "history.csv").read_text().splitlines()
        assert text[0] == "step,loss" and len(text) == 7
        assert read_history(tmp_path / "history.csv") == res.history
        assert [s for s, _ in res.history] == list(range(1, 7))
        assert sorted(os.listdir(tmp_path)) == sorted([
            "history.csv", "model.ckpt", "model.state.npz", "step_000003.ckpt", "step_000003.state.npz",
            "step_000006.ckpt", "step_000006.state.npz", "train_config.json"])

    def test_seed_determinism(self, tmp_path):
        cfg = TrainConfig(max_steps=8, batch_size=4, seed=5)
        a = train(toy_pairs(), small_model_config(), cfg, tmp_path / "a").history
        b = train(toy_pairs(), small_model_config(), cfg, tmp_path / "b").history
        assert a == b

    def test_resume_equivalence(self, tmp_path):
        pairs = toy_pairs(10)
        full = train(pairs, small_model_config(), TrainConfig(max_steps=8, batch_size=3, checkpoint_every=4),
                     tmp_path / "full")
        resumed = train(pairs, small_model_config(), TrainConfig(max_steps=8, batch_size=3, checkpoint_every=4),
                        tmp_path / "resumed", resume=str(tmp_path / "full" / "step_000004.ckpt"))
        assert resumed.history == full.history
        a, b = load_checkpoint(full.checkpoint), load_checkpoint(resumed.checkpoint)
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_empty_corpus(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            train([], small_model_config(), TrainConfig(), tmp_path)

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(TrainingError, match="checkpoint directory"):
            train(toy_pairs(), small_model_config(), TrainConfig(max_steps=1), blocker / "sub")

    def test_copy_task_learns(self, tmp_path):
        pairs = synthetic_pairs(64, seed=0, task="copy-first-k", k=3, min_len=6, max_len=12)
        cfg = TrainConfig(max_steps=60, batch_size=8, learning_rate=3e-3, checkpoint_every=0)
        res = train(_ids(pairs), small_model_config(vocab=200, max_summary_len=8), cfg, tmp_path)
        first, last = np.mean([l for _, l in res.history[:5]]), np.mean([l for _, l in res.history[-5:]])
        assert last < 0.7 * first


def _ids(raw_pairs):
    vocab = build_vocab([r["document"] for r in raw_pairs], 200)
    return [CorpusPair([4] + tokenize(r["document"], vocab), tokenize(r["summary"], vocab), i)
            for i, r in enumerate(raw_pairs)]
