"""
Unit tests for the optimizer and the training loops.

Covers:
- AdamW closed-form steps, decay exemptions and gradient guards
- the JSONL training log
- pretraining: batching, determinism, evaluation cadence, divergence
- retrieval fine-tuning and hard-negative validation
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

import utp.services.training_service as training_service
from utp.autograd.tensor import Tensor
from utp.core.exceptions import CorpusTooSmallError, HardNegativeError, NonFiniteGradientError, NonFiniteLossError
from utp.models.config_models import LossConfig, TrainConfig, retrieval_finetune_defaults
from utp.models.run_models import HardNegativeSet
from utp.models.table_models import Corpus
from utp.services.checkpoint_service import load_checkpoint
from utp.services.objective_service import LossComponents
from utp.services.training_service import (
    CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    AdamState,
    adamw_step,
    finetune_retrieval_run,
    pretrain,
    read_train_log,
    validate_hard_negatives,
)

pytestmark = pytest.mark.unit


def quick_cfg(**overrides) -> TrainConfig:
    values = dict(batch_size=4, learning_rate=1e-3, epochs=1, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


# ==================== AdamW ====================

class TestAdamW:
    """Decoupled-decay Adam updates."""

    def test_first_step_closed_form(self):
        params = {"w": Tensor([0.0], requires_grad=True)}
        adamw_step(params, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.0)
        assert params["w"].data[0] == pytest.approx(-0.1, abs=1e-8)

    def test_zero_gradient_leaves_params(self):
        params = {"w": Tensor([0.5, -1.0], requires_grad=True)}
        adamw_step(params, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.0)
        assert np.array_equal(params["w"].data, [0.5, -1.0])

    def test_decay_skips_biases_and_layernorm(self):
        params = {
            "layers.0.ffn.w1": Tensor([1.0], requires_grad=True),
            "layers.0.ffn.b1": Tensor([1.0], requires_grad=True),
            "final_ln.gain": Tensor([1.0], requires_grad=True),
        }
        grads = {name: np.zeros(1) for name in params}
        adamw_step(params, grads, lr=0.1, weight_decay=0.5)
        assert params["layers.0.ffn.w1"].data[0] == pytest.approx(0.95)
        assert params["layers.0.ffn.b1"].data[0] == 1.0
        assert params["final_ln.gain"].data[0] == 1.0

    def test_state_accumulates(self):
        params = {"w": Tensor([0.0], requires_grad=True)}
        state = adamw_step(params, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.0)
        state = adamw_step(params, {"w": np.array([1.0])}, state=state, lr=0.1, weight_decay=0.0)
        assert state.t == 2
        assert params["w"].data[0] == pytest.approx(-0.2, abs=1e-7)

    def test_uses_tensor_grads_by_default(self):
        w = Tensor([0.0], requires_grad=True)
        w.grad = np.array([-2.0])
        adamw_step({"w": w}, lr=0.1, weight_decay=0.0)
        assert w.data[0] == pytest.approx(0.1, abs=1e-8)

    def test_non_finite_gradient_aborts_update(self):
        params = {"a": Tensor([1.0], requires_grad=True), "b": Tensor([2.0], requires_grad=True)}
        state = AdamState()
        with pytest.raises(NonFiniteGradientError) as exc:
            adamw_step(params, {"a": np.array([1.0]), "b": np.array([np.nan])}, state=state, lr=0.1)
        assert "b" in str(exc.value)
        assert params["a"].data[0] == 1.0
        assert state.t == 0


# ==================== Pretraining ====================

class TestPretrain:
    """Multi-task pretraining loop."""

    def test_steps_and_log(self, tiny_corpus, tiny_model_cfg, tmp_path):
        # Arrange
        cfg = quick_cfg(epochs=2)

        # Act
        ckpt, log = pretrain(tiny_corpus, tiny_model_cfg, cfg, out_dir=tmp_path)

        # Assert
        assert [s.step for s in log.steps] == [1, 2, 3, 4]
        assert all(np.isfinite(s.L) for s in log.steps)
        assert all(s.L == pytest.approx(s.L_mlm + s.L_cmcr) for s in log.steps)
        assert read_train_log(tmp_path / TRAIN_LOG_NAME) == log
        assert (tmp_path / CHECKPOINT_NAME).exists()
        assert ckpt.meta["phase"] == "pretrain" and ckpt.meta["step"] == 4
        assert ckpt.config.V == len(ckpt.vocab)

    def test_partial_batch_dropped(self, tiny_corpus, tiny_model_cfg):
        _, log = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(batch_size=3))
        assert len(log.steps) == 2

    def test_corpus_smaller_than_batch(self, tiny_corpus, tiny_model_cfg):
        with pytest.raises(CorpusTooSmallError):
            pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(batch_size=16))

    def test_bitwise_reproducible(self, tiny_corpus, tiny_model_cfg, tmp_path):
        a, log_a = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(), out_dir=tmp_path / "a")
        b, log_b = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(), out_dir=tmp_path / "b")
        assert log_a == log_b
        assert a.fingerprint() == b.fingerprint()
        assert (tmp_path / "a" / CHECKPOINT_NAME).read_bytes() == (tmp_path / "b" / CHECKPOINT_NAME).read_bytes()

    def test_seed_changes_the_run(self, tiny_corpus, tiny_model_cfg):
        a, _ = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(seed=0))
        b, _ = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(seed=1))
        assert a.fingerprint() != b.fingerprint()

    def test_max_steps(self, tiny_corpus, tiny_model_cfg):
        _, log = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(epochs=5, max_steps=3))
        assert len(log.steps) == 3

    def test_eval_cadence(self, tiny_corpus, tiny_model_cfg, tmp_path):
        dev = Corpus(pairs=tiny_corpus.pairs[:3])
        _, log = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(epochs=2, eval_every=2), dev=dev,
                          out_dir=tmp_path)
        assert [e.step for e in log.evals] == [2, 4]
        assert set(log.evals[0].metrics) == {"R@1", "R@10", "R@50"}

    def test_temperature_comes_from_train_config(self, tiny_corpus, tiny_model_cfg):
        ckpt, _ = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(tau=0.1), LossConfig(tau=1.0))
        assert ckpt.meta["tau"] == 0.1

    def test_divergence_saves_last_good_parameters(self, tiny_corpus, tiny_model_cfg, tmp_path, monkeypatch):
        # Arrange
        def diverging_loss(params, batch, cfg, rng, vocab, train_mode=True):
            nan = Tensor.scalar(float("nan"))
            return nan, LossComponents(L=nan, L_mlm=nan, L_cmcr=Tensor.scalar(0.0))

        monkeypatch.setattr(training_service, "total_loss", diverging_loss)

        # Act / Assert
        with pytest.raises(NonFiniteLossError):
            pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(), out_dir=tmp_path)
        saved = load_checkpoint(tmp_path / CHECKPOINT_NAME)
        assert saved.meta["step"] == 0
        assert all(np.all(np.isfinite(t.data)) for t in saved.params.parameters())

    def test_late_divergence_keeps_last_saved_checkpoint(self, tiny_corpus, tiny_model_cfg, tmp_path, monkeypatch):
        # Arrange: the fourth forward pass returns NaN; checkpoints are written every two steps.
        real_loss = training_service.total_loss
        calls = {"n": 0}

        def late_nan_loss(params, batch, cfg, rng, vocab, train_mode=True):
            calls["n"] += 1
            L, parts = real_loss(params, batch, cfg, rng, vocab, train_mode=train_mode)
            if calls["n"] < 4:
                return L, parts
            nan = L * float("nan")
            return nan, LossComponents(L=nan, L_mlm=parts.L_mlm, L_cmcr=parts.L_cmcr)

        monkeypatch.setattr(training_service, "total_loss", late_nan_loss)

        # Act
        with pytest.raises(NonFiniteLossError):
            pretrain(tiny_corpus, tiny_model_cfg, quick_cfg(epochs=2, eval_every=2), out_dir=tmp_path)

        # Assert
        saved = load_checkpoint(tmp_path / CHECKPOINT_NAME)
        assert saved.meta["step"] == 2
        assert len(read_train_log(tmp_path / TRAIN_LOG_NAME).steps) == 3


# ==================== Retrieval fine-tuning ====================

class TestFinetuneRetrieval:
    """Bi-encoder fine-tuning."""

    @pytest.fixture
    def pretrained(self, tiny_corpus, tiny_model_cfg):
        ckpt, _ = pretrain(tiny_corpus, tiny_model_cfg, quick_cfg())
        return ckpt

    def test_runs_with_partial_batches(self, pretrained, tiny_corpus, tmp_path):
        cfg = retrieval_finetune_defaults(batch_size=3, epochs=2, learning_rate=1e-3)
        out, log = finetune_retrieval_run(pretrained, tiny_corpus.pairs, cfg, out_path=tmp_path / "ft.utp")
        assert len(log.steps) == 6
        assert all(s.L_mlm == 0.0 and s.L_cmcr == 0.0 and s.L == s.L_retrieval for s in log.steps)
        assert out.meta["phase"] == "finetune_retrieval"
        assert load_checkpoint(tmp_path / "ft.utp").fingerprint() == out.fingerprint()
        assert out.fingerprint() != pretrained.fingerprint()

    def test_hard_negatives_change_the_loss(self, pretrained, tiny_corpus):
        pairs = tiny_corpus.pairs
        cfg = retrieval_finetune_defaults(batch_size=4, epochs=1, max_steps=1)
        negatives = HardNegativeSet(per_query=2, negatives={p.id: [q.id for q in pairs if q.id != p.id][:2]
                                                            for p in pairs})
        _, plain = finetune_retrieval_run(pretrained, pairs, cfg)
        _, hard = finetune_retrieval_run(pretrained, pairs, cfg, hard_negatives=negatives)
        assert hard.steps[0].L > plain.steps[0].L

    def test_does_not_touch_the_input_checkpoint(self, pretrained, tiny_corpus):
        before = pretrained.fingerprint()
        finetune_retrieval_run(pretrained, tiny_corpus.pairs, retrieval_finetune_defaults(epochs=1, batch_size=4))
        assert pretrained.fingerprint() == before

    def test_divergence_keeps_last_saved_checkpoint(self, pretrained, tiny_corpus, tmp_path, monkeypatch):
        # Arrange: the third step diverges; checkpoints are written every two steps.
        real_loss = training_service.retrieval_loss
        calls = {"n": 0}

        def late_nan_loss(*args, **kwargs):
            calls["n"] += 1
            L = real_loss(*args, **kwargs)
            return L if calls["n"] < 3 else L * float("nan")

        monkeypatch.setattr(training_service, "retrieval_loss", late_nan_loss)
        cfg = retrieval_finetune_defaults(batch_size=4, epochs=3, learning_rate=1e-3, eval_every=2)

        # Act
        with pytest.raises(NonFiniteLossError):
            finetune_retrieval_run(pretrained, tiny_corpus.pairs, cfg, out_path=tmp_path / "ft.utp")

        # Assert
        assert load_checkpoint(tmp_path / "ft.utp").meta["step"] == 2

    def test_empty_training_set(self, pretrained):
        with pytest.raises(CorpusTooSmallError):
            finetune_retrieval_run(pretrained, [])


class TestValidateHardNegatives:
    """Mined negatives must name non-gold tables of the pool."""

    def test_gold_table_rejected(self, tiny_corpus):
        pairs = tiny_corpus.pairs
        with pytest.raises(HardNegativeError):
            validate_hard_negatives({pairs[0].id: [pairs[0].id]}, pairs, tiny_corpus.ids())

    def test_unknown_table_rejected(self, tiny_corpus):
        pairs = tiny_corpus.pairs
        with pytest.raises(HardNegativeError):
            validate_hard_negatives({pairs[0].id: ["nowhere"]}, pairs, tiny_corpus.ids())

    def test_unknown_queries_ignored(self, tiny_corpus):
        pairs = tiny_corpus.pairs
        got = validate_hard_negatives({"other": ["nowhere"], pairs[0].id: [pairs[1].id]}, pairs, tiny_corpus.ids())
        assert got[pairs[0].id] == [pairs[1].id]
