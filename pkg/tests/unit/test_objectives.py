"""
Unit tests for the pretraining objectives.

Covers:
- MLM masking plans and their statistics
- MLM loss at initialization and its per-modality decomposition
- mean pooling
- InfoNCE against hand values and a brute-force oracle
- CMCR decomposition and the multi-task total
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from utp.autograd.gradcheck import gradcheck
from utp.autograd.tensor import Tensor
from utp.core.exceptions import EmptyPoolError, ShapeError
from utp.core.seeding import stream
from utp.models.config_models import LossConfig, ModelConfig
from utp.services.encoder_service import EncoderParams, serialize, serialize_pair
from utp.services.objective_service import (
    BatchRepresentations,
    MaskAction,
    cmcr_loss,
    cmcr_terms,
    infonce,
    make_masking_plan,
    maskable_positions,
    mlm_loss,
    n_to_mask,
    pool,
    total_loss,
    universal_mlm_loss,
    universal_mlm_terms,
)
from utp.services.tokenizer_service import CLS, MASK, N_SPECIAL, SEP, SPECIAL_TOKENS, Vocab
from utp.services.training_service import AdamState, adamw_step

pytestmark = pytest.mark.unit


@pytest.fixture
def word_vocab():
    return Vocab(SPECIAL_TOKENS + [f"w{i}" for i in range(40)])


def text_input(n_tokens: int, vocab: Vocab, l: int):  # noqa: E741
    cfg = ModelConfig(d=8, l=l, n_layers=1, n_heads=1, d_ff=8, V=len(vocab))
    ids = [N_SPECIAL + (i % (len(vocab) - N_SPECIAL)) for i in range(n_tokens)]
    return serialize(ids, None, "W", vocab, cfg)


def naive_infonce(a: np.ndarray, p: np.ndarray, tau: float, kind: str = "dot") -> float:
    if kind == "cosine":
        a = a / np.linalg.norm(a, axis=1, keepdims=True)
        p = p / np.linalg.norm(p, axis=1, keepdims=True)
    n = a.shape[0]
    total = 0.0
    for i in range(n):
        sims = [float(np.dot(a[i], p[j])) / tau for j in range(n)]
        top = max(sims)
        denom = sum(math.exp(s - top) for s in sims)
        total += -(sims[i] - top - math.log(denom))
    return total / n


def reps(r_w, r_t, r_wt) -> BatchRepresentations:
    return BatchRepresentations(r_w=Tensor(r_w), r_t=Tensor(r_t), r_wt=Tensor(r_wt))


# ==================== Masking ====================

class TestMaskingPlan:
    """Selection of MLM targets."""

    @pytest.mark.parametrize("n, expected", [(0, 0), (1, 1), (3, 1), (10, 2), (20, 3), (100, 15)])
    def test_count(self, n, expected):
        assert n_to_mask(n) == expected

    def test_empty_input_gives_empty_plan(self, word_vocab):
        x = text_input(0, word_vocab, 8)
        plan = make_masking_plan(x, stream(0, "m"), len(word_vocab))
        assert plan.is_empty
        assert mlm_loss(EncoderParams.init(ModelConfig(d=8, l=8, n_layers=1, n_heads=1, d_ff=8,
                                                       V=len(word_vocab))), x, plan).item() == 0.0

    def test_twenty_maskable_gives_three(self, word_vocab):
        x = text_input(20, word_vocab, 24)
        assert maskable_positions(x).size == 20
        plan = make_masking_plan(x, stream(0, "m"), len(word_vocab))
        assert plan.positions.size == 3

    def test_only_maskable_positions(self, word_vocab):
        x = text_input(20, word_vocab, 24)
        for seed in range(20):
            plan = make_masking_plan(x, stream(seed, "m"), len(word_vocab))
            assert not set(plan.positions) - set(maskable_positions(x))
            corrupted = plan.apply(x).token_ids
            assert corrupted[0] == CLS and corrupted[21] == SEP
            assert np.array_equal(plan.original_ids, x.token_ids[plan.positions])

    def test_deterministic_in_rng(self, word_vocab):
        x = text_input(20, word_vocab, 24)
        a = make_masking_plan(x, stream(5, "m"), len(word_vocab))
        b = make_masking_plan(x, stream(5, "m"), len(word_vocab))
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.replacement_ids, b.replacement_ids)

    def test_statistics_over_many_tokens(self, word_vocab):
        # Arrange: 1000 sequences of 100 maskable tokens
        x = text_input(100, word_vocab, 102)
        selected = 0
        replaced_by_mask = 0
        random_ids = []

        # Act
        for seed in range(1000):
            plan = make_masking_plan(x, stream(seed, "stats"), len(word_vocab))
            actions = plan.actions[plan.positions]
            selected += plan.positions.size
            replaced_by_mask += int((actions == MaskAction.MASK).sum())
            random_ids.extend(plan.replacement_ids[actions == MaskAction.RANDOM].tolist())

        # Assert
        assert 0.14 <= selected / 100_000 <= 0.16
        assert 0.77 <= replaced_by_mask / selected <= 0.83
        assert all(N_SPECIAL <= i < len(word_vocab) for i in random_ids)

    def test_mask_token_replaces(self, word_vocab):
        x = text_input(20, word_vocab, 24)
        plan = make_masking_plan(x, stream(1, "m"), len(word_vocab))
        corrupted = plan.apply(x).token_ids
        for j, pos in enumerate(plan.positions):
            if plan.actions[pos] == MaskAction.MASK:
                assert corrupted[pos] == MASK
            elif plan.actions[pos] == MaskAction.UNCHANGED:
                assert corrupted[pos] == plan.original_ids[j]


# ==================== MLM ====================

class TestMLMLoss:
    """Masked-token cross-entropy."""

    @pytest.fixture
    def params(self, tiny_vocab, tiny_model_cfg):
        return EncoderParams.init(tiny_model_cfg.model_copy(update={"V": len(tiny_vocab)}))

    def test_untrained_loss_near_uniform(self, params, tiny_corpus, tiny_vocab):
        losses = []
        for i, pair in enumerate(tiny_corpus.pairs):
            for modality in ("W", "T", "WT"):
                x = serialize_pair(pair, modality, tiny_vocab, params.cfg)
                plan = make_masking_plan(x, stream(i, modality), params.cfg.V)
                losses.append(mlm_loss(params, x, plan).item())
        assert np.mean(losses) == pytest.approx(math.log(params.cfg.V), abs=0.2)

    def test_universal_loss_is_sum_of_modalities(self, params, tiny_corpus, tiny_vocab):
        pair = tiny_corpus.pairs[0]
        terms = universal_mlm_terms(params, pair, tiny_vocab, stream(3, "mlm"))
        total = universal_mlm_loss(params, pair, tiny_vocab, stream(3, "mlm"))
        assert set(terms) == {"W", "T", "WT"}
        assert total.item() == pytest.approx(sum(t.item() for t in terms.values()), abs=1e-14)

    def test_modalities_can_be_restricted(self, params, tiny_corpus, tiny_vocab):
        terms = universal_mlm_terms(params, tiny_corpus.pairs[0], tiny_vocab, stream(0, "mlm"), modalities=["WT"])
        assert list(terms) == ["WT"]

    def test_memorizes_a_single_sequence(self, params, tiny_corpus, tiny_vocab):
        # Arrange: one text sequence with a fixed masking plan
        x = serialize_pair(tiny_corpus.pairs[0], "W", tiny_vocab, params.cfg)
        plan = make_masking_plan(x, stream(0, "memorize"), params.cfg.V)
        assert not plan.is_empty
        state = AdamState()

        # Act
        for _ in range(300):
            params.zero_grad()
            mlm_loss(params, x, plan).backward()
            state = adamw_step(params, state=state, lr=0.03, weight_decay=0.0)

        # Assert
        assert mlm_loss(params, x, plan).item() < 0.1


# ==================== Pooling ====================

class TestPool:
    """Mean over real positions."""

    def test_identical_rows(self):
        H = Tensor(np.tile([1.5, -2.0, 0.5], (4, 1)))
        assert np.allclose(pool(H, np.ones(4)).data, [1.5, -2.0, 0.5])

    def test_hand_mean(self):
        assert np.allclose(pool(Tensor([[1.0, 3.0], [3.0, 5.0]]), np.array([1, 1])).data, [2.0, 4.0])

    def test_pad_rows_excluded(self):
        assert np.allclose(pool(Tensor([[2.0, 2.0], [100.0, 100.0]]), np.array([1, 0])).data, [2.0, 2.0])

    def test_all_pad_rejected(self):
        with pytest.raises(EmptyPoolError):
            pool(Tensor(np.ones((2, 2))), np.array([0, 0]))


# ==================== Contrastive ====================

class TestInfoNCE:
    """Contrastive loss with in-batch negatives."""

    def test_single_anchor_is_zero(self):
        a = Tensor(np.random.default_rng(0).normal(size=(1, 4)))
        assert infonce(a, a, LossConfig(tau=0.05)).item() == 0.0

    def test_hand_computed_pair(self):
        eye = Tensor(np.eye(2))
        loss = infonce(eye, eye, LossConfig(tau=1.0))
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert loss.item() == pytest.approx(0.31326, abs=1e-5)

    @pytest.mark.parametrize("kind", ["dot", "cosine"])
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_naive_oracle(self, seed, kind):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        tau = float(rng.choice([0.01, 0.05, 0.1, 1.0]))
        a, p = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
        got = infonce(Tensor(a), Tensor(p), LossConfig(tau=tau, similarity=kind)).item()
        assert got == pytest.approx(naive_infonce(a, p, tau, kind), rel=1e-9, abs=1e-9)

    def test_large_margin_vanishes(self):
        loss = infonce(Tensor(50.0 * np.eye(3)), Tensor(np.eye(3)), LossConfig(tau=1.0)).item()
        assert 0.0 <= loss < 1e-20

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        a, p = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        perm = rng.permutation(5)
        cfg = LossConfig(tau=0.5)
        assert infonce(Tensor(a), Tensor(p), cfg).item() == pytest.approx(
            infonce(Tensor(a[perm]), Tensor(p[perm]), cfg).item(), abs=1e-12)

    def test_cosine_ignores_row_scale(self):
        rng = np.random.default_rng(4)
        a, p = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        scaled = p * np.array([[3.0], [0.5], [1.0], [7.0]])
        cfg = LossConfig(tau=0.1, similarity="cosine")
        assert infonce(Tensor(a), Tensor(p), cfg).item() == pytest.approx(
            infonce(Tensor(a), Tensor(scaled), cfg).item(), abs=1e-9)

    def test_hard_negatives_only_touch_their_anchor(self):
        rng = np.random.default_rng(6)
        a, p = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        neg = rng.normal(size=(2, 4))
        cfg = LossConfig(tau=1.0)
        got = infonce(Tensor(a), Tensor(p), cfg, extra_negatives=[Tensor(neg), None, None]).item()
        sims0 = np.concatenate([p @ a[0], neg @ a[0]])
        row0 = -(sims0[0] - np.log(np.exp(sims0).sum()))
        rest = [-(p[i] @ a[i] - np.log(np.exp(p @ a[i]).sum())) for i in (1, 2)]
        assert got == pytest.approx((row0 + sum(rest)) / 3, abs=1e-10)

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            infonce(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), LossConfig())


class TestCMCR:
    """Cross-modal contrastive regularization."""

    def test_single_pair_is_zero(self):
        row = np.array([[1.0, 2.0]])
        assert cmcr_loss(reps(row, row, row), LossConfig()).item() == 0.0

    def test_sum_of_three_terms(self):
        rng = np.random.default_rng(9)
        r_w, r_t, r_wt = (rng.normal(size=(4, 3)) for _ in range(3))
        cfg = LossConfig(tau=0.3)
        expected = (infonce(Tensor(r_t), Tensor(r_w), cfg).item()
                    + infonce(Tensor(r_t), Tensor(r_wt), cfg).item()
                    + infonce(Tensor(r_wt), Tensor(r_w), cfg).item())
        assert cmcr_loss(reps(r_w, r_t, r_wt), cfg).item() == pytest.approx(expected, abs=1e-12)

    def test_orthogonal_pairs(self):
        r = np.array([[2.0, 0.0], [0.0, 2.0]])
        loss = cmcr_loss(reps(r, r, r), LossConfig(tau=1.0)).item()
        assert loss == pytest.approx(3 * math.log(1 + math.exp(-4.0)), abs=1e-12)

    def test_symmetric_option_averages_directions(self):
        rng = np.random.default_rng(1)
        r_w, r_t, r_wt = (rng.normal(size=(3, 4)) for _ in range(3))
        cfg = LossConfig(tau=1.0, symmetric_cmcr=True)
        plain = LossConfig(tau=1.0)
        t_w = 0.5 * (infonce(Tensor(r_t), Tensor(r_w), plain).item() + infonce(Tensor(r_w), Tensor(r_t), plain).item())
        assert cmcr_terms(reps(r_w, r_t, r_wt), cfg)["t_w"].item() == pytest.approx(t_w, abs=1e-12)

    def test_terms_can_be_dropped(self):
        rng = np.random.default_rng(1)
        r_w, r_t, r_wt = (rng.normal(size=(3, 4)) for _ in range(3))
        terms = cmcr_terms(reps(r_w, r_t, r_wt), LossConfig(cmcr_terms=["t_w", "wt_w"]))
        assert set(terms) == {"t_w", "wt_w"}

    def test_misaligned_shapes_rejected(self):
        with pytest.raises(ShapeError):
            reps(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 3)))


class TestTotalLoss:
    """Multi-task objective."""

    @pytest.fixture
    def params(self, tiny_vocab, tiny_model_cfg):
        return EncoderParams.init(tiny_model_cfg.model_copy(update={"V": len(tiny_vocab)}))

    def test_components_add_up(self, params, tiny_corpus, tiny_vocab):
        L, parts = total_loss(params, tiny_corpus.pairs[:3], LossConfig(), stream(0, "t"), tiny_vocab)
        assert L.item() == pytest.approx(parts.L_cmcr.item() + parts.L_mlm.item(), abs=1e-14)
        assert parts.as_floats()["L"] == L.item()

    def test_single_pair_batch_is_pure_mlm(self, params, tiny_corpus, tiny_vocab):
        L, parts = total_loss(params, tiny_corpus.pairs[:1], LossConfig(), stream(0, "t"), tiny_vocab)
        assert parts.L_cmcr.item() == 0.0
        assert L.item() == parts.L_mlm.item()

    def test_objectives_can_be_disabled(self, params, tiny_corpus, tiny_vocab):
        batch = tiny_corpus.pairs[:2]
        _, no_mlm = total_loss(params, batch, LossConfig(use_mlm=False), stream(0, "t"), tiny_vocab)
        _, no_cmcr = total_loss(params, batch, LossConfig(use_cmcr=False), stream(0, "t"), tiny_vocab)
        assert no_mlm.L_mlm.item() == 0.0 and no_mlm.L_cmcr.item() > 0.0
        assert no_cmcr.L_cmcr.item() == 0.0 and no_cmcr.L_mlm.item() > 0.0

    def test_empty_batch_rejected(self, params, tiny_vocab):
        with pytest.raises(ValueError):
            total_loss(params, [], LossConfig(), stream(0, "t"), tiny_vocab)

    def test_every_parameter_receives_gradient(self, params, tiny_corpus, tiny_vocab):
        # Act
        L, _ = total_loss(params, tiny_corpus.pairs[:4], LossConfig(), stream(0, "flow"), tiny_vocab,
                          train_mode=True)
        L.backward()

        # Assert
        for name, t in params.items():
            if name.endswith(".attn.bk"):
                # a key bias shifts every score of one query equally; softmax cancels it
                continue
            assert t.grad is not None and np.any(t.grad != 0.0), name

    @pytest.mark.gradcheck
    def test_gradcheck_full_loss(self, params, tiny_corpus, tiny_vocab):
        # Arrange
        batch = tiny_corpus.pairs[:2]

        def loss(*_):
            L, _ = total_loss(params, batch, LossConfig(), stream(0, "gc"), tiny_vocab, train_mode=False)
            return L

        # Act
        report = gradcheck(loss, params.parameters(), h=1e-5, tol=1e-4, floor=1e-3,
                           max_entries_per_tensor=3, seed=0)

        # Assert
        assert report.max_relative_error < 1e-4, report.worst_entry
