"""
Unit tests for serialization and the transformer encoder.

Covers:
- the three modality templates and their structural channels
- numeric ranks
- truncation and budget errors
- forward: shape, determinism, pad invariance, channel ablation
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Add the project root to Python path
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from utp.core.exceptions import (
    ChannelRangeError,
    MissingModalityInputError,
    NoTableBudgetError,
    TableTooLargeError,
)
from utp.core.seeding import stream
from utp.models.config_models import ModelConfig
from utp.models.table_models import Table
from utp.services.encoder_service import (
    CHANNELS,
    INIT_STD,
    EncoderParams,
    compute_ranks,
    forward,
    parameter_shapes,
    serialize,
    serialize_pair,
)
from utp.services.tokenizer_service import CLS, PAD, SEP, SPECIAL_TOKENS, Vocab

pytestmark = pytest.mark.unit


@pytest.fixture
def ab_vocab():
    """Specials plus 'a' (id 5) and 'b' (id 6)."""
    return Vocab(SPECIAL_TOKENS + ["a", "b", "c", "d", "e", "f", "g", "h"])


@pytest.fixture
def small_cfg(ab_vocab):
    return ModelConfig(d=8, l=8, n_layers=1, n_heads=2, d_ff=16, V=len(ab_vocab), n_columns=4, n_rows=4,
                       n_ranks=4, n_cell_tokens=4, dropout=0.0)


@pytest.fixture
def ab_table():
    return Table(header=["a"], rows=[["b"]])


class TestSerialize:
    """Modality templates."""

    def test_text_only(self, ab_vocab, small_cfg):
        x = serialize([7, 8], None, "W", ab_vocab, small_cfg)
        assert list(x.token_ids) == [CLS, 7, 8, SEP, PAD, PAD, PAD, PAD]
        assert not x.segment.any() and not x.column.any() and not x.row.any()
        assert list(x.attention_mask) == [1, 1, 1, 1, 0, 0, 0, 0]
        assert set(x.format) == {0}

    def test_table_only(self, ab_vocab, small_cfg, ab_table):
        x = serialize(None, ab_table, "T", ab_vocab, small_cfg)
        assert list(x.token_ids[:4]) == [CLS, 5, 6, SEP]
        assert list(x.column[:4]) == [0, 1, 1, 0]
        assert list(x.row[:4]) == [0, 0, 1, 0]
        assert list(x.segment[:4]) == [0, 1, 1, 0]
        assert list(x.cell_token[:4]) == [0, 1, 1, 0]
        assert set(x.format) == {1}
        assert x.cell_spans == {(0, 1): [1], (1, 1): [2]}

    def test_text_and_table(self, ab_vocab, small_cfg, ab_table):
        x = serialize([7], ab_table, "WT", ab_vocab, small_cfg)
        assert list(x.token_ids[:6]) == [CLS, 7, SEP, 5, 6, SEP]
        assert list(x.segment) == [0, 0, 0, 1, 1, 0, 0, 0]
        assert set(x.format) == {2}
        assert x.length == 6

    def test_segment_matches_column(self, tiny_corpus, tiny_vocab, tiny_model_cfg):
        cfg = tiny_model_cfg.model_copy(update={"V": len(tiny_vocab)})
        for pair in tiny_corpus.pairs:
            for modality in ("W", "T", "WT"):
                x = serialize_pair(pair, modality, tiny_vocab, cfg)
                assert x.token_ids[0] == CLS
                assert np.array_equal(x.segment == 1, x.column > 0)
                mask = x.attention_mask
                assert np.all(np.diff(mask) <= 0)
                for name in CHANNELS:
                    assert x.channel(name).max() < {
                        "segment": cfg.n_segments, "column": cfg.n_columns, "row": cfg.n_rows,
                        "rank": cfg.n_ranks, "inv_rank": cfg.n_ranks, "cell_token": cfg.n_cell_tokens,
                        "format": cfg.n_formats,
                    }[name]

    def test_multi_token_cell_indices(self, small_cfg):
        vocab = Vocab(SPECIAL_TOKENS + ["new", "york", "city"])
        cfg = small_cfg.model_copy(update={"V": len(vocab)})
        x = serialize(None, Table(header=["city"], rows=[["New York"]]), "T", vocab, cfg)
        assert list(x.cell_token[1:4]) == [1, 1, 2]
        assert x.cell_spans[(1, 1)] == [2, 3]

    @pytest.mark.parametrize("modality, text, table", [
        ("W", None, None),
        ("T", [7], None),
        ("WT", None, Table(header=["a"])),
    ])
    def test_missing_side(self, ab_vocab, small_cfg, modality, text, table):
        with pytest.raises(MissingModalityInputError):
            serialize(text, table, modality, ab_vocab, small_cfg)

    def test_text_truncated_in_text_mode(self, ab_vocab, small_cfg):
        x = serialize(list(range(5, 13)), None, "W", ab_vocab, small_cfg)
        assert x.length == small_cfg.l
        assert x.token_ids[-1] == SEP

    def test_no_table_budget(self, ab_vocab, small_cfg, ab_table):
        with pytest.raises(NoTableBudgetError):
            serialize([7, 8, 9, 10, 11, 12], ab_table, "WT", ab_vocab, small_cfg)

    def test_too_many_columns(self, ab_vocab, small_cfg):
        wide = Table(header=["a", "b", "c", "d"], rows=[])
        with pytest.raises(TableTooLargeError):
            serialize(None, wide, "T", ab_vocab, small_cfg)

    def test_cells_dropped_from_the_end(self, ab_vocab, small_cfg):
        table = Table(header=["a", "b"], rows=[["c", "d"], ["e", "f"], ["g", "h"]])
        x = serialize(None, table, "T", ab_vocab, small_cfg)
        # l=8 leaves six table slots after [CLS] ... [SEP].
        assert x.length == 8
        assert (3, 1) not in x.cell_spans and (3, 2) not in x.cell_spans
        assert (2, 2) in x.cell_spans
        assert x.dropped_cells == 2

    def test_rows_beyond_channel_dropped(self, ab_vocab, small_cfg):
        cfg = small_cfg.model_copy(update={"l": 16})
        table = Table(header=["a"], rows=[["b"], ["c"], ["d"], ["e"], ["f"]])
        x = serialize(None, table, "T", ab_vocab, cfg)
        assert x.row.max() == cfg.n_rows - 1
        assert x.dropped_cells == 2


class TestComputeRanks:
    """Dense numeric ranks per column."""

    def test_hand_sorted(self):
        t = Table(header=["v"], rows=[["3"], ["1"], ["2"]])
        assert compute_ranks(t, 0) == ([3, 1, 2], [1, 3, 2])

    def test_non_numeric(self):
        t = Table(header=["v"], rows=[["x"], ["y"]])
        assert compute_ranks(t, 0) == ([0, 0], [0, 0])

    def test_ties_share_rank(self):
        t = Table(header=["v"], rows=[["5"], ["5"]])
        assert compute_ranks(t, 0) == ([1, 1], [1, 1])

    def test_mixed_column(self):
        t = Table(header=["v"], rows=[["10"], ["n/a"], ["2.5"], ["10"]])
        assert compute_ranks(t, 0) == ([2, 0, 1, 2], [1, 0, 2, 1])

    def test_invalid_column(self):
        with pytest.raises(IndexError):
            compute_ranks(Table(header=["v"]), 1)


class TestEncoderParams:
    """Initialization."""

    def test_deterministic_in_seed(self, tiny_model_cfg):
        a = EncoderParams.init(tiny_model_cfg).numpy()
        b = EncoderParams.init(tiny_model_cfg).numpy()
        c = EncoderParams.init(tiny_model_cfg.model_copy(update={"seed": 1})).numpy()
        assert all(np.array_equal(a[n], b[n]) for n in a)
        assert not np.array_equal(a["embeddings.token"], c["embeddings.token"])

    def test_init_values(self, tiny_model_cfg):
        params = EncoderParams.init(tiny_model_cfg)
        assert list(params) == list(parameter_shapes(tiny_model_cfg))
        for name, t in params.items():
            if name.endswith(".gain"):
                assert np.all(t.data == 1.0)
            elif name.endswith("bias") or name.rsplit(".", 1)[-1].startswith("b"):
                assert np.all(t.data == 0.0)
            else:
                assert np.max(np.abs(t.data)) <= 2 * INIT_STD


class TestForward:
    """Contextualized representations."""

    @pytest.fixture
    def setup(self, tiny_corpus, tiny_vocab, tiny_model_cfg):
        cfg = tiny_model_cfg.model_copy(update={"V": len(tiny_vocab)})
        params = EncoderParams.init(cfg)
        x = serialize_pair(tiny_corpus.pairs[0], "WT", tiny_vocab, cfg)
        return params, x

    def test_shape(self, setup):
        params, x = setup
        assert forward(params, x).shape == (params.cfg.l, params.cfg.d)

    def test_eval_mode_is_deterministic(self, setup):
        params, x = setup
        assert np.array_equal(forward(params, x).data, forward(params, x).data)

    def test_dropout_only_in_train_mode(self, setup):
        params, x = setup
        params = EncoderParams(params.cfg.model_copy(update={"dropout": 0.5}), params._tensors)
        eval_out = forward(params, x, train_mode=False, rng=stream(0, "drop")).data
        train_out = forward(params, x, train_mode=True, rng=stream(0, "drop")).data
        assert np.array_equal(eval_out, forward(params, x).data)
        assert not np.allclose(eval_out, train_out)

    def test_pad_invariance(self, setup):
        # Arrange
        params, x = setup
        n = x.length
        rng = np.random.default_rng(0)
        noisy = x.token_ids.copy()
        noisy[n:] = rng.integers(0, params.cfg.V, size=params.cfg.l - n)

        # Act
        clean_h = forward(params, x).data
        noisy_h = forward(params, x.with_token_ids(noisy)).data

        # Assert
        assert np.allclose(clean_h[:n], noisy_h[:n], atol=1e-12)

    def test_channel_out_of_range(self, setup):
        params, x = setup
        bad = replace(x, row=np.full_like(x.row, params.cfg.n_rows))
        with pytest.raises(ChannelRangeError):
            forward(params, bad)

    def test_structure_enters_only_through_channels(self, tiny_corpus, tiny_vocab, tiny_model_cfg):
        # Arrange
        cfg = tiny_model_cfg.model_copy(update={"V": len(tiny_vocab)})
        params = EncoderParams.init(cfg)
        for table in params.structural_tables().values():
            table.data[:] = 0.0
        x_table = serialize(None, tiny_corpus.pairs[0].table, "T", tiny_vocab, cfg)
        zeros = {name: np.zeros_like(x_table.channel(name)) for name in CHANNELS}
        x_plain = replace(x_table, modality="W", **zeros)

        # Act / Assert
        assert np.allclose(forward(params, x_table).data, forward(params, x_plain).data, atol=1e-12)
