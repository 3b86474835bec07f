"""
Root pytest configuration file.

Markers and the small model/corpus fixtures shared by the unit and
integration suites.
"""

import sys
from pathlib import Path

import pytest

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from utp.models.config_models import ModelConfig  # noqa: E402
from utp.services.corpus_service import generate_synthetic  # noqa: E402
from utp.services.tokenizer_service import build_vocab  # noqa: E402


# Global fixtures
@pytest.fixture
def tiny_model_cfg():
    """A 2-layer d=16 encoder that runs a forward pass in milliseconds."""
    return ModelConfig(d=16, l=32, n_layers=2, n_heads=2, d_ff=32, n_columns=8, n_rows=8,
                       n_ranks=8, n_cell_tokens=8, dropout=0.0, seed=0)


@pytest.fixture
def tiny_corpus():
    """Eight synthetic pairs that fit l=32 in every modality."""
    return generate_synthetic(8, 12, 3, 3, seed=0, max_seq_len=32)


@pytest.fixture
def tiny_vocab(tiny_corpus):
    return build_vocab(tiny_corpus)


@pytest.fixture(autouse=True)
def isolated_output_dir(tmp_path, monkeypatch):
    """Keep default run outputs inside the test's temporary directory."""
    monkeypatch.setenv("UTP_OUTPUT_DIR", str(tmp_path / "runs"))


# Global pytest configuration
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers", "slow: marks tests as slow running (training to a quality bar)"
    )
    config.addinivalue_line(
        "markers", "cli: marks tests that drive the command line"
    )
    config.addinivalue_line(
        "markers", "gradcheck: marks finite-difference gradient checks"
    )
