import numpy as np
import pytest

from ftlab import model as model_mod
from ftlab.data import generate_synthetic
from ftlab.model import ModelConfig, init_model
from ftlab.train import TrainConfig

TINY = ModelConfig(vocab_size=258, max_seq_len=128, d_model=16, n_heads=2, n_layers=2, d_ff=32, name="tiny")

_ACCEPTANCE: list[str] = []


@pytest.fixture
def tiny_preset(monkeypatch):
    """Register a fast 'tiny' preset so sweeps can run in a second or two."""
    monkeypatch.setitem(model_mod.PRESETS, "tiny", TINY)
    return "tiny"


@pytest.fixture
def tiny_model():
    return init_model(TINY.with_seed(7))


@pytest.fixture(scope="session")
def small_pairs():
    return generate_synthetic("toy_entailment", (80, 16, 16), seed=3)


@pytest.fixture
def quick_cfg():
    return TrainConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=11)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    ids = rng.integers(0, 256, size=(3, 9))
    mask = np.ones((3, 9), dtype=bool)
    mask[1, 6:] = False
    mask[2, 3:] = False
    return ids, mask


@pytest.fixture
def record_criterion(capsys):
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
