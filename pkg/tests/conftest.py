import pytest
import torch

from sdmessenger.datagen import build_corpus, load_manifest, make_config
from sdmessenger.dataio import CorpusTensors


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Tiny Semi-MDG corpus shared by the fast tests."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = make_config(out, "semimdg", seed=3, size=64, labeled=4, unlabeled=8, test=4)
    build_corpus(cfg)
    return load_manifest(out)


@pytest.fixture(scope="session")
def small_data(small_corpus):
    return CorpusTensors(small_corpus)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(name, ok, detail)`` logs one acceptance line, then asserts ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name: str, ok: bool, detail: str = ""):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
