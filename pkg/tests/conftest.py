import numpy as np
import pytest

from deltaproj.config import ProjectorConfig
from deltaproj.gradcheck import tiny_config

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def desk_cfg():
    return ProjectorConfig.preset("desk")


@pytest.fixture
def small_cfg():
    """Desk grid (24x24 patches, 12x12 queries) at width 16 for fast pipeline tests."""
    return ProjectorConfig.preset("desk").replace(feat_dim=16, embed_dim=16, heads=2, rank=4,
                                                  mem_tokens=8, ffn_hidden=64)


@pytest.fixture
def tiny_cfg():
    return tiny_config(0)


@pytest.fixture
def criterion():
    """Callable recording one acceptance criterion outcome for the terminal summary."""

    class Recorder:
        def __call__(self, number: int, title: str, passed: bool, detail: str = ""):
            _CRITERIA[number] = (title, bool(passed), detail)
            return passed

    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f" :: {detail}" if detail else ""))
