import numpy as np
import pytest

from flowsr.model import Architecture, LowRankAdapter, VelocityModel

TINY = Architecture(channels=1, patch=2, width=6, depth=1, time_dim=4, prompt_dim=2, n_prompts=3, skip_var=1e-3)


@pytest.fixture
def tiny64():
    """Small double-precision model with a non-trivial adapter on every layer it fits."""
    rng = np.random.default_rng(0)
    m = VelocityModel.init(TINY, rng, dtype=np.float64)
    for k in m.params:
        m.params[k] = m.params[k] + 0.05 * rng.standard_normal(m.params[k].shape)
    ad = LowRankAdapter.init(m, rank=2, alpha=4.0, rng=rng)
    for k in ad.B:
        ad.B[k] = 0.1 * rng.standard_normal(ad.B[k].shape)
    return m, ad


# ---------------------------------------------------------------------------
# acceptance reporting
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a result line; the test still asserts on its own."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _CRITERIA[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    from desk import DeskRun
    return DeskRun(tmp_path_factory.mktemp("desk"))
