import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ists import evaluation as ev
from ists.backend import BackendConfig, PromptContext, make_backend
from ists.codec import ToyCodec
from ists.pipeline import PatternKey
from ists.selector import MappingConfig

settings.register_profile("ists", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ists")

TOY_N = 64
PERM_KEY = "test-permutation-key"
PATTERN_SEED = 20240917

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return BackendConfig(kind="toy-linear", channels=4, height=16, width=16)


@pytest.fixture(scope="session")
def linear_backend():
    return make_backend(BackendConfig(kind="toy-linear"))


@pytest.fixture(scope="session")
def scale_backend():
    return make_backend(BackendConfig(kind="toy-scale"))


@pytest.fixture(scope="session")
def linear_codec(linear_backend):
    return ToyCodec.for_backend(linear_backend)


@pytest.fixture
def ctx():
    return PromptContext.from_prompt("a lighthouse at dusk", 0)


@pytest.fixture(scope="session")
def toy_prompts():
    return ev.prompts_for(TOY_N)


@pytest.fixture(scope="session")
def toy_lab(toy_prompts):
    """Default toy-linear backend, selector with C=64 trained on the evaluation prompts."""
    return ev.build_lab(
        BackendConfig(kind="toy-linear"), PatternKey(PATTERN_SEED), MappingConfig(C=64), PERM_KEY, toy_prompts
    )


@pytest.fixture(scope="session")
def ists_pairs(toy_lab, toy_prompts):
    from ists.pipeline import SCHEMES

    return ev.generate_pairs(toy_lab, SCHEMES["ists"], toy_prompts)
