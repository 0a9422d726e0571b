import numpy as np
import pytest
import torch
from hypothesis import settings

from measure.data import SynthConfig, synth_generate

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    """Four short recordings; enough for sampler, fold and staging plumbing."""
    return synth_generate(SynthConfig(n_domains=4, epochs_per_domain=80, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ---------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """report(n, passed, detail): records one PASS/FAIL line for acceptance criterion n."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def report(n: int, passed: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        print(lines[n])
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
