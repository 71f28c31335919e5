import numpy as np
import pytest

from stvae import fields, generators, study


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running checks")


@pytest.fixture(scope="session")
def mask():
    return fields.default_mask()


@pytest.fixture(scope="session")
def small_model():
    """A quickly trained VAE on ST data, good enough for round-trip checks."""
    data = generators.generate_dataset(generators.GeneratorSpec("st", 6, 300, seed=3))
    settings = study.VaeSettings(epochs=15, batch_size=50)
    return study.fit_vae(data, settings, seed=1), data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number, ok, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        request.config.stash.setdefault(_LINES, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
