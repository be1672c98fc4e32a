import numpy as np
import pytest

from xrayqc.synth import SynthConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four small batches of 64x32 plates, about a third abnormal."""
    root = tmp_path_factory.mktemp("small_ds")
    cfg = SynthConfig(
        seed=7,
        batch_sizes=(6, 8, 7, 9),
        abnormal_fraction=0.34,
        image_width=32,
        image_height=64,
        abnormal_severity=(0.8, 1.0),
    )
    return generate_dataset(cfg, root)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, text)`` wraps the checks of criterion n."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    class _Recorder:
        def __call__(self, number, text):
            self.number, self.text = number, text
            return self

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            detail = "" if exc is None else f" ({str(exc).splitlines()[0][:120]})"
            lines.append(f"criterion {self.number:>2} {status}: {self.text}{detail}")
            return False

    return _Recorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
