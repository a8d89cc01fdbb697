import hypothesis
import pytest
import torch

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiments")


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def central_diff(fn, t, step=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. tensor ``t`` (edited in place)."""
    g = torch.zeros_like(t)
    flat, gflat = t.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn())
        flat[i] = orig - step
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
