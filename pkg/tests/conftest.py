import numpy as np
import pytest

from uabackprop.data import SyntheticSpec, gen_synthetic
from uabackprop.nn import ArchSpec, EnsemblePosterior, TrainConfig, build_network, mlp_arch, train_ensemble


def small_conv_arch(channels=1, side=6, classes=3, width=3, hidden=5) -> ArchSpec:
    layers = (
        {"type": "conv2d", "out": width, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "maxpool", "kernel": 2},
        {"type": "flatten"},
        {"type": "dense", "out": hidden},
        {"type": "relu"},
    )
    return ArchSpec((channels, side, side), classes, layers)


def random_ensemble(members=3, classes=3, channels=1, side=6, seed=0, arch="conv", scale=3.0) -> EnsemblePosterior:
    """Untrained ensemble with weights scaled up so members disagree noticeably."""
    if arch == "conv":
        spec = small_conv_arch(channels, side, classes)
    else:
        spec = mlp_arch((channels, side, side), classes, (6,))
    nets = []
    for s in range(members):
        net = build_network(spec, seed * 100 + s)
        net.params = [p * scale for p in net.params]
        nets.append(net)
    return EnsemblePosterior(nets, [seed * 100 + s for s in range(members)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shapes_train():
    return gen_synthetic(SyntheticSpec(n=800, classes=4, noise=0.05), seed=1)


@pytest.fixture(scope="session")
def trained_ensemble(shapes_train):
    """Five-member reference-architecture ensemble on the 4-class shape set."""
    from uabackprop.nn import reference_arch

    cfg = TrainConfig(lr=0.05, epochs=8, batch_size=64, seed=0)
    return train_ensemble(reference_arch((1, 16, 16), 4), shapes_train.images, shapes_train.labels, cfg, 5)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
