import numpy as np
import pytest
import torch

from crvae.model import Architecture, build_model


@pytest.fixture(scope="session")
def mnist5k_path(tmp_path_factory):
    """IDX files for the shuffled 5000-image MNIST subset."""
    from crvae._demo_data import mnist5k_to_idx

    return mnist5k_to_idx(tmp_path_factory.mktemp("mnist5k"))


@pytest.fixture(scope="session")
def mnist5k(mnist5k_path):
    from crvae.data import load_dataset

    return load_dataset(mnist5k_path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_images():
    """Sixty-four 1x28x28 images of random blobs in [0, 1]."""
    r = np.random.default_rng(7)
    yy, xx = np.mgrid[:28, :28]
    out = np.empty((64, 1, 28, 28), dtype=np.float32)
    for i in range(64):
        cy, cx = r.uniform(6, 22, size=2)
        s = r.uniform(2, 5)
        out[i, 0] = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out


@pytest.fixture
def toy_model():
    arch = Architecture.toy(latent_dim=2)
    gen = torch.Generator().manual_seed(0)
    return build_model(arch, gen, torch.float64)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_report():
    """Record the pass/fail line of one acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
