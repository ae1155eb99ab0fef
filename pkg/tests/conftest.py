import numpy as np
import pytest

from cemixed.fields import generate_channelized
from cemixed.grid import build_coarse_partition, build_fine_grid
from cemixed.pou import compute_kappa_tilde, solve_pou
from cemixed.spectral import select_basis, solve_all_spectral


class Setup:
    """A small high-contrast problem with its offline spectral data."""

    def __init__(self, n, N, channels, contrast, seed, Lz):
        self.fine = build_fine_grid(n, n)
        self.part = build_coarse_partition(self.fine, N, N)
        self.kappa = generate_channelized(n, n, channels, contrast, seed)
        self.pou = solve_pou(self.fine, self.part, self.kappa)
        self.kt = compute_kappa_tilde(self.kappa, self.pou)
        self.spectra = solve_all_spectral(self.fine, self.part, self.kappa, self.kt)
        self.spectral = select_basis(self.spectra, Lz)


@pytest.fixture(scope="session")
def small():
    return Setup(24, 4, 6, 1e4, 4, 3)


@pytest.fixture(scope="session")
def tiny():
    return Setup(16, 4, 4, 1e3, 1, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
