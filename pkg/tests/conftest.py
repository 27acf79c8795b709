import pytest
import torch

from fhvae.model import ArchConfig, LatentConfig, SVectorTable, build_model

torch.set_num_threads(1)


@pytest.fixture
def tiny_latent():
    return LatentConfig(dim_z1=3, dim_z2=2, dim_z_vae=4, width=4, input_dim=3)


@pytest.fixture
def ff_arch():
    return ArchConfig(layers=1, units=6, cell="ff")


@pytest.fixture
def tiny_fhvae(tiny_latent, ff_arch):
    return build_model("fhvae", tiny_latent, ff_arch, seed=1).double()


@pytest.fixture
def tiny_table():
    return SVectorTable([f"u{i}" for i in range(5)], 2).double()


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


_RESULTS = []


def record_criterion(number, name, passed, detail=""):
    _RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {name} {detail}".rstrip())
