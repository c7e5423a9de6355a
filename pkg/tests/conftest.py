import numpy as np
import pytest
import torch

from ute_toy.data import DEFAULT_VOCABULARY, generate_synthetic_dataset
from ute_toy.diffusion import UNet, UnetConfig, make_schedule
from ute_toy.edit import Components
from ute_toy.glyph_encoder import GlyphEncoder, GlyphEncoderConfig, freeze
from ute_toy.vae import VAE, VaeConfig

torch.set_num_threads(1)

TINY_VAE = dict(widths=(8, 8, 8), groups=4)
TINY_GLYPH = dict(dim=16, layers=1, heads=2)
TINY_UNET = dict(base_width=16, channel_mults=(1, 2), attention_levels=(1,), context_dim=16, heads=2, groups=4)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return generate_synthetic_dataset(tmp_path_factory.mktemp("tiny"), 24, seed=7)


@pytest.fixture(scope="session")
def tiny_images(tiny_manifest):
    return tiny_manifest.load_all()


@pytest.fixture()
def tiny_components():
    torch.manual_seed(0)
    vae = freeze(VAE(VaeConfig(**TINY_VAE)))
    enc = freeze(GlyphEncoder(GlyphEncoderConfig(**TINY_GLYPH)))
    unet = UNet(UnetConfig(**TINY_UNET)).eval()
    return Components(vae, enc, unet, make_schedule(20, 1e-3, 0.2))


@pytest.fixture()
def vocabulary():
    return list(DEFAULT_VOCABULARY)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
