import numpy as np
import pytest
import torch

from refaudio.codecs import CodecParams
from refaudio.dataset_forge import ForgeConfig, build_dataset
from refaudio.event_bank import EventBank
from refaudio.mrc.unet import MRCConfig, MRCUNet
from refaudio.schemas import EventSpec, Timbre
from refaudio.text_encoder import TextEncoder


def tone_spec(event_id: str = "tone", base_hz: float = 440.0, duration_s: float = 1.0,
              family: str = "sine-stack", partials=(1.0,), noise_mix: float = 0.0) -> EventSpec:
    return EventSpec(
        event_id=event_id,
        label=f"a {event_id}",
        timbre=Timbre(family=family, base_hz=base_hz, partials=tuple(partials),
                      envelope=((0.0, 1.0), (1.0, 1.0)), noise_mix=noise_mix),
        duration_s=duration_s,
    )


@pytest.fixture(scope="session")
def bank() -> EventBank:
    return EventBank.default(n_events=12, seed=7)


@pytest.fixture(scope="session")
def small_bank() -> EventBank:
    return EventBank.default(n_events=4, seed=7)


@pytest.fixture(scope="session")
def codec() -> CodecParams:
    return CodecParams()


@pytest.fixture
def tiny_config() -> MRCConfig:
    """Reduced latent grid (4 x 16 x 8) for fast forward passes."""
    return MRCConfig(n_hidden=8, latent_channels=4, d_text=16, k_max=2)


@pytest.fixture
def tiny_model(tiny_config) -> MRCUNet:
    torch.manual_seed(0)
    return MRCUNet(tiny_config).eval()


@pytest.fixture
def codec_model() -> MRCUNet:
    """Small model on the full deterministic-codec latent (16 x 256 x 16)."""
    torch.manual_seed(0)
    return MRCUNet(MRCConfig(n_hidden=8, latent_channels=16, d_text=16, k_max=3))


@pytest.fixture
def text_encoder() -> TextEncoder:
    torch.manual_seed(0)
    return TextEncoder(d_text=16)


def tiny_inputs(config: MRCConfig, batch: int = 1, k: int | None = None, seed: int = 0,
                dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    k = config.k_max if k is None else k
    z = torch.randn(batch, config.latent_channels, 16, 8, generator=g, dtype=dtype)
    lam = torch.rand(batch, generator=g, dtype=dtype)
    refs = torch.randn(batch, config.latent_channels, 16 * k, 8, generator=g, dtype=dtype)
    text = torch.randn(batch, 50 * k, config.d_text, generator=g, dtype=dtype)
    prompt = torch.randn(batch, 50, config.d_text, generator=g, dtype=dtype)
    return z, lam, refs, text, prompt


@pytest.fixture(scope="session")
def concat_manifest(tmp_path_factory, small_bank):
    """Six forged concatenation examples on disk: (root, train, test)."""
    root = tmp_path_factory.mktemp("concat")
    train, test = build_dataset(small_bank, ForgeConfig(n_examples=6, rng_seed=3, n_test=2), root)
    return root, train, test


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
