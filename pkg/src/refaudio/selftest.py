"""In-process property checks that need no data on disk."""

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import settings
from ._logging import get_logger
from .codecs import CodecParams, MelSpectrogram, decode_latent, encode_latent
from .dataset_forge import ForgeConfig, build_overlay_example, mixing_gain, reconstruct_overlay
from .eval_suite import GaussianStats, clap_a_score, clap_score, frechet_distance, kl_divergence
from .event_bank import EventBank
from .mrc.flow import cfg_combine, flow_interpolate, sample_ode, velocity_target
from .mrc.unet import MRCConfig, MRCUNet

logger = get_logger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _flow_endpoints() -> str:
    g = torch.Generator().manual_seed(0)
    for _ in range(100):
        z0 = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        z1 = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        assert torch.equal(flow_interpolate(z0, z1, 0.0), z0)
        end = flow_interpolate(z0, z1, 1.0)
        assert float((end - z1).norm()) <= settings.SIGMA * float(z0.norm()) * (1 + 1e-6)
    return "100 random pairs"


def _velocity_lambda_free() -> str:
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(2, 4, 8, 8, generator=g)
    z1 = torch.randn(2, 4, 8, 8, generator=g)
    reference = velocity_target(z0, z1)
    for lam in torch.rand(10, generator=g):
        flow_interpolate(z0, z1, float(lam))  # lambda never enters the target
        assert torch.equal(velocity_target(z0, z1), reference)
    return "10 lambda draws"


def _tiny_unet() -> MRCUNet:
    torch.manual_seed(0)
    return MRCUNet(MRCConfig(n_hidden=8, latent_channels=4, d_text=16, k_max=2)).eval()


def _zero_init_neutrality() -> str:
    model = _tiny_unet()
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for _ in range(20):
            z = torch.randn(1, 4, 16, 8, generator=g)
            lam = torch.rand(1, generator=g)
            prompt = torch.randn(1, 50, 16, generator=g)
            refs = torch.randn(1, 4, 32, 8, generator=g)
            text = torch.randn(1, 100, 16, generator=g)
            a = model(z, lam, refs, text, prompt)
            b = model(z, lam, torch.zeros_like(refs), torch.zeros_like(text), prompt)
            assert torch.equal(a, b)
    return "20 random inputs, bit-identical"


def _sampler_oracle() -> str:
    v_star = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

    def constant(z, lam, refs, text, prompt):
        return v_star

    empty = torch.zeros(1, 4, 8, 8, dtype=torch.float64)
    ctx = torch.zeros(1, 1, 1, dtype=torch.float64)
    for steps in (1, 5, 25, 50):
        z0 = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        out = sample_ode(constant, empty, ctx, ctx, shape=(1, 4, 8, 8), null_references=empty,
                         null_reference_text=ctx, null_prompt=ctx, steps=steps, z0=z0)
        assert torch.allclose(out, z0 + v_star, atol=1e-12, rtol=0)
    try:
        sample_ode(constant, empty, ctx, ctx, shape=(1, 4, 8, 8), null_references=empty,
                   null_reference_text=ctx, null_prompt=ctx, steps=51)
    except ValueError:
        pass
    else:
        raise AssertionError("steps=51 accepted")
    assert float(cfg_combine(torch.tensor([1.0]), torch.tensor([0.0]), 2.0)) == 2.0
    return "steps 1/5/25/50, 51 rejected"


def _metric_oracles() -> str:
    fd = frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[1.0]]))
    assert abs(fd - 1.0) < 1e-6, fd
    assert abs(kl_divergence([0.5, 0.5], [0.9, 0.1]) - 0.5108) < 1e-3
    assert abs(kl_divergence([1, 0, 0, 0], [0.25] * 4) - math.log(4)) < 1e-12
    assert abs(clap_score([1.0, 0.0], np.array([1.0, 1.0]) / math.sqrt(2)) - 0.7071) < 1e-4
    assert clap_a_score([0.0, 0.0], [1.0, 0.0]) == 0.0
    return "FAD/KL/CLAP closed forms"


def _codec_bijection() -> str:
    params = CodecParams()
    mel = MelSpectrogram(np.random.default_rng(5).random((params.frames, params.n_mels), dtype=np.float32))
    assert np.array_equal(decode_latent(encode_latent(mel, params), params).values, mel.values)
    return "deterministic codec round trip"


def _overlay_snr() -> str:
    bank = EventBank.default(n_events=4, seed=7)
    config = ForgeConfig(mode="overlay", n_examples=1)
    for seed in range(3):
        example = build_overlay_example(bank, config, seed)
        assert np.allclose(reconstruct_overlay(example).samples, example.target.samples)
        base = example.references[2].audio.samples
        front = example.references[0].audio.samples
        window = base[: front.size]
        gain = mixing_gain(window, front, -example.snr_db[0])
        achieved = 20 * np.log10(np.sqrt(np.mean((gain * front) ** 2)) / np.sqrt(np.mean(window ** 2)))
        assert abs(achieved - example.snr_db[0]) < 1e-3
    return "3 overlay draws"


CHECKS: dict[str, Callable[[], str]] = {
    "flow endpoints": _flow_endpoints,
    "velocity lambda-independence": _velocity_lambda_free,
    "zero-init neutrality": _zero_init_neutrality,
    "sampler oracle": _sampler_oracle,
    "metric oracles": _metric_oracles,
    "codec bijection": _codec_bijection,
    "overlay SNR": _overlay_snr,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            detail = check()
            passed = True
        except AssertionError as exc:
            detail, passed = f"assertion failed: {exc}", False
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            detail, passed = f"{type(exc).__name__}: {exc}", False
        result = CheckResult(name, passed, detail, time.perf_counter() - start)
        logger.info("Selftest check", check=name, passed=passed, detail=detail,
                    seconds=round(result.seconds, 3))
        results.append(result)
    return results
