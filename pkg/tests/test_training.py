import numpy as np
import pytest
import torch

from refaudio.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from refaudio.dataset_forge import Region
from refaudio.errors import RefAudioValueError, TrainingError
from refaudio.mrc.training import (
    TrainBatch,
    TrainConfig,
    TrainExample,
    adapt_reference_count,
    augment_references,
    collate,
    latent_frame_range,
    lr_at,
    null_conditioned,
    prepare_examples,
    rfm_loss,
    train_loop,
)
from refaudio.mrc.flow import velocity_target
from refaudio.mrc.unet import MRCConfig, MRCUNet


def test_lr_warmup():
    assert lr_at(5000, 1e-4, 10_000) == pytest.approx(5e-5)
    assert lr_at(10_000, 1e-4, 10_000) == 1e-4
    assert lr_at(20_000, 1e-4, 10_000) == 1e-4
    assert lr_at(1, 1e-3, 0) == 1e-3


def _batch(batch=2, shape=(4, 16, 8), k=2, d=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    c, t, f = shape
    return TrainBatch(
        ids=[f"ex{i}" for i in range(batch)],
        z1=torch.randn(batch, c, t, f, generator=g),
        references=torch.randn(batch, c, k * t, f, generator=g),
        reference_text=torch.randn(batch, 50 * k, d, generator=g),
        prompt=torch.randn(batch, 50, d, generator=g),
    )


def test_loss_oracles():
    batch = _batch()
    z0 = torch.randn(batch.z1.shape, generator=torch.Generator().manual_seed(1))
    lam = torch.tensor([0.3, 0.8])
    v = velocity_target(z0, batch.z1)

    perfect = rfm_loss(batch, lambda *args: v, z0=z0, lam=lam)
    assert float(perfect) == pytest.approx(0.0, abs=1e-6)
    zero = rfm_loss(batch, lambda z, *args: torch.zeros_like(z), z0=z0, lam=lam)
    assert float(zero) == pytest.approx(float((v ** 2).mean()), abs=1e-6)


def test_loss_is_deterministic_for_fixed_generator(tiny_model):
    batch = _batch()
    a = rfm_loss(batch, tiny_model, torch.Generator().manual_seed(5))
    b = rfm_loss(batch, tiny_model, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_nan_loss_names_examples():
    batch = _batch()

    def broken(z, *args):
        out = torch.zeros_like(z)
        out[1] = float("nan")
        return out

    with pytest.raises(TrainingError, match="ex1") as info:
        rfm_loss(batch, broken)
    assert info.value.example_ids == ["ex1"]


def test_batch_validation():
    batch = _batch()
    with pytest.raises(RefAudioValueError):
        TrainBatch(ids=["a"], z1=batch.z1, references=batch.references,
                   reference_text=batch.reference_text, prompt=batch.prompt)
    with pytest.raises(RefAudioValueError):
        TrainBatch(ids=batch.ids, z1=batch.z1, references=batch.references[..., :4],
                   reference_text=batch.reference_text, prompt=batch.prompt)


def _example(k=3, shape=(4, 256, 16)):
    g = torch.Generator().manual_seed(2)
    regions = [[Region(0.0, 2.5, f"ev{i}", f"event {i}"), Region(2.5, 4.0, f"ev{i}b", "other")]
               for i in range(k)]
    return TrainExample(
        example_id="ex",
        target=torch.randn(*shape, generator=g),
        caption="event 0 then event 1",
        reference_latents=[torch.randn(*shape, generator=g) for _ in range(k)],
        reference_captions=[f"event {i}" for i in range(k)],
        reference_regions=regions,
    )


def test_augment_identity_and_full_drop(rng):
    example = _example()
    null = torch.zeros(4, 256, 16)
    same = augment_references(example, rng, null, mask_p=0.0, drop_p=0.0)
    assert same.reference_captions == example.reference_captions
    assert all(torch.equal(a, b) for a, b in zip(same.reference_latents, example.reference_latents))
    assert same.masked_slot is None

    dropped = augment_references(example, rng, null, mask_p=0.0, drop_p=1.0)
    assert dropped.reference_captions == ["", "", ""]
    assert all(torch.equal(r, null) for r in dropped.reference_latents)


def test_augment_rates(rng):
    example = _example(shape=(4, 256, 2))
    null = torch.zeros(4, 256, 2)
    draws = 10_000
    dropped = masked = 0
    for _ in range(draws):
        out = augment_references(example, rng, null)
        dropped += sum(1 for c in out.reference_captions if not c)
        masked += out.masked_slot is not None
    assert dropped / (draws * example.k) == pytest.approx(0.40, abs=0.02)
    assert masked / draws == pytest.approx(0.10, abs=0.02)


def test_masked_slot_survives_dropping(rng):
    example = _example()
    null = torch.zeros(4, 256, 16)
    for _ in range(20):
        out = augment_references(example, rng, null, mask_p=1.0, drop_p=1.0)
        k = out.masked_slot
        assert k is not None
        assert out.reference_captions[k] == example.reference_captions[k]
        assert [c for c in out.reference_captions if c] == [example.reference_captions[k]]
        assert not torch.equal(out.reference_latents[k], example.reference_latents[k])
        assert not torch.equal(out.reference_latents[k], null)


def test_mask_zeroes_region_frames(codec):
    example = _example(k=1)
    rng = np.random.default_rng(3)
    while True:
        out = augment_references(example, rng, torch.zeros(4, 256, 16), mask_p=1.0, drop_p=0.0)
        if out.masked_slot is not None:
            break
    latent = out.reference_latents[0]
    zeroed = [t for t in range(256) if not torch.any(latent[:, t])]
    first = latent_frame_range(example.reference_regions[0][0], codec, 256)
    second = latent_frame_range(example.reference_regions[0][1], codec, 256)
    assert zeroed in (list(range(first.start, first.stop)), list(range(second.start, second.stop)))
    # 100 latent frames per 4 s: 25 frames per second
    assert (first.start, first.stop) == (0, 63)


def test_dropped_slot_matches_null_input(tiny_model, text_encoder):
    example = _example(k=2, shape=(4, 16, 8))
    null = torch.zeros(4, 16, 8)
    dropped = augment_references(example, np.random.default_rng(0), null, mask_p=0.0, drop_p=1.0)
    general = null_conditioned(example, null)
    general.caption = example.caption
    a, b = collate([dropped], text_encoder), collate([general], text_encoder)
    lam = torch.tensor([0.4])
    with torch.no_grad():
        out_a = tiny_model(a.z1, lam, a.references, a.reference_text, a.prompt)
        out_b = tiny_model(b.z1, lam, b.references, b.reference_text, b.prompt)
    assert torch.equal(out_a, out_b)


@pytest.fixture(scope="module")
def examples(concat_manifest, codec):
    root, train, _ = concat_manifest
    return prepare_examples(train, root, codec)


def _config(**overrides):
    base = dict(steps=3, batch_size=2, lr=1e-3, warmup_steps=2, checkpoint_every=2, log_every=1)
    return TrainConfig(**{**base, **overrides})


def test_prepare_examples(examples):
    assert len(examples) == 4
    assert examples[0].target.shape == (16, 256, 16)
    assert examples[0].k == 3


def test_prepare_examples_wraps_missing_audio(concat_manifest, codec, tmp_path):
    _, train, _ = concat_manifest
    with pytest.raises(TrainingError, match=train[0].id):
        prepare_examples(train[:1], tmp_path, codec)


def test_train_loop_updates_and_logs(examples, codec, codec_model, text_encoder, tmp_path):
    before = [p.detach().clone() for p in codec_model.parameters()]
    saved = []
    state = train_loop(examples, _config(), text_encoder, codec, model=codec_model,
                       log_path=tmp_path / "log.jsonl", on_checkpoint=lambda s: saved.append(s.step))
    assert state.step == 3
    assert [r.lr for r in state.log] == pytest.approx([5e-4, 1e-3, 1e-3])
    assert state.log[0].smoothed_loss == state.log[0].loss
    assert saved == [2]
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 3
    assert any(not torch.equal(a, b) for a, b in zip(before, codec_model.parameters()))


def test_train_loop_needs_model(examples, codec, text_encoder):
    with pytest.raises(RefAudioValueError):
        train_loop(examples, _config(), text_encoder, codec)


def test_mix_names_known_sources(examples, codec, codec_model, text_encoder):
    with pytest.raises(RefAudioValueError):
        train_loop({"concatenation": examples}, _config(mix={"overlay": 1.0}), text_encoder, codec,
                   model=codec_model)


def test_resume_continues_the_same_trajectory(examples, codec, text_encoder, tmp_path):
    def fresh():
        torch.manual_seed(0)
        return MRCUNet(MRCConfig(n_hidden=8, latent_channels=16, d_text=16, k_max=3))

    straight = train_loop(examples, _config(steps=4), text_encoder, codec, model=fresh())

    config = _config(steps=2)
    first = train_loop(examples, config, text_encoder, codec, model=fresh())
    path = tmp_path / "mrc.ckpt"
    save_checkpoint(path, Checkpoint(first.model, text_encoder, codec, state=first), config)
    resumed = load_checkpoint(path, _config(steps=4))
    finished = train_loop(examples, _config(steps=4), resumed.text_encoder, resumed.codec,
                          state=resumed.state)

    assert [r.step for r in finished.log] == [1, 2, 3, 4]
    assert [r.loss for r in finished.log] == pytest.approx([r.loss for r in straight.log], rel=1e-5)


def test_adapt_reference_count(concat_manifest, codec, text_encoder):
    root, train, _ = concat_manifest
    examples4 = prepare_examples(train, root, codec, k_max=4)
    torch.manual_seed(0)
    model = MRCUNet(MRCConfig(n_hidden=8, latent_channels=16, d_text=16, k_max=3))
    with torch.no_grad():
        for level in model.decoder:
            level.inject.proj.weight.normal_(0.0, 0.1)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters()}

    with pytest.raises(RefAudioValueError):
        adapt_reference_count(None, 4, examples4, _config(), text_encoder, codec)
    with pytest.raises(RefAudioValueError):
        adapt_reference_count(model, 3, examples4, _config(), text_encoder, codec)
    with pytest.raises(RefAudioValueError):
        adapt_reference_count(model, 5, examples4, _config(), text_encoder, codec)

    state = adapt_reference_count(model, 4, examples4, _config(steps=2, warmup_steps=0),
                                  text_encoder, codec)
    assert state.step == 2
    assert model.config.k_max == 4 and model.config.use_alignment
    for name, param in model.named_parameters():
        if ".inject.align." in name:
            continue
        assert torch.equal(param, frozen[name]), name
    assert any(not torch.equal(p, torch.nn.init.dirac_(torch.empty_like(p)))
               for n, p in model.alignment_parameters() if n.endswith("weight"))
