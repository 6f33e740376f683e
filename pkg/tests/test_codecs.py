import numpy as np
import pytest
import torch
from hypothesis import given, settings as hsettings, strategies as st

from refaudio import settings
from refaudio.codecs import (
    CodecParams,
    LatentGrid,
    MelSpectrogram,
    decode_latent,
    encode_latent,
    griffin_lim,
    griffin_lim_with_errors,
    init_toy_vae,
    load_tensor,
    mel_forward,
    roundtrip_mse,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    train_toy_vae,
)
from refaudio.errors import RefAudioValueError
from refaudio.event_bank import AudioClip


def _tone(freq=440.0, seconds=10.0, amp=0.5, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), rate)


def test_mel_shape_and_padding(codec):
    mel = mel_forward(_tone(), codec)
    assert mel.shape == (1024, 64)
    assert mel.values.dtype == np.float32
    assert not np.any(mel.values[1000:])
    assert np.any(mel.values[:1000])


def test_silence_gives_zero_mel(codec):
    mel = mel_forward(AudioClip.silence(), codec)
    assert not np.any(mel.values)
    assert not np.any(encode_latent(mel, codec).values)


def test_tone_peak_band_is_stable(codec):
    mel = mel_forward(_tone(), codec)
    peaks = mel.values[5:995].argmax(axis=1)
    assert np.all(peaks == peaks[0])
    # the peak band's centre lies near 440 Hz
    centres = np.argmax(codec.mel_basis(), axis=1) * codec.sample_rate / codec.n_fft
    assert abs(centres[peaks[0]] - 440.0) < 50.0


def test_mel_rejects_bad_input(codec):
    with pytest.raises(RefAudioValueError):
        mel_forward(_tone(rate=8000, seconds=1.0), codec)
    with pytest.raises(RefAudioValueError):
        mel_forward(AudioClip(np.zeros(170000)), codec)


@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(0.0, 10.0))
@hsettings(max_examples=25, deadline=None)
def test_deterministic_codec_is_a_bijection(seed, scale):
    params = CodecParams()
    values = (np.random.default_rng(seed).random((1024, 64)) * scale).astype(np.float32)
    mel = MelSpectrogram(values)
    latent = encode_latent(mel, params)
    assert latent.shape == (16, 256, 16)
    assert np.array_equal(decode_latent(latent, params).values, values)
    again = encode_latent(decode_latent(latent, params), params)
    assert np.array_equal(again.values, latent.values)


def test_codec_shape_checks(codec):
    with pytest.raises(RefAudioValueError):
        encode_latent(MelSpectrogram(np.zeros((1000, 64), dtype=np.float32)), codec)
    with pytest.raises(RefAudioValueError):
        decode_latent(LatentGrid(np.zeros((8, 256, 16), dtype=np.float32)), codec)
    with pytest.raises(RefAudioValueError):
        CodecParams(mode="vae")


def test_griffin_lim_zero_mel(codec):
    clip = griffin_lim(MelSpectrogram(np.zeros((1024, 64), dtype=np.float32)), codec, 5)
    assert clip.num_samples == 160000
    assert clip.is_silent()


def test_griffin_lim_recovers_tone(codec):
    mel = mel_forward(_tone(), codec)
    clip, errors = griffin_lim_with_errors(mel, codec, 60, seed=1)
    assert clip.num_samples == 160000
    assert np.max(np.abs(clip.samples)) <= 1.0
    assert len(errors) == 60
    # consistency error never rises between iterations
    assert np.all(np.diff(errors) <= 1e-9)
    spectrum = np.abs(np.fft.rfft(clip.samples))
    peak_hz = np.argmax(spectrum) * codec.sample_rate / clip.num_samples
    stft_bin = codec.sample_rate / codec.n_fft
    assert abs(peak_hz - 440.0) <= stft_bin


@pytest.mark.parametrize("index", [0, 3, 7])
def test_griffin_lim_reanalysis_error_on_bank_events(bank, codec, index):
    event_id = bank.event_ids[index]
    mel = mel_forward(bank.render(event_id, seed=index), codec)
    clip, errors = griffin_lim_with_errors(mel, codec, 60, seed=0)
    assert np.all(np.diff(errors) <= 1e-9)
    valid = codec.valid_frames
    reanalysed = mel_forward(clip, codec).values[:valid]
    assert float(np.mean((reanalysed - mel.values[:valid]) ** 2)) < 0.1


def test_griffin_lim_needs_iterations(codec):
    with pytest.raises(RefAudioValueError):
        griffin_lim(mel_forward(_tone(), codec), codec, 0)


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64])
def test_tensor_container_round_trip(tmp_path, dtype):
    array = (np.arange(24).reshape(2, 3, 4) * 3).astype(dtype)
    save_tensor(tmp_path / "t.rfat", array)
    loaded = load_tensor(tmp_path / "t.rfat")
    assert loaded.dtype == np.dtype(dtype)
    assert np.array_equal(loaded, array)


def test_tensor_container_errors():
    with pytest.raises(RefAudioValueError):
        tensor_to_bytes(np.zeros(3, dtype=np.int32))
    with pytest.raises(RefAudioValueError):
        tensor_from_bytes(b"NOPE" + bytes(10))
    with pytest.raises(RefAudioValueError):
        tensor_from_bytes(tensor_to_bytes(np.zeros((4, 4)))[:20])


def _random_mels(n, seed=0):
    return np.random.default_rng(seed).random((n, settings.MEL_FRAMES, settings.N_MELS)).astype(np.float32)


def test_toy_vae_zero_epochs_is_initialization():
    params = train_toy_vae(_random_mels(100), epochs=0, kl_weight=1e-4, seed=3)
    reference = init_toy_vae(3)
    for (name, a), (_, b) in zip(params.vae.state_dict().items(), reference.state_dict().items()):
        assert torch.equal(a, b), name
    assert params.latent_shape == (8, 256, 16)


def test_toy_vae_init_keeps_global_rng():
    torch.manual_seed(11)
    expected = torch.rand(4)
    torch.manual_seed(11)
    first = init_toy_vae(3)
    assert torch.equal(torch.rand(4), expected)
    second = init_toy_vae(3)
    for (name, a), (_, b) in zip(first.state_dict().items(), second.state_dict().items()):
        assert torch.equal(a, b), name


def test_toy_vae_needs_data():
    with pytest.raises(RefAudioValueError):
        train_toy_vae(_random_mels(10), epochs=1, kl_weight=0.0)


@pytest.mark.slow
def test_toy_vae_reconstruction(bank):
    params = CodecParams()
    rng = np.random.default_rng(0)
    mels = []
    for i in range(500):
        event_id = bank.event_ids[i % len(bank.event_ids)]
        mels.append(mel_forward(bank.render(event_id, int(rng.integers(2 ** 31))), params).values)
    mels = np.stack(mels)
    vae = train_toy_vae(mels, epochs=20, kl_weight=1e-4)
    assert roundtrip_mse(mels[:50], vae) < 0.1 * float(mels.var())

    plain = train_toy_vae(mels, epochs=5, kl_weight=0.0)
    regularized = train_toy_vae(mels, epochs=5, kl_weight=1.0)
    assert roundtrip_mse(mels[:50], plain) <= roundtrip_mse(mels[:50], regularized)


@pytest.mark.slow
def test_toy_vae_memorizes_constant_dataset(bank):
    one = mel_forward(bank.render(bank.event_ids[0], 0), CodecParams()).values
    mels = np.repeat(one[None], 100, axis=0)
    vae = train_toy_vae(mels, epochs=30, kl_weight=0.0)
    assert roundtrip_mse(mels[:1], vae) < 0.01 * float(one.var())
