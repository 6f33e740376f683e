import pytest
import torch
from hypothesis import given, strategies as st

from refaudio import settings
from refaudio.errors import RefAudioValueError
from refaudio.event_bank import DEFAULT_LABELS, default_catalog
from refaudio.text_encoder import TextEncoder, bundle_references, embed, tokenize


def test_empty_caption_is_null():
    assert tokenize("") == [settings.NULL_ID] * 50
    assert tokenize("   ") == [settings.NULL_ID] * 50


def test_short_caption_is_padded():
    ids = tokenize("a dog barking")
    assert all(i >= 2 for i in ids[:3])
    assert ids[3:] == [settings.PAD_ID] * 47


def test_long_caption_is_truncated():
    words = [f"w{i}" for i in range(80)]
    ids = tokenize(" ".join(words))
    assert len(ids) == 50
    assert ids == tokenize(" ".join(words[:50]))
    assert settings.PAD_ID not in ids


def test_tokenize_is_case_insensitive_and_stable():
    assert tokenize("A Dog Barking") == tokenize("a dog barking")
    assert tokenize("rain, then wind") == tokenize("rain, then wind")


@given(st.text(max_size=400))
def test_tokenize_is_total(caption):
    ids = tokenize(caption)
    assert len(ids) == settings.TOKEN_LENGTH
    assert all(0 <= i < settings.VOCAB_SIZE for i in ids)


def test_embed_shapes_and_determinism():
    torch.manual_seed(0)
    encoder = TextEncoder(d_text=16)
    with torch.no_grad():
        a = embed("a bell ringing", encoder)
        b = encoder.embed("a bell ringing")
    assert a.shape == (50, 16)
    assert torch.equal(a, b)


def test_empty_embedding_is_constant_block():
    torch.manual_seed(0)
    encoder = TextEncoder(d_text=16)
    with torch.no_grad():
        null = encoder.embed("")
    expected = encoder.table.weight[settings.NULL_ID][None] + encoder.positions
    assert torch.allclose(null, expected)


def test_bundle_references():
    torch.manual_seed(0)
    encoder = TextEncoder(d_text=16)
    with torch.no_grad():
        bundle = bundle_references(["", "", ""], encoder)
        assert bundle.shape == (150, 16)
        assert torch.equal(bundle[:50], bundle[50:100])
        assert torch.equal(bundle[50:100], bundle[100:])

        mixed = encoder.bundle_references(["a dog barking", "", "rain falling"])
        assert torch.equal(mixed[100:], encoder.embed("rain falling"))

        batch = encoder.bundle_batch([["a", "b", ""], ["", "", "c"]])
    assert batch.shape == (2, 150, 16)
    with pytest.raises(RefAudioValueError):
        encoder.bundle_references(["a", "b"])
    with pytest.raises(RefAudioValueError):
        encoder.bundle_batch([["a"], ["a", "b"]])


def test_one_token_changes_one_row():
    torch.manual_seed(0)
    encoder = TextEncoder(d_text=16)
    dog = tokenize("dog")[0]
    word = next(w for w in ("cat", "bird", "horse", "goat") if tokenize(w)[0] != dog)
    with torch.no_grad():
        a = encoder.embed("a dog barking loudly")
        b = encoder.embed(f"a {word} barking loudly")
    changed = (a != b).any(dim=1).nonzero().flatten().tolist()
    assert changed == [1]


def test_catalog_labels_never_share_a_token_id():
    labels = {spec.label for spec in default_catalog(2 * len(DEFAULT_LABELS), seed=7)}
    words = {word for label in labels for word in label.lower().split()}
    ids = {word: tokenize(word)[0] for word in words}
    assert len(set(ids.values())) == len(words)
    sequences = {tuple(tokenize(label)) for label in labels}
    assert len(sequences) == len(labels)


def test_table_gradient_matches_finite_differences():
    torch.manual_seed(0)
    encoder = TextEncoder(d_text=8).double()
    token_ids = encoder.token_ids(["a bell ringing, then rain"])
    coeffs = torch.randn(settings.TOKEN_LENGTH, 8, dtype=torch.float64)

    def loss() -> torch.Tensor:
        emb = encoder(token_ids)[0]
        return (coeffs * emb + 0.5 * emb ** 2).sum()

    loss().backward()
    analytic = encoder.table.weight.grad.clone()

    h = 1e-3
    weight = encoder.table.weight
    rows = sorted(set(token_ids[0].tolist())) + [4000]
    for row in rows:
        for col in range(8):
            with torch.no_grad():
                original = weight[row, col].item()
                weight[row, col] = original + h
                plus = loss().item()
                weight[row, col] = original - h
                minus = loss().item()
                weight[row, col] = original
            numeric = (plus - minus) / (2 * h)
            scale = max(abs(numeric), abs(analytic[row, col].item()), 1e-8)
            assert abs(numeric - analytic[row, col].item()) / scale < 1e-3
