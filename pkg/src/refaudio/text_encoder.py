"""Hashing-vocabulary caption embedder producing fixed-length embedding sequences."""

import re
import zlib
from typing import Sequence

import torch
from torch import nn

from . import settings
from .errors import RefAudioValueError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# ids 0 and 1 are reserved for pad and null
_FIRST_WORD_ID = 2


def _hash_token(token: str, vocab_size: int) -> int:
    # crc32 rather than hash(): stable across interpreter runs
    return _FIRST_WORD_ID + zlib.crc32(token.encode("utf-8", "surrogatepass")) % (vocab_size - _FIRST_WORD_ID)


def tokenize(caption: str,
             length: int = settings.TOKEN_LENGTH,
             vocab_size: int = settings.VOCAB_SIZE) -> list[int]:
    """Lowercase word/punctuation split, hashed into the vocabulary, padded to `length`."""
    if not caption.strip():
        return [settings.NULL_ID] * length
    tokens = _TOKEN_RE.findall(caption.lower())[:length]
    ids = [_hash_token(token, vocab_size) for token in tokens]
    return ids + [settings.PAD_ID] * (length - len(ids))


class TextEncoder(nn.Module):
    """Embedding-table lookup plus learned positions; stands in for a pretrained LM."""

    def __init__(self,
                 d_text: int = settings.D_TEXT,
                 vocab_size: int = settings.VOCAB_SIZE,
                 length: int = settings.TOKEN_LENGTH) -> None:
        super().__init__()
        self.d_text = d_text
        self.vocab_size = vocab_size
        self.length = length
        self.table = nn.Embedding(vocab_size, d_text)
        self.positions = nn.Parameter(torch.randn(length, d_text) * 0.02)

    def token_ids(self, captions: Sequence[str]) -> torch.Tensor:
        return torch.tensor([tokenize(c, self.length, self.vocab_size) for c in captions],
                            dtype=torch.long, device=self.positions.device)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.table(token_ids) + self.positions

    def embed(self, caption: str) -> torch.Tensor:
        """(50, d_text) embedding of one caption."""
        return self(self.token_ids([caption]))[0]

    def encode_batch(self, captions: Sequence[str]) -> torch.Tensor:
        return self(self.token_ids(captions))

    def bundle_references(self, captions: Sequence[str], k_max: int = settings.K_MAX) -> torch.Tensor:
        """(k_max * 50, d_text): per-slot embeddings stacked in slot order."""
        if len(captions) != k_max:
            raise RefAudioValueError(f"expected {k_max} reference captions, got {len(captions)}")
        return self.encode_batch(captions).reshape(k_max * self.length, self.d_text)

    def bundle_batch(self, captions: Sequence[Sequence[str]]) -> torch.Tensor:
        """(B, K * 50, d_text) for a batch of per-example caption slots."""
        k = len(captions[0]) if captions else 0
        if any(len(slots) != k for slots in captions):
            raise RefAudioValueError("all examples in a batch need the same reference count")
        flat = [c for slots in captions for c in slots]
        return self.encode_batch(flat).reshape(len(captions), k * self.length, self.d_text)


def embed(caption: str, weights: TextEncoder) -> torch.Tensor:
    return weights.embed(caption)


def bundle_references(captions: Sequence[str], weights: TextEncoder,
                      k_max: int = settings.K_MAX) -> torch.Tensor:
    return weights.bundle_references(captions, k_max)
