"""Byte-level fallback tokenizer.

Ids 0-255 are raw bytes; 256 is BOS, 257 is EOS, 258 is the image
placeholder. tokenize prepends BOS; detokenize drops the specials, so
detokenize(tokenize(s)) == s for any byte string.
"""

from __future__ import annotations

from .errors import DataError

BOS = 256
EOS = 257
IMG = 258
VOCAB_MIN = 259  # smallest model vocab able to carry every token id


def tokenize(text: bytes | str) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return [BOS] + list(text)


def detokenize(ids: list[int]) -> bytes:
    out = bytearray()
    for i in ids:
        if i < 0 or i >= VOCAB_MIN:
            raise DataError(f"token id {i} outside tokenizer vocab [0, {VOCAB_MIN})")
        if i < 256:
            out.append(i)
    return bytes(out)
