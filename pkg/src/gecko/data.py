"""Byte corpora and synthetic tasks for the toy language model."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .numerics import generator


class DataError(ValueError):
    pass


def load_bytes(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such data file")
    raw = path.read_bytes()
    if not raw:
        raise DataError(f"{path}: data file is empty")
    return tokens_from_bytes(raw)


def tokens_from_bytes(raw: bytes) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).astype(np.int64))


def repeated_pattern(size: int, period: int = 64, seed: int = 0) -> bytes:
    """One random ``period``-byte pattern tiled to ``size`` bytes."""
    rng = np.random.default_rng(seed)
    pattern = rng.integers(0, 256, period, dtype=np.uint8)
    reps = -(-size // period)
    return np.tile(pattern, reps)[:size].tobytes()


def noisy_copy(size: int, period: int = 8, doc_len: int = 512, noise: float = 0.1,
               alphabet: int = 64, seed: int = 0) -> bytes:
    """Documents that repeat a fresh random block every ``period`` bytes.

    Each byte after the first block copies the byte ``period`` positions
    back, except that with probability ``noise`` it is redrawn. Predicting
    a byte therefore needs the previous ``period`` bytes of context.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(-(-size // doc_len)):
        doc = rng.integers(0, alphabet, doc_len, dtype=np.uint8)
        fresh = rng.random(doc_len) < noise
        for i in range(period, doc_len):
            if not fresh[i]:
                doc[i] = doc[i - period]
        docs.append(doc)
    return np.concatenate(docs)[:size].tobytes()


def random_windows(data: torch.Tensor, batch: int, length: int, g: torch.Generator,
                   align: int = 1) -> torch.Tensor:
    """``batch`` windows of ``length`` tokens starting at multiples of ``align``."""
    if data.numel() < length:
        raise DataError(f"corpus has {data.numel()} tokens, need at least {length}")
    hi = (data.numel() - length) // align + 1
    starts = torch.randint(0, hi, (batch,), generator=g) * align
    idx = starts[:, None] + torch.arange(length)
    return data[idx]


def documents(data: torch.Tensor, max_len: int, chunk: int):
    """Split a stream into documents of ``max_len`` tokens.

    A trailing remainder is cut down to whole chunks; one shorter than a
    chunk is dropped. Returns ``(docs, skipped)``.
    """
    docs, skipped = [], 0
    for lo in range(0, data.numel(), max_len):
        doc = data[lo : lo + max_len]
        usable = doc.numel() // chunk * chunk
        if usable == 0:
            skipped += 1
            continue
        docs.append(doc[:usable])
    return docs, skipped


# ---------------------------------------------------------------- passkey


class PasskeyTask:
    """Recall a key byte planted ``distance`` tokens before a query marker.

    Token layout: keys come from ``[0, keys)``, filler from
    ``[keys, vocab - 1)`` and the last byte is the query marker. The model
    must predict the key at the marker position.
    """

    def __init__(self, chunk: int, keys: int = 16, vocab: int = 256, context_chunks: int = 10):
        if keys < 2 or keys >= vocab - 2:
            raise ValueError("need at least two keys and some filler tokens")
        self.chunk = chunk
        self.keys = keys
        self.vocab = vocab
        self.length = context_chunks * chunk
        self.marker = vocab - 1

    @property
    def max_distance(self):
        return self.length - self.chunk - 1

    def sample(self, batch: int, distances, g: torch.Generator):
        """Returns ``(tokens, query_pos, answer)``.

        ``distances`` is an int or a (batch,) tensor of token distances.
        The query sits in the last chunk at a random offset.
        """
        c, T = self.chunk, self.length
        distances = torch.as_tensor(distances).expand(batch)
        if int(distances.max()) > self.max_distance or int(distances.min()) < 1:
            raise ValueError(f"distance must lie in [1, {self.max_distance}]")
        tokens = torch.randint(self.keys, self.marker, (batch, T), generator=g)
        qpos = T - c + torch.randint(0, c - 1, (batch,), generator=g)
        kpos = qpos - distances
        answer = torch.randint(0, self.keys, (batch,), generator=g)
        rows = torch.arange(batch)
        tokens[rows, kpos] = answer
        tokens[rows, qpos] = self.marker
        return tokens, qpos, answer

    def sample_training(self, batch: int, g: torch.Generator):
        d = torch.randint(1, self.max_distance + 1, (batch,), generator=g)
        return self.sample(batch, d, g)


def passkey_logits(model, tokens, qpos, keys: int):
    logits, _ = model(tokens)
    return logits[torch.arange(tokens.shape[0]), qpos, :keys]


def passkey_loss(model, tokens, qpos, answer, keys: int):
    return torch.nn.functional.cross_entropy(passkey_logits(model, tokens, qpos, keys), answer)
