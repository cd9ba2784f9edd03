"""Byte-level corpus ingestion and synthetic position-sensitive tasks.

Everything here is a pure function of its seed: batch order, chunk
shuffling, and synthetic draws come from ``numpy.random.SeedSequence``
spawn keys, so two runs with the same seed see the same stream of
examples regardless of how far they iterate.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .exceptions import ParameterError

BYTE_VOCAB = 256
SYNTHETIC_KINDS = ("copy", "reverse")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def ingest_corpus(path, split_frac: float = 0.1) -> tuple:
    """Read a file as byte tokens and split off a held-out tail.

    Returns ``(train_ids, held_ids)`` as int64 arrays.  The split point is
    ``round(len * split_frac)`` bytes from the end, clamped so both sides
    are nonempty.
    """
    if not 0.0 < split_frac < 1.0:
        raise ParameterError(f"split_frac must lie in (0, 1), got {split_frac}")
    raw = Path(path).read_bytes()
    if len(raw) < 2:
        raise OSError(f"corpus too small to split: {path}")
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    held = min(max(int(round(len(ids) * split_frac)), 1), len(ids) - 1)
    return ids[:len(ids) - held].copy(), ids[len(ids) - held:].copy()


def contiguous_batches(ids: np.ndarray, seq_len: int, batch_size: int,
                       seed: int) -> Iterator:
    """Endless ``(tokens, loss_mask)`` batches of contiguous text windows.

    The id stream is cut into windows of ``seq_len + 1`` tokens (so every
    window yields ``seq_len`` next-token pairs); window order reshuffles
    each epoch from the seed.  The loss mask is always None here: every
    prediction counts.
    """
    if seq_len < 2 or batch_size < 1:
        raise ParameterError(f"need seq_len >= 2 and batch_size >= 1, "
                             f"got {seq_len} and {batch_size}")
    window = seq_len + 1
    n_windows = len(ids) // window
    if n_windows < 1:
        raise ParameterError(f"corpus of {len(ids)} tokens is shorter than one "
                             f"window of {window}")
    stacked = ids[:n_windows * window].reshape(n_windows, window)
    epoch = 0
    while True:
        order = _rng(seed, 0, epoch).permutation(n_windows)
        for start in range(0, n_windows - batch_size + 1, batch_size):
            yield stacked[order[start:start + batch_size]], None
        epoch += 1


def held_out_batches(ids: np.ndarray, seq_len: int, batch_size: int,
                     limit: Optional[int] = None) -> list:
    """Deterministic, unshuffled batch list over a held-out id stream."""
    if seq_len < 2 or batch_size < 1:
        raise ParameterError(f"need seq_len >= 2 and batch_size >= 1, "
                             f"got {seq_len} and {batch_size}")
    window = seq_len + 1
    n_windows = len(ids) // window
    stacked = ids[:n_windows * window].reshape(n_windows, window)
    batches = []
    for start in range(0, n_windows - batch_size + 1, batch_size):
        batches.append((stacked[start:start + batch_size], None))
        if limit is not None and len(batches) >= limit:
            break
    if not batches and n_windows > 0:
        batches.append((stacked, None))
    return batches


def _synthetic_batch(kind: str, seq_len: int, vocab: int, batch_size: int,
                     rng: np.random.Generator) -> tuple:
    half = seq_len // 2
    source = rng.integers(0, vocab, size=(batch_size, half), dtype=np.int64)
    target = source[:, ::-1] if kind == "reverse" else source
    tokens = np.concatenate([source, target], axis=1)
    # Label j is tokens[:, j + 1]; only labels inside the target half count.
    mask = np.zeros((batch_size, seq_len - 1), dtype=np.float64)
    mask[:, half - 1:] = 1.0
    return tokens, mask


def make_synthetic_task(kind: str, seq_len: int, vocab: int, seed: int,
                        batch_size: int) -> Iterator:
    """Endless ``(tokens, loss_mask)`` batches of a copy or reversal task.

    Each example is a random source half followed by its (possibly
    reversed) echo; the mask restricts the loss to the echoed half, so a
    model scores only on reproducing the source, never on predicting it.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ParameterError(f"synthetic kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if seq_len < 4 or seq_len % 2 != 0:
        raise ParameterError(f"synthetic seq_len must be even and >= 4, got {seq_len}")
    if vocab < 4:
        raise ParameterError(f"synthetic vocab must be >= 4, got {vocab}")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")

    def generate() -> Iterator:
        index = 0
        while True:
            yield _synthetic_batch(kind, seq_len, vocab, batch_size, _rng(seed, 1, index))
            index += 1

    return generate()


def synthetic_eval_batches(kind: str, seq_len: int, vocab: int, seed: int,
                           batch_size: int, n_batches: int) -> list:
    """Fixed finite batch list from a stream disjoint from training draws."""
    if n_batches < 1:
        raise ParameterError(f"n_batches must be >= 1, got {n_batches}")
    if kind not in SYNTHETIC_KINDS:
        raise ParameterError(f"synthetic kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if seq_len < 4 or seq_len % 2 != 0:
        raise ParameterError(f"synthetic seq_len must be even and >= 4, got {seq_len}")
    # A distinct spawn branch keeps these examples off the training stream.
    return [_synthetic_batch(kind, seq_len, vocab, batch_size, _rng(seed, 2, i))
            for i in range(n_batches)]
