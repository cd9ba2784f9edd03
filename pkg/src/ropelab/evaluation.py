"""Held-out evaluation and run comparison.

``evaluate`` scores a model over a fixed batch list without touching its
weights or recording gradients; ``compare_bands`` clusters per-run mean
negative log-likelihoods into equivalence bands, which is how "these
rotary fractions all land in the same place" gets decided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ParameterError
from .model import ModelConfig, ModelParams, config_hash, lm_forward
from .rope import RopeCache
from .tensor import no_grad


@dataclass(frozen=True)
class EvalReport:
    """Summary of one model over one evaluation stream."""

    corpus_id: str
    mean_nll: float  # nats per counted token
    perplexity: float
    task_accuracy: Optional[float]  # argmax exact-match rate, if requested
    config_digest: str


def evaluate(params: ModelParams, config: ModelConfig, cache: Optional[RopeCache],
             batches, corpus_id: str = "", with_accuracy: bool = False) -> EvalReport:
    """Token-weighted mean NLL (and optional argmax accuracy) over batches.

    ``batches`` yields ``(tokens, loss_mask)`` pairs as produced by the data
    module; masked-out positions contribute to neither metric.  The model is
    read-only here: no gradients are recorded and no weights change.
    """
    total_nll = 0.0
    total_weight = 0.0
    total_correct = 0.0
    n_batches = 0
    with no_grad():
        for tokens, mask in batches:
            tokens = np.asarray(tokens)
            n_batches += 1
            logits = lm_forward(tokens, params, config, cache).data
            trimmed = logits[:, :-1, :]
            targets = tokens[:, 1:]
            m = trimmed.max(axis=-1, keepdims=True)
            shifted = trimmed - m
            lse = np.log(np.exp(shifted).sum(axis=-1))
            picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
            nll = lse - picked
            weights = np.ones_like(nll) if mask is None else np.asarray(mask, dtype=np.float64)
            total_nll += float((nll * weights).sum())
            total_weight += float(weights.sum())
            if with_accuracy:
                hits = (trimmed.argmax(axis=-1) == targets)
                total_correct += float((hits * weights).sum())
    if n_batches == 0 or total_weight == 0.0:
        raise OSError("evaluate: empty evaluation stream")
    mean_nll = total_nll / total_weight
    return EvalReport(
        corpus_id=corpus_id,
        mean_nll=mean_nll,
        perplexity=math.exp(mean_nll),
        task_accuracy=(total_correct / total_weight) if with_accuracy else None,
        config_digest=config_hash(config),
    )


@dataclass(frozen=True)
class BandPartition:
    """Runs grouped into performance-equivalent bands.

    ``bands`` is a list of lists of ``(label, mean_nll)`` pairs, ordered
    from best (lowest NLL) to worst; within one band every pair of runs
    differs by less than the epsilon used to build the partition.  ``gap``
    is the spread between the best and worst band means (zero when a single
    band covers everything).
    """

    bands: list
    gap: float


def compare_bands(entries: list, epsilon: float = 0.05) -> BandPartition:
    """Greedy one-dimensional clustering of (label, mean_nll) pairs.

    Entries are sorted by NLL and a new band opens whenever the next value
    sits ``epsilon`` or more above the current band's minimum, which makes
    "within one band" mean pairwise separation strictly below epsilon.
    """
    if len(entries) < 2:
        raise ParameterError(f"compare_bands needs >= 2 entries, got {len(entries)}")
    if epsilon <= 0.0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    ordered = sorted(entries, key=lambda pair: pair[1])
    bands = [[ordered[0]]]
    for label, nll in ordered[1:]:
        if nll - bands[-1][0][1] < epsilon:
            bands[-1].append((label, nll))
        else:
            bands.append([(label, nll)])
    def band_mean(band):
        return sum(nll for _, nll in band) / len(band)
    gap = band_mean(bands[-1]) - band_mean(bands[0]) if len(bands) > 1 else 0.0
    return BandPartition(bands=bands, gap=gap)
