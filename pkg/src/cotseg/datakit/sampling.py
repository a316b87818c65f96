"""Weighted category mixing over several manifests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from ..errors import ConfigurationError
from .manifest import Category, SampleRecord
from .qa import DEFAULT_QA_TEMPLATES, simulate_step1


@dataclass(frozen=True)
class MixedSample:
    """A sample plus its step-one exchange.

    ``answer`` is None for reasoning samples: the language model produces it.
    """

    record: SampleRecord
    question: str
    answer: str | None
    simulated: bool


def mixture_sampler(
    manifests: Mapping[str, Sequence[SampleRecord]] | Sequence[Sequence[SampleRecord]],
    weights: Sequence[float] | None = None,
    seed: int = 0,
    registry=DEFAULT_QA_TEMPLATES,
) -> Iterator[MixedSample]:
    """Infinite, seed-reproducible stream: pick a group by weight, then a
    sample uniformly inside it."""
    groups = list(manifests.values()) if isinstance(manifests, Mapping) else list(manifests)
    if weights is None:
        weights = [1.0] * len(groups)
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(groups),):
        raise ConfigurationError(f"{len(groups)} manifests but {w.size} weights")
    if np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
        raise ConfigurationError("weights must be finite, non-negative and not all zero")
    for i, (g, wi) in enumerate(zip(groups, w)):
        if wi > 0 and len(g) == 0:
            raise ConfigurationError(f"manifest {i} is empty but has weight {wi}")
    p = w / w.sum()
    return _stream(groups, p, seed, registry)


def _stream(groups, p, seed, registry):
    rng = np.random.default_rng(seed)
    while True:
        g = int(rng.choice(len(groups), p=p))
        record = groups[g][int(rng.integers(len(groups[g])))]
        if record.category is Category.REASONING:
            yield MixedSample(record, record.text, None, False)
        else:
            q, a = simulate_step1(record, registry, rng)
            yield MixedSample(record, q, a, True)
