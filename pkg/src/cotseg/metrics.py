"""Mask and text evaluation metrics: IoU, gIoU, cIoU, ROUGE-L, CIDEr-D."""
from __future__ import annotations

import csv
import math
import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .validation import check_mask_pair


class EmptyTextWarning(UserWarning):
    """Raised (as a warning) when a text metric receives an empty side."""


class DegenerateIdfWarning(UserWarning):
    """CIDEr over a single-item corpus: every IDF weight is zero."""


@dataclass
class EvalBatch:
    masks: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    texts: list[tuple[str, list[str]]] = field(default_factory=list)

    def __post_init__(self):
        self.masks = [check_mask_pair(p, g) for p, g in self.masks]


def _counts(pred, gt) -> tuple[int, int]:
    pred, gt = check_mask_pair(pred, gt)
    p = pred.astype(bool)
    g = gt.astype(bool)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def iou(pred, gt, *, empty_value: float = 1.0) -> float:
    """Intersection over union of two binary masks.

    Two empty masks score ``empty_value`` (1.0 by default: absence was
    predicted correctly).
    """
    inter, union = _counts(pred, gt)
    if union == 0:
        return float(empty_value)
    return inter / union


def _pairs(batch) -> list:
    pairs = batch.masks if isinstance(batch, EvalBatch) else list(batch)
    if not pairs:
        raise InvalidInputError("empty batch: mean IoU is undefined")
    return pairs


def giou(batch, *, skip_empty: bool = False) -> float:
    """Mean of per-pair IoU."""
    values = []
    for pred, gt in _pairs(batch):
        inter, union = _counts(pred, gt)
        if union == 0:
            if skip_empty:
                continue
            values.append(1.0)
        else:
            values.append(inter / union)
    if not values:
        raise InvalidInputError("no non-empty pairs to average")
    return float(sum(values) / len(values))


def ciou(batch) -> float:
    """Cumulative intersection over cumulative union."""
    total_i = total_u = 0
    for pred, gt in _pairs(batch):
        inter, union = _counts(pred, gt)
        total_i += inter
        total_u += union
    if total_u == 0:
        return 1.0
    return total_i / total_u


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: str, reference: str, *, beta: float = 1.2) -> float:
    hyp = tokenize(hypothesis)
    ref = tokenize(reference)
    if not hyp or not ref:
        warnings.warn("ROUGE-L on empty text", EmptyTextWarning, stacklevel=2)
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref)
    precision = lcs / len(hyp)
    return (1 + beta**2) * recall * precision / (recall + beta**2 * precision)


def rouge_l_multi(hypothesis: str, references: Sequence[str], *, beta: float = 1.2) -> float:
    """ROUGE-L against several references: best-matching reference wins."""
    return max((rouge_l(hypothesis, r, beta=beta) for r in references), default=0.0)


def _ngrams(tokens: Sequence[str], n_max: int) -> list[Counter]:
    return [
        Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
        for n in range(1, n_max + 1)
    ]


class CiderD:
    """CIDEr-D scorer.

    Document frequencies come from the reference sets of the scored corpus.
    Hypothesis TF-IDF weights are clipped to the reference weights and a
    Gaussian length penalty with width ``sigma`` is applied.
    """

    def __init__(self, n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma

    def _vec(self, counts: list[Counter], df: Counter, log_n: float):
        vecs, norms = [], []
        for grams in counts:
            v = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in grams.items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def _sim(self, hv, hn, hlen, rv, rn, rlen) -> np.ndarray:
        delta = float(hlen - rlen)
        out = np.zeros(self.n)
        for k in range(self.n):
            val = sum(min(w, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, w in hv[k].items())
            if hn[k] != 0 and rn[k] != 0:
                val /= hn[k] * rn[k]
            out[k] = val * math.exp(-(delta**2) / (2 * self.sigma**2))
        return out

    def compute_score(self, hypotheses: Sequence[str], references: Sequence[Sequence[str]]):
        """Return ``(corpus_score, per_item_scores)``."""
        if len(hypotheses) == 0:
            raise InvalidInputError("empty corpus")
        if len(hypotheses) != len(references):
            raise InvalidInputError("hypotheses and reference sets differ in length")
        if len(hypotheses) == 1:
            warnings.warn("single-item corpus: IDF weights are all zero", DegenerateIdfWarning, stacklevel=2)
        hyp_tok = [tokenize(h) for h in hypotheses]
        ref_tok = [[tokenize(r) for r in refs] for refs in references]
        hyp_counts = [_ngrams(t, self.n) for t in hyp_tok]
        ref_counts = [[_ngrams(t, self.n) for t in refs] for refs in ref_tok]

        df: Counter = Counter()
        for refs in ref_counts:
            df.update({g for rc in refs for grams in rc for g in grams})
        log_n = math.log(float(len(references)))

        scores = []
        for hc, htok, rcs, rtoks in zip(hyp_counts, hyp_tok, ref_counts, ref_tok):
            hv, hn = self._vec(hc, df, log_n)
            acc = np.zeros(self.n)
            for rc, rtok in zip(rcs, rtoks):
                rv, rn = self._vec(rc, df, log_n)
                acc += self._sim(hv, hn, len(htok), rv, rn, len(rtok))
            score = float(np.mean(acc)) / max(1, len(rcs)) * 10.0
            scores.append(score)
        return float(np.mean(scores)), scores


def cider(hypotheses: Sequence[str], references: Sequence[Sequence[str]], *, n: int = 4, sigma: float = 6.0) -> float:
    return CiderD(n=n, sigma=sigma).compute_score(hypotheses, references)[0]


REPORT_COLUMNS = ("sample_id", "iou", "rouge_l", "cider")


def write_eval_report(path, rows: Sequence[dict], aggregate: dict) -> None:
    """Write per-sample rows followed by an aggregate block.

    Column order is fixed so two reports diff cleanly. Missing text scores are
    written as empty cells.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in REPORT_COLUMNS])
        fh.write("\n# aggregate\n")
        for key in ("gIoU", "cIoU", "ROUGE-L", "CIDEr"):
            writer.writerow([key, _fmt(aggregate.get(key))])
        for key in sorted(k for k in aggregate if k not in ("gIoU", "cIoU", "ROUGE-L", "CIDEr")):
            writer.writerow([key, _fmt(aggregate[key])])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def evaluate(batch: EvalBatch, ids: Sequence[str] | None = None) -> tuple[list[dict], dict]:
    """Score an :class:`EvalBatch`; returns per-sample rows and aggregates."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(batch.masks))]
    rows = [{"sample_id": sid, "iou": iou(p, g)} for sid, (p, g) in zip(ids, batch.masks)]
    aggregate: dict = {}
    if batch.masks:
        aggregate["gIoU"] = giou(batch)
        aggregate["cIoU"] = ciou(batch)
    if batch.texts:
        hyps = [h for h, _ in batch.texts]
        refs = [r for _, r in batch.texts]
        _, per_item = CiderD().compute_score(hyps, refs)
        for i, ((h, r), c) in enumerate(zip(batch.texts, per_item)):
            if i < len(rows):
                rows[i]["rouge_l"] = rouge_l_multi(h, r)
                rows[i]["cider"] = c
        aggregate["ROUGE-L"] = float(np.mean([rouge_l_multi(h, r) for h, r in batch.texts]))
        aggregate["CIDEr"] = float(np.mean(per_item))
    return rows, aggregate
