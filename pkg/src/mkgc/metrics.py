"""Filtered ranking metrics and precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .heads import bio_spans

HITS_AT = (1, 3, 10)


@dataclass
class MetricsReport:
    task: str
    count: int = 0
    mr: float | None = None
    hits1: float | None = None
    hits3: float | None = None
    hits10: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    protocol: str | None = None
    meta: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "meta":
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        out.update(self.meta)
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.values().items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        known = {f.name for f in fields(cls)} - {"meta"}
        kw, meta = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key in known:
                kw[key] = value if key in ("task", "protocol") else (int(value) if key == "count" else float(value))
            else:
                meta[key] = value
        return cls(meta=meta, **kw)

    def tsv_columns(self) -> list[str]:
        if self.mr is not None:
            return ["mr", "hits1", "hits3", "hits10"]
        return ["precision", "recall", "f1"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of every numeric field over runs (low-resource protocol)."""
    if not reports:
        raise InputError("no reports to average")
    first = reports[0]
    out = MetricsReport(task=first.task, protocol=first.protocol, count=int(sum(r.count for r in reports)))
    for name in ("mr", "hits1", "hits3", "hits10", "precision", "recall", "f1"):
        vals = [getattr(r, name) for r in reports]
        if all(v is not None for v in vals):
            setattr(out, name, float(np.mean(vals)))
    out.meta["runs"] = len(reports)
    return out


# ---------------------------------------------------------------------------
# ranking


def filtered_rank(scores, gold: int, known: Iterable[int] = ()) -> int:
    """Rank of ``gold`` after removing the other known positives.

    Ties count against the gold entity, so the rank is a lower bound on quality.
    """
    scores = np.asarray(scores, dtype=np.float64).copy()
    others = [k for k in known if k != gold]
    if others:
        scores[others] = -np.inf
    g = scores[gold]
    better_or_equal = np.count_nonzero(scores >= g) - 1
    return int(better_or_equal) + 1


def ranking_report(ranks: Sequence[int], task: str = "link") -> MetricsReport:
    if len(ranks) == 0:
        raise InputError("empty split: nothing to rank")
    r = np.asarray(ranks, dtype=np.float64)
    rep = MetricsReport(task=task, count=len(r), mr=float(r.mean()), protocol="filtered")
    for k in HITS_AT:
        setattr(rep, f"hits{k}", float(np.mean(r <= k)))
    return rep


# ---------------------------------------------------------------------------
# F1


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def micro_prf(predictions: Sequence[str], gold: Sequence[str], null_labels: Iterable[str] = ()) -> tuple[float, float, float]:
    nulls = set(null_labels)
    if len(predictions) != len(gold):
        raise InputError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    tp = fp = fn = 0
    for p, g in zip(predictions, gold):
        if p == g:
            if p not in nulls:
                tp += 1
            continue
        if p not in nulls:
            fp += 1
        if g not in nulls:
            fn += 1
    return _prf(tp, fp, fn)


def span_prf(predictions: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    if len(predictions) != len(gold):
        raise InputError(f"{len(predictions)} predicted sequences for {len(gold)} gold sequences")
    tp = n_pred = n_gold = 0
    for i, (p, g) in enumerate(zip(predictions, gold)):
        if len(p) != len(g):
            raise InputError(f"sequence {i}: {len(p)} predicted tags for {len(g)} tokens")
        ps, gs = bio_spans(p), bio_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    return _prf(tp, n_pred - tp, n_gold - tp)


def evaluate_f1(predictions, gold, mode: str, null_labels: Iterable[str] = ()) -> MetricsReport:
    """``mode="micro"`` for class labels, ``mode="span"`` for BIO tag sequences."""
    if mode in ("micro", "micro-class"):
        p, r, f = micro_prf(predictions, gold, null_labels)
        task = "re"
    elif mode == "span":
        p, r, f = span_prf(predictions, gold)
        task = "ner"
    else:
        raise ValueError(f"unknown F1 mode {mode!r}")
    return MetricsReport(task=task, count=len(gold), precision=p, recall=r, f1=f, protocol=mode)
