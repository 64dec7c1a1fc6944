"""Slow reference implementations used to check the fast paths.

Each one takes a deliberately different route (enumeration, loops over plain
Python numbers) from the code it checks.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np


def direct_lambda(query, keys_visual, keys_text, scale: float) -> float:
    """Textual share of attention mass for one query, by explicit sums."""
    def dot(a, b):
        return sum(float(x) * float(y) for x, y in zip(a, b))

    t = [dot(query, k) * scale for k in keys_text]
    v = [dot(query, k) * scale for k in keys_visual]
    top = max(t + v)
    st = math.fsum(math.exp(x - top) for x in t)
    sv = math.fsum(math.exp(x - top) for x in v)
    return st / (st + sv)


def three_step_attention(q, k, v) -> np.ndarray:
    """Attention from a loop over query rows."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    out = np.empty((q.shape[0], v.shape[1]))
    scale = 1.0 / math.sqrt(q.shape[1])
    for i, row in enumerate(q):
        logits = [float(np.dot(row, key)) * scale for key in k]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        total = math.fsum(w)
        out[i] = sum((wi / total) * v[j] for j, wi in enumerate(w))
    return out


def brute_force_crf(emissions, transitions, start: int | None = None, end: int | None = None):
    """Enumerate every tag sequence; returns ``(log_partition, best_path, scores)``.

    Independent reference for the forward algorithm and Viterbi. Ties go to the
    lexicographically smallest sequence.
    """
    em = np.asarray(emissions, dtype=np.float64)
    tr = np.asarray(transitions, dtype=np.float64)
    n, y = em.shape
    start = y if start is None else start
    end = y + 1 if end is None else end
    scores = {}
    for seq in itertools.product(range(y), repeat=n):
        s = tr[start, seq[0]] + tr[seq[-1], end]
        for t in range(n):
            s += em[t, seq[t]]
            if t:
                s += tr[seq[t - 1], seq[t]]
        scores[seq] = s
    values = list(scores.values())
    top = max(values)
    log_z = top + math.log(math.fsum(math.exp(v - top) for v in values))
    best = max(scores, key=lambda k: (scores[k], tuple(-v for v in k)))
    return log_z, list(best), scores


def brute_force_rank(scores: Sequence[float], gold: int, known: Sequence[int] = ()) -> int:
    """Position of ``gold`` in a full sort where it is placed after its ties."""
    filtered = set(known) - {gold}
    entries = [(float(s), 0 if i != gold else 1, i) for i, s in enumerate(scores) if i not in filtered]
    entries.sort(key=lambda e: (-e[0], e[1]))
    for pos, (_, _, i) in enumerate(entries, start=1):
        if i == gold:
            return pos
    raise ValueError("gold not among candidates")


def brute_force_ranking_metrics(ranks: Sequence[int]) -> dict:
    n = len(ranks)
    out = {"mr": math.fsum(ranks) / n}
    for k in (1, 3, 10):
        out[f"hits{k}"] = sum(1 for r in ranks if r <= k) / n
    return out


def _f1(tp, n_pred, n_gold):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def brute_force_micro_f1(predictions, gold, null_labels=()):
    nulls = set(null_labels)
    pred_items = [(i, p) for i, p in enumerate(predictions) if p not in nulls]
    gold_items = [(i, g) for i, g in enumerate(gold) if g not in nulls]
    tp = len(set(pred_items) & set(gold_items))
    return _f1(tp, len(pred_items), len(gold_items))


def _spans_by_scan(tags):
    """Chunk extraction written as an explicit scan over (prev, cur) pairs."""
    spans = []
    for i, tag in enumerate(tags):
        prev = tags[i - 1] if i else "O"
        starts = tag.startswith("B-") or (tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]))
        if starts:
            j = i + 1
            while j < len(tags) and tags[j] == "I-" + tag[2:]:
                j += 1
            spans.append((i, j, tag[2:]))
    return spans


def brute_force_span_f1(predictions, gold):
    tp = n_pred = n_gold = 0
    for p, g in zip(predictions, gold):
        ps, gs = _spans_by_scan(list(p)), _spans_by_scan(list(g))
        n_pred += len(ps)
        n_gold += len(gs)
        tp += sum(1 for s in ps if s in gs)
    return _f1(tp, n_pred, n_gold)
