"""Self-contained property suites with pass/fail and measured tolerances.

Every suite builds its own random fixtures and checks a fast path against an
independent route (closed form, enumeration, finite differences or a slow
loop). ``run_suites`` is what ``mkgc verify`` calls.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from . import numerics, oracles
from .autograd import Parameter
from .encoders import ModelConfig, ffn, post_ln_residual
from .heads import CRFParams, crf_log_partition, crf_viterbi
from .m_encoder import (
    MEncoderLayer, caf, corrupt_w3_gradient, hybrid_visual_heads, lambda_weights, m_encoder_forward, pgi,
    pgi_interpolated,
)
from .metrics import evaluate_f1, filtered_rank, ranking_report
from .model import HybridTransformer


@dataclass
class SuiteResult:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        vals = " ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name} {vals} time={self.seconds:.2f}s{extra}"


def _fmt(v) -> str:
    return f"{v:.3g}" if isinstance(v, float) else str(v)


def _layer(rng, d, n_heads, d_ff, std=0.5, with_w3=True) -> MEncoderLayer:
    layer = MEncoderLayer.init("fusion.0", d, n_heads, d_ff, rng, std, with_w3)
    for p in layer.parameters():
        if p.name.endswith(("_g", "_b", "b1", "b2")):
            p.data[...] = rng.normal(1.0 if p.name.endswith("_g") else 0.0, 0.2, p.shape)
    return layer


# ---------------------------------------------------------------------------
# kernels


def suite_softmax(rng) -> SuiteResult:
    worst_sum = worst_shift = worst_naive = 0.0
    for _ in range(200):
        x = rng.normal(0, 5, (rng.integers(1, 6), rng.integers(1, 9)))
        s = numerics.softmax_rows(x)
        worst_sum = max(worst_sum, float(np.abs(s.sum(-1) - 1).max()))
        worst_shift = max(worst_shift, float(np.abs(numerics.softmax_rows(x + 1000.0) - s).max()))
        naive = np.exp(x) / np.exp(x).sum(-1, keepdims=True)
        worst_naive = max(worst_naive, float(np.abs(naive - s).max()))
    ok = worst_sum <= 1e-12 and worst_shift <= 1e-12 and worst_naive <= 1e-12
    return SuiteResult("softmax", ok, {"row_sum_err": worst_sum, "shift_err": worst_shift, "naive_err": worst_naive})


def suite_layer_norm(rng) -> SuiteResult:
    worst_mom = worst_ref = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 17))
        x = rng.normal(3, 4, (int(rng.integers(1, 6)), d))
        y = numerics.layer_norm(x, np.ones((1, d)), np.zeros((1, d)), eps=0.0)
        worst_mom = max(worst_mom, float(np.abs(y.mean(-1)).max()), float(np.abs(y.var(-1) - 1).max()))
        g, b = rng.normal(size=(1, d)), rng.normal(size=(1, d))
        ref = np.array([[g[0, j] * (row[j] - sum(row) / d) / math.sqrt(sum((v - sum(row) / d) ** 2 for v in row) / d + 1e-5)
                         + b[0, j] for j in range(d)] for row in x])
        worst_ref = max(worst_ref, float(np.abs(numerics.layer_norm(x, g, b) - ref).max()))
    ok = worst_mom <= 1e-9 and worst_ref <= 1e-9
    return SuiteResult("layer-norm", ok, {"moment_err": worst_mom, "loop_err": worst_ref})


def suite_losses(rng) -> SuiteResult:
    worst_ce = worst_bce = 0.0
    for _ in range(200):
        b, c = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        logits = rng.normal(0, 4, (b, c))
        t = rng.integers(0, c, b)
        ref = -np.mean([logits[i, t[i]] - math.log(math.fsum(math.exp(v) for v in logits[i])) for i in range(b)])
        worst_ce = max(worst_ce, abs(numerics.cross_entropy(logits, t) - ref))
        y = rng.integers(0, 2, (b, c)).astype(float)
        p = 1 / (1 + np.exp(-logits))
        ref_b = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        worst_bce = max(worst_bce, abs(numerics.binary_cross_entropy(logits, y) - ref_b))
    ok = worst_ce <= 1e-10 and worst_bce <= 1e-10
    return SuiteResult("losses", ok, {"ce_err": worst_ce, "bce_err": worst_bce})


def suite_fd_convergence(rng) -> SuiteResult:
    """Central differences must shrink roughly as h^2 on a smooth function."""
    a = Parameter(rng.normal(size=(3, 4)), "a")
    w = rng.normal(size=(4, 2))

    def f():
        return float(np.sum(np.tanh(a.data @ w) ** 2))

    exact = (2 * np.tanh(a.data @ w) * (1 - np.tanh(a.data @ w) ** 2)) @ w.T
    errs = [numerics.relative_error(numerics.finite_difference_gradient(f, [a], h)[0], exact) for h in (1e-2, 1e-3)]
    order = math.log10(errs[0] / errs[1])
    ok = 1.5 <= order <= 2.5 and errs[1] < 1e-5
    return SuiteResult("fd-convergence", ok, {"err_h1e-2": errs[0], "err_h1e-3": errs[1], "order": order})


# ---------------------------------------------------------------------------
# fusion


def suite_pgi_identity(rng, cases: int = 1000) -> SuiteResult:
    """Hybrid-key attention equals the lambda blend of self- and cross-attention."""
    worst = 0.0
    lam_outside = 0
    for _ in range(cases):
        n_heads = int(rng.choice([1, 2, 4]))
        d = n_heads * int(rng.integers(1, 16 // n_heads + 1))
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        layer = _layer(rng, d, n_heads, 2 * d)
        h_t, h_v = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        mask = None
        if n > 1 and rng.random() < 0.3:
            mask = np.arange(n) < rng.integers(1, n + 1)
        heads, (q_v, k_v, k_t) = hybrid_visual_heads(h_t, h_v, layer, mask)
        blend = pgi_interpolated(h_t, h_v, layer, mask)
        worst = max(worst, float(np.abs(heads.data - blend).max()))
        lam = lambda_weights(q_v.data, k_v.data, k_t.data, None if mask is None else mask[None, :])
        lam_outside += int(np.sum((lam <= 0) | (lam >= 1)))
    # equal logits: a zero query scores every key equally
    worst_eq = 0.0
    for _ in range(100):
        n, m, dh = (int(v) for v in rng.integers(1, 9, 3))
        lam = lambda_weights(np.zeros((m, dh)), rng.normal(size=(m, dh)), rng.normal(size=(n, dh)))
        worst_eq = max(worst_eq, float(np.abs(lam - n / (n + m)).max()))
    ok = worst <= 1e-6 and lam_outside == 0 and worst_eq <= 1e-12
    return SuiteResult("pgi-identity", ok, {"max_abs_diff": worst, "lambda_out_of_range": lam_outside,
                                            "equal_logit_err": worst_eq})


def suite_lambda_bounds(rng) -> SuiteResult:
    worst = 0.0
    lo, hi = 1.0, 0.0
    for _ in range(200):
        dh = int(rng.integers(1, 9))
        q = rng.normal(size=(1, dh))
        kv, kt = rng.normal(size=(int(rng.integers(1, 7)), dh)), rng.normal(size=(int(rng.integers(1, 7)), dh))
        scale = 1 / math.sqrt(dh)
        lam = float(lambda_weights(q, kv, kt)[0])
        worst = max(worst, abs(lam - oracles.direct_lambda(q[0], kv, kt, scale)))
        lo, hi = min(lo, lam), max(hi, lam)
    ok = worst <= 1e-12 and 0 < lo and hi < 1
    return SuiteResult("lambda-bounds", ok, {"oracle_err": worst, "min": lo, "max": hi})


def suite_caf(rng) -> SuiteResult:
    """Zero fusion weight reduces to the plain FFN; Agg rows are convex mixes of visual rows."""
    worst_zero = 0.0
    convex_violations = 0
    for _ in range(100):
        n_heads = int(rng.choice([1, 2]))
        d = n_heads * int(rng.integers(1, 5))
        layer = _layer(rng, d, n_heads, 2 * d)
        t, v = rng.normal(size=(int(rng.integers(1, 7)), d)), rng.normal(size=(int(rng.integers(1, 7)), d))
        keep: dict = {}
        out, _ = caf(t, v, layer, _keep=keep)
        agg = keep["agg"].data
        convex_violations += int(np.sum(agg > v.max(0) + 1e-12) + np.sum(agg < v.min(0) - 1e-12))
        layer.w3.data[...] = 0.0
        zero, _ = caf(t, v, layer)
        plain, _ = caf(t, v, layer, no_caf=True)
        worst_zero = max(worst_zero, float(np.abs(zero.data - plain.data).max()))
    ok = worst_zero == 0.0 and convex_violations == 0
    return SuiteResult("caf", ok, {"zero_w3_diff": worst_zero, "convexity_violations": convex_violations})


def suite_permutation_invariance(rng, configs: int = 100) -> SuiteResult:
    """Reordering visual tokens at the fused input leaves the textual output unchanged."""
    worst = 0.0
    for _ in range(configs):
        n_heads = int(rng.choice([1, 2, 4]))
        d = n_heads * int(rng.integers(1, 5))
        layers = [_layer(rng, d, n_heads, 2 * d) for _ in range(int(rng.integers(1, 4)))]
        n, m = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        h_t, h_v = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        a, _, _ = m_encoder_forward(h_t, h_v, layers)
        b, _, _ = m_encoder_forward(h_t, h_v[rng.permutation(m)], layers)
        worst = max(worst, float(np.abs(a.data - b.data).max()))
    return SuiteResult("permutation-invariance", worst <= 1e-9, {"max_text_diff": worst, "configs": configs})


def suite_ablation(rng) -> SuiteResult:
    """``no_caf`` text FFN is exactly the plain FFN; ``no_pgi`` visual heads are plain self-attention."""
    worst_caf = worst_loop = worst_pgi = 0.0
    for _ in range(100):
        n_heads = int(rng.choice([1, 2, 4]))
        d = n_heads * int(rng.integers(1, 5))
        layer = _layer(rng, d, n_heads, 2 * d, with_w3=False)
        h_t, h_v = rng.normal(size=(int(rng.integers(1, 7)), d)), rng.normal(size=(int(rng.integers(1, 7)), d))
        text_mid, visual_mid = pgi(h_t, h_v, layer)
        out, _ = caf(text_mid, visual_mid, layer, no_caf=True)
        tw = layer.text
        standard = post_ln_residual(text_mid, ffn(text_mid, tw), tw.ln2_g, tw.ln2_b, numerics.LN_EPS)
        worst_caf = max(worst_caf, float(np.abs(out.data - standard.data).max()))
        sub = numerics.relu(text_mid.data @ tw.w1.data + tw.b1.data) @ tw.w2.data + tw.b2.data
        expect = text_mid.data + numerics.layer_norm(sub, tw.ln2_g.data, tw.ln2_b.data)
        worst_loop = max(worst_loop, float(np.abs(out.data - expect).max()))
        heads, _ = hybrid_visual_heads(h_t, h_v, layer, no_pgi=True)
        x_v = numerics.layer_norm(h_v, layer.visual.ln1_g.data, layer.visual.ln1_b.data)
        vw = layer.visual
        dh = d // n_heads
        for h in range(n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            ref = oracles.three_step_attention(x_v @ vw.wq.data[:, cols], x_v @ vw.wk.data[:, cols], x_v @ vw.wv.data[:, cols])
            worst_pgi = max(worst_pgi, float(np.abs(heads.data[h] - ref).max()))
    ok = worst_caf == 0.0 and worst_loop <= 1e-12 and worst_pgi <= 1e-12
    return SuiteResult("ablation", ok, {"no_caf_diff": worst_caf, "no_caf_numpy_diff": worst_loop,
                                        "no_pgi_diff": worst_pgi})


# ---------------------------------------------------------------------------
# gradients


def toy_config(**overrides) -> ModelConfig:
    base = dict(d_model=8, n_heads=2, d_ff=16, n_text_layers=1, n_visual_layers=1, n_fusion_layers=1,
                height=4, width=4, channels=1, patch=2, n_images=1, max_len=8, init_std=0.3)
    base.update(overrides)
    return ModelConfig(**base)


def _toy_batches(rng, cfg: ModelConfig, vocab: int, n_entities: int):
    """Two padded sequences with images, including one entity token."""
    from .training import Batch, Example

    ids = [[1, 5, vocab + 1, 6, 3, 2], [1, 7, 3, 2]]
    images = rng.normal(size=(2, cfg.n_images, cfg.height, cfg.width, cfg.channels))
    exs = [Example(i, images[k], mask_index=4 if k == 0 else 2) for k, i in enumerate(ids)]
    tok = np.zeros((2, 6), dtype=np.int64)
    mask = np.zeros((2, 6), dtype=bool)
    for k, i in enumerate(ids):
        tok[k, : len(i)] = i
        mask[k, : len(i)] = True
    return Batch(tok, mask, images, exs)


def gradient_cases(rng, cfg: ModelConfig | None = None):
    """``(name, model, loss_closure)`` for the four task losses on the toy model."""
    from . import training

    cfg = cfg or toy_config()
    vocab, n_ent = 10, 3
    batch = _toy_batches(rng, cfg, vocab, n_ent)
    cases = []

    m = HybridTransformer(cfg, vocab, n_entities=n_ent, seed=int(rng.integers(1 << 30)))
    b = training.Batch(batch.token_ids, batch.pad_mask, batch.images,
                       [training.Example(e.ids, e.images, e.mask_index, target=k) for k, e in enumerate(batch.examples)])
    cases.append(("entity-ce", m, lambda m=m, b=b: training.entity_modeling_loss(m, b)))

    m = HybridTransformer(cfg, vocab, n_entities=n_ent, seed=int(rng.integers(1 << 30)))
    targets = [np.array([1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])]
    b = training.Batch(batch.token_ids, batch.pad_mask, batch.images,
                       [training.Example(e.ids, e.images, e.mask_index, target=t) for e, t in zip(batch.examples, targets)])
    cases.append(("link-bce", m, lambda m=m, b=b: training.link_loss(m, b)))

    m = HybridTransformer(cfg, vocab, n_entities=n_ent, n_classes=3, seed=int(rng.integers(1 << 30)))
    b = training.Batch(batch.token_ids, batch.pad_mask, batch.images,
                       [training.Example(e.ids, e.images, 0, target=k + 1) for k, e in enumerate(batch.examples)])
    cases.append(("re-ce", m, lambda m=m, b=b: training.re_loss(m, b)))

    m = HybridTransformer(cfg, vocab, n_entities=n_ent, tags=["O", "B-X", "I-X"], seed=int(rng.integers(1 << 30)))
    m.crf.transitions.data[...] = rng.normal(0, 0.5, m.crf.transitions.shape)
    tags = [np.array([1, 2, 0, 1]), np.array([0, 1])]
    b = training.Batch(batch.token_ids, batch.pad_mask, batch.images,
                       [training.Example(e.ids, e.images, 0, target=t, length=len(e.ids) - 2)
                        for e, t in zip(batch.examples, tags)])
    cases.append(("crf-nll", m, lambda m=m, b=b: training.ner_loss(m, b)))
    return cases


FD_STEP = 1e-6  # small enough that ReLU kinks are rarely straddled, large enough to keep roundoff near 1e-10


def gradient_errors(model_params, loss_fn: Callable[[], ag.Tensor], h: float = FD_STEP) -> dict[str, float]:
    """Per-parameter relative error between backward and central differences."""
    for p in model_params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in model_params]

    def f():
        with ag.no_grad():
            return float(loss_fn())

    numeric = numerics.finite_difference_gradient(f, model_params, h)
    return {p.name: numerics.relative_error(a, n) for p, a, n in zip(model_params, analytic, numeric)}


def _isolated_fusion_cases(rng):
    """PGI and CAF alone, with their inputs as trainable leaves."""
    d, n_heads = 8, 2
    layer = _layer(rng, d, n_heads, 16)
    h_t = Parameter(rng.normal(size=(4, d)), "input.text")
    h_v = Parameter(rng.normal(size=(5, d)), "input.visual")
    mask = np.array([True, True, True, False])
    probe_t, probe_v = rng.normal(size=(4, d)), rng.normal(size=(5, d))

    def pgi_loss():
        t, v = pgi(h_t, h_v, layer, mask)
        return ag.sum(t * probe_t) + ag.sum(v * probe_v)

    def caf_loss():
        t, v = caf(h_t, h_v, layer)
        return ag.sum(t * probe_t) + ag.sum(v * probe_v)

    params = [h_t, h_v, *layer.parameters()]
    pgi_params = [p for p in params if not p.name.endswith(("w3", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"))]
    caf_params = [p for p in params if not p.name.endswith(("wq", "wk", "wv", "wo", "ln1_g", "ln1_b"))]
    return [("pgi", pgi_params, pgi_loss), ("caf", caf_params, caf_loss)]


def suite_gradient(rng, mutate: bool = False) -> SuiteResult:
    """Backward vs finite differences: 1e-3 on full-model losses, 1e-4 on isolated fused sublayers."""
    ctx = corrupt_w3_gradient(0.5) if mutate else contextlib.nullcontext()
    measured, failures = {}, []
    with ctx:
        for name, model, loss in gradient_cases(rng):
            errs = gradient_errors(model.parameters(), loss)
            worst_name = max(errs, key=errs.get)
            measured[name] = errs[worst_name]
            if errs[worst_name] > 1e-3:
                failures.append(f"{name}:{worst_name}")
        for name, params, loss in _isolated_fusion_cases(rng):
            errs = gradient_errors(params, loss)
            worst_name = max(errs, key=errs.get)
            measured[f"isolated-{name}"] = errs[worst_name]
            if errs[worst_name] > 1e-4:
                failures.append(f"isolated-{name}:{worst_name}")
    return SuiteResult("gradient", not failures, measured, detail=", ".join(failures))


# ---------------------------------------------------------------------------
# CRF and metrics


def suite_crf(rng, instances: int = 100) -> SuiteResult:
    worst = 0.0
    path_mismatch = 0
    for _ in range(instances):
        n, y = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        em = rng.normal(0, 2, (n, y))
        params = CRFParams.from_transitions(rng.normal(0, 2, (y + 2, y + 2)))
        log_z, best, _ = oracles.brute_force_crf(em, params.transitions.data)
        worst = max(worst, abs(float(crf_log_partition(em, params)) - log_z))
        path_mismatch += int(crf_viterbi(em, params) != best)
    ok = worst <= 1e-8 and path_mismatch == 0
    return SuiteResult("crf", ok, {"log_partition_err": worst, "viterbi_mismatches": path_mismatch})


def _random_bio(rng, n: int, types=("A", "B")) -> list[str]:
    pool = ["O"] + [f"{p}-{t}" for t in types for p in ("B", "I")]
    return [str(rng.choice(pool)) for _ in range(n)]


def suite_metrics(rng, instances: int = 100) -> SuiteResult:
    mismatches = 0
    non_monotone = 0
    for _ in range(instances):
        n_ent = int(rng.integers(1, 30))
        q = int(rng.integers(1, 8))
        ranks, ref_ranks = [], []
        for _ in range(q):
            scores = rng.integers(0, 5, n_ent).astype(float)  # many ties
            gold = int(rng.integers(n_ent))
            known = [int(k) for k in rng.choice(n_ent, size=int(rng.integers(0, n_ent + 1)), replace=False)]
            ranks.append(filtered_rank(scores, gold, known))
            ref_ranks.append(oracles.brute_force_rank(scores, gold, known))
        rep = ranking_report(ranks)
        ref = oracles.brute_force_ranking_metrics(ref_ranks)
        mismatches += int(ranks != ref_ranks or any(getattr(rep, k) != v for k, v in ref.items()))
        non_monotone += int(not rep.hits1 <= rep.hits3 <= rep.hits10)
    for _ in range(instances):
        labels = ["none", "r1", "r2", "r3"]
        k = int(rng.integers(1, 20))
        pred = [str(rng.choice(labels)) for _ in range(k)]
        gold = [str(rng.choice(labels)) for _ in range(k)]
        rep = evaluate_f1(pred, gold, "micro", ["none"])
        mismatches += int((rep.precision, rep.recall, rep.f1) != oracles.brute_force_micro_f1(pred, gold, ["none"]))
        seqs = [int(rng.integers(1, 8)) for _ in range(int(rng.integers(1, 5)))]
        pred_t = [_random_bio(rng, n) for n in seqs]
        gold_t = [_random_bio(rng, n) for n in seqs]
        rep = evaluate_f1(pred_t, gold_t, "span")
        mismatches += int((rep.precision, rep.recall, rep.f1) != oracles.brute_force_span_f1(pred_t, gold_t))
    ok = mismatches == 0 and non_monotone == 0
    return SuiteResult("metrics", ok, {"mismatches": mismatches, "non_monotone_hits": non_monotone})


SUITES: dict[str, Callable] = {
    "softmax": suite_softmax,
    "layer-norm": suite_layer_norm,
    "losses": suite_losses,
    "fd-convergence": suite_fd_convergence,
    "pgi-identity": suite_pgi_identity,
    "lambda-bounds": suite_lambda_bounds,
    "caf": suite_caf,
    "permutation-invariance": suite_permutation_invariance,
    "gradient": suite_gradient,
    "crf": suite_crf,
    "metrics": suite_metrics,
    "ablation": suite_ablation,
}


def run_suites(only: list[str] | None = None, seed: int = 0, mutate: bool = False) -> list[SuiteResult]:
    names = list(SUITES) if not only else only
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}")
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            res = SUITES[name](rng, mutate=mutate) if name == "gradient" else SUITES[name](rng)
        except Exception as exc:  # a crash is a failed property, reported by name
            res = SuiteResult(name, False, detail=f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
