"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

The lines are printed as each test finishes and repeated in the pytest
terminal summary. Run ``python3 tests/test_acceptance.py`` to get just the
lines without pytest.
"""

import csv
import io
import math
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES  # noqa: E402

from qatforge import autodiff as ad  # noqa: E402
from qatforge import checkpoint as ck  # noqa: E402
from qatforge import harness as H  # noqa: E402
from qatforge import quant as Q  # noqa: E402
from qatforge.model import LayerQuantPlan, build_encoder, plan_first_k, plan_uniform, toy_encoder  # noqa: E402


def report(number: int, title: str, passed: bool, detail: str):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert passed, line


# ------------------------------------------------------------------ 1


def test_c1_quantizer_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    violations = {4: 0, 8: 0}
    for bits in (4, 8):
        qmax = Q.QMAX[bits]
        for _ in range(10_000):
            shape = tuple(rng.integers(1, 9, size=rng.integers(1, 3)))
            x = (rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)).astype(np.float32)
            axis = None if len(shape) == 1 or rng.random() < 0.5 else len(shape) - 1
            q = Q.quantize_dynamic(x, axis, bits)
            half = q.broadcast_scales() / 2
            bad = np.abs(Q.dequantize(q) - x) > half
            bad |= (q.codes < -qmax) | (q.codes > qmax)
            violations[bits] += int(bad.sum())
    elapsed = time.perf_counter() - t0
    report(1, "quantizer round-trip bound and code range", sum(violations.values()) == 0 and elapsed < 10,
           f"violations int4={violations[4]} int8={violations[8]}, {elapsed:.1f}s (limit 10s)")


# ------------------------------------------------------------------ 2


def test_c2_path_equivalence():
    rng = np.random.default_rng(1002)
    mismatches = {}
    for bits_a, bits_b in ((8, 8), (8, 4), (4, 8), (4, 4)):
        bad = 0
        for _ in range(1000):
            m, n = rng.integers(1, 65, size=2)
            k = int(rng.integers(1, 513))
            qa = Q.quantize_dynamic(rng.standard_normal((m, k)).astype(np.float32), [None, 0][rng.integers(2)], bits_a)
            qb = Q.quantize_dynamic(rng.standard_normal((k, n)).astype(np.float32), [None, 1][rng.integers(2)], bits_b)
            bad += Q.quantized_matmul_native(qa, qb).tobytes() != Q.quantized_matmul_emulated(qa, qb).tobytes()
        mismatches[f"a{bits_a}b{bits_b}"] = bad
    report(2, "native integer matmul == float emulation, bit-exact", sum(mismatches.values()) == 0,
           "mismatches " + " ".join(f"{k}={v}" for k, v in mismatches.items()) + " (1000 cases each)")


# ------------------------------------------------------------------ 3


def test_c3_size_arithmetic():
    lines, ok = [], True
    for params, f_mb, i8_mb, i4_range in ((118_000_000, 472, 118, (59, 61)), (10_000_000, 40, 10, (5, 6))):
        census = {"encoder": params}
        f = ck.size_report(census, LayerQuantPlan({}, Q.FLOAT))
        i8 = ck.size_report(census, LayerQuantPlan({}, Q.I8W))
        i4 = ck.size_report(census, LayerQuantPlan({}, Q.I4W))
        ok &= f.total_mb == f_mb and i8.total_mb == i8_mb and abs(i8.ratio - 4.0) <= 0.01
        ok &= i4_range[0] <= i4.total_mb <= i4_range[1]
        if params == 118_000_000:
            ok &= 7.7 <= i4.ratio <= 8.0
        lines.append(f"{params // 10**6}M: {f.total_mb:g}/{i8.total_mb:g}/{i4.total_mb:g} MB, "
                     f"ratios {i8.ratio:.2f}x/{i4.ratio:.2f}x")
    report(3, "size arithmetic", ok, "; ".join(lines))


# ------------------------------------------------------------------ 4


def test_c4_plan_monotonicity():
    model = build_encoder(toy_encoder(model_dim=16, num_heads=2, blocks=(7, 6)))
    sizes = [ck.model_size_report(model, plan_first_k(model, k)).payload_bytes for k in range(1, 7)]
    ok = all(a > b for a, b in zip(sizes, sizes[1:]))
    report(4, "first-k plan size strictly decreasing, k=1..6", ok, "bytes " + " > ".join(map(str, sizes)))


# ------------------------------------------------------------------ 5


def _layer_cases(rng):
    def p(shape, name):
        return ad.Parameter(rng.standard_normal(shape) * 0.7, name)

    cases = {}
    x = rng.standard_normal((6, 5))
    w, b, y = p((5, 4), "w"), p((4,), "b"), rng.integers(0, 4, 6)
    cases["linear+softmax+xent"] = (lambda: ad.cross_entropy(ad.add(ad.matmul(x, w), b), y), [w, b])

    h, g, beta = p((3, 4, 8), "h"), p((8,), "g"), p((8,), "beta")
    c1 = rng.standard_normal((3, 4, 8))
    cases["layer_norm"] = (lambda: ad.total(ad.mul(ad.layer_norm(h, g, beta), c1)), [h, g, beta])

    xf, w1, w2 = p((4, 6), "xf"), p((6, 12), "w1"), p((12, 6), "w2")
    c2 = rng.standard_normal((4, 6))
    cases["ffn (swish)"] = (lambda: ad.total(ad.mul(ad.matmul(ad.swish(ad.matmul(xf, w1)), w2), c2)), [xf, w1, w2])

    q, k, v = p((2, 5, 4), "q"), p((2, 5, 4), "k"), p((2, 5, 4), "v")
    mask = np.tril(np.ones((5, 5), bool))
    c3 = rng.standard_normal((2, 5, 4))

    def attn():
        s = ad.scale(ad.matmul(q, ad.swapaxes(k, 1, 2)), 0.5)
        return ad.total(ad.mul(ad.matmul(ad.softmax(s, mask), v), c3))

    cases["masked attention"] = (attn, [q, k, v])

    xc, kern = p((2, 7, 3), "xc"), p((3, 3), "kern")
    c4 = rng.standard_normal((2, 7, 3))
    cases["depthwise conv"] = (lambda: ad.total(ad.mul(ad.depthwise_conv1d(xc, kern, True), c4)), [xc, kern])

    table, ids = p((9, 4), "table"), rng.integers(0, 9, (3, 5))
    c5 = rng.standard_normal((3, 4))
    cases["embedding+mean pool"] = (lambda: ad.total(ad.mul(ad.mean(ad.embedding(table, ids), axis=1), c5)), [table])
    return cases


def test_c5_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1005)
    errs = {}
    for name, (fn, params) in _layer_cases(rng).items():
        errs[name] = ad.grad_check(fn, params, tolerance=1e-3, h=1e-3).max_error
    ok = all(e < 1e-3 for e in errs.values())

    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=1, ffn_expansion=2, conv_kernel=3, vocab_size=6, num_classes=3)
    model = build_encoder(cfg, seed=5)
    for prm in model.parameters:  # move off the symmetric init (zero biases, unit gains)
        prm.value = (prm.value + 0.1 * rng.standard_normal(prm.value.shape)).astype(np.float32)
    tokens, labels = rng.integers(0, 6, (3, 6)), rng.integers(0, 3, 3)
    block = ad.grad_check(lambda: model.loss(tokens, labels), model.parameters, tolerance=1e-2, h=1e-3, max_elems=8)
    ok &= block.max_error < 1e-2

    xq = ad.Parameter(rng.standard_normal((4, 7)) * 3, "xq")
    ste_exact = True
    for bits in (4, 8):
        xq.grad = None
        with ad.Tape() as tape:
            loss = ad.total(ad.fake_quant(xq, None, bits))
        tape.backward(loss)
        ste_exact &= bool(np.array_equal(xq.grad, np.ones_like(xq.value)))
    ok &= ste_exact
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    worst = max(errs, key=errs.get)
    report(5, "gradient correctness", ok,
           f"worst layer {worst} {errs[worst]:.1e} (<1e-3), full block {block.max_error:.1e} (<1e-2), "
           f"STE exact={ste_exact}, {elapsed:.1f}s (limit 30s)")


# ------------------------------------------------------------------ 6


def test_c6_save_load_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1006)
    cfg = toy_encoder(model_dim=16, num_heads=4, blocks=(2, 1), conv_kernel=3)
    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("Float", "I8W", "I4W", "I4WI8A"):
            model = build_encoder(cfg, seed=6)
            for prm in model.parameters:
                prm.value = (prm.value + 0.05 * rng.standard_normal(prm.value.shape)).astype(np.float32)
            plan = plan_uniform(model, Q.CONFIGS[name])
            model.apply_plan(plan)
            path = Path(tmp) / f"{name}.qat"
            ck.save(model, plan, path)
            loaded = ck.load(path)
            same = 0
            for _ in range(10):
                tokens = rng.integers(0, cfg.vocab_size, (2, 12))
                a = [z.value.tobytes() for z in model.forward(tokens)]
                b = [z.value.tobytes() for z in loaded.forward(tokens)]
                same += a == b
            results[name] = same
    elapsed = time.perf_counter() - t0
    ok = all(v == 10 for v in results.values()) and elapsed < 10
    report(6, "save/load bit-exact forward", ok,
           " ".join(f"{k}={v}/10" for k, v in results.items()) + f", {elapsed:.1f}s (limit 10s)")


# ------------------------------------------------------------------ 7


SEEDS = (0, 1, 2)


def test_c7_training_orderings():
    t0 = time.perf_counter()
    base = H.ExperimentConfig.from_dict({})
    rows = H.sweep(base, SEEDS, save_checkpoints=False)
    elapsed = time.perf_counter() - t0
    print()
    print(H.rows_to_table(rows), end="")
    errors = [f"{r.model}/{r.label}/{r.seed}: {r.error}" for r in rows if r.error]
    if errors:
        report(7, "training-behavior orderings", False, "failed runs: " + "; ".join(errors))
    checks = H.ordering_checks(rows)
    acc = H.accuracy_table(rows)
    parts, ok = [], True
    for name, per_seed in (("a int8 within 2pt", checks.int8_close), ("b I4WA worst", checks.i4wa_worst),
                           ("c small I4W drop >= large", checks.small_degrades_more)):
        maj = checks.majority(per_seed)
        ok &= maj
        parts.append(f"({name}) {sum(per_seed.values())}/{len(per_seed)}")
    drops = " ".join(
        f"s{s}:L{100 * (acc[('large', s)]['Float'] - acc[('large', s)]['I4W']):+.1f}"
        f"/S{100 * (acc[('small', s)]['Float'] - acc[('small', s)]['I4W']):+.1f}" for s in SEEDS)
    report(7, "training-behavior orderings (2 of 3 seeds)", ok,
           ", ".join(parts) + f"; I4W drops (pt) {drops}; {elapsed / 60:.1f} min (target 15)")


# ------------------------------------------------------------------ 8


def test_c8_determinism():
    t0 = time.perf_counter()
    base = H.ExperimentConfig.from_dict({})
    cfg = replace(base.with_model("small", base.sweep_models["small"]), plan=H.PlanConfig(config="I4WI8A"))
    a = H.run_experiment(cfg, save_checkpoint=False)
    b = H.run_experiment(cfg, save_checkpoint=False)
    same = all(p.value.tobytes() == q.value.tobytes() for p, q in zip(a.model.parameters, b.model.parameters))
    same &= a.row.deterministic_fields() == b.row.deterministic_fields()
    elapsed = time.perf_counter() - t0
    report(8, "determinism of run_experiment", same and elapsed < 300,
           f"final parameters identical={same} ({cfg.train.steps} steps, I4WI8A), {elapsed:.0f}s (limit 300s)")


# ------------------------------------------------------------------ 9


def test_c9_timing_report():
    base = H.ExperimentConfig.from_dict({})
    rows = H.bench_timing(base, steps=20, warmup=3)
    text = H.bench_to_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    ok = [r["path"] for r in parsed] == ["float", "native", "fake"]
    ok &= list(parsed[0]) == ["path", "median_ms", "ratio_vs_float"]
    ratios = {r["path"]: float(r["ratio_vs_float"]) for r in parsed}
    ok &= ratios["float"] == 1.0 and all(math.isfinite(v) and v > 0 for v in ratios.values())
    report(9, "timing report CSV (reported, not asserted)", ok,
           " ".join(f"{k}={v:.2f}x" for k, v in ratios.items()))


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_c")):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
