"""Property checks on small shapes, run by ``mxnpu verify``.

Each check compares two independent routes (exact rationals against the
datapath, traced bytes against the closed form, fused against unfused
programs) or tests an invariant, and returns a ``Check``.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from .dataflow import (
    MatmulSpec, core_splits, estimate_transfer, make_plan, select_plan, selection_key, sram_footprint,
    tile_candidates, trace_bytes, trace_tiled_matmul,
)
from .executor import Executor, causal_skipped_tiles, decompose, tensor_to_real
from .lower import LayerGraph, LoweringOptions, ModelShape, layer_inputs, lower_layer, random_weights
from .lut import Func, measure_accuracy
from .numerics import (
    EXP_MAX, FRAC_LIMIT, MX_BLOCK, VALUE_OFFSET, Fi32, dequantize_mx, dot32, fi32_align_add, quantize_mx,
)
from .perf import check_sync_safety, run_schedule
from .report import MAPE_LIMIT, Check, ReportBundle, check

VERIFY_COLUMNS = ("check", "passed", "value", "op", "limit")


def exact_fi32(v: Fraction) -> tuple:
    """(exp, frac) of ``v`` rounded once, to nearest even, onto a 24-bit fraction."""
    if v == 0:
        return 0, 0
    mag = abs(v)
    e = mag.numerator.bit_length() - mag.denominator.bit_length()
    if Fraction(2) ** e > mag:
        e -= 1
    # mag in [2^e, 2^(e+1)): scale so the fraction lands in [2^22, 2^23)
    frac = round(v / Fraction(2) ** (e - 22))
    if abs(frac) == FRAC_LIMIT:
        frac //= 2
        e += 1
    return e - 22 + VALUE_OFFSET, frac


def _random_fi32(rng) -> Fi32:
    if rng.random() < 0.05:
        return Fi32(0, 0)
    mag = int(rng.integers(1 << 22, FRAC_LIMIT))
    return Fi32(int(rng.integers(40, 200)), mag if rng.random() < 0.5 else -mag)


def check_align_add(rng, n: int = 2000) -> Check:
    bad = 0
    for _ in range(n):
        a, b = _random_fi32(rng), _random_fi32(rng)
        if rng.random() < 0.3:  # close exponents exercise carries and cancellation
            b = Fi32(min(EXP_MAX, max(1, a.exp + int(rng.integers(-2, 3)))) if b.frac else 0, b.frac)
        got = fi32_align_add(a, b)
        bad += (got.exp, got.frac) != exact_fi32(a.to_fraction() + b.to_fraction())
    return check("fi32_align_add vs exact rational rounding (mismatches)", bad, "==", 0)


def check_dot32(rng, n: int = 2000) -> Check:
    bad = 0
    for _ in range(n):
        size = int(rng.integers(1, MX_BLOCK + 1))
        a, b = rng.integers(-127, 128, size), rng.integers(-127, 128, size)
        ea, eb = int(rng.integers(-20, 20)), int(rng.integers(-20, 20))
        exact = sum(Fraction(int(x) * int(y)) for x, y in zip(a, b)) * Fraction(2) ** (ea + eb)
        got = dot32(a, ea, b, eb)
        bad += (got.exp, got.frac) != exact_fi32(exact)
    return check("dot32 vs exact integer sum (mismatches)", bad, "==", 0)


def check_mx_roundtrip(rng, n: int = 1000) -> Check:
    x = rng.uniform(-1, 1, (n, MX_BLOCK))
    err = np.abs(dequantize_mx(quantize_mx(x)) - x).max(axis=1) / np.abs(x).max(axis=1)
    return check("MX round-trip error / block max (worst block)", float(err.max()), "<=", 2.0 ** -7)


def check_lut(step: float = 1.0 / 64) -> list:
    return [check(f"{f.name} LUT MAPE at step {step:g}", measure_accuracy(f, step=step).mape, "<=", MAPE_LIMIT)
            for f in Func]


def check_commands(rng, n: int = 200) -> list:
    out = [check("commands for IN0 256x64, IN1 128x64", len(decompose((256, 64), (128, 64))), "==", 4)]
    bad = 0
    for _ in range(n):
        m, cols = int(rng.integers(1, 300)), int(rng.integers(1, 300))
        cover = np.zeros((m, cols), int)
        for c in decompose((m, 8), (cols, 8)):
            cover[c.rows[0]:c.rows[1], c.cols[0]:c.cols[1]] += 1
        bad += not np.all(cover == 1)
    out.append(check("commands tile the output exactly once (failing shapes)", bad, "==", 0))
    return out


def _random_spec(rng) -> MatmulSpec:
    m, n, k = (int(v) for v in rng.integers(1, 513, 3))
    causal = bool(rng.random() < 0.3)
    return MatmulSpec(m, n, k, str(rng.choice(["MXINT8", "INT16"])), str(rng.choice(["UINT4", "MXINT8"])),
                      "MXINT8", causal, int(rng.integers(0, 64)) if causal else 0)


def check_planner(rng, n: int = 40) -> list:
    bad_bytes = bad_choice = 0
    for _ in range(n):
        spec = _random_spec(rng)
        sram = int(rng.choice([64, 256, 1024])) * 1024
        plan = select_plan(spec, 4, sram)
        bad_bytes += estimate_transfer(spec, plan) != trace_bytes(trace_tiled_matmul(spec, plan))
        every = [make_plan(spec, s, tm, tn, sp, 4)
                 for s in ("IN0", "IN1") for sp in core_splits(4)
                 for tm in tile_candidates(spec.m) for tn in tile_candidates(spec.n)
                 if sram_footprint(spec, s, tm, tn) <= sram]
        best = min(every, key=selection_key)
        bad_choice += (best.compute_cycles, best.traffic) != (plan.compute_cycles, plan.traffic)
    return [check("estimated vs traced tile bytes (mismatching specs)", bad_bytes, "==", 0),
            check("planner vs unpruned enumeration (mismatching specs)", bad_choice, "==", 0)]


def _run(shape, seq, opts, weights, x, shadow=False):
    graph = LayerGraph(shape, seq)
    prog = lower_layer(graph, opts)
    return Executor(shadow=shadow).run(prog, layer_inputs(graph, opts, weights, x))


def check_transpose_fusion(rng, n: int = 5) -> Check:
    worst = 0.0
    for _ in range(n):
        shape = ModelShape("attn", 64, 2, 1, 32, head_dim=32)
        seq = int(rng.integers(1, 97))
        w, x = random_weights(shape, rng), rng.standard_normal((seq, shape.hidden))
        a, b = (_run(shape, seq, LoweringOptions(trans_fuse=t), w, x, shadow=True).read("attn") for t in (1, 0))
        worst = max(worst, float(np.abs(a - b).max() / np.abs(b).max()))
    return check("fused vs unfused transpose on shadow path (max relative)", worst, "<=", 1e-10)


def check_mask(rng) -> list:
    shape = ModelShape("mask", 64, 2, 2, 32, head_dim=32)
    out = []
    for seq in (32, 128):
        w, x = random_weights(shape, rng), rng.standard_normal((seq, shape.hidden))
        fused = _run(shape, seq, LoweringOptions(mask_fuse=True), w, x)
        plain = _run(shape, seq, LoweringOptions(mask_fuse=False), w, x)
        diff = max(int(np.sum(tensor_to_real(fused.read(f"e{h}")) != tensor_to_real(plain.read(f"e{h}"))))
                   for h in range(shape.n_heads))
        out.append(check(f"fused vs explicit causal mask at seq {seq} (differing scores)", diff, "==", 0))
        want = shape.n_heads * causal_skipped_tiles(seq, seq)
        out.append(check(f"skipped 32x32 tiles at seq {seq} minus analytic count",
                         fused.stats["skipped_tiles"] - want, "==", 0))
    return out


def check_sync(rng, n: int = 200) -> Check:
    bad = 0
    for _ in range(n):
        npus = int(rng.choice([2, 4, 8]))
        stages = int(rng.integers(1, 6))
        ids = np.cumsum(rng.integers(1, 3, stages)).tolist()
        items = [[x for c, i in zip(rng.integers(0, 1000, stages).tolist(), ids) for x in (("work", c), ("sync", i))]
                 for _ in range(npus)]
        log = run_schedule(items)[3]
        bad += not check_sync_safety(log, npus)
    return check("randomized balanced sync programs (unsafe or deadlocked)", bad, "==", 0)


def check_layer(rng, tolerance: float = 5e-2) -> Check:
    shape = ModelShape("tiny", 64, 4, 2, 96, head_dim=16)
    w, x = random_weights(shape, rng), rng.standard_normal((64, shape.hidden))
    got = tensor_to_real(_run(shape, 64, LoweringOptions(), w, x).read("out"))
    ref = _run(shape, 64, LoweringOptions(), w, x, shadow=True).read("out")
    return check("quantized layer vs shadow path (max relative)", float(np.abs(got - ref).max() / np.abs(ref).max()),
                 "<=", tolerance)


def run_verify(seed: int = 0) -> ReportBundle:
    rng = np.random.default_rng(seed)
    checks = [check_align_add(rng), check_dot32(rng), check_mx_roundtrip(rng), *check_lut(),
              *check_commands(rng), *check_planner(rng), check_transpose_fusion(rng), *check_mask(rng),
              check_sync(rng), check_layer(rng)]
    rows = [{"check": c.name, "passed": int(c.passed), "value": c.value, "op": c.op, "limit": c.limit}
            for c in checks]
    return ReportBundle("verify", {"seed": seed}, VERIFY_COLUMNS, rows, checks)
