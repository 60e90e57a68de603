import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mxnpu.executor import (
    ExecContext, Executor, SramOverflow, causal_skipped_tiles, command_count, decompose,
    fi32_constant, fi32_mask,
)
from mxnpu.isa import Instruction, Program, ProgramError
from mxnpu.numerics import (
    Fi32Tensor, IntTensor, MxTensor, dequantize_mx, quantize_int, quantize_mx, quantize_weights,
)
from oracles import matmul_f64


@pytest.fixture(scope="module")
def ex():
    return Executor()


@pytest.fixture(scope="module")
def ex_cmd():
    return Executor(per_command=True)


def tm(**kw):
    return Instruction("TMATMUL", "y", ("a", "b"), **kw)


# -- decomposition ---------------------------------------------------------

@pytest.mark.parametrize("a,b,n", [((256, 64), (128, 64), 4), ((64, 64), (64, 64), 1),
                                   ((65, 32), (64, 32), 2)])
def test_decompose_examples(a, b, n):
    assert len(decompose(a, b)) == n == command_count(a[0], b[0])


@given(st.integers(1, 400), st.integers(1, 400), st.integers(1, 100))
@settings(max_examples=100)
def test_commands_tile_output_exactly(m, n, k):
    cover = np.zeros((m, n), int)
    for c in decompose((m, k), (n, k)):
        assert c.n_rows <= 64 and c.n_cols <= 128
        cover[slice(*c.rows), slice(*c.cols)] += 1
    assert np.all(cover == 1)


def test_decompose_rejects_mismatched_k():
    with pytest.raises(ProgramError):
        decompose((4, 32), (4, 64))


# -- TMATMUL ---------------------------------------------------------------

def random_operands(rng, m, n, k):
    a = quantize_mx(rng.normal(size=(m, k)))
    b = quantize_weights(rng.normal(size=(n, k)))
    return a, b


@pytest.mark.parametrize("shape", [(70, 130, 40), (128, 256, 64), (5, 3, 200)])
def test_per_command_path_is_bit_identical(rng, ex, ex_cmd, shape):
    m, n, k = shape
    a, b = random_operands(rng, m, n, k)
    bias = Fi32Tensor.from_real(rng.normal(size=n))
    cwq = Fi32Tensor.from_real(b.scale)
    psum = Fi32Tensor.from_real(rng.normal(size=(m, n)))
    for flags, out in [((), "FI32"), (("RLU",), "MXINT8"), (("EXP",), "FI32")]:
        ins = tm(flags=frozenset(flags), out_dtype=out)
        whole = ex.exec_tmatmul(a, b, ins, psum=psum, bias=bias, cwq=cwq)
        parts = ex_cmd.exec_tmatmul(a, b, ins, psum=psum, bias=bias, cwq=cwq)
        if out == "FI32":
            assert np.array_equal(whole.exp, parts.exp) and np.array_equal(whole.frac, parts.frac)
        else:
            assert np.array_equal(whole.elems, parts.elems)
            assert np.array_equal(whole.shared_exps, parts.shared_exps)


def test_one_hot_in1_projects_in0_columns(rng, ex):
    a = quantize_mx(rng.normal(size=(8, 64)))
    sel = np.zeros((5, 64), np.int64)
    sel[np.arange(5), [0, 7, 31, 32, 63]] = 1
    out = ex.exec_tmatmul(a, IntTensor(sel, "UINT4"), tm())
    assert np.array_equal(out.to_real(), dequantize_mx(a)[:, [0, 7, 31, 32, 63]])


def test_matmul_matches_dense_reference(rng, ex):
    a, b = random_operands(rng, 8, 8, 8)
    out = ex.exec_tmatmul(a, b, tm()).to_real()
    ref = matmul_f64(dequantize_mx(a), b.to_real(apply_scale=False))
    assert np.allclose(out, ref, rtol=2.0 ** -21, atol=1e-12)
    # against the unquantized operands the error is the quantization bound
    a_r = rng.normal(size=(8, 96))
    w = rng.normal(size=(8, 96))
    a2, b2 = quantize_mx(a_r), quantize_weights(w)
    got = ex.exec_tmatmul(a2, b2, tm(cwq="s"), cwq=Fi32Tensor.from_real(b2.scale)).to_real()
    bound = np.abs(a_r) @ (b2.scale[:, None] / 2 + np.abs(w)).T * 2.0 ** -7 + np.abs(a_r) @ (
        np.broadcast_to(b2.scale[:, None] / 2, w.shape)).T
    assert np.all(np.abs(got - a_r @ w.T) <= bound)


def test_psum_adds_exactly(rng, ex):
    a, b = random_operands(rng, 20, 40, 96)
    psum = Fi32Tensor.from_real(rng.normal(size=(20, 40)) * 100)
    plain = ex.exec_tmatmul(a, b, tm())
    with_p = ex.exec_tmatmul(a, b, tm(psum="p"), psum=psum)
    both = psum.add(plain)
    assert np.array_equal(with_p.exp, both.exp) and np.array_equal(with_p.frac, both.frac)


@pytest.mark.parametrize("flag", ["RLU", "EXP"])
def test_fused_lut_equals_separate_lut(rng, ex, flag):
    a, b = random_operands(rng, 16, 48, 64)
    fused = ex.exec_tmatmul(a, b, tm(flags={flag}))
    plain = ex.exec_tmatmul(a, b, tm())
    sep = ex.apply_lut(plain, {flag})
    assert np.array_equal(fused.exp, sep.exp) and np.array_equal(fused.frac, sep.frac)


def test_int16_by_uint4_pairing(rng, ex):
    x = quantize_int(rng.normal(size=(10, 64)), "INT16")
    w = quantize_weights(rng.normal(size=(6, 64)))
    out = ex.exec_tmatmul(x, w, tm()).to_real()
    ref = x.to_real() @ w.to_real(apply_scale=False).T
    assert np.allclose(out, ref, rtol=2.0 ** -20, atol=1e-9)


def test_unsupported_pairing_rejected(ex):
    w = IntTensor(np.zeros((2, 32), np.int64), "UINT4")
    with pytest.raises(ProgramError):
        ex.exec_tmatmul(w, w, tm())
    with pytest.raises(ProgramError):
        ex.exec_tmatmul(quantize_mx(np.ones((2, 32))), quantize_mx(np.ones((2, 64))), tm())


# -- PPA and the elementwise ops -------------------------------------------

def test_ppa_without_flags_preserves_value(rng, ex):
    acc = Fi32Tensor.from_real(rng.normal(size=(4, 40)))
    out = ex.convert(ex.ppa(acc), "FI32")
    assert np.array_equal(out.to_real(), acc.to_real())


def test_mx_output_of_unit_max_block(ex):
    acc = Fi32Tensor.from_real(np.linspace(-1, 1, 32).reshape(1, 32))
    out = ex.convert(acc, "MXINT8")
    assert out.shared_exps[0, 0] == 127 and np.abs(out.elems).max() <= 127


def test_int_output_rounds_and_clamps(rng, ex):
    acc = Fi32Tensor.from_real(rng.normal(size=(4, 8)))
    out = ex.convert(acc, "INT8")
    assert out.dtype == "INT8" and np.abs(out.elems).max() <= 127
    assert np.abs(out.to_real() - acc.to_real()).max() <= 2.0 ** (out.exp_code - 127) / 2


def test_mean_square_cases(rng, ex):
    assert np.all(ex.exec_mean_square(quantize_mx(np.ones((3, 64)))).to_real() == 1.0)
    assert np.all(ex.exec_mean_square(quantize_mx(np.zeros((2, 64)))).to_real() == 0.0)
    x = quantize_mx(rng.normal(size=(6, 3072)))
    got = ex.exec_mean_square(x).to_real()[:, 0]
    ref = np.mean(dequantize_mx(x) ** 2, axis=1)
    assert np.all(np.abs(got - ref) <= 2.0 ** -20 * ref)


def test_mean_returns_row_sum(rng, ex):
    assert np.all(ex.exec_mean(Fi32Tensor.from_real(np.ones((2, 32)))).to_real() == 32.0)
    assert np.all(ex.exec_mean(Fi32Tensor.zeros((2, 32))).to_real() == 0.0)
    x = rng.uniform(0, 3, size=(4, 500))
    got = ex.exec_mean(Fi32Tensor.from_real(x)).to_real()[:, 0]
    assert np.allclose(got, x.sum(axis=1), rtol=2.0 ** -20)


def test_lut_instruction_points(ex):
    one = Fi32Tensor.from_real(np.array([[1.0]]))
    four = Fi32Tensor.from_real(np.array([[4.0]]))
    assert ex.apply_lut(one, {"INV"}).to_real()[0, 0] == 1.0
    assert ex.apply_lut(four, {"INV", "SQR"}).to_real()[0, 0] == 0.5
    assert ex.apply_lut(four, {"SQR"}).to_real()[0, 0] == pytest.approx(2.0, rel=1e-5)
    with pytest.raises(ProgramError):
        ex.apply_lut(one, set())


def test_rescale(rng, ex):
    x = quantize_mx(rng.normal(size=(4, 64)))
    same = ex.exec_rescale(x, fi32_constant(1.0))
    assert np.array_equal(same.elems, x.elems) and np.array_equal(same.shared_exps, x.shared_exps)
    dbl = ex.exec_rescale(x, fi32_constant(2.0))
    assert np.array_equal(dbl.elems, x.elems) and np.array_equal(dbl.shared_exps, x.shared_exps + 1)
    s = rng.uniform(0.1, 3, size=(4, 1))
    got = ex.exec_rescale(x, Fi32Tensor.from_real(s))
    ref = dequantize_mx(x) * s
    bmax = np.repeat(np.abs(ref.reshape(4, 2, 32)).max(axis=2), 32, axis=1)
    assert np.all(np.abs(dequantize_mx(got) - ref) <= 2.0 ** -7 * bmax * (1 + 2.0 ** -20))


def test_mul_add(rng, ex):
    x = quantize_mx(rng.normal(size=(3, 64)))
    one = fi32_constant(1.0)
    zero = Fi32Tensor.zeros((1, 1))
    p = ex.convert(x.to_fi32().mul(one), "MXINT8")
    s = ex.convert(x.to_fi32().add(zero), "MXINT8")
    assert np.array_equal(p.elems, x.elems) and np.array_equal(s.elems, x.elems)


# -- programs, assembly, context -------------------------------------------

def small_program():
    p = Program(name="mini", inputs=("x", "w", "g", "eps"), outputs=("y",))
    p.add_tensor("x", (8, 64), "MXINT8")
    p.add_tensor("w", (16, 64), "UINT4")
    p.add_tensor("g", (64,), "FI32")
    p.add_tensor("eps", (1, 1), "FI32")
    p.add_tensor("ms", (8, 1), "FI32", "SRAM")
    p.add_tensor("r", (8, 1), "FI32", "SRAM")
    p.add_tensor("xn", (8, 64), "MXINT8")
    p.add_tensor("y", (8, 16), "MXINT8")
    p.emit("MEAN_SQUARE", "ms", "x", bias="eps")
    p.emit("LUT", "r", "ms", flags={"INV", "SQR"})
    p.emit("RESCALE", "xn", "x", "r", cwq="g", out_dtype="MXINT8", meta={"sram": 2048})
    p.emit("TMATMUL", "y", "xn", "w", flags={"RLU"}, out_dtype="MXINT8", meta={"sram": 4096})
    return p


def small_inputs(rng):
    return {"x": quantize_mx(rng.normal(size=(8, 64))), "w": quantize_weights(rng.normal(size=(16, 64))),
            "g": Fi32Tensor.from_real(rng.uniform(0.5, 1.5, 64)), "eps": fi32_constant(1e-6)}


def test_assembly_and_manifest_round_trip():
    p = small_program()
    q = Program.from_text(p.to_asm(), p.manifest_json())
    assert q.to_asm() == p.to_asm() and q.manifest() == p.manifest()
    q.validate()


def test_instruction_validation():
    with pytest.raises(ProgramError):
        Instruction("LUT", "y", ("x",), flags={"PSUM"})
    with pytest.raises(ProgramError):
        Instruction("MUL", "y", ("x",))
    with pytest.raises(ProgramError):
        Instruction("MEAN", "y", ("x",), flags={"RLU"})
    with pytest.raises(ProgramError):
        Instruction("FOO", "y", ("x",))
    ins = Instruction.from_asm("SYNC id=3")
    assert ins.meta["id"] == 3


def test_program_rejects_read_before_write():
    p = small_program()
    p.instructions.insert(0, Instruction("MEAN", "ms", ("xn",)))
    with pytest.raises(ProgramError):
        p.validate()


def test_program_runs_and_matches_shadow(rng):
    p = small_program()
    p.validate()
    inputs = small_inputs(rng)
    ctx = Executor().run(p, inputs)
    shadow = Executor(shadow=True).run(p, inputs)
    got, ref = ctx.real("y"), shadow.real("y")
    assert np.abs(got - ref).max() <= 0.05 * np.abs(ref).max()
    assert ctx.sram_used == sum(ctx.allocations.values()) == 2 * 4 * 8
    assert ctx.sram_peak <= ctx.sram_cap


def test_sram_ledger_conserves_and_overflows(rng):
    p = small_program()
    ctx = Executor().run(p, small_inputs(rng))
    used = 0
    for kind, _, nbytes, after in ctx.history:
        used += nbytes if kind == "alloc" else -nbytes
        assert used == after <= ctx.sram_cap
    p.instructions[-1].meta["sram"] = 1 << 21
    with pytest.raises(SramOverflow):
        Executor().run(p, small_inputs(rng))


def test_shadow_matmul_is_plain_float(rng):
    ex = Executor(shadow=True)
    ctx = ExecContext()
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
    ctx.write("a", a)
    ctx.write("b", b)
    ex.step(ctx, tm())
    assert np.allclose(ctx.read("y"), a @ b.T)


# -- causal masking --------------------------------------------------------

@pytest.mark.parametrize("seq", [32, 128, 200])
def test_causal_skip_equals_full_compute(rng, seq):
    q = quantize_mx(rng.normal(size=(seq, 64)))
    k = quantize_mx(rng.normal(size=(seq, 64)))
    mask = fi32_mask(np.tril(np.ones((seq, seq), bool)))
    ctx1, ctx2 = ExecContext(), ExecContext()
    full = Executor().exec_tmatmul(q, k, tm(psum="m", flags={"EXP"}), ctx1, psum=mask)
    skip = Executor(per_command=True).exec_tmatmul(
        q, k, tm(psum="m", flags={"EXP"}, meta={"skip": "causal", "qoff": 0}), ctx2, psum=mask)
    assert np.array_equal(full.frac, skip.frac) and np.array_equal(full.exp, skip.exp)
    t = -(-seq // 32)
    assert ctx2.stats["skipped_tiles"] == t * (t - 1) // 2 == causal_skipped_tiles(seq, seq)
    assert np.all(np.triu(full.to_real(), 1) == 0)


def test_skip_without_mask_rejected(rng):
    q = quantize_mx(rng.normal(size=(32, 32)))
    with pytest.raises(ProgramError):
        Executor().exec_tmatmul(q, q, tm(meta={"skip": "causal", "qoff": 0}))


def test_all_masked_row_softmax_is_zero_and_flagged():
    ex = Executor()
    e = ex.apply_lut(Fi32Tensor.from_real(np.full((1, 4), -1.0)).add(fi32_mask(np.zeros((1, 4), bool))), {"EXP"})
    s = ex.exec_mean(e)
    inv = ex.apply_lut(s, {"INV"})
    assert inv.saturated
    out = ex.exec_rescale(e, inv, out_dtype="FI32")
    assert np.all(out.to_real() == 0)
