import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mxnpu.dataflow import MatmulSpec, core_cycles, estimate_transfer, make_plan, select_plan
from mxnpu.executor import SramOverflow, decompose
from mxnpu.isa import Program, ProgramError
from mxnpu.perf import (
    DeadlockError, SimConfig, check_sync_safety, cost_command, matmul_steps, overlap,
    run_schedule, sfu_penalty, simulate_multi, simulate_npu, split_steps,
)


def matmul_program(m=256, n=256, k=512, plan=None, name="mm"):
    p = Program(name=name)
    p.add_tensor("x", (m, k), "MXINT8")
    p.add_tensor("w", (n, k), "UINT4")
    p.add_tensor("y", (m, n), "MXINT8")
    p.inputs, p.outputs = ("x", "w"), ("y",)
    meta = {}
    if plan is not None:
        spec, tp = plan
        p.plans["0"] = {"spec": spec.to_dict(), "plan": tp.to_dict()}
        meta["plan"] = 0
    p.emit("TMATMUL", "y", "x", "w", out_dtype="MXINT8", meta=meta)
    return p


def test_command_cost_examples():
    assert cost_command(64, 32, 32) == 64 + 32
    assert cost_command(64, 32, 64) == 2 * cost_command(64, 32, 32)
    assert cost_command(64, 128, 32, dlas=4) == cost_command(64, 32, 32)


def test_command_sum_equals_closed_form():
    cmds = decompose((256, 64), (128, 64))
    assert len(cmds) == 4
    assert sum(cost_command(c.n_rows, c.n_cols, 64) for c in cmds) == core_cycles(256, 128, 64)


def test_sfu_penalty_linear():
    assert sfu_penalty(0, 3.0) == 0
    assert sfu_penalty(2000, 3.0) == 2 * sfu_penalty(1000, 3.0)


def test_compute_bound_step_hides_dma():
    t = overlap([(320, 100, 0)] * 8, bw=32.0)
    assert t.total == pytest.approx(10 + 8 * 100)  # only the first read is exposed


def test_memory_bound_limit():
    steps = [(1000, 10, 500)] * 6
    t = overlap(steps, bw=0.032)
    assert t.total == pytest.approx(t.dma, rel=1e-3)
    assert t.total == pytest.approx(9000 / 0.032, rel=1e-3)


@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 5000)),
                min_size=1, max_size=30), st.sampled_from([1.0, 4.0, 32.0]))
@settings(max_examples=200, deadline=None)
def test_overlap_bounds(steps, bw):
    t = overlap(steps, bw)
    assert t.total >= max(t.compute, t.dma) - 1e-9
    assert t.total <= t.compute + t.dma + 1e-9


@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 5000)),
                min_size=1, max_size=20))
@settings(max_examples=100, deadline=None)
def test_less_bandwidth_never_faster(steps):
    totals = [overlap(steps, bw).total for bw in (32.0, 16.0, 4.0, 1.0)]
    assert all(a <= b + 1e-9 for a, b in zip(totals, totals[1:]))


def test_traffic_conservation_against_plan():
    spec = MatmulSpec(256, 256, 512, dtype_c="MXINT8", name="y")
    plan = make_plan(spec, "IN1", 64, 128, (2, 2), 4)
    rep = simulate_npu(matmul_program(plan=(spec, plan)), SimConfig())
    assert rep.dram_bytes == estimate_transfer(spec, plan)
    assert rep.macs == 256 * 256 * 512


def test_causal_steps_scale_compute():
    spec = MatmulSpec(256, 256, 64, "MXINT8", "MXINT8", causal=True)
    full = MatmulSpec(256, 256, 64, "MXINT8", "MXINT8")
    plan = make_plan(spec, "IN1", 256, 32, (1, 4), 4)
    masked = sum(s[1] for s in matmul_steps(spec, plan))
    dense = sum(s[1] for s in matmul_steps(full, plan))
    # 8x8 grid of 32x32 blocks, 36 on or below the diagonal
    assert masked == pytest.approx(dense * 36 / 64)


def test_bandwidth_monotone_on_program():
    spec = MatmulSpec(512, 512, 1024, name="y")
    plan = select_plan(spec)
    prog = matmul_program(512, 512, 1024, plan=(spec, plan))
    totals = [simulate_npu(prog, SimConfig(dram_gbps=g)).total_cycles for g in (64, 32, 8, 1, 0.032)]
    assert all(a <= b for a, b in zip(totals, totals[1:]))
    rep = simulate_npu(prog, SimConfig(dram_gbps=0.032))
    assert rep.total_cycles == pytest.approx(rep.dram_bytes / 0.032, rel=0.01)


def test_sram_overflow_names_instruction():
    spec = MatmulSpec(1024, 1024, 1024, name="y")
    plan = make_plan(spec, "IN0", 1024, 1024, (1, 4), 4)
    with pytest.raises(SramOverflow, match="instruction 0"):
        simulate_npu(matmul_program(1024, 1024, 1024, plan=(spec, plan)), SimConfig())


def test_report_serialization():
    rep = simulate_npu(matmul_program(), SimConfig())
    d = json.loads(rep.to_json())
    assert d["total_cycles"] == rep.total_cycles and len(d["instructions"]) == 1
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("schema_version,index,opcode") and len(lines) == 2
    assert 0 <= rep.mac_utilization <= 1 and 0 <= rep.dram_utilization <= 1
    assert rep.breakdown["linear"] == rep.total_cycles


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_npus=3)
    with pytest.raises(ValueError):
        SimConfig(dram_gbps=0)
    assert SimConfig(n_npus=4).bw_per_npu == 8.0


# -- multi-NPU ------------------------------------------------------------------

def with_syncs(work, ids):
    items = []
    for w, sid in zip(work, ids):
        items += [("work", w), ("sync", sid)]
    return items


def test_identical_programs_finish_with_imbalance_idle():
    a = with_syncs([100, 50], [1, 2])
    b = with_syncs([130, 50], [1, 2])
    finish, idle, _, log = run_schedule([a, b])
    assert finish == [180, 180]
    assert idle == [30, 0]
    assert check_sync_safety(log, 2)


def test_mismatched_sync_ids_deadlock_with_dump():
    with pytest.raises(DeadlockError) as err:
        run_schedule([with_syncs([10, 10], [1, 2]), with_syncs([10], [1])])
    assert err.value.state["waiting"] == {0: 2}


def test_decreasing_sync_ids_rejected():
    with pytest.raises(ProgramError):
        run_schedule([with_syncs([1, 1], [2, 1])])


def test_random_balanced_programs_never_deadlock(rng):
    for _ in range(1000):
        n = int(rng.choice([2, 4, 8]))
        stages = int(rng.integers(1, 6))
        ids = np.cumsum(rng.integers(1, 3, stages)).tolist()
        items = [with_syncs(rng.integers(0, 1000, stages).tolist(), ids) for _ in range(n)]
        finish, idle, _, log = run_schedule(items)
        assert check_sync_safety(log, n)
        assert all(f >= 0 for f in finish) and min(idle) >= 0


def test_safety_checker_catches_early_pass():
    from mxnpu.perf import SyncEvent
    log = [SyncEvent(0, 0, "record", 1), SyncEvent(0, 0, "pass", 1), SyncEvent(5, 1, "record", 1)]
    assert not check_sync_safety(log, 2)


def test_simulate_multi_on_programs():
    progs = []
    for i, m in enumerate((256, 320)):
        p = matmul_program(m, 256, 512, name=f"npu{i}")
        p.emit("SYNC", meta={"id": 1})
        progs.append(p)
    res = simulate_multi(progs, SimConfig(n_npus=2))
    assert res.makespan == max(r.total_cycles for r in res.reports)
    assert res.reports[0].idle_at_sync > 0 and res.reports[1].idle_at_sync == 0
    assert 0 < res.dram_utilization <= 1 and 0 < res.mac_utilization <= 1
    assert check_sync_safety(res.events, 2)
