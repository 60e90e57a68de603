"""PNG figures for report bundles (headless matplotlib)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps PNG bytes identical across runs.
_META = {"Software": None}


def _save(fig, path) -> bool:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return True


def plot_ablation(bundle, path) -> bool:
    rows = bundle.rows
    labels = [r["config"] for r in rows]
    x = range(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    base = rows[0]["cycles"]
    bottom = [0.0] * len(rows)
    for key, color in (("linear_share", "#4c72b0"), ("nonlinear_share", "#dd8452"),
                       ("data_movement_share", "#55a868")):
        part = [r["cycles"] / base * r[key] for r in rows]
        ax1.bar(x, part, bottom=bottom, color=color, label=key.removesuffix("_share").replace("_", " "))
        bottom = [b + p for b, p in zip(bottom, part)]
    ax1.set_ylabel("normalized latency")
    ax1.legend(fontsize=8)
    ax2.bar(x, [r["traffic_ratio"] for r in rows], color="#8172b3")
    ax2.set_ylabel("DRAM traffic vs baseline")
    for ax in (ax1, ax2):
        ax.set_xticks(list(x), labels, rotation=30, ha="right", fontsize=8)
    return _save(fig, path)


def plot_scaling(bundle, path) -> bool:
    rows = bundle.rows
    n = [r["n_npus"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(n, [r["speedup"] for r in rows], "o-", label="model")
    ax1.plot(n, [k / n[0] for k in n], "--", color="gray", label="linear")
    ax1.set_xlabel("NPUs")
    ax1.set_ylabel("speedup")
    ax1.legend(fontsize=8)
    ax2.plot(n, [r["mac_utilization"] for r in rows], "o-", label="MAC")
    ax2.plot(n, [r["dram_utilization"] for r in rows], "s-", label="DRAM")
    cross = bundle.details.get("crossover_npus")
    if cross is not None:
        ax2.axvline(cross, color="gray", ls=":", label="memory-bound from here")
    ax2.set_xlabel("NPUs")
    ax2.set_ylabel("utilization")
    ax2.set_ylim(0, 1.05)
    ax2.legend(fontsize=8)
    for ax in (ax1, ax2):
        ax.set_xscale("log", base=2)
        ax.set_xticks(n, [str(k) for k in n])
    return _save(fig, path)


def plot_lut(bundle, path) -> bool:
    rows = bundle.rows
    names = [r["func"] for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    w = 0.38
    ax.bar([i - w / 2 for i in x], [r["mape"] for r in rows], w, label="measured")
    ax.bar([i + w / 2 for i in x], [r["reference_mape"] for r in rows], w, label="target")
    ax.set_yscale("log")
    ax.set_xticks(list(x), names)
    ax.set_ylabel("MAPE")
    ax.legend(fontsize=8)
    return _save(fig, path)


_PLOTS = {"ablation": plot_ablation, "scaling": plot_scaling, "lut_accuracy": plot_lut}


def render(bundle, path) -> bool:
    """Draw the bundle's figure; False when its kind has none."""
    fn = _PLOTS.get(bundle.kind)
    return fn(bundle, path) if fn else False
