"""PNG figures for protocol results."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _labels(result) -> list[str]:
    seen = []
    for label, _ in result.records:
        if label not in seen:
            seen.append(label)
    return seen


def _by_label(result):
    groups = {label: [] for label in _labels(result)}
    for label, rec in result.records:
        groups[label].append(rec)
    return groups


def plot_baselines(result, out_dir) -> list[str]:
    """Flow-rate and stop-fraction box plots plus duration over flow-rate bins."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = _by_label(result)
    labels = list(groups)
    paths = []

    for key, ylabel, fname in (
        ("flow_rate", "flow rate [veh/s]", "flow_rate.png"),
        ("stop_fraction", "stopping vehicles [%]", "stop_fraction.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        scale = 100.0 if key == "stop_fraction" else 1.0
        ax.boxplot([[getattr(r, key) * scale for r in groups[lb]] for lb in labels], showfliers=False)
        ax.set_xticks(range(1, len(labels) + 1), [lb.upper() for lb in labels])
        ax.set_ylabel(ylabel)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
        paths.append(str(out_dir / fname))

    width = 0.1
    top = max((r.flow_rate for _, r in result.records), default=0.0)
    n_bins = int(math.floor(top / width + 1e-9)) + 1
    fig, ax = plt.subplots(figsize=(8, 4))
    span = 0.8 / max(len(labels), 1)
    for j, lb in enumerate(labels):
        bins: dict[int, list] = {}
        for r in groups[lb]:
            bins.setdefault(int(math.floor(r.flow_rate / width + 1e-9)), []).append(r)
        data, pos = [], []
        for k, recs in sorted(bins.items()):
            durs = [d for r in recs for d in r.durations]
            if len(recs) >= 5 and durs:
                data.append(durs)
                pos.append(k + 0.1 + span * (j + 0.5))
        if data:
            bp = ax.boxplot(data, positions=pos, widths=span * 0.9, showfliers=False, patch_artist=True)
            color = plt.cm.tab10(j)
            for patch in bp["boxes"]:
                patch.set_facecolor(color)
            ax.plot([], [], color=color, linewidth=6, label=lb.upper())
    ax.set_xticks(np.arange(n_bins) + 0.5, [f"{k * width:.1f}-{(k + 1) * width:.1f}" for k in range(n_bins)])
    ax.set_xlim(0, n_bins)
    ax.set_xlabel("flow rate bin [veh/s]")
    ax.set_ylabel("duration [s]")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "duration_over_flow.png", dpi=120)
    plt.close(fig)
    paths.append(str(out_dir / "duration_over_flow.png"))
    return paths


def plot_crossval(result, out_dir) -> list[str]:
    """Heat maps of the collision and mean-flow matrices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s = result.summary
    models, layouts = s["models"], s["layouts"]
    paths = []
    for key, title, fname in (
        ("collision_percent", "collisions [%]", "crossval_collisions.png"),
        ("mean_flow_rate", "average flow rate [veh/s]", "crossval_flow_rate.png"),
    ):
        m = np.array([[s[key][a][b] for b in layouts] for a in models])
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(m, cmap="viridis")
        for i in range(len(models)):
            for j in range(len(layouts)):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", color="w")
        ax.set_xticks(range(len(layouts)), layouts)
        ax.set_yticks(range(len(models)), models)
        ax.set_xlabel("evaluation layout")
        ax.set_ylabel("training layout")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
        paths.append(str(out_dir / fname))
    return paths


def plot_training_log(rows: list[dict], out_path) -> str:
    steps = [r["step"] for r in rows if r["episode_return"] != ""]
    rets = [float(r["episode_return"]) for r in rows if r["episode_return"] != ""]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, rets, ".", alpha=0.5)
    ax.set_xlabel("environment step")
    ax.set_ylabel("episode return")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)
