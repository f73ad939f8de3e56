"""Matplotlib figures for the report bundle (rendered off-screen to files)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import (DOMAIN_TAGS, PROSODY_PARAMETERS, CategorySummary,  # noqa: E402
                       DomainDistribution, ParameterChange)
from .attack import ALL_CATEGORIES, CONDITIONS  # noqa: E402

COND_COLORS = {"genuine": "tab:blue", "zero_effort": "tab:orange", "mimicry": "tab:green"}
# fixed metadata so reruns produce identical files
_SAVE_KW = {"metadata": {"Software": None}}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kw = dict(_SAVE_KW) if path.suffix.lower() == ".png" else {}
    fig.savefig(path, dpi=100, **kw)
    plt.close(fig)
    return path


def plot_category_means(summaries: Sequence[CategorySummary], path):
    """Mean LLR with 95% CI per rank category and condition, one panel per
    system and language pool."""
    panels = sorted({(s.profile_id, s.language_pool) for s in summaries})
    fig, axes = plt.subplots(1, max(1, len(panels)), figsize=(4.5 * max(1, len(panels)), 3.8),
                             squeeze=False, sharey=True)
    for ax, (pid, pool) in zip(axes[0], panels):
        cells = {(s.rank_category, s.condition): s for s in summaries
                 if s.profile_id == pid and s.language_pool == pool}
        cats = [c for c in ALL_CATEGORIES if any(k[0] == c for k in cells)]
        x = np.arange(len(cats))
        for j, cond in enumerate(CONDITIONS):
            pts = [(i, cells[(c, cond)]) for i, c in enumerate(cats) if (c, cond) in cells]
            if not pts:
                continue
            ax.errorbar([i + (j - 1) * 0.2 for i, _ in pts], [s.mean_llr for _, s in pts],
                        yerr=[s.ci_halfwidth for _, s in pts], fmt="o", capsize=3,
                        color=COND_COLORS[cond], label=cond)
        ax.set_xticks(x)
        ax.set_xticklabels(cats)
        ax.set_title(f"system {pid}, {pool} targets")
        ax.axhline(0, color="0.7", lw=0.8)
    axes[0][0].set_ylabel("LLR")
    if panels:
        axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_domain_distributions(dists: Sequence[DomainDistribution], path):
    """Target and non-target score histograms per recording domain."""
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    styles = {"target": "-", "nontarget": "--"}
    colors = dict(zip(DOMAIN_TAGS, ("tab:blue", "tab:orange", "tab:red")))
    for d in dists:
        edges = np.asarray(d.bin_edges)
        dens = np.asarray(d.counts, dtype=float) / max(1, d.n_trials)
        ax.step(edges[:-1], dens, where="post", ls=styles[d.hypothesis], color=colors[d.domain_tag],
                label=f"{d.domain_tag} {d.hypothesis} (n={d.n_trials})")
    ax.set_xlabel("LLR")
    ax.set_ylabel("fraction of trials")
    if dists:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_prosody_changes(changes: Sequence[ParameterChange], path):
    """Attacker-to-target distance before (black) and after mimicry: green
    when mimicry moved closer, red otherwise."""
    params = [p for p in PROSODY_PARAMETERS if any(c.parameter == p for c in changes)]
    fig, axes = plt.subplots(1, max(1, len(params)), figsize=(3.6 * max(1, len(params)), 4),
                             squeeze=False)
    for ax, p in zip(axes[0], params):
        rows = sorted((c for c in changes if c.parameter == p),
                      key=lambda c: (c.attacker_id, c.target_id))
        for y, c in enumerate(rows):
            ax.annotate("", xy=(c.natural_distance, y), xytext=(0, y),
                        arrowprops={"arrowstyle": "->", "color": "black"})
            ax.annotate("", xy=(c.mimicry_distance, y + 0.3), xytext=(c.natural_distance, y + 0.3),
                        arrowprops={"arrowstyle": "->",
                                    "color": "tab:green" if c.improved else "tab:red"})
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels([f"{c.attacker_id}-{c.target_id}" for c in rows], fontsize=7)
        top = max([max(c.natural_distance, c.mimicry_distance) for c in rows] + [1e-6])
        ax.set_xlim(0, top * 1.1)
        ax.set_ylim(-0.5, len(rows))
        ax.set_title(p)
        ax.set_xlabel("distance to target")
    fig.tight_layout()
    return _save(fig, path)


def plot_transfer(transfer: dict, path):
    """Attacked-system mean LLR of the closest, median and furthest targets,
    one line per attacker and pool."""
    fig, ax = plt.subplots(figsize=(5, 3.8))
    cats = ["closest", "median", "furthest"]
    for e in (transfer or {}).get("entries", []):
        means = [e["category_means"][c]["mean"] for c in cats]
        ax.plot(range(3), means, marker="o", ls="-" if e["order_preserved"] else ":",
                label=f"{e['attacker_id']} ({e['language_pool']})")
    ax.set_xticks(range(3))
    ax.set_xticklabels(cats)
    ax.set_ylabel("attacked-system LLR")
    if (transfer or {}).get("entries"):
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
