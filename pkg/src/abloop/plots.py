"""Figure rendering for the CLI report paths.

Figures are written next to the delimited outputs they visualize; PNG
output carries no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_figure(rows, path) -> None:
    """rows: (step, l_type, l_pos, l_orient, total)."""
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for idx, label in ((1, "type"), (2, "position"), (3, "orientation"),
                       (4, "total")):
        ax.plot(steps, [r[idx] for r in rows], label=label, lw=1.2)
    ax.set_xlabel("training step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def campaign_progress_figure(rounds, path) -> None:
    """rounds: RoundResult-like objects with round_id and best_so_far."""
    ids = [r.round_id for r in rounds]
    best = [r.best_so_far for r in rounds]
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.plot(ids, best, marker="o", lw=1.4)
    ax.axhline(0.0, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("design round")
    ax.set_ylabel("best measured (log-fold vs start)")
    ax.set_xticks(ids)
    fig.tight_layout()
    _save(fig, path)


def ablation_figure(scores_by_mode: dict, path) -> None:
    """Box plot of top-ranked predicted scores per structural-noise mode."""
    modes = list(scores_by_mode)
    data = [scores_by_mode[m] for m in modes]
    fig, ax = plt.subplots(figsize=(1.6 * len(modes) + 2.0, 4))
    ax.boxplot(data, tick_labels=modes, showfliers=False)
    ax.set_ylabel("predicted score (top-ranked designs)")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    _save(fig, path)
