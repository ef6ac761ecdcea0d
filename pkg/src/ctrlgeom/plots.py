"""Figure rendering for the CLI report path.

Every report-producing subcommand saves a PNG next to its delimited output.
Rendering is headless (Agg) and the figures are diagnostic companions; the
CSV/JSON files remain the machine-readable contract.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _state_labels(states):
    return states[0], (states[1] if len(states) > 1 else "")


def save_sigma_figure(sigma_set, states, path):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if sigma_set.kind == "subspace":
        basis = sigma_set.basis
        span = np.linspace(-1.0, 1.0, 2)
        for j in range(basis.shape[1]):
            ax.plot(span * basis[0, j], span * (basis[1, j] if basis.shape[0] > 1 else 0.0),
                    label=f"basis {j+1}")
        ax.legend(loc="best", fontsize=8)
    elif sigma_set.points is not None and len(sigma_set.points):
        pts = sigma_set.points
        if sigma_set.kind == "curve":
            ax.plot(pts[:, 0], pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(pts)), "-", lw=1.2)
        else:
            ax.plot(pts[:, 0], pts[:, 1] if pts.shape[1] > 1 else np.zeros(len(pts)), ".", ms=4)
    xlabel, ylabel = _state_labels(states)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(f"singular set ({sigma_set.kind})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_stratification_figure(strat, states, path):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    pts = strat.points
    if pts.shape[1] >= 2:
        scatter = ax.scatter(pts[:, 0], pts[:, 1], c=strat.coranks, s=12, cmap="viridis")
        fig.colorbar(scatter, ax=ax, label="corank")
        xlabel, ylabel = _state_labels(states)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
    else:
        ax.step(pts[:, 0], strat.coranks, where="mid")
        ax.set_xlabel(states[0])
        ax.set_ylabel("corank")
    ax.set_title(f"rank stratification (regular fraction {strat.regular_fraction:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_equilibria_figure(records, states, path):
    fig, (ax_state, ax_eig) = plt.subplots(1, 2, figsize=(9, 4))
    for record in records:
        p = record.point
        marker = "o" if record.isolated else "x"
        ax_state.plot(p[0], p[1] if p.size > 1 else 0.0, marker, ms=7)
        ax_eig.plot(record.eigenvalues.real, record.eigenvalues.imag, "+", ms=9)
    xlabel, ylabel = _state_labels(states)
    ax_state.set_xlabel(xlabel)
    ax_state.set_ylabel(ylabel)
    ax_state.set_title("equilibria of the induced dynamics")
    ax_state.grid(True, alpha=0.3)
    ax_eig.axvline(0.0, color="k", lw=0.8)
    ax_eig.set_xlabel("Re")
    ax_eig.set_ylabel("Im")
    ax_eig.set_title("chart Jacobian eigenvalues")
    ax_eig.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_trajectory_figure(traj, states, path):
    fig, (ax_states, ax_s) = plt.subplots(2, 1, figsize=(6.5, 6), sharex=True)
    for i, name in enumerate(states):
        ax_states.plot(traj.t, traj.states[:, i], label=name)
    ax_states.legend(loc="best", fontsize=8)
    ax_states.set_ylabel("state")
    ax_states.grid(True, alpha=0.3)
    positive = traj.s_norm > 0
    if positive.any():
        ax_s.semilogy(traj.t[positive], traj.s_norm[positive], "-")
    ax_s.set_xlabel("t")
    ax_s.set_ylabel("|s(x(t))|")
    ax_s.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bifurcation_figure(diagram, path):
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for branch in diagram.branches:
        mu = [diagram.mu[k] for k in branch.mu_indices]
        coord = [r.chart_point[0] for r in branch.records]
        stable = all(r.index == 0 for r in branch.records)
        ax.plot(mu, coord, "-" if stable else "--", lw=1.3,
                color="tab:blue" if stable else "tab:red")
    for event in diagram.events:
        ax.plot(event.mu, event.point[0], "ko", ms=7, mfc="none")
        ax.annotate(event.kind, (event.mu, event.point[0]), fontsize=7,
                    textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("mu")
    ax.set_ylabel("chart coordinate 1")
    ax.set_title("equilibrium branches (solid: stable)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
