"""Delimited outputs and figures for pipeline runs.

Every writer takes explicit data plus a target path and returns the path, so
pipeline stages stay in charge of directory layout. Figures render through the
Agg backend; the PNG bytes are deterministic for fixed inputs, which keeps
them eligible for manifest digests.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .env import RolloutMetrics, RolloutRecord
from .occupancy import OccupancyModel, marginal_occupied_prob
from .thermal import SelectionResult

MSE_TABLE_HEADER = ["kind", "train_mse", "heldout_mse", "selected"]

DPI = 150


def _finish(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def write_mse_table(selection: SelectionResult, path: Path) -> Path:
    """One row per candidate kind, train and held-out MSE, best row flagged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MSE_TABLE_HEADER)
        for score in selection.scores:
            writer.writerow([
                score.kind.value,
                f"{score.train_mse:.6f}",
                f"{score.heldout_mse:.6f}",
                "1" if score.kind is selection.best.kind else "0",
            ])
    return path


def plot_mse_table(selection: SelectionResult, path: Path,
                   title: str = "One-step MSE by model kind") -> Path:
    kinds = [s.kind.value for s in selection.scores]
    train = [s.train_mse for s in selection.scores]
    heldout = [s.heldout_mse for s in selection.scores]
    x = np.arange(len(kinds))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, train, width=0.4, label="train", color="#4878a8")
    ax.bar(x + 0.2, heldout, width=0.4, label="held-out", color="#d1605e")
    best = kinds.index(selection.best.kind.value)
    ax.scatter([best + 0.2], [heldout[best]], marker="v", color="black",
               zorder=3, label="selected")
    ax.set_xticks(x, kinds)
    ax.set_ylabel("MSE (degC^2)")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _finish(fig, Path(path))


def write_epoch_rewards(per_epoch: Sequence[float], path: Path) -> Path:
    """JSONL monitoring stream, one complete record per training epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for epoch, reward in enumerate(per_epoch):
            fh.write(json.dumps({"epoch": epoch, "meanReward": reward},
                                sort_keys=True) + "\n")
    return path


def read_epoch_rewards(path: Path) -> list[float]:
    rewards = []
    with Path(path).open() as fh:
        for expected, line in enumerate(fh):
            row = json.loads(line)
            if row["epoch"] != expected:
                raise ValueError(f"epoch gap: expected {expected}, got {row['epoch']}")
            rewards.append(float(row["meanReward"]))
    return rewards


def plot_training_curve(per_epoch: Sequence[float], path: Path,
                        title: str = "Training reward") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(per_epoch)), per_epoch, marker="o", color="#4878a8")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean per-step reward")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _finish(fig, Path(path))


def _metrics_dict(m: RolloutMetrics) -> dict:
    return {
        "meanReward": m.mean_reward,
        "energyUsed": m.energy_used,
        "comfortViolationSteps": m.comfort_violation_steps,
        "steps": m.steps,
    }


def write_eval_report(agent: RolloutMetrics, baseline: RolloutMetrics,
                      path: Path) -> Path:
    """Closed-loop comparison: greedy agent vs thermostat vs the ideal bound."""
    if agent.mean_reward > agent.ideal_reward + 1e-9:
        raise ValueError("agent reward exceeds the ideal bound")
    payload = {
        "agent": _metrics_dict(agent),
        "baseline": _metrics_dict(baseline),
        "ideal": agent.ideal_reward,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_eval_metrics(episodes: Sequence[RolloutMetrics], path: Path) -> Path:
    """JSONL, one record per evaluation episode."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for idx, m in enumerate(episodes):
            row = {"episode": idx}
            row.update(_metrics_dict(m))
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def plot_eval_bars(agent: RolloutMetrics, baseline: RolloutMetrics, path: Path,
                   title: str = "Closed-loop evaluation") -> Path:
    labels = ["thermostat", "agent", "ideal"]
    values = [baseline.mean_reward, agent.mean_reward, agent.ideal_reward]
    colors = ["#b8b8b8", "#4878a8", "#6aa84f"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(labels, values, color=colors)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:+.3f}", ha="center", va="bottom", fontsize=9)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("mean per-step reward")
    ax.set_title(title)
    return _finish(fig, Path(path))


def plot_occupancy_profile(model: OccupancyModel, path: Path,
                           title: str = "Occupied probability by weekly slot") -> Path:
    """Day-by-slot heatmap of the stationary occupied marginal."""
    grid = marginal_occupied_prob(model)
    fig, ax = plt.subplots(figsize=(7, 3))
    im = ax.imshow(grid, aspect="auto", origin="upper", cmap="viridis",
                   vmin=0.0, vmax=1.0)
    ax.set_yticks(range(7), ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"])
    ax.set_xticks(range(0, 97, 16), [f"{h:02d}:00" for h in range(0, 25, 4)])
    ax.set_xlabel("time of day")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="P(occupied)")
    return _finish(fig, Path(path))


def plot_day_trace(record: RolloutRecord, path: Path, day_index: int = 0,
                   comfort_temp: float = 18.0, swing_band: float = 3.0,
                   title: Optional[str] = None) -> Path:
    """One day of a recorded rollout: temperatures, heater duty, presence."""
    lo = day_index * 96
    hi = lo + 96
    if hi > len(record.t_i_true):
        raise ValueError(f"record holds {len(record.t_i_true)} steps, "
                         f"day {day_index} needs {hi}")
    hours = np.arange(96) * 0.25
    fig, (ax_t, ax_u) = plt.subplots(
        2, 1, figsize=(7, 4.5), sharex=True, height_ratios=[3, 1])
    ax_t.axhspan(comfort_temp - swing_band, comfort_temp + swing_band,
                 color="#6aa84f", alpha=0.12, label="swing band")
    ax_t.axhline(comfort_temp, color="#6aa84f", linewidth=0.8)
    ax_t.plot(hours, record.t_i_true[lo:hi], color="#4878a8", label="indoor")
    ax_t.plot(hours, record.t_ambient[lo:hi], color="#b8b8b8", label="outdoor")
    ax_t.set_ylabel("degC")
    ax_t.legend(frameon=False, ncol=3, fontsize=8)
    occupied = np.array(record.occupants[lo:hi]) > 0
    ax_u.fill_between(hours, 0, occupied, step="post", color="#d1605e",
                      alpha=0.3, label="occupied")
    ax_u.step(hours, record.power[lo:hi], where="post", color="#4878a8",
              label="heater")
    ax_u.set_xlabel("hour of day")
    ax_u.set_ylabel("duty")
    ax_u.set_ylim(-0.05, 1.1)
    ax_u.legend(frameon=False, ncol=2, fontsize=8)
    if title:
        ax_t.set_title(title)
    return _finish(fig, Path(path))
