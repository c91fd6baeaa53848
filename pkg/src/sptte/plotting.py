"""Figures for per-slot metrics and training curves (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import SlotRow  # noqa: E402


def plot_slotwise(rows: Sequence[SlotRow], path: str | Path, slot_seconds: int = 1200) -> None:
    """MAPE and CRPS against hour of day; absent slots leave gaps."""
    hours = [r.slot_of_day * slot_seconds / 3600.0 for r in rows]
    mape = [100.0 * r.report.mape if r.report else float("nan") for r in rows]
    crps = [r.report.crps if r.report and r.report.crps is not None else float("nan") for r in rows]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(hours, mape, color="tab:blue", marker=".", label="MAPE (%)")
    ax.set_xlabel("hour of day")
    ax.set_ylabel("MAPE (%)")
    twin = ax.twinx()
    twin.plot(hours, crps, color="tab:orange", marker=".", label="CRPS (s)")
    twin.set_ylabel("CRPS (s)")
    fig.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_history(history: Sequence[dict], path: str | Path) -> None:
    """Train and validation NLL per epoch, validation MAPE on a second axis."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [h["train_nll"] for h in history], label="train NLL")
    ax.plot(epochs, [h["val_nll"] for h in history], label="val NLL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL per trip")
    twin = ax.twinx()
    twin.plot(epochs, [100.0 * h["val_mape"] for h in history], color="tab:green", linestyle="--",
              label="val MAPE (%)")
    twin.set_ylabel("MAPE (%)")
    fig.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
