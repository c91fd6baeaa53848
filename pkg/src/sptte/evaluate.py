"""Point and probabilistic metrics, per-slot breakdowns, baselines and the sparsification harness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dist import crps_gaussian
from .trips import SlotConfig, TripRecord, assign_slot


@dataclass
class MetricReport:
    """``mape`` is a fraction; ``crps`` is in seconds, ``crps_std`` in standardized target units."""

    rmse: float
    mae: float
    mape: float
    crps: float | None = None
    crps_std: float | None = None
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _aligned(pred, obs) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise ValueError(f"predictions ({pred.size}) and observations ({obs.size}) differ in length")
    if pred.size == 0:
        raise ValueError("no observations")
    return pred, obs


def point_metrics(predictions, observations) -> MetricReport:
    pred, obs = _aligned(predictions, observations)
    if np.any(obs <= 0):
        raise ValueError("MAPE needs positive observations")
    err = pred - obs
    return MetricReport(float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))),
                        float(np.mean(np.abs(err) / obs)), n=obs.size)


def sampled_points(mean, std, seed: int) -> np.ndarray:
    """One seeded draw per trip, the literal sampled point prediction."""
    mean = np.asarray(mean, dtype=np.float64)
    return mean + np.asarray(std) * np.random.default_rng(seed).standard_normal(mean.shape)


def crps_metric(mean, std, observations) -> float:
    _, obs = _aligned(mean, observations)
    return float(np.mean(crps_gaussian(mean, std, obs)))


def evaluate_gaussian(mean, std, observations, scale: float | None = None,
                      sample_seed: int | None = None) -> MetricReport:
    """Point metrics of the mean (or of seeded samples) plus CRPS.

    Zero standard deviations score the absolute error, the point-mass limit.
    ``scale`` converts CRPS to standardized units.
    """
    mean, obs = _aligned(mean, observations)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    point = mean if sample_seed is None else sampled_points(mean, std, sample_seed)
    rep = point_metrics(point, obs)
    pos = std > 0
    crps = np.abs(obs - mean)
    if np.any(pos):
        crps[pos] = crps_gaussian(mean[pos], std[pos], obs[pos])
    rep.crps = float(np.mean(crps))
    rep.crps_std = rep.crps / scale if scale else None
    return rep


@dataclass
class SlotRow:
    slot_of_day: int
    report: MetricReport | None

    def to_dict(self) -> dict:
        d = {"slot_of_day": self.slot_of_day, "present": self.report is not None}
        if self.report is not None:
            d.update(self.report.to_dict())
        return d


def slotwise_report(mean, std, observations, slots, slots_per_day: int, scale: float | None = None) -> list[SlotRow]:
    """Metrics per slot-of-day; empty slots are marked absent."""
    mean, obs = _aligned(mean, observations)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
    folded = np.mod(np.asarray(slots, dtype=np.int64), slots_per_day)
    if folded.shape != mean.shape:
        raise ValueError("slot labels must align with predictions")
    rows = []
    for s in range(slots_per_day):
        m = folded == s
        rows.append(SlotRow(s, evaluate_gaussian(mean[m], std[m], obs[m], scale) if np.any(m) else None))
    return rows


SLOT_CSV_FIELDS = ("slot_of_day", "present", "n", "rmse", "mae", "mape", "crps", "crps_std")


def slot_rows_csv(rows: Sequence[SlotRow]) -> str:
    lines = [",".join(SLOT_CSV_FIELDS)]
    for r in rows:
        d = r.to_dict()
        d["present"] = int(d["present"])
        lines.append(",".join("" if d.get(k) is None else repr(d[k]) for k in SLOT_CSV_FIELDS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


@dataclass
class ClimatologyBaseline:
    """Per slot-of-day empirical pace (seconds per metre): mean and std times route length.

    Slots without training trips fall back to the pooled pace.
    """

    pace_mean: np.ndarray
    pace_std: np.ndarray
    slot_cfg: SlotConfig

    @classmethod
    def fit(cls, trips: Sequence[TripRecord], lengths: np.ndarray, slot_cfg: SlotConfig) -> "ClimatologyBaseline":
        spd = slot_cfg.slots_per_day
        pace = np.array([t.total_time / lengths[t.links].sum() for t in trips])
        slot = np.array([slot_cfg.slot_of_day(assign_slot(t.depart_ts, slot_cfg)) for t in trips])
        mean = np.full(spd, pace.mean())
        std = np.full(spd, pace.std(ddof=1) if pace.size > 1 else 0.0)
        for s in range(spd):
            p = pace[slot == s]
            if p.size >= 2:
                mean[s], std[s] = p.mean(), p.std(ddof=1)
        return cls(mean, std, slot_cfg)

    def predict(self, trips: Sequence[TripRecord], lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        route = np.array([lengths[t.links].sum() for t in trips])
        slot = np.array([self.slot_cfg.slot_of_day(assign_slot(t.depart_ts, self.slot_cfg)) for t in trips])
        return self.pace_mean[slot] * route, self.pace_std[slot] * route


# ---------------------------------------------------------------------------
# sparsification
# ---------------------------------------------------------------------------


def sparsify(train: Sequence[TripRecord], test: Sequence[TripRecord], temporal_keep: float,
             spatial_knockout: float, seed: int, num_links: int,
             slot_cfg: SlotConfig | None = None) -> tuple[list[TripRecord], list[TripRecord], np.ndarray]:
    """Reduce the training set; the test set is returned untouched.

    Temporal: per chronological slot keep the first ``ceil(keep * n)`` trips of a
    seeded permutation.  Spatial: drop training trips touching any of the first
    ``floor(frac * num_links)`` links of a seeded permutation.  Both selections
    are nested in their fraction for a fixed seed.  Also returns the knocked-out links.
    """
    for name, f in (("temporal_keep", temporal_keep), ("spatial_knockout", spatial_knockout)):
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {f}")
    slot_cfg = slot_cfg or SlotConfig()
    t_seed, s_seed = np.random.SeedSequence(seed).spawn(2)
    t_rng, s_rng = np.random.default_rng(t_seed), np.random.default_rng(s_seed)
    by_slot: dict[int, list[int]] = {}
    for i, t in enumerate(train):
        by_slot.setdefault(assign_slot(t.depart_ts, slot_cfg), []).append(i)
    keep = np.zeros(len(train), dtype=bool)
    for s in sorted(by_slot):
        idx = np.asarray(by_slot[s])
        order = idx[t_rng.permutation(idx.size)]
        keep[order[: math.ceil(temporal_keep * idx.size - 1e-9)]] = True
    knocked = np.sort(s_rng.permutation(num_links)[: int(math.floor(spatial_knockout * num_links + 1e-9))])
    if knocked.size:
        mask = np.zeros(num_links, dtype=bool)
        mask[knocked] = True
        for i, t in enumerate(train):
            if keep[i] and mask[t.links].any():
                keep[i] = False
    return [t for i, t in enumerate(train) if keep[i]], list(test), knocked
