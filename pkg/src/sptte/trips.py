"""Trip records, time slots, coverage frequencies and augmented batches."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

MIN_LINKS = 7
MAX_LINKS = 200


class TripError(ValueError):
    pass


class DimensionError(TripError):
    """Trips, coverage or states that disagree with the network size."""


@dataclass(frozen=True, eq=False)
class TripRecord:
    links: np.ndarray
    depart_ts: float
    total_time: float
    durations: np.ndarray | None = None
    trip_id: int | None = None
    observed: bool = True

    def __post_init__(self):
        links = np.asarray(self.links, dtype=np.int64)
        if links.ndim != 1 or links.size == 0:
            raise TripError("trip needs at least one link")
        if np.any(links < 0):
            raise TripError("negative link id")
        if not self.total_time > 0:
            raise TripError(f"total_time must be positive, got {self.total_time}")
        object.__setattr__(self, "links", links)
        if self.durations is not None:
            dur = np.asarray(self.durations, dtype=np.float64)
            if dur.shape != links.shape:
                raise TripError("durations must align with links")
            if np.any(dur <= 0):
                raise TripError("durations must be positive")
            if abs(dur.sum() - self.total_time) > 1e-6 * self.total_time:
                raise TripError(f"durations sum {dur.sum()} != total_time {self.total_time}")
            object.__setattr__(self, "durations", dur)

    def __len__(self) -> int:
        return int(self.links.size)

    def check_network(self, num_links: int) -> None:
        if self.links.max() >= num_links:
            raise DimensionError(f"link id {int(self.links.max())} outside network of {num_links} links")


@dataclass(frozen=True)
class SlotConfig:
    slot_seconds: int = 1200
    timeline_origin: float = 0.0

    def __post_init__(self):
        if self.slot_seconds <= 0 or 86400 % self.slot_seconds:
            raise TripError(f"slot_seconds must divide 86400, got {self.slot_seconds}")

    @property
    def slots_per_day(self) -> int:
        return 86400 // self.slot_seconds

    def slot_of_day(self, slot: int | np.ndarray):
        return np.mod(slot, self.slots_per_day)

    def slot_coordinate(self, ts: float) -> float:
        """Continuous slot position; slot ``i`` spans ``[i, i+1)``."""
        if ts < self.timeline_origin:
            raise TripError(f"timestamp {ts} precedes the timeline origin {self.timeline_origin}")
        return (ts - self.timeline_origin) / self.slot_seconds


def assign_slot(ts: float, cfg: SlotConfig) -> int:
    return int(math.floor(cfg.slot_coordinate(ts)))


@dataclass(frozen=True, eq=False)
class CoverageSeries:
    """Counts of link traversals per chronological slot, shape ``(n_slots, num_links)``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or np.any(c < 0):
            raise TripError("coverage must be a non-negative (slots, links) matrix")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n_slots(self) -> int:
        return self.counts.shape[0]

    @property
    def num_links(self) -> int:
        return self.counts.shape[1]

    def aggregate(self) -> np.ndarray:
        return self.counts.sum(axis=0).astype(np.float64)

    def __add__(self, other: "CoverageSeries") -> "CoverageSeries":
        n = max(self.n_slots, other.n_slots)
        out = np.zeros((n, self.num_links), dtype=np.int64)
        out[: self.n_slots] += self.counts
        out[: other.n_slots] += other.counts
        return CoverageSeries(out)


def compute_coverage(trips: Iterable[TripRecord], cfg: SlotConfig, num_links: int,
                     n_slots: int | None = None) -> CoverageSeries:
    trips = list(trips)
    slots = [assign_slot(t.depart_ts, cfg) for t in trips]
    if n_slots is None:
        n_slots = max(slots, default=-1) + 1
    counts = np.zeros((n_slots, num_links), dtype=np.int64)
    for t, s in zip(trips, slots):
        if s >= n_slots:
            raise TripError(f"trip slot {s} beyond coverage span {n_slots}")
        np.add.at(counts[s], t.links, 1)
    return CoverageSeries(counts)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TripBlock:
    """Row 0 is the full trip, rows ``1..k`` the stride subsamples."""

    rows: tuple[np.ndarray, ...]
    targets: np.ndarray
    slot: int

    @property
    def k_eff(self) -> int:
        return len(self.rows) - 1


def augment_trip(trip: TripRecord, k_aug: int, lengths: np.ndarray | None = None,
                 slot: int = 0) -> TripBlock:
    """Split a trip into ``min(k_aug, len)`` residue classes of stride ``k_aug``.

    Subsample ``s`` keeps positions ``s-1, s-1+k, s-1+2k, ...``.  Its target is
    the sum of observed per-link durations, or ``total_time`` apportioned by
    link length when durations are missing (by link count without lengths).
    """
    if k_aug < 0:
        raise TripError("k_aug must be >= 0")
    k_eff = min(k_aug, len(trip))
    rows = [trip.links]
    targets = [float(trip.total_time)]
    if k_eff:
        if trip.durations is not None:
            weights = trip.durations
            norm = 1.0
        else:
            weights = np.ones(len(trip)) if lengths is None else np.asarray(lengths, dtype=np.float64)[trip.links]
            norm = trip.total_time / weights.sum()
        for s in range(k_eff):
            pos = np.arange(s, len(trip), k_aug)
            rows.append(trip.links[pos])
            targets.append(float(weights[pos].sum() * norm))
    return TripBlock(tuple(rows), np.asarray(targets), slot)


@dataclass(frozen=True, eq=False)
class AugmentedBatch:
    blocks: tuple[TripBlock, ...]
    num_links: int
    k_aug: int

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def slots(self) -> np.ndarray:
        return np.array([b.slot for b in self.blocks], dtype=np.int64)

    def by_slot(self) -> dict[int, "AugmentedBatch"]:
        groups: dict[int, list[TripBlock]] = {}
        for b in self.blocks:
            groups.setdefault(b.slot, []).append(b)
        return {s: AugmentedBatch(tuple(g), self.num_links, self.k_aug) for s, g in sorted(groups.items())}

    def dense_a(self) -> np.ndarray:
        """Trips x links traversal counts (row 0 of each block)."""
        return rows_to_dense([b.rows[0] for b in self.blocks], self.num_links)

    def dense_a_hat(self) -> np.ndarray:
        return rows_to_dense([r for b in self.blocks for r in b.rows], self.num_links)

    def dense_b_hat(self) -> np.ndarray:
        """``blkdiag(A_hat^q)`` of shape ``(sum rows, Q * num_links)``."""
        n = self.num_links
        parts = [rows_to_dense(list(b.rows), n) for b in self.blocks]
        out = np.zeros((sum(p.shape[0] for p in parts), n * len(parts)))
        r = 0
        for q, p in enumerate(parts):
            out[r:r + p.shape[0], q * n:(q + 1) * n] = p
            r += p.shape[0]
        return out

    def targets(self) -> np.ndarray:
        return np.concatenate([b.targets for b in self.blocks])


def rows_to_dense(rows: Sequence[np.ndarray], num_links: int) -> np.ndarray:
    out = np.zeros((len(rows), num_links))
    for i, r in enumerate(rows):
        np.add.at(out[i], r, 1.0)
    return out


def rows_to_sparse(rows: Sequence[np.ndarray], num_links: int) -> sp.csr_matrix:
    r_idx = np.concatenate([np.full(len(r), i) for i, r in enumerate(rows)]) if rows else np.zeros(0, int)
    c_idx = np.concatenate(rows) if rows else np.zeros(0, int)
    m = sp.csr_matrix((np.ones(c_idx.size), (r_idx, c_idx)), shape=(len(rows), num_links))
    m.sum_duplicates()
    return m


def build_batch(trips: Sequence[TripRecord], k_aug: int, cfg: SlotConfig, num_links: int,
                lengths: np.ndarray | None = None, time_scale: float = 1.0) -> AugmentedBatch:
    """Augment every trip, preserving input order; targets divided by ``time_scale``."""
    if not trips:
        raise TripError("empty batch")
    blocks = []
    for t in trips:
        t.check_network(num_links)
        b = augment_trip(t, k_aug, lengths, assign_slot(t.depart_ts, cfg))
        if time_scale != 1.0:
            b = TripBlock(b.rows, b.targets / time_scale, b.slot)
        blocks.append(b)
    return AugmentedBatch(tuple(blocks), num_links, k_aug)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def filter_trips(trips: Iterable[TripRecord], min_links: int = MIN_LINKS,
                 max_links: int = MAX_LINKS) -> list[TripRecord]:
    kept, short, long_ = [], 0, 0
    for t in trips:
        if len(t) < min_links:
            short += 1
        elif len(t) > max_links:
            long_ += 1
        else:
            kept.append(t)
    if short or long_:
        log.warning("rejected %d trips shorter than %d links and %d longer than %d links",
                    short, min_links, long_, max_links)
    return kept


def split_trips(trips: Sequence[TripRecord], seed: int, fractions=(0.70, 0.15, 0.15)):
    """Uniform random train/val/test split; each part keeps the input order."""
    n = len(trips)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = [np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])]
    return tuple([trips[i] for i in idx] for idx in parts)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_trips(trips: Iterable[TripRecord], path: str | Path) -> None:
    path = Path(path)
    trips = list(trips)
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        with open(path, "w") as fh:
            for i, t in enumerate(trips):
                rec = {"trip_id": t.trip_id if t.trip_id is not None else i, "depart_ts": float(t.depart_ts),
                       "total_time": float(t.total_time), "links": t.links.tolist()}
                if t.durations is not None:
                    rec["durations"] = t.durations.tolist()
                fh.write(json.dumps(rec) + "\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trip_id", "depart_ts", "total_time", "link_seq", "duration_seq"])
        for i, t in enumerate(trips):
            dur = "" if t.durations is None else ";".join(_fmt(d) for d in t.durations)
            w.writerow([t.trip_id if t.trip_id is not None else i, _fmt(t.depart_ts),
                        _fmt(t.total_time) if t.observed else "",
                        ";".join(str(int(l)) for l in t.links), dur])


def load_trips(path: str | Path, require_time: bool = True) -> list[TripRecord]:
    """Read CSV or JSON-lines trips.  ``total_time`` may be blank when ``require_time`` is off."""
    path = Path(path)
    out: list[TripRecord] = []
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        with open(path) as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                rec = json.loads(line)
                out.append(_record(rec.get("trip_id", i), rec["depart_ts"], rec.get("total_time"),
                                   rec["links"], rec.get("durations"), require_time))
        return out
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"depart_ts", "total_time", "link_seq"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise TripError(f"trips header must include {sorted(needed)}; got {reader.fieldnames}")
        for i, row in enumerate(reader):
            links = [int(x) for x in row["link_seq"].split(";") if x.strip()]
            dur_field = (row.get("duration_seq") or "").strip()
            durations = [float(x) for x in dur_field.split(";")] if dur_field else None
            tid = row.get("trip_id")
            out.append(_record(int(tid) if tid not in (None, "") else i, row["depart_ts"],
                               row["total_time"], links, durations, require_time))
    return out


def _record(trip_id, depart_ts, total_time, links, durations, require_time: bool) -> TripRecord:
    observed = total_time not in (None, "")
    if not observed:
        if require_time:
            raise TripError(f"trip {trip_id} has no total_time")
        # placeholder for query trips; never used as a target
        total = float(np.sum(durations)) if durations else 1.0
    else:
        total = float(total_time)
    return TripRecord(np.asarray(links, dtype=np.int64), float(depart_ts), total,
                      None if durations is None else np.asarray(durations, dtype=np.float64), int(trip_id),
                      observed)
