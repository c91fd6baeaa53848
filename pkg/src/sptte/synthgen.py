"""Synthetic road networks and trips drawn from a known, time-varying link Gaussian.

Link means follow a smooth 24 h congestion profile evaluated at each trip's
departure time, and trip departures follow the same profile, so coverage
counts carry information about the current congestion level.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import distance_matrix
from scipy.special import ndtr

from .dist import predict_joint
from .encoder import LinkState
from .evaluate import MetricReport, evaluate_gaussian
from .graph import RoadNetwork
from .trips import DimensionError, TripRecord

DAY = 86400.0


@dataclass
class Scenario:
    num_links: int = 50
    avg_degree: float = 4.0
    rank: int = 4
    slot_seconds: int = 1200
    days: int = 3
    num_trips: int = 30000
    min_trip_links: int = 7
    max_trip_links: int = 60
    seed: int = 0


DEFAULT_SCENARIO = Scenario()


@dataclass
class GroundTruth:
    """True link distribution as a function of time of day.

    ``mu(t) = free + delay * c(t)``, with ``c`` a sum of wrapped Gaussian bumps:
    free-flow running time plus a junction delay that grows with traffic.
    Standard deviations scale with the mean:
    ``sqrt(v) = cv_shared * mu``, ``sqrt(d) = cv_noise * mu``.
    """

    free_time: np.ndarray
    delay: np.ndarray
    L: np.ndarray
    cv_shared: float = 0.10
    cv_noise: float = 0.15
    peak_hours: tuple[float, ...] = (8.0, 17.5)
    peak_widths: tuple[float, ...] = (1.5, 2.0)
    peak_amplitudes: tuple[float, ...] = (1.0, 0.8)
    base_intensity: float = 0.25
    slot_seconds: int = 1200

    @property
    def num_links(self) -> int:
        return self.free_time.size

    def congestion(self, ts) -> np.ndarray:
        hour = np.mod(np.asarray(ts, dtype=np.float64), DAY) / 3600.0
        out = np.zeros_like(hour)
        for h, w, a in zip(self.peak_hours, self.peak_widths, self.peak_amplitudes):
            delta = np.abs(hour - h)
            delta = np.minimum(delta, 24.0 - delta)
            out = out + a * np.exp(-0.5 * (delta / w) ** 2)
        return out

    def intensity(self, ts) -> np.ndarray:
        return self.base_intensity + self.congestion(ts)

    def mean(self, ts: float) -> np.ndarray:
        return self.free_time + self.delay * float(self.congestion(ts))

    def state(self, ts: float) -> LinkState:
        mu = self.mean(ts)
        return LinkState(ts / self.slot_seconds, mu, self.L, (self.cv_shared * mu) ** 2, (self.cv_noise * mu) ** 2)

    def slot_means(self) -> np.ndarray:
        """``mu*`` at every slot-of-day centre, shape ``(slots_per_day, num_links)``."""
        n = int(DAY // self.slot_seconds)
        return np.stack([self.mean((i + 0.5) * self.slot_seconds) for i in range(n)])

    def covariance(self, ts: float) -> np.ndarray:
        return self.state(ts).covariance()

    def to_dict(self) -> dict:
        return {
            "free_time": self.free_time.tolist(),
            "delay": self.delay.tolist(),
            "L": self.L.tolist(),
            "cv_shared": self.cv_shared,
            "cv_noise": self.cv_noise,
            "peak_hours": list(self.peak_hours),
            "peak_widths": list(self.peak_widths),
            "peak_amplitudes": list(self.peak_amplitudes),
            "base_intensity": self.base_intensity,
            "slot_seconds": self.slot_seconds,
            "slot_means": self.slot_means().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        return cls(np.asarray(doc["free_time"]), np.asarray(doc["delay"]), np.asarray(doc["L"]),
                   doc["cv_shared"], doc["cv_noise"], tuple(doc["peak_hours"]), tuple(doc["peak_widths"]),
                   tuple(doc["peak_amplitudes"]), doc["base_intensity"], doc["slot_seconds"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_network(num_links: int, avg_degree: float = 4.0, seed: int = 0) -> RoadNetwork:
    """Links as random points in the unit square: a Euclidean spanning tree plus the shortest extra pairs."""
    if num_links < 2:
        raise ValueError("num_links must be >= 2")
    rng = np.random.default_rng(seed)
    pts = rng.random((num_links, 2))
    dist = distance_matrix(pts, pts)
    mst = minimum_spanning_tree(sp.csr_matrix(dist + 1e-12 * (1 - np.eye(num_links)))).tocoo()
    edges = {(min(a, b), max(a, b)) for a, b in zip(mst.row.tolist(), mst.col.tolist())}
    target = int(round(avg_degree * num_links / 2))
    iu = np.triu_indices(num_links, 1)
    for k in np.argsort(dist[iu], kind="stable"):
        if len(edges) >= target:
            break
        edges.add((int(iu[0][k]), int(iu[1][k])))
    lengths = rng.uniform(50.0, 800.0, num_links)
    lanes = rng.integers(1, 5, num_links).astype(np.float64)
    net = RoadNetwork(num_links, frozenset(edges), np.column_stack([lengths, lanes]))
    assert connected_components(net.adjacency, directed=False)[0] == 1
    return net


def _smooth_field(network: RoadNetwork, rng: np.random.Generator, passes: int) -> np.ndarray:
    """Standardised Gaussian field after ``passes`` rounds of ``z <- (z + mean of neighbours) / 2``."""
    z = rng.standard_normal(network.num_links)
    adj = network.adjacency
    deg = np.maximum(np.asarray(adj.sum(axis=1)).ravel(), 1.0)
    for _ in range(passes):
        z = 0.5 * (z + (adj @ z) / deg)
    sd = z.std()
    return (z - z.mean()) / sd if sd > 0 else z


def generate_ground_truth(network: RoadNetwork, rank: int = 4, seed: int = 0, slot_seconds: int = 1200,
                          speed_range: tuple[float, float] = (4.0, 16.0),
                          delay_scale: float = 60.0, speed_smoothing: int = 3,
                          shared_loading: float = 0.6, cv_shared: float = 0.10,
                          cv_noise: float = 0.15) -> GroundTruth:
    """Spatially correlated free-flow speeds; peak junction delay ``delay_scale * degree / mean degree`` s.

    Speeds come from a standard normal field smoothed over ``speed_smoothing``
    neighbour-averaging passes and mapped through the normal CDF, so their
    marginal is close to uniform on ``speed_range`` while adjacent links
    share speed zones.  Random-walk traffic through a link grows with its
    degree, so the delay tracks the link's expected coverage.  ``L`` rows
    have unit norm.

    Column 0 of ``L`` is a network-wide factor with loading ``shared_loading``
    before normalisation; the other ``rank - 1`` columns are random.
    """
    rng = np.random.default_rng(seed)
    n = network.num_links
    speed = speed_range[0] + (speed_range[1] - speed_range[0]) * ndtr(_smooth_field(network, rng, speed_smoothing))
    deg = network.degrees().astype(np.float64)
    delay = delay_scale * deg / deg.mean()
    L = np.zeros((n, rank))
    L[:, 0] = shared_loading
    if rank > 1:
        L[:, 1:] = rng.standard_normal((n, rank - 1)) * math.sqrt(max(1.0 - shared_loading**2, 0.0) / (rank - 1))
    L /= np.linalg.norm(L, axis=1, keepdims=True)
    return GroundTruth(network.lengths / speed, delay, L, cv_shared, cv_noise, slot_seconds=slot_seconds)


def _random_walk(network: RoadNetwork, length: int, rng: np.random.Generator) -> np.ndarray:
    adj = network.adjacency
    route = [int(rng.integers(network.num_links))]
    prev = -1
    while len(route) < length:
        cur = route[-1]
        nb = adj.indices[adj.indptr[cur]:adj.indptr[cur + 1]]
        choices = nb[nb != prev] if nb.size > 1 else nb
        prev = cur
        route.append(int(choices[rng.integers(choices.size)]))
    return np.asarray(route, dtype=np.int64)


def sample_departures(gt: GroundTruth, n: int, days: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampling from the two-peak daily intensity over ``days`` days."""
    top = gt.base_intensity + sum(gt.peak_amplitudes)
    out = np.empty(0)
    while out.size < n:
        ts = rng.uniform(0.0, days * DAY, 2 * n)
        keep = rng.uniform(0.0, top, 2 * n) < gt.intensity(ts)
        out = np.concatenate([out, ts[keep]])
    return np.sort(out[:n])


def sample_durations(gt: GroundTruth, route: np.ndarray, ts: float, rng: np.random.Generator,
                     max_tries: int = 1000) -> np.ndarray:
    """One joint draw of the route's link times (repeat visits share the draw); resampled until all > 1 s."""
    links = np.unique(route)
    mu = gt.mean(ts)[links]
    for _ in range(max_tries):
        shared = gt.cv_shared * mu * (gt.L[links] @ rng.standard_normal(gt.L.shape[1]))
        noise = gt.cv_noise * mu * rng.standard_normal(links.size)
        x = mu + shared + noise
        if np.all(x > 1.0):
            return x[np.searchsorted(links, route)]
    raise RuntimeError("could not draw positive durations; ground truth too noisy")


def generate_trips(network: RoadNetwork, gt: GroundTruth, num_trips: int, days: int, seed: int,
                   min_links: int = 7, max_links: int = 60) -> list[TripRecord]:
    if gt.num_links != network.num_links:
        raise DimensionError("ground truth and network disagree on the number of links")
    rng = np.random.default_rng(seed)
    departures = sample_departures(gt, num_trips, days, rng)
    trips = []
    for i, ts in enumerate(departures):
        route = _random_walk(network, int(rng.integers(min_links, max_links + 1)), rng)
        dur = sample_durations(gt, route, float(ts), rng)
        trips.append(TripRecord(route, float(ts), float(dur.sum()), dur, i))
    return trips


@dataclass
class SyntheticDataset:
    network: RoadNetwork
    ground_truth: GroundTruth
    trips: list[TripRecord]
    scenario: Scenario = field(default_factory=Scenario)

    @property
    def n_slots(self) -> int:
        return int(self.scenario.days * DAY // self.scenario.slot_seconds)


def generate_scenario(scenario: Scenario = DEFAULT_SCENARIO) -> SyntheticDataset:
    """Network, ground truth and trips from one seed (sub-seeds derived deterministically)."""
    seeds = np.random.SeedSequence(scenario.seed).generate_state(3)
    net = generate_network(scenario.num_links, scenario.avg_degree, int(seeds[0]))
    gt = generate_ground_truth(net, scenario.rank, int(seeds[1]), scenario.slot_seconds)
    trips = generate_trips(net, gt, scenario.num_trips, scenario.days, int(seeds[2]),
                           scenario.min_trip_links, scenario.max_trip_links)
    return SyntheticDataset(net, gt, trips, scenario)


def oracle_predictions(gt: GroundTruth, trips: Sequence[TripRecord]) -> tuple[np.ndarray, np.ndarray]:
    """True conditional means and marginal standard deviations."""
    mean = np.empty(len(trips))
    std = np.empty(len(trips))
    for i, t in enumerate(trips):
        tg = predict_joint(gt.state(t.depart_ts), [t.links], include_cross=False)
        mean[i] = tg.mean[0]
        std[i] = math.sqrt(tg.variance[0])
    return mean, std


def oracle_metrics(gt: GroundTruth, trips: Sequence[TripRecord]) -> MetricReport:
    mean, std = oracle_predictions(gt, trips)
    obs = np.array([t.total_time for t in trips])
    return evaluate_gaussian(mean, std, obs)
