"""Road network, prior similarity, frequency weights and smoothing weights."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class NetworkError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Links ``0..num_links-1``, undirected adjacency and per-link prior features.

    ``feature_names`` labels the columns of ``prior_features``; the first two
    are always ``length_m`` and ``lanes``.
    """

    num_links: int
    edges: frozenset[tuple[int, int]]
    prior_features: np.ndarray
    feature_names: tuple[str, ...] = ("length_m", "lanes")
    _adjacency: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        feats = np.asarray(self.prior_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.num_links or feats.shape[1] < 1:
            raise NetworkError(f"prior_features must be ({self.num_links}, h>=1), got {feats.shape}")
        if len(self.feature_names) != feats.shape[1]:
            raise NetworkError("feature_names does not match prior_features columns")
        norm = set()
        for a, b in self.edges:
            if a == b:
                raise NetworkError(f"self-edge on link {a}")
            if not (0 <= a < self.num_links and 0 <= b < self.num_links):
                raise NetworkError(f"edge ({a}, {b}) outside 0..{self.num_links - 1}")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(norm))
        feats.setflags(write=False)
        object.__setattr__(self, "prior_features", feats)
        rows = [a for a, b in norm] + [b for a, b in norm]
        cols = [b for a, b in norm] + [a for a, b in norm]
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.num_links, self.num_links))
        object.__setattr__(self, "_adjacency", adj)

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency without self-loops."""
        return self._adjacency

    @property
    def lengths(self) -> np.ndarray:
        return self.prior_features[:, 0]

    def neighbors(self, link: int) -> np.ndarray:
        a = self._adjacency
        return a.indices[a.indptr[link]:a.indptr[link + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self._adjacency.indptr)

    def average_degree(self, self_loops: bool = False) -> float:
        return float(self.degrees().mean() + (1.0 if self_loops else 0.0))

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise NetworkError(f"unknown prior feature {name!r}; have {self.feature_names}") from None


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_network(links_path: str | Path, edges_path: str | Path | None = None) -> RoadNetwork:
    """Read ``links.csv`` + ``edges.csv``, or a single JSON document."""
    links_path = Path(links_path)
    if links_path.suffix.lower() == ".json":
        doc = json.loads(links_path.read_text())
        return network_from_dict(doc)
    if edges_path is None:
        raise NetworkError("CSV networks need an edge list file")
    with open(links_path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:3] != ["link_id", "length_m", "lanes"]:
            raise NetworkError(f"links header must start with link_id,length_m,lanes; got {header}")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    ids = [int(r[0]) for r in rows]
    if sorted(ids) != list(range(len(ids))):
        raise NetworkError("link ids must be contiguous 0..num_links-1")
    feats = np.zeros((len(ids), len(header) - 1))
    for r in rows:
        if len(r) != len(header):
            raise NetworkError(f"link row has {len(r)} fields, header has {len(header)}")
        feats[int(r[0])] = [float(x) for x in r[1:]]
    edges = set()
    with open(edges_path, newline="") as fh:
        reader = csv.reader(fh)
        edge_header = [h.strip() for h in next(reader)]
        if edge_header[:2] != ["link_id_a", "link_id_b"]:
            raise NetworkError(f"edges header must be link_id_a,link_id_b; got {edge_header}")
        for r in reader:
            if r and any(c.strip() for c in r):
                a, b = int(r[0]), int(r[1])
                if a != b:
                    edges.add((a, b))
    return RoadNetwork(len(ids), frozenset(edges), feats, tuple(header[1:]))


def network_from_dict(doc: dict) -> RoadNetwork:
    links = sorted(doc["links"], key=lambda d: d["link_id"])
    if [d["link_id"] for d in links] != list(range(len(links))):
        raise NetworkError("link ids must be contiguous 0..num_links-1")
    extra = sorted({k for d in links for k in d.get("features", {})})
    names = ("length_m", "lanes", *extra)
    feats = np.array([[d["length_m"], d["lanes"], *[d.get("features", {})[k] for k in extra]] for d in links],
                     dtype=np.float64)
    edges = frozenset((int(a), int(b)) for a, b in doc["edges"] if a != b)
    return RoadNetwork(len(links), edges, feats, names)


def network_to_dict(net: RoadNetwork) -> dict:
    links = []
    for l in range(net.num_links):
        d = {"link_id": l, "length_m": float(net.prior_features[l, 0]), "lanes": float(net.prior_features[l, 1])}
        if len(net.feature_names) > 2:
            d["features"] = {n: float(net.prior_features[l, j]) for j, n in enumerate(net.feature_names) if j >= 2}
        links.append(d)
    return {"links": links, "edges": sorted([list(e) for e in net.edges])}


def save_network(net: RoadNetwork, links_path: str | Path, edges_path: str | Path) -> None:
    with open(links_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", *net.feature_names])
        for l in range(net.num_links):
            w.writerow([l, *[repr(float(x)) for x in net.prior_features[l]]])
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id_a", "link_id_b"])
        for a, b in sorted(net.edges):
            w.writerow([a, b])


# ---------------------------------------------------------------------------
# weight matrices
# ---------------------------------------------------------------------------


def standardize_features(features: np.ndarray) -> np.ndarray:
    """Column z-scores; constant columns map to zero."""
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (features - mu) / sd


def build_prior_similarity(
    network: RoadNetwork,
    feature_selector=None,
    adjacency_only: bool = False,
    standardize: bool = True,
) -> sp.csr_matrix:
    """Adjacency-masked similarity ``1 / (1 + sqrt(dist))`` with unit diagonal.

    ``feature_selector`` lists column indices or names of the prior features;
    distances are Euclidean on z-scored columns unless ``standardize=False``.
    ``adjacency_only`` ignores features entirely (all edges get 1).
    """
    n = network.num_links
    adj = network.adjacency.tocoo()
    if adjacency_only:
        sim = np.ones(adj.nnz)
    else:
        if feature_selector is None or len(feature_selector) == 0:
            raise NetworkError("feature selection must name at least one feature (or use adjacency_only)")
        idx = [network.feature_index(f) if isinstance(f, str) else int(f) for f in feature_selector]
        for i in idx:
            if not 0 <= i < network.prior_features.shape[1]:
                raise NetworkError(f"feature index {i} out of range")
        feats = network.prior_features
        feats = standardize_features(feats)[:, idx] if standardize else feats[:, idx]
        dist = np.linalg.norm(feats[adj.row] - feats[adj.col], axis=1)
        sim = 1.0 / (1.0 + np.sqrt(dist))
    p = sp.coo_matrix((sim, (adj.row, adj.col)), shape=(n, n)).tocsr()
    return (p + sp.identity(n, format="csr")).tocsr()


def neighbor_shares(network: RoadNetwork, freq: np.ndarray) -> sp.csr_matrix:
    """Row ``l`` holds ``F_l' / sum_{k in N(l)} F_k`` over the neighbours of ``l``.

    Rows whose neighbours all have zero frequency are split uniformly.
    Isolated links get an empty row.
    """
    freq = np.asarray(freq, dtype=np.float64)
    adj = network.adjacency
    rows, cols, vals = [], [], []
    for l in range(network.num_links):
        nb = adj.indices[adj.indptr[l]:adj.indptr[l + 1]]
        if nb.size == 0:
            continue
        total = freq[nb].sum()
        share = freq[nb] / total if total > 0 else np.full(nb.size, 1.0 / nb.size)
        rows.extend([l] * nb.size)
        cols.extend(nb.tolist())
        vals.extend(share.tolist())
    return sp.csr_matrix((vals, (rows, cols)), shape=adj.shape)


def self_weights(freq: np.ndarray, k_f: float) -> np.ndarray:
    """Diagonal of the heterogeneous matrix: ``1 - exp(-k_f F_l / max F)``."""
    freq = np.asarray(freq, dtype=np.float64)
    if np.any(freq < 0):
        raise NetworkError("coverage frequencies must be non-negative")
    top = freq.max(initial=0.0)
    if top <= 0:
        raise NetworkError("max coverage frequency is 0; heterogeneous weights undefined")
    if k_f <= 0:
        raise NetworkError("k_f must be positive")
    return 1.0 - np.exp(-k_f * freq / top)


def build_hetero_weights(network: RoadNetwork, freq: np.ndarray, k_f: float) -> sp.csr_matrix:
    """Frequency-based heterogeneous aware matrix (asymmetric, rows sum to 1)."""
    w = self_weights(freq, k_f)
    shares = neighbor_shares(network, freq)
    off = sp.diags(1.0 - w) @ shares
    return (off + sp.diags(w)).tocsr()


@dataclass
class SmoothingDiagnostics:
    identity_rows: list[int]


def build_edge_weights(p: sp.spmatrix, w_f: sp.spmatrix) -> tuple[sp.csr_matrix, SmoothingDiagnostics]:
    """Row-normalised Hadamard product ``(D^{-1}) (P o W_f)``.

    Rows that vanish entirely become identity rows and are listed in the
    diagnostics.
    """
    if p.shape != w_f.shape:
        raise NetworkError(f"P and W_f differ in shape: {p.shape} vs {w_f.shape}")
    lam = sp.csr_matrix(p).multiply(sp.csr_matrix(w_f)).tocsr()
    lam.eliminate_zeros()
    deg = np.asarray(lam.sum(axis=1)).ravel()
    dead = np.flatnonzero(deg <= 0)
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    out = (sp.diags(inv) @ lam).tolil()
    for l in dead:
        out[l, l] = 1.0
    if dead.size:
        log.warning("smoothing rows %s have zero weight; replaced by identity rows", dead.tolist())
    return out.tocsr(), SmoothingDiagnostics(dead.tolist())


def critical_coverage(avg_degree_with_loops: float, k_f: float, max_freq: float = 1.0) -> float:
    """Frequency at which the self weight equals ``1 / D_avg``."""
    target = 1.0 / avg_degree_with_loops
    return -np.log(1.0 - target) * max_freq / k_f
