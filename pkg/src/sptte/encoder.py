"""Coverage windows -> GRU hidden state -> smoothed branch representations -> link state.

All parameters live in a flat ``dict[str, np.ndarray]`` whose insertion order
is the canonical order used by checkpoints and the optimizer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diff as D
from .graph import RoadNetwork, build_prior_similarity, neighbor_shares
from .trips import CoverageSeries, DimensionError

BRANCHES = ("mu", "L", "V", "D")
# softplus underflows to 0 for very negative inputs; heads never go below this (standardized units)
VARIANCE_FLOOR = 1e-12
HEAD_BRANCHES = ("mu", "V", "D")
ABLATIONS = ("full", "no_ss", "no_pk", "no_hw")


@dataclass
class EncoderConfig:
    r_h: int = 32
    r_e: int = 32
    gru_hidden: int = 256
    gru_layers: int = 2
    eta: int = 6
    branch_width: int | None = None
    activation: str = "identity"
    ablation: str = "full"
    wf_mode: str = "aggregate"
    prior_feature: str = "length_m"
    head_hidden: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.activation not in ("identity", "tanh"):
            raise ValueError("activation must be 'identity' or 'tanh'")
        if self.wf_mode not in ("aggregate", "per_slot"):
            raise ValueError("wf_mode must be 'aggregate' or 'per_slot'")
        if self.head_hidden < 0:
            raise ValueError("head_hidden must be >= 0")

    @property
    def width(self) -> int:
        return self.branch_width or (self.r_h + self.r_e)

    def to_dict(self) -> dict:
        return asdict(self)


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_params(cfg: EncoderConfig, num_links: int, seed: int) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, N(0, 0.1^2) embeddings, softplus(k_f) = 1."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    h = cfg.gru_hidden
    p: dict[str, np.ndarray] = {}
    in_dim = 1
    for layer in range(cfg.gru_layers):
        p[f"gru.{layer}.w_ih"] = uniform(h, (in_dim, 3 * h))
        p[f"gru.{layer}.w_hh"] = uniform(h, (h, 3 * h))
        p[f"gru.{layer}.b_ih"] = uniform(h, (3 * h,))
        p[f"gru.{layer}.b_hh"] = uniform(h, (3 * h,))
        in_dim = h
    p["proj.w"] = uniform(h, (h, cfg.r_h))
    p["proj.b"] = uniform(h, (cfg.r_h,))
    p["embed"] = 0.1 * rng.standard_normal((num_links, cfg.r_e))
    x_dim, w = cfg.r_h + cfg.r_e, cfg.width
    for s in BRANCHES:
        p[f"branch.{s}"] = uniform(x_dim, (x_dim, w))
    for s in BRANCHES:
        p[f"smooth.{s}"] = uniform(w, (w, w))
    for s in HEAD_BRANCHES:
        if cfg.head_hidden:
            p[f"head.{s}.hidden"] = uniform(w, (w, cfg.head_hidden))
            p[f"head.{s}.hidden_b"] = uniform(w, (cfg.head_hidden,))
            p[f"head.{s}"] = uniform(cfg.head_hidden, (cfg.head_hidden, 1))
        else:
            p[f"head.{s}"] = uniform(w, (w, 1))
    p["k_f"] = np.array([softplus_inverse(1.0)])
    return p


# ---------------------------------------------------------------------------
# smoothing weights as a differentiable function of k_f
# ---------------------------------------------------------------------------


@dataclass
class SmoothingPlan:
    """Constants needed to rebuild the normalised edge weights for any ``k_f``.

    ``pq`` is ``P o shares`` (zero diagonal), ``freq_ratio`` is ``F / max F``.
    """

    pq: np.ndarray
    pq_rowsum: np.ndarray
    freq_ratio: np.ndarray
    fixed: np.ndarray | None = None
    dead_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @classmethod
    def build(cls, p: np.ndarray, shares: np.ndarray, freq: np.ndarray, hetero: bool = True) -> "SmoothingPlan":
        n = p.shape[0]
        if not hetero:
            mask = (p > 0).astype(float)
            lam = p * mask
            return cls(np.zeros_like(p), np.zeros(n), np.zeros(n), fixed=lam / lam.sum(axis=1, keepdims=True))
        top = freq.max(initial=0.0)
        ratio = freq / top if top > 0 else np.zeros_like(freq)
        pq = p * shares
        np.fill_diagonal(pq, 0.0)
        rowsum = pq.sum(axis=1)
        dead = np.flatnonzero((ratio <= 0) & (rowsum <= 0))
        for l in dead:
            pq[l, l] = 1.0
            rowsum[l] = 1.0
        return cls(pq, rowsum, ratio, None, dead)

    def edge_weights(self, k_f: D.Tensor) -> D.Tensor:
        if self.fixed is not None:
            return D.Tensor(self.fixed)
        n = self.pq.shape[0]
        kvec = D.expand_scalar(k_f, (n,))
        w = D.sub(np.ones(n), D.exp(D.scale(D.mul(kvec, self.freq_ratio), -1.0)))
        one_minus = D.sub(np.ones(n), w)
        lam = D.add(D.mul(D.expand_cols(w, n), np.eye(n)), D.mul(D.expand_cols(one_minus, n), self.pq))
        rowsum = D.add(w, D.mul(one_minus, self.pq_rowsum))
        return D.div(lam, D.expand_cols(rowsum, n))

    def edge_weights_numpy(self, k_f: float) -> np.ndarray:
        return self.edge_weights(D.Tensor(np.array([k_f]))).data


def branch_similarities(network: RoadNetwork, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    n = network.num_links
    adj_only = build_prior_similarity(network, adjacency_only=True).toarray()
    if cfg.ablation == "no_pk":
        return {s: adj_only for s in BRANCHES}
    prior = build_prior_similarity(network, [cfg.prior_feature]).toarray()
    out = {s: prior for s in BRANCHES}
    out["L"] = adj_only
    assert all(v.shape == (n, n) for v in out.values())
    return out


# ---------------------------------------------------------------------------
# encoder context and forward pass
# ---------------------------------------------------------------------------


@dataclass
class LinkState:
    """Link-level Gaussian for one slot (model units) plus the smoothed branches."""

    slot: float
    mu: np.ndarray
    L: np.ndarray
    v: np.ndarray
    d: np.ndarray
    H: dict[str, np.ndarray] = field(default_factory=dict)

    def covariance(self) -> np.ndarray:
        s = np.sqrt(self.v)[:, None] * self.L
        return s @ s.T + np.diag(self.d)


@dataclass
class StateTensors:
    mu: D.Tensor
    L: D.Tensor
    v: D.Tensor
    d: D.Tensor
    H: dict[str, D.Tensor]

    def to_state(self, slot: float) -> LinkState:
        return LinkState(slot, self.mu.data.copy(), self.L.data.copy(), self.v.data.copy(), self.d.data.copy(),
                         {k: t.data.copy() for k, t in self.H.items()})


class EncoderContext:
    """Everything the forward pass needs besides the trainable parameters."""

    def __init__(self, network: RoadNetwork, coverage: CoverageSeries, cfg: EncoderConfig,
                 norm_max: float | None = None, link_mean: np.ndarray | None = None):
        if coverage.num_links != network.num_links:
            raise DimensionError("coverage and network disagree on the number of links")
        self.network = network
        self.coverage = coverage
        self.cfg = cfg
        counts = coverage.counts.astype(np.float64)
        self.link_mean = counts.mean(axis=0) if link_mean is None else np.asarray(link_mean, dtype=np.float64)
        if norm_max is None:
            norm_max = float(np.log1p(counts).max(initial=0.0))
        self.norm_max = norm_max if norm_max > 0 else 1.0
        self.similarity = branch_similarities(network, cfg)
        self._plans: dict = {}

    @property
    def num_links(self) -> int:
        return self.network.num_links

    def raw_window(self, slot: int) -> np.ndarray:
        """Counts for slots ``slot-eta .. slot-1``; slots outside the series use the link means."""
        eta = self.cfg.eta
        out = np.tile(self.link_mean, (eta, 1))
        n = self.coverage.n_slots
        for j, s in enumerate(range(slot - eta, slot)):
            if 0 <= s < n:
                out[j] = self.coverage.counts[s]
        return out

    def window(self, slot: int) -> np.ndarray:
        return self.normalize(self.raw_window(slot))

    def normalize(self, counts: np.ndarray) -> np.ndarray:
        return np.log1p(counts) / self.norm_max

    def plan(self, branch: str, slot: int) -> SmoothingPlan:
        hetero = self.cfg.ablation != "no_hw"
        if self.cfg.wf_mode == "aggregate" or not hetero:
            key = (branch, None)
        else:
            key = (branch, slot)
        if key not in self._plans:
            if key[1] is None:
                freq = self.coverage.aggregate()
            else:
                freq = self.raw_window(slot).mean(axis=0)
            shares = neighbor_shares(self.network, freq).toarray()
            self._plans[key] = SmoothingPlan.build(self.similarity[branch], shares, freq, hetero)
        return self._plans[key]


def temporal_hidden(window: np.ndarray, params, cfg: EncoderConfig) -> D.Tensor:
    """Shared GRU over each link's normalised frequency series, projected to ``r_h``."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] != cfg.eta:
        raise D.ShapeError(f"coverage window must have {cfg.eta} rows, got shape {window.shape}")
    n = window.shape[1]
    seq = D.Tensor(window[:, :, None])
    for layer in range(cfg.gru_layers):
        seq = D.gru_layer(seq, *(params[f"gru.{layer}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")))
    last = D.index_first(seq, cfg.eta - 1)
    return D.add(D.matmul(last, params["proj.w"]), D.expand_rows(params["proj.b"], n))


def branch(h: D.Tensor, params) -> dict[str, D.Tensor]:
    x = D.concat([h, params["embed"]], axis=1)
    return {s: D.matmul(x, params[f"branch.{s}"]) for s in BRANCHES}


def smooth(H: dict[str, D.Tensor], params, ctx: EncoderContext, slot: int) -> dict[str, D.Tensor]:
    if ctx.cfg.ablation == "no_ss":
        return dict(H)
    out = {}
    k_f = D.softplus(params["k_f"])
    for s in BRANCHES:
        lam = ctx.plan(s, slot).edge_weights(k_f)
        y = D.matmul(D.matmul(lam, H[s]), params[f"smooth.{s}"])
        out[s] = D.tanh(y) if ctx.cfg.activation == "tanh" else y
    return out


def _regress(x: D.Tensor, params, s: str) -> D.Tensor:
    """Output layer: linear, or one tanh hidden layer when ``head.{s}.hidden`` exists."""
    n = x.shape[0]
    if f"head.{s}.hidden" in params:
        x = D.tanh(D.add(D.matmul(x, params[f"head.{s}.hidden"]), D.expand_rows(params[f"head.{s}.hidden_b"], n)))
    return D.reshape(D.matmul(x, params[f"head.{s}"]), (n,))


def heads(H: dict[str, D.Tensor], params) -> tuple[D.Tensor, D.Tensor, D.Tensor, D.Tensor]:
    mu = _regress(H["mu"], params, "mu")
    v = D.clamp_min(D.softplus(_regress(H["V"], params, "V")), VARIANCE_FLOOR)
    d = D.clamp_min(D.softplus(_regress(H["D"], params, "D")), VARIANCE_FLOOR)
    return mu, H["L"], v, d


def as_tensors(params, requires_grad: bool = False) -> dict[str, D.Tensor]:
    return {k: v if isinstance(v, D.Tensor) else D.Tensor(v, requires_grad=requires_grad, name=k)
            for k, v in params.items()}


def encode_slot(params, ctx: EncoderContext, slot: int) -> StateTensors:
    """Full forward pass for one chronological slot."""
    params = as_tensors(params)
    h = temporal_hidden(ctx.window(slot), params, ctx.cfg)
    H = smooth(branch(h, params), params, ctx, slot)
    mu, L, v, d = heads(H, params)
    return StateTensors(mu, L, v, d, H)


def slot_state(params, ctx: EncoderContext, slot: int) -> LinkState:
    return encode_slot(params, ctx, slot).to_state(slot)


def interpolate_state(state_t: LinkState, state_next: LinkState, fraction: float, params) -> LinkState:
    """Blend the smoothed branch representations, then re-apply the heads."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return state_t
    if fraction == 1.0:
        return state_next
    H = {s: (1.0 - fraction) * state_t.H[s] + fraction * state_next.H[s] for s in BRANCHES}
    mu, L, v, d = heads({s: D.Tensor(h) for s, h in H.items()}, as_tensors(params))
    slot = (1.0 - fraction) * state_t.slot + fraction * state_next.slot
    return LinkState(slot, mu.data, L.data, v.data, d.data, H)
