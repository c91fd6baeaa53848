"""Total loss, Adam, the slot-batched training loop and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diff as D
from .dist import CompiledBlock, TripGaussian, batch_nll, compile_block, predict_joint
from .encoder import (
    BRANCHES,
    EncoderConfig,
    EncoderContext,
    LinkState,
    StateTensors,
    as_tensors,
    encode_slot,
    init_params,
    interpolate_state,
)
from .graph import RoadNetwork, network_from_dict, network_to_dict
from .trips import (
    CoverageSeries,
    SlotConfig,
    TripBlock,
    TripRecord,
    assign_slot,
    augment_trip,
    compute_coverage,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 256
    k_aug: int = 5
    eta: int = 6
    alpha: float = 0.02
    beta: float = 0.02
    epochs: int = 100
    mean_warmup_epochs: int = 6
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    standardize_targets: bool = True
    ablation: str = "full"
    r_h: int = 32
    r_e: int = 32
    gru_hidden: int = 256
    gru_layers: int = 2
    branch_width: int | None = None
    activation: str = "identity"
    wf_mode: str = "aggregate"
    prior_feature: str = "length_m"
    head_hidden: int = 0
    slot_seconds: int = 1200
    timeline_origin: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.k_aug < 0 or self.eta < 1 or self.mean_warmup_epochs < 0:
            raise ValueError("epochs, k_aug must be >= 0 and eta >= 1")
        self.encoder_config()
        self.slot_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.r_h, self.r_e, self.gru_hidden, self.gru_layers, self.eta, self.branch_width,
                             self.activation, self.ablation, self.wf_mode, self.prior_feature, self.head_hidden)

    def slot_config(self) -> SlotConfig:
        return SlotConfig(self.slot_seconds, self.timeline_origin)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _cosine_sq(a: D.Tensor, b: D.Tensor) -> D.Tensor:
    na, nb = float(np.sum(a.data**2)), float(np.sum(b.data**2))
    if na == 0.0 or nb == 0.0:
        return D.Tensor(np.asarray(0.0))
    dot = D.sum(D.mul(a, b))
    return D.div(D.square(dot), D.mul(D.sum(D.square(a)), D.sum(D.square(b))))


def orth_theta_loss(params) -> D.Tensor:
    """Sum over s in {L, V, D} of the squared cosine between vec(w_h^mu) and vec(w_h^s)."""
    p = as_tensors(params)
    out = None
    for s in ("L", "V", "D"):
        term = _cosine_sq(p["branch.mu"], p[f"branch.{s}"])
        out = term if out is None else D.add(out, term)
    return out


def orth_L_loss(L) -> D.Tensor:
    L = D.as_tensor(L)
    return D.frobenius_sq(D.sub(D.matmul(D.transpose(L), L), np.eye(L.shape[1])))


def total_loss(state, blocks, params, cfg: TrainConfig, reduction: str = "mean") -> tuple[D.Tensor, D.Tensor]:
    """``nll + alpha * orth_theta + beta * orth_L`` on one tape; returns ``(loss, nll)``."""
    nll = batch_nll(state, blocks, reduction)
    loss = nll
    if cfg.alpha:
        loss = D.add(loss, D.scale(orth_theta_loss(params), cfg.alpha))
    if cfg.beta:
        loss = D.add(loss, D.scale(orth_L_loss(state.L), cfg.beta))
    return loss, nll


def warmup_loss(state, blocks, params, cfg: TrainConfig, reduction: str = "mean") -> tuple[D.Tensor, D.Tensor]:
    """``total_loss`` with the link covariance replaced by the identity, so only the mean is fitted."""
    n = state.mu.shape[0]
    fixed = StateTensors(state.mu, D.Tensor(np.zeros((n, 1))), D.Tensor(np.ones(n)), D.Tensor(np.ones(n)), {})
    nll = batch_nll(fixed, blocks, reduction)
    loss = nll
    if cfg.alpha:
        loss = D.add(loss, D.scale(orth_theta_loss(params), cfg.alpha))
    if cfg.beta:
        loss = D.add(loss, D.scale(orth_L_loss(state.L), cfg.beta))
    return loss, nll


class Adam:
    """Adam over a dict of arrays; state lives in flat buffers in the dict's key order."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.keys = list(params)
        self.shapes = [params[k].shape for k in self.keys]
        self.sizes = [params[k].size for k in self.keys]
        total = sum(self.sizes)
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self._g = np.empty(total)
        self._tmp = np.empty(total)
        self.t = 0

    def _flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        off = 0
        for k, size in zip(self.keys, self.sizes):
            self._g[off:off + size] = grads[k].reshape(-1)
            off += size
        return self._g

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        g, tmp = self._flatten(grads), self._tmp
        self.m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=tmp)
        self.m += tmp
        self.v *= self.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.beta2
        self.v += tmp
        np.multiply(self.v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr / c1
        off = 0
        for k, size, shape in zip(self.keys, self.sizes, self.shapes):
            params[k] -= tmp[off:off + size].reshape(shape)
            off += size


# ---------------------------------------------------------------------------
# target transform
# ---------------------------------------------------------------------------


@dataclass
class TargetTransform:
    """Model targets are ``(seconds - rate * route_length) / scale``.

    The offset is linear in the route, so sums over links stay sums and the
    subsample structure of the augmented rows is preserved.
    """

    rate: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, trips: Sequence[TripRecord], lengths: np.ndarray, enabled: bool = True) -> "TargetTransform":
        if not enabled or not trips:
            return cls()
        route = np.array([lengths[t.links].sum() for t in trips])
        times = np.array([t.total_time for t in trips])
        nlinks = np.array([len(t) for t in trips], dtype=np.float64)
        rate = float(times.sum() / route.sum())
        resid = times - rate * route
        scale = math.sqrt(float(np.mean(resid**2 / nlinks)))
        return cls(rate, scale if scale > 0 else 1.0)

    def offset(self, rows, lengths: np.ndarray) -> np.ndarray:
        return np.array([self.rate * lengths[r].sum() for r in rows])

    def block(self, block: TripBlock, lengths: np.ndarray) -> TripBlock:
        t = (block.targets - self.offset(block.rows, lengths)) / self.scale
        return TripBlock(block.rows, t, block.slot)


def compile_trips(trips: Sequence[TripRecord], k_aug: int, slot_cfg: SlotConfig, lengths: np.ndarray,
                  transform: TargetTransform) -> list[tuple[int, CompiledBlock]]:
    out = []
    for t in trips:
        slot = assign_slot(t.depart_ts, slot_cfg)
        block = transform.block(augment_trip(t, k_aug, lengths, slot), lengths)
        out.append((slot, compile_block(block)))
    return out


# ---------------------------------------------------------------------------
# trained model
# ---------------------------------------------------------------------------


class TrainedModel:
    """Parameters plus everything needed to rebuild link states and predictions."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig, network: RoadNetwork,
                 coverage: CoverageSeries, transform: TargetTransform, norm_max: float | None = None,
                 link_mean: np.ndarray | None = None):
        self.params = params
        self.cfg = cfg
        self.network = network
        self.coverage = coverage
        self.transform = transform
        self.slot_cfg = cfg.slot_config()
        self.context = EncoderContext(network, coverage, cfg.encoder_config(), norm_max, link_mean)
        self._states: dict[int, LinkState] = {}

    @classmethod
    def initial(cls, train_trips: Sequence[TripRecord], network: RoadNetwork, cfg: TrainConfig,
                n_slots: int) -> "TrainedModel":
        """Untrained model: coverage and target transform from the training trips, seeded parameters."""
        slot_cfg = cfg.slot_config()
        coverage = compute_coverage(train_trips, slot_cfg, network.num_links, n_slots)
        transform = TargetTransform.fit(train_trips, network.lengths, cfg.standardize_targets)
        return cls(init_params(cfg.encoder_config(), network.num_links, cfg.seed), cfg, network, coverage, transform)

    def state(self, slot: int) -> LinkState:
        if slot not in self._states:
            self._states[slot] = encode_slot(self.params, self.context, slot).to_state(slot)
        return self._states[slot]

    def state_at(self, position: float) -> LinkState:
        """State at a continuous position where slot ``i`` is anchored at ``i`` (its centre)."""
        base = math.floor(position)
        frac = position - base
        if frac == 0.0:
            return self.state(base)
        return interpolate_state(self.state(base), self.state(base + 1), frac, self.params)

    def position(self, ts: float) -> float:
        """Slot-centre-anchored time coordinate of a timestamp."""
        return self.slot_cfg.slot_coordinate(ts) - 0.5

    def predict(self, trips: Sequence[TripRecord], interpolate: bool = False,
                include_cross: bool = False) -> TripGaussian:
        """Trip Gaussians in seconds, in input order.

        Trips that share a state are jointly Gaussian; trips under different
        states get zero cross-covariance.
        """
        q = len(trips)
        mean, var = np.zeros(q), np.zeros(q)
        cov = np.zeros((q, q)) if include_cross else None
        groups: dict[float, list[int]] = {}
        for i, t in enumerate(trips):
            t.check_network(self.network.num_links)
            key = self.position(t.depart_ts) if interpolate else float(assign_slot(t.depart_ts, self.slot_cfg))
            groups.setdefault(key, []).append(i)
        lengths = self.network.lengths
        for key in sorted(groups):
            idx = groups[key]
            st = self.state_at(key) if interpolate else self.state(int(key))
            rows = [trips[i].links for i in idx]
            tg = predict_joint(st, rows, include_cross).scaled(self.transform.scale,
                                                               self.transform.offset(rows, lengths))
            mean[idx], var[idx] = tg.mean, tg.variance
            if include_cross:
                cov[np.ix_(idx, idx)] = tg.covariance
        return TripGaussian(mean, var, cov)

    def predict_at(self, trips: Sequence[TripRecord], position: float, include_cross: bool = False) -> TripGaussian:
        """All trips under the one state at ``position``, ignoring their timestamps."""
        for t in trips:
            t.check_network(self.network.num_links)
        rows = [t.links for t in trips]
        return predict_joint(self.state_at(position), rows, include_cross).scaled(
            self.transform.scale, self.transform.offset(rows, self.network.lengths))

    def nll_seconds(self, trips: Sequence[TripRecord]) -> float:
        """Mean per-trip augmented NLL, expressed for targets in seconds."""
        compiled = compile_trips(trips, self.cfg.k_aug, self.slot_cfg, self.network.lengths, self.transform)
        return _mean_nll(self, compiled)


def _mean_nll(model: TrainedModel, compiled: list[tuple[int, CompiledBlock]]) -> float:
    by_slot: dict[int, list[CompiledBlock]] = {}
    for slot, cb in compiled:
        by_slot.setdefault(slot, []).append(cb)
    total, rows = 0.0, 0
    for slot in sorted(by_slot):
        blocks = by_slot[slot]
        total += batch_nll(model.state(slot), blocks, "sum").item()
        rows += sum(cb.n for cb in blocks)
    return (total + rows * math.log(model.transform.scale)) / len(compiled)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    val_mape: float
    wall_s: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    model: TrainedModel
    history: list[EpochRecord]
    best_epoch: int
    init_val_nll: float
    diverged: bool = False
    messages: list[str] = field(default_factory=list)


def minibatches(slots: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle, grouped into slot-homogeneous chunks, chunk order shuffled."""
    perm = rng.permutation(len(slots))
    groups: dict[int, list[int]] = {}
    for i in perm:
        groups.setdefault(int(slots[i]), []).append(int(i))
    chunks = []
    for s in sorted(groups):
        g = groups[s]
        chunks.extend(np.asarray(g[j:j + batch_size]) for j in range(0, len(g), batch_size))
    order = rng.permutation(len(chunks))
    return [chunks[i] for i in order]


def evaluate_split(model: TrainedModel, trips: Sequence[TripRecord],
                   compiled: list[tuple[int, CompiledBlock]]) -> tuple[float, float]:
    if not trips:
        return float("nan"), float("nan")
    nll = _mean_nll(model, compiled)
    pred = model.predict(trips)
    obs = np.array([t.total_time for t in trips])
    mape = float(np.mean(np.abs(pred.mean - obs) / obs))
    return nll, mape


def fit(train_trips: Sequence[TripRecord], val_trips: Sequence[TripRecord], network: RoadNetwork,
        cfg: TrainConfig, n_slots: int | None = None,
        callback: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Train from scratch; the returned model holds the best-validation parameters."""
    if not train_trips:
        raise ValueError("no training trips")
    slot_cfg = cfg.slot_config()
    for t in list(train_trips) + list(val_trips):
        t.check_network(network.num_links)
    span = max(assign_slot(t.depart_ts, slot_cfg) for t in list(train_trips) + list(val_trips)) + 1
    model = TrainedModel.initial(train_trips, network, cfg, max(span, n_slots or 0))
    params = {k: v.copy() for k, v in model.params.items()}
    lengths = network.lengths
    transform = model.transform
    train_c = compile_trips(train_trips, cfg.k_aug, slot_cfg, lengths, transform)
    val_c = compile_trips(val_trips, cfg.k_aug, slot_cfg, lengths, transform)
    slots = np.array([s for s, _ in train_c])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    ctx = model.context

    def score(p) -> tuple[float, float]:
        model.params = p
        model._states.clear()
        if val_trips:
            return evaluate_split(model, val_trips, val_c)
        return _mean_nll(model, train_c), float("nan")

    init_val, _ = score({k: v.copy() for k, v in params.items()})
    best = {k: v.copy() for k, v in params.items()}
    best_val, best_epoch = init_val, 0
    history: list[EpochRecord] = []
    messages: list[str] = []
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        total, count = 0.0, 0
        loss_fn = warmup_loss if epoch <= cfg.mean_warmup_epochs else total_loss
        try:
            for chunk in minibatches(slots, cfg.batch_size, rng):
                slot = int(slots[chunk[0]])
                leaves = as_tensors(params, requires_grad=True)
                state = encode_slot(leaves, ctx, slot)
                loss, nll = loss_fn(state, [train_c[i][1] for i in chunk], leaves, cfg)
                loss.backward()
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise D.NonFiniteError("non-finite gradient")
                opt.step(params, grads)
                total += nll.item() * len(chunk)
                count += len(chunk)
        except (D.NonFiniteError, D.CholeskyError, FloatingPointError) as exc:
            diverged = True
            messages.append(f"epoch {epoch}: training diverged ({exc}); keeping epoch {best_epoch} parameters")
            log.error(messages[-1])
            break
        val_nll, val_mape = score({k: v.copy() for k, v in params.items()})
        train_nll = total / count + _rows_log_scale(train_c, transform)
        rec = EpochRecord(epoch, train_nll, val_nll, val_mape, time.perf_counter() - start)
        history.append(rec)
        if callback:
            callback(rec)
        # the covariance is untrained during warm-up, so its NLL is not comparable; keep the last warm-up epoch
        in_warmup = epoch <= cfg.mean_warmup_epochs
        if not math.isfinite(val_nll):
            if val_trips:
                diverged = True
                messages.append(f"epoch {epoch}: non-finite validation NLL; stopping")
                break
        elif (in_warmup or (cfg.mean_warmup_epochs and best_epoch <= cfg.mean_warmup_epochs)
              or val_nll < best_val or not math.isfinite(best_val)):
            best_val, best_epoch = val_nll, epoch
            best = {k: v.copy() for k, v in params.items()}
    model.params = best
    model._states.clear()
    return FitResult(model, history, best_epoch, init_val, diverged, messages)


def _rows_log_scale(compiled, transform: TargetTransform) -> float:
    rows = sum(cb.n for _, cb in compiled)
    return rows * math.log(transform.scale) / len(compiled)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: TrainedModel, path: str | Path, meta: dict | None = None) -> None:
    """Versioned zip of ``.npy`` tensors and JSON metadata; byte-stable for equal inputs."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "transform": asdict(model.transform),
        "norm_max": model.context.norm_max,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "checkpoint.json", json.dumps(doc, indent=2, sort_keys=True).encode())
        _write(zf, "network.json", json.dumps(network_to_dict(model.network), sort_keys=True).encode())
        _write(zf, "coverage.npy", _npy_bytes(model.coverage.counts))
        _write(zf, "link_mean.npy", _npy_bytes(model.context.link_mean))
        for k, v in model.params.items():
            _write(zf, f"params/{k}.npy", _npy_bytes(v))


def load_checkpoint(path: str | Path) -> tuple[TrainedModel, dict]:
    with zipfile.ZipFile(path) as zf:
        doc = json.loads(zf.read("checkpoint.json"))
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        network = network_from_dict(json.loads(zf.read("network.json")))
        coverage = CoverageSeries(np.load(io.BytesIO(zf.read("coverage.npy"))))
        link_mean = np.load(io.BytesIO(zf.read("link_mean.npy")))
        params = {k: np.load(io.BytesIO(zf.read(f"params/{k}.npy"))) for k, _ in doc["params"]}
    for k, shape in doc["params"]:
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, expected {shape}")
    cfg = TrainConfig.from_dict(doc["config"])
    model = TrainedModel(params, cfg, network, coverage, TargetTransform(**doc["transform"]), doc["norm_max"],
                         link_mean)
    return model, doc["meta"]


def export_representations(model: TrainedModel, slots: Sequence[int]) -> dict[str, np.ndarray]:
    out = {}
    for s in slots:
        st = model.state(int(s))
        for b in BRANCHES:
            out[f"slot{int(s)}/{b}"] = st.H[b]
    return out
