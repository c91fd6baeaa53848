"""Trip-level Gaussians built from link states, block likelihood, CRPS and sampling.

A trip's augmented rows are linearly dependent (row 0 is the sum of the
subsample rows), so the stacked covariance is singular.  The likelihood is
the degenerate Gaussian density on its support: evaluated on the ``k_eff``
subsample rows, with the Jacobian term ``0.5 * log(1 + k_eff)`` of the map
onto the full ``k_eff + 1`` coordinates.  Trips with ``k_eff = 0`` use row 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from . import diff as D
from .encoder import LinkState, StateTensors
from .trips import AugmentedBatch, TripBlock, rows_to_sparse

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TripGaussian:
    """Joint Gaussian over Q trips; ``covariance`` is None when only marginals were requested."""

    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def scaled(self, scale: float, offset: np.ndarray | float = 0.0) -> "TripGaussian":
        cov = None if self.covariance is None else self.covariance * scale**2
        return TripGaussian(self.mean * scale + offset, self.variance * scale**2, cov)


def _rowset(rowset) -> np.ndarray:
    r = np.asarray(rowset, dtype=np.int64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rowset must be a nonempty 1-D sequence of link ids")
    return r


def trip_mean(state: LinkState, rowset) -> float:
    """Sum of link means over the rowset, counting repeats."""
    return float(np.sum(state.mu[_rowset(rowset)]))


def _scaled_factor(state: LinkState) -> np.ndarray:
    return np.sqrt(state.v)[:, None] * state.L


def block_cov(state: LinkState, rows: Sequence) -> np.ndarray:
    """``U U^T + A diag(d) A^T`` for the rows of one trip, without forming the link covariance."""
    a = rows_to_sparse([_rowset(r) for r in rows], state.mu.size)
    u = a @ _scaled_factor(state)
    out = u @ u.T + (a @ sp.diags(state.d) @ a.T).toarray()
    return 0.5 * (out + out.T)


def predict_joint(state: LinkState, rowsets: Sequence, include_cross: bool = True) -> TripGaussian:
    a = rows_to_sparse([_rowset(r) for r in rowsets], state.mu.size)
    mean = a @ state.mu
    u = a @ _scaled_factor(state)
    var = np.einsum("ij,ij->i", u, u) + a.multiply(a) @ state.d
    if not include_cross:
        return TripGaussian(mean, var)
    cov = u @ u.T + (a @ sp.diags(state.d) @ a.T).toarray()
    cov = 0.5 * (cov + cov.T)
    np.fill_diagonal(cov, var)
    return TripGaussian(mean, var, cov)


# ---------------------------------------------------------------------------
# block likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CompiledBlock:
    """Sparse selectors for one trip's likelihood rows.

    ``g_*`` is the COO form of the ``n x num_links`` row-count matrix, ``k_*``
    the COO form of the ``n*n x num_links`` matrix whose row ``a*n+c`` holds
    ``G_a o G_c`` (so ``K d`` flattens ``G diag(d) G^T``).
    """

    n: int
    g_rows: np.ndarray
    g_cols: np.ndarray
    g_vals: np.ndarray
    k_rows: np.ndarray
    k_cols: np.ndarray
    k_vals: np.ndarray
    targets: np.ndarray
    const: float


def likelihood_rows(block: TripBlock) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    if block.k_eff == 0:
        return block.rows[:1], block.targets[:1]
    return block.rows[1:], block.targets[1:]


def compile_block(block: TripBlock) -> CompiledBlock:
    rows, tgt = likelihood_rows(block)
    n = len(rows)
    links = np.unique(np.concatenate(rows))
    dense = np.zeros((n, links.size))
    for i, r in enumerate(rows):
        np.add.at(dense[i], np.searchsorted(links, r), 1.0)
    gr, gc = np.nonzero(dense)
    prod = dense[:, None, :] * dense[None, :, :]
    ka, kc, kl = np.nonzero(prod)
    const = 0.5 * n * LOG_2PI + (0.5 * math.log(1.0 + block.k_eff) if block.k_eff else 0.0)
    return CompiledBlock(n, gr, links[gc], dense[gr, gc], ka * n + kc, links[kl], prod[ka, kc, kl],
                         np.asarray(tgt, dtype=np.float64), const)


def _group(blocks: Sequence[CompiledBlock], num_links: int):
    """Stack equally sized blocks into one sparse G, one sparse K and a target matrix."""
    n = blocks[0].n
    g_r, g_c, g_v, k_r, k_c, k_v = [], [], [], [], [], []
    for b, cb in enumerate(blocks):
        g_r.append(cb.g_rows + b * n)
        g_c.append(cb.g_cols)
        g_v.append(cb.g_vals)
        k_r.append(cb.k_rows + b * n * n)
        k_c.append(cb.k_cols)
        k_v.append(cb.k_vals)
    nb = len(blocks)
    g = sp.csr_matrix((np.concatenate(g_v), (np.concatenate(g_r), np.concatenate(g_c))), shape=(nb * n, num_links))
    k = sp.csr_matrix((np.concatenate(k_v), (np.concatenate(k_r), np.concatenate(k_c))),
                      shape=(nb * n * n, num_links))
    return g, k, np.stack([cb.targets for cb in blocks])


def _state_tensors(state) -> StateTensors:
    if isinstance(state, StateTensors):
        return state
    return StateTensors(D.Tensor(state.mu), D.Tensor(state.L), D.Tensor(state.v), D.Tensor(state.d), {})


def batch_nll(state, blocks, reduction: str = "sum") -> D.Tensor:
    """Negative log-likelihood of a batch of trips under one link state.

    ``blocks`` is an ``AugmentedBatch`` or a sequence of ``TripBlock`` /
    ``CompiledBlock``.  Blocks are grouped by size and evaluated as batched
    Cholesky problems; the sum runs in a fixed order.
    """
    if isinstance(blocks, AugmentedBatch):
        blocks = blocks.blocks
    compiled = [b if isinstance(b, CompiledBlock) else compile_block(b) for b in blocks]
    if not compiled:
        raise ValueError("batch_nll needs at least one trip")
    if reduction not in ("sum", "mean"):
        raise ValueError("reduction must be 'sum' or 'mean'")
    st = _state_tensors(state)
    num_links, rank = st.L.shape
    scaled = D.mul(D.expand_cols(D.sqrt(st.v), rank), st.L)
    by_size: dict[int, list[CompiledBlock]] = {}
    for cb in compiled:
        by_size.setdefault(cb.n, []).append(cb)
    total = None
    const = 0.0
    for n in sorted(by_size):
        group = by_size[n]
        g, k, targets = _group(group, num_links)
        nb = len(group)
        means = D.reshape(D.sparse_matmul(g, st.mu), (nb, n))
        u = D.reshape(D.sparse_matmul(g, scaled), (nb, n, rank))
        m = D.add(D.matmul(u, D.transpose(u)), D.reshape(D.sparse_matmul(k, st.d), (nb, n, n)))
        part = D.block_gaussian_nll(m, D.sub(targets, means))
        total = part if total is None else D.add(total, part)
        const += sum(cb.const for cb in group)
    total = D.add(total, np.asarray(const))
    if reduction == "mean":
        total = D.scale(total, 1.0 / len(compiled))
    return total


# ---------------------------------------------------------------------------
# scoring and sampling
# ---------------------------------------------------------------------------

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def crps_gaussian(mean, std, observed) -> np.ndarray | float:
    """Closed-form CRPS of ``N(mean, std^2)`` at ``observed`` (vectorised)."""
    mean, std, observed = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (mean, std, observed)))
    if np.any(~(std > 0)):
        raise ValueError("crps_gaussian needs std > 0")
    z = (observed - mean) / std
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out = std * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


def sample(tg: TripGaussian, n: int, seed: int) -> np.ndarray:
    """``n`` draws of the Q-vector using the jittered Cholesky factor."""
    rng = np.random.default_rng(seed)
    q = tg.mean.size
    if tg.covariance is None:
        if np.all(tg.variance == 0):
            return np.tile(tg.mean, (n, 1))
        return tg.mean + rng.standard_normal((n, q)) * tg.std
    if not np.any(tg.covariance):
        return np.tile(tg.mean, (n, 1))
    chol, _ = D.cholesky_with_jitter(tg.covariance)
    return tg.mean + rng.standard_normal((n, q)) @ chol.T
