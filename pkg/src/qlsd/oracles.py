"""Per-client stochastic gradient oracles and minibatch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ConfigError, ContractError, RandomStream, as_param_vector, uniform_block
from .models import PotentialModel, grad_client

__all__ = [
    "OracleKind",
    "MinibatchDraw",
    "sample_minibatch",
    "sample_minibatch_batch",
    "oracle_eval",
    "a_factor",
    "minibatch_variance",
    "oracle_moments",
    "heterogeneity_constants",
    "tenth_batches",
]

VARIANTS = ("full", "minibatch", "star", "svrg")


@dataclass(frozen=True)
class OracleKind:
    """Oracle variant plus its per-client minibatch sizes.

    ``batch_sizes=None`` means full local batches (``n_i = N_i``).
    """

    variant: str
    batch_sizes: tuple | None = None
    theta_star: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown oracle variant {self.variant!r}")
        if self.variant == "star" and self.theta_star is None:
            raise ContractError("the star oracle needs theta_star")
        if self.batch_sizes is not None:
            object.__setattr__(self, "batch_sizes", tuple(int(n) for n in self.batch_sizes))

    @property
    def stochastic(self) -> bool:
        return self.variant != "full"

    def sizes_for(self, model: PotentialModel) -> np.ndarray:
        if self.batch_sizes is None:
            return model.sizes.copy()
        n = np.asarray(self.batch_sizes, dtype=np.int64)
        if n.size != model.b:
            raise ConfigError(f"need {model.b} minibatch sizes, got {n.size}")
        bad = (n < 1) | (n > model.sizes)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ConfigError(f"client {i}: minibatch size {n[i]} not in [1, {model.sizes[i]}]")
        return n


def tenth_batches(sizes: Sequence[int]) -> tuple:
    """``n_i = max(1, floor(N_i / 10))``."""
    return tuple(max(1, int(n) // 10) for n in sizes)


@dataclass(frozen=True)
class MinibatchDraw:
    indices: tuple  # sorted, 0-based

    def __len__(self):
        return len(self.indices)


def sample_minibatch(N: int, n: int, stream: RandomStream) -> MinibatchDraw:
    """Uniform size-``n`` subset of ``range(N)`` by partial Fisher-Yates.

    Uses ``n`` uniforms; position ``t`` swaps with ``t + floor(u_t (N - t))``.
    """
    N, n = int(N), int(n)
    if not 1 <= n <= N:
        raise ConfigError(f"minibatch size {n} not in [1, {N}]")
    u = stream.uniform(n)
    perm = list(range(N))
    for t in range(n):
        j = t + min(int(u[t] * (N - t)), N - t - 1)
        perm[t], perm[j] = perm[j], perm[t]
    return MinibatchDraw(tuple(sorted(perm[:n])))


def sample_minibatch_batch(keys: np.ndarray, N: np.ndarray, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sample_minibatch` over independent keyed streams.

    ``keys``, ``N`` and ``n`` broadcast to a common shape ``S``.  Returns
    sorted indices of shape ``S + (n_max,)`` padded with 0 and a boolean
    mask of the valid entries.  Row by row the result equals the scalar
    routine on the same key.
    """
    keys, N, n = np.broadcast_arrays(np.asarray(keys), np.asarray(N, dtype=np.int64), np.asarray(n, dtype=np.int64))
    shape = keys.shape
    keys, N, n = keys.ravel(), N.ravel(), n.ravel()
    rows = keys.size
    n_max, N_max = int(n.max()), int(N.max())
    u = uniform_block(keys, n_max)
    perm = np.broadcast_to(np.arange(N_max), (rows, N_max)).copy()
    r = np.arange(rows)
    for t in range(n_max):
        active = t < n
        span = np.maximum(N - t, 1)
        j = t + np.minimum((u[:, t] * span).astype(np.int64), span - 1)
        j = np.where(active, j, t)
        a = perm[r, t].copy()
        bj = perm[r, j].copy()
        perm[r, t] = bj
        perm[r, j] = a
    mask = np.arange(n_max)[None, :] < n[:, None]
    sel = np.where(mask, perm[:, :n_max], N_max)
    sel.sort(axis=1)
    sel = np.where(mask, sel, 0)
    return sel.reshape(shape + (n_max,)), mask.reshape(shape + (n_max,))


def _records(model: PotentialModel, i: int, draw: MinibatchDraw) -> np.ndarray:
    idx = np.asarray(draw.indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= model.sizes[i]:
        raise IndexError(f"minibatch indices out of range for client {i}")
    return model.offsets[i] + idx


def oracle_eval(
    kind: OracleKind,
    model: PotentialModel,
    i: int,
    theta,
    zeta=None,
    draw: MinibatchDraw | None = None,
) -> np.ndarray:
    """Evaluate ``H^{(i)}(theta)`` for the given variant and minibatch."""
    if not 0 <= i < model.b:
        raise IndexError(f"client index {i} out of range [0, {model.b})")
    theta = as_param_vector(theta, model.d)
    if kind.variant == "svrg":
        if zeta is None:
            raise ContractError("the svrg oracle needs zeta")
        zeta = as_param_vector(zeta, model.d, "zeta")
    elif zeta is not None:
        raise ContractError(f"zeta is only used by the svrg oracle, not {kind.variant}")
    if kind.variant == "full":
        if draw is not None:
            raise ContractError("the full oracle takes no minibatch")
        return grad_client(model, i, theta)
    if draw is None:
        raise ContractError(f"the {kind.variant} oracle needs a minibatch draw")
    rec = _records(model, i, draw)
    ratio = model.sizes[i] / len(rec)
    g = model.grad_records(rec, theta[None, :])
    if kind.variant == "minibatch":
        return ratio * g.sum(axis=0)
    if kind.variant == "star":
        anchor = model.grad_records(rec, np.asarray(kind.theta_star, dtype=np.float64)[None, :])
        return ratio * (g - anchor).sum(axis=0)
    anchor = model.grad_records(rec, zeta[None, :])
    return ratio * (g - anchor).sum(axis=0) + grad_client(model, i, zeta)


def a_factor(n, N) -> np.ndarray:
    """``A_{n,N} = N (N - n) / (n (N - 1))`` with ``A = 0`` when ``N = 1``."""
    n = np.asarray(n, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    den = n * (N - 1.0)
    return np.where(N > 1.0, N * (N - n) / np.where(den > 0, den, 1.0), 0.0)


def minibatch_variance(vectors: np.ndarray, n: int) -> float:
    """Exact ``E|(N/n) sum_S a_j - sum_j a_j|^2`` for a uniform size-n subset S.

    Equals ``A_{n,N} * sum_j |a_j - abar|^2`` (sampling without replacement).
    """
    a = np.asarray(vectors, dtype=np.float64)
    N = a.shape[0]
    dev = a - a.mean(axis=0)
    return float(a_factor(n, N) * np.sum(dev * dev))


def oracle_moments(kind: OracleKind, model: PotentialModel, i: int, theta, zeta=None) -> tuple[np.ndarray, float]:
    """Exact mean and trace variance of ``H^{(i)}(theta)`` over its minibatch."""
    theta = as_param_vector(theta, model.d)
    rec = np.arange(model.offsets[i], model.offsets[i + 1])
    g = model.grad_records(rec, theta[None, :])
    if kind.variant == "full":
        return g.sum(axis=0), 0.0
    n = int(kind.sizes_for(model)[i])
    if kind.variant == "minibatch":
        vec, shift = g, 0.0
    elif kind.variant == "star":
        vec, shift = g - model.grad_records(rec, np.asarray(kind.theta_star)[None, :]), 0.0
    else:
        zeta = as_param_vector(zeta, model.d, "zeta")
        anchor = model.grad_records(rec, zeta[None, :])
        vec, shift = g - anchor, anchor.sum(axis=0)
    return vec.sum(axis=0) + shift, minibatch_variance(vec, n)


def heterogeneity_constants(kind: OracleKind, model: PotentialModel, theta_star) -> dict:
    """Exact ``sigma*^2`` and both readings of ``B*`` at ``theta_star``.

    ``sigma*^2 = E|sum_i H_i(theta*) - grad U(theta*)|^2`` (independent
    clients, so the per-client variances add).  ``B*`` is reported as the
    sum of per-client second moments and as ``b`` times their maximum.
    """
    zeta = theta_star if kind.variant == "svrg" else None
    second, var = [], []
    for i in range(model.b):
        mean, v = oracle_moments(kind, model, i, theta_star, zeta)
        var.append(v)
        second.append(v + float(mean @ mean))
    second = np.asarray(second)
    return {
        "sigma_star_sq": float(np.sum(var)),
        "B_star_sum": float(second.sum()),
        "B_star_max": float(model.b * second.max()),
        "per_client_second_moment": second.tolist(),
    }
