"""Finite-sum potentials, smoothness constants, minimisers and data generators.

Records of all clients are stored in one flat array; client ``i`` owns
rows ``offsets[i]:offsets[i+1]``.  Every batched routine takes ``theta``
with arbitrary leading dimensions ``(..., d)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import (
    ConfigError,
    ContractError,
    OptimizationError,
    RandomStream,
    as_param_vector,
    substream,
)

__all__ = [
    "PotentialModel",
    "GaussianModel",
    "LogisticModel",
    "SmoothnessProfile",
    "grad_component",
    "grad_client",
    "minimizer",
    "smoothness_profile",
    "make_gaussian_dataset",
    "make_synthetic_logistic",
    "save_dataset",
    "load_dataset",
    "dataset_hash",
]

FORMAT_TAG = "qlsd-dataset"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SmoothnessProfile:
    m: float
    L: float
    M_per_client: np.ndarray
    Mbar: float
    N_total: int


class PotentialModel:
    """Common bookkeeping for ``U = sum_i sum_j U_ij``."""

    kind = "abstract"

    def __init__(self, sizes: Sequence[int], d: int):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1 or sizes.size == 0:
            raise ConfigError("need at least one client")
        if np.any(sizes < 1):
            raise ConfigError("every client needs at least one record")
        if d < 1:
            raise ConfigError("dimension must be positive")
        self.sizes = sizes
        self.b = int(sizes.size)
        self.d = int(d)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.N_total = int(self.offsets[-1])
        self.client_of = np.repeat(np.arange(self.b), sizes)

    # subclasses provide the per-record pieces
    def component_potential(self, rec, theta) -> np.ndarray:
        raise NotImplementedError

    def grad_records(self, rec, theta) -> np.ndarray:
        raise NotImplementedError

    def record_index(self, i: int, j: int) -> int:
        if not 0 <= i < self.b:
            raise IndexError(f"client index {i} out of range [0, {self.b})")
        if not 0 <= j < self.sizes[i]:
            raise IndexError(f"component index {j} out of range [0, {self.sizes[i]})")
        return int(self.offsets[i] + j)

    def grad_clients(self, theta) -> np.ndarray:
        """All local gradients, shape ``theta.shape[:-1] + (b, d)``.

        Each client's gradient is the in-order sum of its record gradients,
        so it agrees bit-for-bit with summing :func:`grad_component`.
        """
        theta = np.asarray(theta, dtype=np.float64)
        lead = theta.shape[:-1]
        flat = theta.reshape(-1, self.d)
        rows = self.grad_records(np.arange(self.N_total)[None, :], flat[:, None, :])
        out = np.empty((flat.shape[0], self.b, self.d))
        for i in range(self.b):
            out[:, i] = rows[:, self.offsets[i] : self.offsets[i + 1]].sum(axis=1)
        return out.reshape(lead + (self.b, self.d))

    def grad(self, theta) -> np.ndarray:
        return self.grad_clients(theta).sum(axis=-2)

    def potential(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        lead = theta.shape[:-1]
        flat = theta.reshape(-1, self.d)
        vals = self.component_potential(np.arange(self.N_total)[None, :], flat[:, None, :])
        return vals.sum(axis=1).reshape(lead)

    def payload(self) -> np.ndarray:
        raise NotImplementedError

    def header(self) -> dict:
        return {"kind": self.kind, "b": self.b, "d": self.d, "sizes": self.sizes.tolist()}


class GaussianModel(PotentialModel):
    """``U_ij(theta) = |theta - y_ij|^2 / 2``; posterior N(ybar, I/N_total)."""

    kind = "gaussian"

    def __init__(self, observations: Sequence[np.ndarray]):
        obs = [np.atleast_2d(np.asarray(o, dtype=np.float64)) for o in observations]
        dims = {o.shape[1] for o in obs}
        if len(dims) != 1:
            raise ConfigError("all records must share one dimension")
        super().__init__([o.shape[0] for o in obs], dims.pop())
        self.Y = np.concatenate(obs, axis=0)
        if not np.all(np.isfinite(self.Y)):
            raise ConfigError("observations must be finite")

    def client_records(self, i: int) -> np.ndarray:
        return self.Y[self.offsets[i] : self.offsets[i + 1]]

    def component_potential(self, rec, theta):
        diff = np.asarray(theta) - self.Y[rec]
        return 0.5 * np.sum(diff * diff, axis=-1)

    def grad_records(self, rec, theta):
        return np.asarray(theta) - self.Y[rec]

    def potential(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        diff = theta[..., None, :] - self.Y
        return 0.5 * np.sum(diff * diff, axis=(-1, -2))

    @property
    def posterior_mean(self) -> np.ndarray:
        return self.Y.sum(axis=0) / self.N_total

    @property
    def posterior_variance(self) -> float:
        return 1.0 / self.N_total

    def payload(self):
        return self.Y.ravel()


class LogisticModel(PotentialModel):
    """Bayesian logistic regression without intercept.

    ``U_ij = log(1 + exp(x.theta)) - y x.theta + |theta|^2 / (2 s2 b N_i)``
    where ``s2`` is the prior variance: the Gaussian prior potential is
    split equally over clients and then over each client's records.
    """

    kind = "logistic"

    def __init__(self, features: Sequence[np.ndarray], labels: Sequence[np.ndarray], prior_variance: float = 1.0):
        feats = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in features]
        labs = [np.asarray(y, dtype=np.float64).ravel() for y in labels]
        if len(feats) != len(labs):
            raise ConfigError("features and labels disagree on the number of clients")
        dims = {x.shape[1] for x in feats}
        if len(dims) != 1:
            raise ConfigError("all records must share one dimension")
        for x, y in zip(feats, labs):
            if x.shape[0] != y.shape[0]:
                raise ConfigError("features and labels disagree on client size")
            if not np.all((y == 0.0) | (y == 1.0)):
                raise ConfigError("labels must be 0 or 1")
        if not prior_variance > 0:
            raise ConfigError("prior variance must be positive")
        super().__init__([x.shape[0] for x in feats], dims.pop())
        self.X = np.concatenate(feats, axis=0)
        self.y = np.concatenate(labs)
        self.prior_variance = float(prior_variance)
        # per-record prior precision share 1/(s2 b N_i)
        self.prior_share = 1.0 / (self.prior_variance * self.b * self.sizes[self.client_of])

    def component_potential(self, rec, theta):
        x = self.X[rec]
        th = np.asarray(theta)
        z = np.sum(x * th, axis=-1)
        prior = 0.5 * self.prior_share[rec] * np.sum(th * th, axis=-1)
        return np.logaddexp(0.0, z) - self.y[rec] * z + prior

    def grad_records(self, rec, theta):
        x = self.X[rec]
        th = np.asarray(theta)
        z = np.sum(x * th, axis=-1)
        w = expit(z) - self.y[rec]
        return w[..., None] * x + self.prior_share[rec][..., None] * th

    def payload(self):
        return np.concatenate([self.X.ravel(), self.y])

    def header(self):
        h = super().header()
        h["prior_variance"] = self.prior_variance
        return h


def grad_component(model: PotentialModel, i: int, j: int, theta) -> np.ndarray:
    """Gradient of the single term ``U_ij`` (0-based indices)."""
    rec = model.record_index(i, j)
    theta = as_param_vector(theta, model.d)
    return model.grad_records(np.asarray(rec), theta)


def grad_client(model: PotentialModel, i: int, theta) -> np.ndarray:
    """``sum_j grad U_ij(theta)``, summed in record order."""
    if not 0 <= i < model.b:
        raise IndexError(f"client index {i} out of range [0, {model.b})")
    theta = as_param_vector(theta, model.d)
    rec = np.arange(model.offsets[i], model.offsets[i + 1])
    return model.grad_records(rec, theta[None, :]).sum(axis=0)


def smoothness_profile(model: PotentialModel) -> SmoothnessProfile:
    if isinstance(model, GaussianModel):
        N = float(model.N_total)
        return SmoothnessProfile(N, N, model.sizes.astype(float), 1.0, model.N_total)
    if isinstance(model, LogisticModel):
        m = 1.0 / model.prior_variance
        sq = np.sum(model.X**2, axis=1)
        per_rec = 0.25 * sq + model.prior_share
        M = np.array([per_rec[model.offsets[i] : model.offsets[i + 1]].sum() for i in range(model.b)])
        return SmoothnessProfile(m, m + 0.25 * float(sq.sum()), M, float(per_rec.max()), model.N_total)
    raise ContractError(f"no smoothness profile for model kind {model.kind!r}")


def minimizer(model: PotentialModel, tol: float = 1e-8, max_iter: int = 100_000) -> np.ndarray:
    """Global minimiser of U.

    Gaussian: the overall observation mean.  Logistic: full-gradient
    descent with Armijo backtracking; the backtracking stops at the
    ``1/L`` step, for which sufficient decrease is guaranteed anyway (this
    keeps the search from stalling when U differences drop below rounding).
    """
    if isinstance(model, GaussianModel):
        return model.posterior_mean
    if tol <= 0:
        raise ConfigError("tolerance must be positive")
    L = smoothness_profile(model).L
    theta = np.zeros(model.d)
    u = float(model.potential(theta))
    g = model.grad(theta)
    gn = float(np.linalg.norm(g))
    step = 1.0 / L
    for it in range(max_iter):
        if gn <= tol:
            return theta
        t = min(2.0 * step, 1e6 / L)
        while True:
            cand = theta - t * g
            uc = float(model.potential(cand))
            if uc <= u - 0.5 * t * gn * gn or t <= 1.0 / L:
                break
            t *= 0.5
        theta, u, step = cand, uc, t
        g = model.grad(theta)
        gn = float(np.linalg.norm(g))
    if gn <= tol:
        return theta
    raise OptimizationError(gn, max_iter)


def make_gaussian_dataset(b: int, d: int, N_min: int, N_max: int, tau: float, stream: RandomStream) -> GaussianModel:
    """Heterogeneous Gaussian clients: ``y_ij ~ N(c_i, I)``, ``c_i ~ N(0, tau^2 I)``."""
    if b < 1 or d < 1:
        raise ConfigError("b and d must be positive")
    if not 1 <= N_min <= N_max:
        raise ConfigError(f"need 1 <= N_min <= N_max, got [{N_min}, {N_max}]")
    if tau < 0:
        raise ConfigError("heterogeneity must be nonnegative")
    obs = []
    for i in range(b):
        s = substream(stream, [i])
        n = N_min + int(np.floor(s.uniform(1)[0] * (N_max - N_min + 1)))
        centre = tau * s.normal(d)
        obs.append(centre + s.normal(n * d).reshape(n, d))
    return GaussianModel(obs)


def make_synthetic_logistic(
    alpha: float,
    beta: float,
    b: int,
    d: int,
    sizes: Sequence[int] | int,
    stream: RandomStream,
    prior_variance: float = 1.0,
) -> LogisticModel:
    """SYNTHETIC(alpha, beta) style heterogeneous binary data.

    Per client: ``u ~ N(0, alpha)``, ``w ~ N(u, 1)``; ``B ~ N(0, beta)``,
    ``v ~ N(B, 1)``; ``x ~ N(v, diag(k^-1.2))``; ``y ~ Bernoulli(sigmoid(x.w))``.
    """
    if alpha < 0 or beta < 0:
        raise ConfigError("alpha and beta must be nonnegative")
    if b < 1 or d < 1:
        raise ConfigError("b and d must be positive")
    if np.isscalar(sizes):
        sizes = [int(sizes)] * b
    sizes = [int(n) for n in sizes]
    if len(sizes) != b or min(sizes) < 1:
        raise ConfigError("sizes must list b positive integers")
    scale = np.arange(1, d + 1, dtype=np.float64) ** -0.6
    feats, labs = [], []
    for i, n in enumerate(sizes):
        s = substream(stream, [i])
        u = np.sqrt(alpha) * s.normal(1)[0]
        w = u + s.normal(d)
        B = np.sqrt(beta) * s.normal(1)[0]
        v = B + s.normal(d)
        x = v + s.normal(n * d).reshape(n, d) * scale
        y = (s.uniform(n) < expit(x @ w)).astype(np.float64)
        feats.append(x)
        labs.append(y)
    return LogisticModel(feats, labs, prior_variance)


def save_dataset(model: PotentialModel, path, seed: int | None = None, meta: dict | None = None) -> str:
    """Write a JSON header line followed by raw little-endian float64 payload.

    Returns the sha256 hex digest of the written file.
    """
    payload = np.ascontiguousarray(model.payload(), dtype="<f8")
    header = {"format": FORMAT_TAG, "version": FORMAT_VERSION, **model.header(), "seed": seed}
    if meta:
        header["meta"] = meta
    header["payload"] = {"dtype": "<f8", "count": int(payload.size)}
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload.tobytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_dataset(path) -> tuple[PotentialModel, dict]:
    blob = Path(path).read_bytes()
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise ConfigError(f"{path}: missing dataset header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: unreadable dataset header") from exc
    if header.get("format") != FORMAT_TAG:
        raise ConfigError(f"{path}: not a dataset file")
    count = header["payload"]["count"]
    data = np.frombuffer(body, dtype="<f8")
    if data.size != count:
        raise ConfigError(f"{path}: payload has {data.size} values, header says {count}")
    data = data.astype(np.float64)
    sizes = np.asarray(header["sizes"], dtype=np.int64)
    d = int(header["d"])
    cuts = np.cumsum(sizes)[:-1]
    n_total = int(sizes.sum())
    if header["kind"] == "gaussian":
        Y = data.reshape(n_total, d)
        model = GaussianModel(np.split(Y, cuts))
    elif header["kind"] == "logistic":
        X = data[: n_total * d].reshape(n_total, d)
        y = data[n_total * d :]
        model = LogisticModel(np.split(X, cuts), np.split(y, cuts), header["prior_variance"])
    else:
        raise ConfigError(f"{path}: unknown model kind {header['kind']!r}")
    return model, header


def dataset_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
