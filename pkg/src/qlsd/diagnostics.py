"""Chain statistics, Gaussian W2, HPD levels and the convergence-bound calculator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, hyp1f1

from .core import DomainError, RandomStream, StateError, normal_block, substream

__all__ = [
    "StateError",
    "MomentAccumulator",
    "gaussian_w2_sq",
    "gaussian_w2",
    "fitted_w2_sq",
    "norm_mean_gaussian",
    "norm_reference_mc",
    "mse_test_functional",
    "functional_summary",
    "HPDResult",
    "hpd_eta",
    "hpd_relative_error",
    "lyapunov_psi",
    "BoundInputs",
    "BoundReport",
    "a_nN",
    "bound_qlsd",
    "bound_qlsd_star",
    "bound_qlsd_pp",
    "w2_bound_curve",
    "bound_inputs_for",
    "bound_for",
]


class MomentAccumulator:
    """Count, mean and diagonal second central moment of a stream of arrays.

    Batches are merged with the pairwise (Chan et al.) update, so merging
    two accumulators gives the moments of the concatenated data.
    """

    def __init__(self, shape=()):
        self.shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)

    def update(self, batch) -> "MomentAccumulator":
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1:] != self.shape:
            raise DomainError(f"batch items have shape {x.shape[1:]}, expected {self.shape}")
        n = x.shape[0]
        if n == 0:
            return self
        mean = x.mean(axis=0)
        m2 = ((x - mean) ** 2).sum(axis=0)
        self._combine(n, mean, m2)
        return self

    def _combine(self, n, mean, m2):
        tot = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / tot)
        self.m2 = self.m2 + m2 + delta * delta * (self.count * n / tot)
        self.count = tot

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.shape != self.shape:
            raise DomainError("cannot merge accumulators of different shapes")
        out = MomentAccumulator(self.shape)
        out.count, out.mean, out.m2 = self.count, self.mean.copy(), self.m2.copy()
        if other.count:
            out._combine(other.count, other.mean, other.m2)
        return out

    def variance(self, ddof: int = 0) -> np.ndarray:
        if self.count - ddof <= 0:
            raise StateError("not enough observations for a variance")
        return self.m2 / (self.count - ddof)

    @property
    def second_moment(self) -> np.ndarray:
        """Raw second moment ``E[x^2]`` per coordinate."""
        if self.count == 0:
            raise StateError("empty accumulator")
        return self.m2 / self.count + self.mean**2


def gaussian_w2_sq(mean1, var1, mean2, var2) -> float:
    """Squared W2 distance between two Gaussians with diagonal covariances."""
    m1, m2 = np.asarray(mean1, float), np.asarray(mean2, float)
    v1 = np.broadcast_to(np.asarray(var1, float), m1.shape)
    v2 = np.broadcast_to(np.asarray(var2, float), m2.shape)
    if np.any(v1 <= 0) or np.any(v2 <= 0):
        raise DomainError("variances must be positive")
    diff = m1 - m2
    root = np.sqrt(v1) - np.sqrt(v2)
    return float(diff @ diff + root @ root)


def gaussian_w2(mean1, var1, mean2, var2) -> float:
    return math.sqrt(gaussian_w2_sq(mean1, var1, mean2, var2))


def fitted_w2_sq(points, mean, var) -> float:
    """W2^2 between the diagonal Gaussian fitted to ``points`` (rows) and N(mean, diag var)."""
    pts = np.asarray(points, float)
    return gaussian_w2_sq(pts.mean(axis=0), pts.var(axis=0, ddof=1), mean, var)


def norm_mean_gaussian(mean, var: float) -> float:
    """``E|theta|`` for ``theta ~ N(mean, var I)`` (noncentral chi mean)."""
    mu = np.atleast_1d(np.asarray(mean, float))
    if var <= 0:
        raise DomainError("variance must be positive")
    d = mu.size
    lam2 = float(mu @ mu) / var
    log_ratio = gammaln((d + 1) / 2.0) - gammaln(d / 2.0)
    return float(math.sqrt(2.0 * var) * math.exp(log_ratio) * hyp1f1(-0.5, d / 2.0, -lam2 / 2.0))


def norm_reference_mc(mean, var: float, n_draws: int, stream: RandomStream, chunk: int = 200_000):
    """Monte Carlo ``E|theta|`` under N(mean, var I); returns (estimate, std error)."""
    mu = np.atleast_1d(np.asarray(mean, float))
    d = mu.size
    total = total_sq = 0.0
    done, block = 0, 0
    sd = math.sqrt(var)
    while done < n_draws:
        m = min(chunk, n_draws - done)
        key = substream(stream, [block]).key
        z = normal_block(key, m * d).reshape(m, d)
        r = np.sqrt(np.sum((mu + sd * z) ** 2, axis=1))
        total += r.sum()
        total_sq += (r * r).sum()
        done += m
        block += 1
    est = total / n_draws
    var_r = max(total_sq / n_draws - est * est, 0.0)
    return est, math.sqrt(var_r / n_draws)


def _norm_values(trace, replica: int | None) -> np.ndarray:
    if hasattr(trace, "sample_norms"):
        vals = np.asarray(trace.sample_norms)
        return vals if replica is None else vals[:, replica]
    pts = np.asarray(trace, float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return np.sqrt(np.sum(pts * pts, axis=-1))


def mse_test_functional(trace, reference: float, replica: int | None = 0):
    """``(mean_k |theta_k| - reference)^2``.

    ``trace`` is a :class:`~qlsd.sampler.Trace` or an ``(n, d)`` sample
    array.  With ``replica=None`` a trace yields one value per replica.
    """
    vals = _norm_values(trace, replica)
    if vals.shape[0] == 0:
        raise StateError("no samples to average")
    err = vals.mean(axis=0) - reference
    return err * err if np.ndim(err) else float(err * err)


def functional_summary(values) -> tuple[float, float]:
    """Mean and naive standard error (i.i.d. bookkeeping) of functional values."""
    v = np.asarray(values, float).ravel()
    if v.size == 0:
        raise StateError("no values")
    if v.size == 1:
        return float(v[0]), float("inf")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass(frozen=True)
class HPDResult:
    eta: float
    n_samples: int
    alpha: float
    warning: bool


def hpd_eta(samples, model, alpha: float) -> HPDResult:
    """Empirical (1 - alpha)-quantile of ``U(theta)`` over the samples.

    ``model`` is a potential model or any callable returning ``U`` row-wise;
    passing ``model=None`` treats ``samples`` as precomputed values.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    if model is None:
        vals = np.asarray(samples, float).ravel()
    else:
        pts = np.asarray(samples, float)
        fn = model.potential if hasattr(model, "potential") else model
        vals = np.asarray(fn(pts), float).ravel()
    if vals.size == 0:
        raise StateError("no samples")
    eta = float(np.quantile(vals, 1.0 - alpha, method="linear"))
    return HPDResult(eta, int(vals.size), float(alpha), bool(vals.size < 1.0 / alpha))


def hpd_relative_error(eta, eta_ref) -> float:
    a = eta.eta if isinstance(eta, HPDResult) else float(eta)
    r = eta_ref.eta if isinstance(eta_ref, HPDResult) else float(eta_ref)
    if r == 0:
        raise DomainError("reference level is zero")
    return abs(a - r) / abs(r)


def lyapunov_psi(theta, eta_list, theta_star, grad_at_star_list, gamma, alpha, omega_list, p_list) -> float:
    """``|theta - theta*|^2 + (3/alpha) max_i((w_i+1-p_i)/p_i) gamma^2 sum_i |grad U_i(theta*) - eta_i|^2``."""
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    diff = np.asarray(theta, float) - np.asarray(theta_star, float)
    om = np.asarray(omega_list, float)
    p = np.asarray(p_list, float)
    coeff = (3.0 / alpha) * float(np.max((om + 1.0 - p) / p)) * gamma * gamma
    mem = np.asarray(grad_at_star_list, float) - np.asarray(eta_list, float)
    return float(diff @ diff + coeff * np.sum(mem * mem))


# ----------------------------------------------------------------------------
# bound calculator


def a_nN(n, N) -> np.ndarray:
    """``N (N - n) / (n (N - 1))``, zero when ``N = 1``."""
    n = np.asarray(n, float)
    N = np.asarray(N, float)
    den = n * (N - 1.0)
    return np.where(N > 1.0, N * (N - n) / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class BoundInputs:
    """Constants entering the convergence bounds.

    ``sigma_star`` is the root of the second-moment bound of the summed
    oracle at ``theta*``; ``B_star`` the heterogeneity constant.
    ``gamma_bar`` optionally replaces the admissible threshold inside the
    bias constants (it must not exceed that threshold).
    """

    m: float
    L: float
    M_per_client: Sequence[float]
    Mbar: float
    d: int
    b: int
    omega_per_client: Sequence[float]
    p_per_client: Sequence[float]
    n_per_client: Sequence[int]
    N_per_client: Sequence[int]
    sigma_star: float = 0.0
    B_star: float = 0.0
    l: int = 1
    alpha: float | None = None
    gamma_bar: float | None = None

    def arrays(self):
        M = np.asarray(self.M_per_client, float)
        om = np.asarray(self.omega_per_client, float)
        p = np.asarray(self.p_per_client, float)
        n = np.asarray(self.n_per_client, float)
        N = np.asarray(self.N_per_client, float)
        for name, arr in (("M", M), ("omega", om), ("p", p), ("n", n), ("N", N)):
            if arr.shape != (self.b,):
                raise DomainError(f"{name} must list {self.b} per-client values")
        if not self.m > 0:
            raise DomainError("strong convexity constant m must be positive")
        if self.L < self.m:
            raise DomainError("need m <= L")
        if np.any(M < 0) or np.any(om < 0) or self.Mbar < 0 or self.sigma_star < 0 or self.B_star < 0:
            raise DomainError("constants must be nonnegative")
        if np.any(p <= 0) or np.any(p > 1):
            raise DomainError("participation probabilities must lie in (0, 1]")
        if np.any(n < 1) or np.any(n > N):
            raise DomainError("minibatch sizes must lie in [1, N_i]")
        return M, om, p, n, N


@dataclass
class BoundReport:
    algorithm: str
    gamma_max: float
    gamma_bar: float
    m: float
    contraction: float
    bias_B: float
    transient_A: float
    auxiliary: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return json.dumps(clean(asdict(self)), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BoundReport":
        return cls(**json.loads(text))


def _gamma_template(m, L, Mtilde):
    return min(2.0 / (5.0 * (m + L)), 1.0 / (m + L + Mtilde), 1.0 / (10.0 * m))


def _gamma_used(inputs: BoundInputs, gmax: float) -> float:
    if inputs.gamma_bar is None:
        return gmax
    if not 0 < inputs.gamma_bar <= gmax * (1 + 1e-12):
        raise DomainError(f"gamma_bar = {inputs.gamma_bar} exceeds the admissible threshold {gmax}")
    return float(inputs.gamma_bar)


def _discretisation(d, m, L, g):
    return (2.0 * d * L * L / m) * (1.0 / m + 5.0 * g) * (1.0 + g * L * L / (2.0 * m) + g * g * L * L / 12.0)


def bound_qlsd(inputs: BoundInputs) -> BoundReport:
    """Constants for QLSD / QLSD# (full or minibatch oracle)."""
    M, om, p, n, N = inputs.arrays()
    m, L, d, b = inputs.m, inputs.L, inputs.d, inputs.b
    worst = float(np.max(M * (1.0 + om) / p))
    Mtilde = 2.0 * worst
    gmax = _gamma_template(m, L, Mtilde)
    g = _gamma_used(inputs, gmax)
    noise = inputs.sigma_star**2 + (inputs.B_star / b) * float(np.sum((1.0 - p + om) / p))
    B = _discretisation(d, m, L, g) + 4.0 * noise / m + 8.0 * L * worst * (d + g * noise) / (m * m)
    A = 2.0 * L * worst
    aux = {"M_tilde": Mtilde, "B_tilde_star": 2.0 * noise, "discretisation": _discretisation(d, m, L, g)}
    return BoundReport("qlsd", gmax, g, m, 1.0 - gmax * m / 2.0, B, A, aux)


def bound_qlsd_star(inputs: BoundInputs) -> BoundReport:
    """Constants for QLSD* / LSD* (minibatch differences at theta*)."""
    M, om, p, n, N = inputs.arrays()
    m, L, d = inputs.m, inputs.L, inputs.d
    A_i = a_nN(n, N)
    Mtilde = inputs.Mbar * float(np.max(om * N + (om + 1.0) * (N * (1.0 - p) / p + A_i)))
    gmax = _gamma_template(m, L, Mtilde)
    g = _gamma_used(inputs, gmax)
    B = _discretisation(d, m, L, g) + 4.0 * L * d * Mtilde / (m * m)
    A = L * Mtilde
    aux = {"M_tilde": Mtilde, "A_nN": A_i.tolist(), "discretisation": _discretisation(d, m, L, g)}
    return BoundReport("qlsd-star", gmax, g, m, 1.0 - gmax * m / 2.0, B, A, aux)


def bound_qlsd_pp(inputs: BoundInputs) -> BoundReport:
    """Constants for QLSD++ / LSD++ (memory + periodic control variate)."""
    M, om, p, n, N = inputs.arrays()
    m, L, d, l, Mbar = inputs.m, inputs.L, inputs.d, int(inputs.l), inputs.Mbar
    om_max = float(om.max())
    alpha = inputs.alpha if inputs.alpha is not None else 1.0 / (1.0 + om_max)
    if not 0 < alpha <= 1.0 / (1.0 + om_max) * (1 + 1e-12):
        raise DomainError(f"alpha must lie in (0, 1/(1+omega_max)] = (0, {1.0 / (1.0 + om_max):.6g}]")
    if l < 1:
        raise DomainError("refresh period l must be at least 1")
    A_i = a_nN(n, N)
    frac = (om + 1.0 - p) / p
    lead = (om + 1.0) / p
    het = M * M * frac + lead * A_i * Mbar * M
    B_nN = 2.0 * float(het.sum()) + L * L
    C_nN = 2.0 * float(np.sum(A_i * Mbar * M + M * M))
    S = float(frac.sum())
    D_nN = 2.0 * float(het.sum()) + 2.0 * Mbar * float(np.sum(lead * A_i * M)) + 4.0 * C_nN * S
    g1 = (1.0 / m) * min(m * m / (B_nN + 3.0 * om_max * C_nN), alpha / 3.0)
    denom = 16.0 * l * Mbar * float(lead.max()) * float(np.sum(A_i * M))
    g2 = min(g1, (m / denom) ** (1.0 / 3.0)) if denom > 0 else g1
    gmax = min(g2, 1.0 / (10.0 * m))
    g = _gamma_used(inputs, gmax)
    B = _discretisation(d, m, L, g) / 1.0 + 96.0 * l * d * float(np.sum(M * (om + 1.0) * (M + Mbar * A_i) / p)) / (m * m)
    aux = {
        "A_nN": A_i.tolist(),
        "B_nN": B_nN,
        "C_nN": C_nN,
        "D_nN": D_nN,
        "gamma_alpha_1": g1,
        "gamma_alpha_2": g2,
        "alpha": alpha,
        "l": l,
        "sum_frac": S,
        "max_frac": float(frac.max()),
        "discretisation": _discretisation(d, m, L, g),
    }
    return BoundReport("qlsd-pp", gmax, g, m, 1.0 - gmax * m / 2.0, B, 2.0 * D_nN / m, aux)


def w2_bound_curve(
    report: BoundReport,
    gamma: float,
    k,
    W2_init_sq: float,
    second_moment_init: float = 0.0,
    psi_init: float | None = None,
    memory_init: float = 0.0,
):
    """Right-hand side of the matching W2^2 bound at iteration(s) ``k``.

    QLSD / QLSD*: ``c^k W0 + gamma B + gamma^2 A c^(k-1) k E|theta0 - theta*|^2``
    with ``c = 1 - gamma m / 2``.  QLSD++: ``c^k W0 + (2 gamma/m) c^floor(k/l)
    D psi0 + (4 gamma/m) S (1-alpha)^k sum_i |grad U_i(theta*) - eta0_i|^2 +
    gamma B``; ``psi_init`` defaults to ``second_moment_init`` (the value of
    psi when the initial memories equal the local gradients at theta*).
    """
    if not 0 < gamma <= report.gamma_max * (1 + 1e-12):
        raise DomainError(f"step size {gamma} exceeds the admissible bound {report.gamma_max}")
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0):
        raise DomainError("iteration index must be nonnegative")
    c = 1.0 - gamma * report.m / 2.0
    out = c**k * W2_init_sq + gamma * report.bias_B
    if report.algorithm == "qlsd-pp":
        aux = report.auxiliary
        psi0 = second_moment_init if psi_init is None else psi_init
        out = out + (2.0 * gamma / report.m) * c ** np.floor(k / aux["l"]) * aux["D_nN"] * psi0
        out = out + (4.0 * gamma / report.m) * aux["sum_frac"] * (1.0 - aux["alpha"]) ** k * memory_init
    else:
        out = out + gamma * gamma * report.transient_A * np.where(k > 0, c ** (k - 1.0) * k, 0.0) * second_moment_init
    return float(out) if out.ndim == 0 else out


def bound_inputs_for(model, algorithm: str, p=1.0, compressor=None, batch_sizes=None,
                     l: int = 1, alpha: float | None = None, gamma_bar: float | None = None,
                     theta_star=None) -> BoundInputs:
    """Assemble :class:`BoundInputs` for ``model`` under a sampler setting.

    ``sigma_star`` and ``B_star`` are computed exactly at ``theta*`` by
    enumerating minibatch moments; ``B_star`` takes the larger of its two
    readings.  ``batch_sizes`` follows the sampler convention (``None`` is
    floor(N_i/10), ``"full"`` the whole local dataset).
    """
    from .compression import QuantizerSpec, omega
    from .models import minimizer, smoothness_profile
    from .oracles import OracleKind, heterogeneity_constants, tenth_batches
    from .sampler import canonical_algorithm

    alg = canonical_algorithm(algorithm)
    b, d = model.b, model.d
    prof = smoothness_profile(model)
    comps = list(compressor) if isinstance(compressor, (list, tuple)) else [compressor] * b
    om = [omega(QuantizerSpec.parse(c), d) for c in comps]
    pp = list(p) if isinstance(p, (list, tuple, np.ndarray)) else [float(p)] * b
    if alg == "qlsd" or batch_sizes == "full":
        n = [int(x) for x in model.sizes]
    elif batch_sizes is None:
        n = list(tenth_batches(model.sizes))
    else:
        n = [int(x) for x in batch_sizes]
    ts = minimizer(model) if theta_star is None else np.asarray(theta_star, float)
    sigma = bstar = 0.0
    if alg in ("qlsd", "qlsd-sharp"):
        het = heterogeneity_constants(OracleKind("minibatch", tuple(n)), model, ts)
        sigma = math.sqrt(het["sigma_star_sq"])
        bstar = max(het["B_star_sum"], het["B_star_max"])
    return BoundInputs(
        m=prof.m, L=prof.L, M_per_client=list(map(float, prof.M_per_client)), Mbar=prof.Mbar,
        d=d, b=b, omega_per_client=om, p_per_client=pp, n_per_client=n,
        N_per_client=[int(x) for x in model.sizes], sigma_star=sigma, B_star=bstar,
        l=int(l), alpha=alpha, gamma_bar=gamma_bar,
    )


def bound_for(algorithm: str, inputs: BoundInputs) -> BoundReport:
    """Dispatch to the bound calculator matching ``algorithm``."""
    from .sampler import canonical_algorithm

    alg = canonical_algorithm(algorithm)
    if alg in ("qlsd", "qlsd-sharp"):
        return bound_qlsd(inputs)
    if alg in ("qlsd-star", "lsd-star"):
        return bound_qlsd_star(inputs)
    return bound_qlsd_pp(inputs)
