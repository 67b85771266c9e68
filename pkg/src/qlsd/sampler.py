"""QLSD family drivers.

All chains of an ensemble (``replicas``) and all clients are advanced in
one vectorised pass per iteration.  Every random quantity is drawn from a
keyed substream ``[purpose, replica, iteration, client]`` of the run
seed, so a replica's trajectory does not depend on how many replicas run
alongside it, and toggling one client's participation never changes the
draws seen by another client.  Client contributions are always summed in
index order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .compression import BitLedger, QuantizerSpec, omega, quant_bits_batch, quantize_batch
from .core import (
    ConfigError,
    DivergenceError,
    IterationRecord,
    Purpose,
    RandomStream,
    derive_keys,
    normal_block,
    uniform_open_block,
)
from .diagnostics import MomentAccumulator
from .models import PotentialModel, minimizer
from .oracles import OracleKind, sample_minibatch_batch, tenth_batches

__all__ = [
    "ALGORITHMS",
    "SamplerConfig",
    "ServerState",
    "Trace",
    "SamplerContext",
    "build_context",
    "init_state",
    "participation_draw",
    "qlsd_step",
    "qlsd_pp_step",
    "run_chain",
    "canonical_algorithm",
    "write_trace_csv",
    "aggregate",
    "config_hash",
]

ALGORITHMS = ("qlsd", "qlsd-sharp", "qlsd-star", "qlsd-pp", "lsd-star", "lsd-pp")
_ALIASES = {
    "qlsd#": "qlsd-sharp",
    "qlsd_sharp": "qlsd-sharp",
    "qlsd*": "qlsd-star",
    "qlsd_star": "qlsd-star",
    "qlsd++": "qlsd-pp",
    "qlsd_pp": "qlsd-pp",
    "lsd*": "lsd-star",
    "lsd_star": "lsd-star",
    "lsd++": "lsd-pp",
    "lsd_pp": "lsd-pp",
}
_DEFAULT_ORACLE = {
    "qlsd": "full",
    "qlsd-sharp": "minibatch",
    "qlsd-star": "star",
    "lsd-star": "star",
    "qlsd-pp": "svrg",
    "lsd-pp": "svrg",
}
_MEMORY_ALGS = ("qlsd-pp", "lsd-pp")
DIVERGENCE_NORM = 1e12
RESYNC_EVERY = 256


def canonical_algorithm(name: str) -> str:
    key = str(name).strip().lower()
    key = _ALIASES.get(key, key)
    if key not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {', '.join(ALGORITHMS)}")
    return key


@dataclass(frozen=True)
class SamplerConfig:
    """Run configuration.

    ``p`` and ``compressor`` accept one value for all clients or a
    per-client sequence.  ``batch_sizes`` is ``None`` (n_i = floor(N_i/10),
    at least 1), ``"full"`` or an explicit sequence; it is ignored by the
    full oracle.  ``anchor`` selects how the control variate is set for
    the memory algorithms: ``"refresh"`` (every ``l`` steps) or
    ``"theta_star"`` (held at the minimiser).
    """

    algorithm: str
    gamma: float
    K: int
    p: float | Sequence[float] = 1.0
    compressor: object = None
    batch_sizes: object = None
    alpha: float | None = None
    l: int = 100
    burn_in: int = 0
    thinning: int = 1
    seed: int = 0
    aggregation: str = "analytic"
    theta0: Sequence[float] | None = None
    oracle: str | None = None
    anchor: str = "refresh"
    replicas: int = 1
    keep_samples: bool = True
    keep_path: bool = False
    snapshots: Sequence[int] = ()

    def to_dict(self) -> dict:
        out = asdict(self)
        comp = self.compressor
        if isinstance(comp, (list, tuple)):
            out["compressor"] = [QuantizerSpec.parse(c).label() for c in comp]
        else:
            out["compressor"] = QuantizerSpec.parse(comp).label()
        for key in ("p", "batch_sizes", "theta0", "snapshots"):
            val = out[key]
            if isinstance(val, np.ndarray):
                out[key] = val.tolist()
            elif isinstance(val, tuple):
                out[key] = list(val)
        return out


def config_hash(config: SamplerConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class SamplerContext:
    """Everything derived once from (config, model)."""

    config: SamplerConfig
    model: PotentialModel
    algorithm: str
    variant: str
    R: int
    p: np.ndarray
    all_active: bool
    specs: tuple
    s_arr: np.ndarray
    ident: np.ndarray
    all_identity: bool
    omegas: np.ndarray
    n: np.ndarray
    ratio: np.ndarray
    alpha: float
    root_key: np.uint64
    theta_star: np.ndarray | None
    star_table: np.ndarray | None
    star_client_grads: np.ndarray | None
    theta0: np.ndarray

    @property
    def memory(self) -> bool:
        return self.algorithm in _MEMORY_ALGS


@dataclass
class ServerState:
    """Sampler state for ``R`` replicas.

    ``theta``/``zeta``/``eta_sum`` have shape ``(R, d)``; ``eta`` and the
    cached anchor gradients ``zeta_grad`` have shape ``(R, b, d)``.
    """

    theta: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray
    eta_sum: np.ndarray
    k: int = 0
    zeta_grad: np.ndarray | None = None


@dataclass
class StepInfo:
    bits: np.ndarray
    active: np.ndarray
    audit: dict = field(default_factory=dict)


def _per_client(value, b: int, name: str) -> list:
    if isinstance(value, (list, tuple, np.ndarray)):
        vals = list(value)
        if len(vals) != b:
            raise ConfigError(f"{name}: expected {b} per-client values, got {len(vals)}")
        return vals
    return [value] * b


def build_context(config: SamplerConfig, model: PotentialModel) -> SamplerContext:
    """Validate ``config`` against ``model`` and precompute constants."""
    alg = canonical_algorithm(config.algorithm)
    b, d = model.b, model.d
    if not (config.gamma > 0 and math.isfinite(config.gamma)):
        raise ConfigError(f"step size must be positive, got {config.gamma}")
    if int(config.K) < 1:
        raise ConfigError("K must be at least 1")
    if not 0 <= int(config.burn_in) < int(config.K):
        raise ConfigError(f"burn_in must lie in [0, K), got {config.burn_in}")
    if int(config.thinning) < 1:
        raise ConfigError("thinning must be at least 1")
    if int(config.replicas) < 1:
        raise ConfigError("replicas must be at least 1")
    if config.aggregation not in ("analytic", "algorithmic"):
        raise ConfigError(f"aggregation must be 'analytic' or 'algorithmic', got {config.aggregation!r}")
    if config.anchor not in ("refresh", "theta_star"):
        raise ConfigError(f"anchor must be 'refresh' or 'theta_star', got {config.anchor!r}")
    if int(config.l) < 1:
        raise ConfigError("refresh period l must be at least 1")

    p = np.asarray(_per_client(config.p, b, "p"), dtype=np.float64)
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ConfigError("participation probabilities must lie in (0, 1]")

    specs = tuple(QuantizerSpec.parse(c) for c in _per_client(config.compressor, b, "compressor"))
    if alg.startswith("lsd") and not all(sp.is_identity for sp in specs):
        raise ConfigError(f"{alg} runs without compression; drop the compressor or use q{alg}")
    ident = np.array([sp.is_identity for sp in specs])
    s_arr = np.array([1.0 if sp.is_identity else float(sp.s) for sp in specs])
    omegas = np.array([omega(sp, d) for sp in specs])

    variant = config.oracle or _DEFAULT_ORACLE[alg]
    if variant not in ("full", "minibatch", "star", "svrg"):
        raise ConfigError(f"unknown oracle {variant!r}")
    if alg in ("qlsd-star", "lsd-star") and variant != "star":
        raise ConfigError(f"{alg} uses the star oracle")
    if alg in _MEMORY_ALGS and variant not in ("svrg", "full"):
        raise ConfigError(f"{alg} uses the svrg (or full) oracle")
    if alg in ("qlsd", "qlsd-sharp") and variant in ("star", "svrg"):
        raise ConfigError(f"{alg} takes the full or minibatch oracle")

    if variant == "full" or config.batch_sizes == "full":
        n = model.sizes.copy()
    elif config.batch_sizes is None:
        n = np.asarray(tenth_batches(model.sizes), dtype=np.int64)
    else:
        n = OracleKind("minibatch", tuple(config.batch_sizes)).sizes_for(model)

    if alg in _MEMORY_ALGS:
        bound = 1.0 / (float(omegas.max()) + 1.0)
        alpha = bound if config.alpha is None else float(config.alpha)
        if not 0.0 <= alpha <= bound * (1 + 1e-12):
            raise ConfigError(f"alpha must lie in [0, 1/(omega_max+1)] = [0, {bound:.6g}], got {alpha}")
    else:
        alpha = 0.0

    need_star = variant == "star" or (alg in _MEMORY_ALGS and config.anchor == "theta_star")
    theta_star = star_table = star_client = None
    if need_star:
        theta_star = np.asarray(minimizer(model), dtype=np.float64)
        star_table = model.grad_records(np.arange(model.N_total), theta_star[None, :])
        star_client = model.grad_clients(theta_star)

    R = int(config.replicas)
    if config.theta0 is None:
        theta0 = np.zeros((R, d))
    else:
        t0 = np.asarray(config.theta0, dtype=np.float64)
        if t0.shape not in ((d,), (R, d)) or not np.all(np.isfinite(t0)):
            raise ConfigError(f"theta0 must be a finite vector of dimension {d}")
        theta0 = np.broadcast_to(t0, (R, d)).copy()

    return SamplerContext(
        config=config,
        model=model,
        algorithm=alg,
        variant=variant,
        R=R,
        p=p,
        all_active=bool(np.all(p == 1.0)),
        specs=specs,
        s_arr=s_arr,
        ident=ident,
        all_identity=bool(ident.all()),
        omegas=omegas,
        n=n,
        ratio=model.sizes / n,
        alpha=alpha,
        root_key=RandomStream(config.seed).key,
        theta_star=theta_star,
        star_table=star_table,
        star_client_grads=star_client,
        theta0=theta0,
    )


def init_state(ctx: SamplerContext, eta0=None) -> ServerState:
    R, b, d = ctx.R, ctx.model.b, ctx.model.d
    eta = np.zeros((R, b, d)) if eta0 is None else np.broadcast_to(np.asarray(eta0, dtype=np.float64), (R, b, d)).copy()
    theta = ctx.theta0.copy()
    zeta = theta.copy()
    zeta_grad = None
    if ctx.memory and ctx.config.anchor == "theta_star":
        zeta = np.broadcast_to(ctx.theta_star, (R, d)).copy()
        zeta_grad = np.broadcast_to(ctx.star_client_grads, (R, b, d)).copy()
    return ServerState(theta, zeta, eta, eta.sum(axis=1), 0, zeta_grad)


def participation_draw(p, stream: RandomStream) -> np.ndarray:
    """Indices of active clients; client ``i`` reads ``substream(stream, [i])``."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ConfigError("participation probabilities must lie in (0, 1]")
    keys = derive_keys(stream.key, np.arange(p.size))
    u = uniform_open_block(keys, 1)[:, 0]
    return np.flatnonzero(u <= p)


def _keys(ctx: SamplerContext, purpose: int, k: int) -> np.ndarray:
    rep = np.arange(ctx.R)[:, None]
    cl = np.arange(ctx.model.b)[None, :]
    return derive_keys(ctx.root_key, purpose, rep, k, cl)


def _oracles(ctx: SamplerContext, state: ServerState, k: int, audit: dict | None) -> np.ndarray:
    model = ctx.model
    theta = state.theta
    if ctx.variant == "full":
        return model.grad_clients(theta)
    idx, mask = sample_minibatch_batch(_keys(ctx, Purpose.MINIBATCH, k), model.sizes[None, :], ctx.n[None, :])
    if audit is not None:
        audit["minibatch"] = (idx, mask)
    rec = model.offsets[:-1][None, :, None] + idx
    g = model.grad_records(rec, theta[:, None, None, :])
    if ctx.variant == "star":
        g = g - ctx.star_table[rec]
    elif ctx.variant == "svrg":
        g = g - model.grad_records(rec, state.zeta[:, None, None, :])
    h = ctx.ratio[None, :, None] * np.where(mask[..., None], g, 0.0).sum(axis=2)
    if ctx.variant == "svrg":
        h = h + state.zeta_grad
    return h


def _compress(ctx: SamplerContext, V: np.ndarray, k: int, audit: dict | None):
    d = ctx.model.d
    if ctx.all_identity:
        return V, np.full(V.shape[:2], 32 * d, dtype=np.int64)
    xi = uniform_open_block(_keys(ctx, Purpose.QUANTIZE, k), d)
    norms, signs, levels, dec = quantize_batch(V, ctx.s_arr[None, :], xi)
    bits = quant_bits_batch(levels)
    if ctx.ident.any():
        dec = np.where(ctx.ident[None, :, None], V, dec)
        bits = np.where(ctx.ident[None, :], 32 * d, bits)
    if audit is not None:
        audit["messages"] = (norms, signs, levels)
    return dec, bits


def aggregate(decoded, active, p, rule: str = "analytic") -> np.ndarray:
    """Server combination of client messages ``(..., b, d)``.

    ``analytic``: sum of active messages weighted by ``1/p_i``.
    ``algorithmic``: ``b/|A|`` times the sum of active messages.  An empty
    active set gives zero under both rules.
    """
    dec = np.asarray(decoded, dtype=np.float64)
    active = np.asarray(active, dtype=bool)
    act = active[..., None]
    b = dec.shape[-2]
    if rule == "analytic":
        p = np.asarray(p, dtype=np.float64)
        return np.where(act, dec / p[:, None], 0.0).sum(axis=-2)
    if rule == "algorithmic":
        count = active.sum(axis=-1)
        tot = np.where(act, dec, 0.0).sum(axis=-2)
        return np.where(count[..., None] > 0, (b / np.maximum(count, 1))[..., None] * tot, 0.0)
    raise ConfigError(f"aggregation must be 'analytic' or 'algorithmic', got {rule!r}")


def _advance(ctx: SamplerContext, state: ServerState, audit: bool = False) -> tuple[ServerState, StepInfo]:
    model, cfg = ctx.model, ctx.config
    k = state.k
    R, b, d = ctx.R, model.b, model.d
    info_audit = {} if audit else None

    zeta, zeta_grad = state.zeta, state.zeta_grad
    if ctx.memory and ctx.variant == "svrg" and cfg.anchor == "refresh" and k % int(cfg.l) == 0:
        zeta = state.theta.copy()
        zeta_grad = model.grad_clients(zeta)
    work = replace(state, zeta=zeta, zeta_grad=zeta_grad)

    if ctx.all_active:
        active = np.ones((R, b), dtype=bool)
    else:
        u = uniform_open_block(_keys(ctx, Purpose.PARTICIPATION, k), 1)[..., 0]
        active = u <= ctx.p[None, :]
        if info_audit is not None:
            info_audit["participation_u"] = u

    H = _oracles(ctx, work, k, info_audit)
    V = H - state.eta if ctx.memory else H
    dec, bits = _compress(ctx, V, k, info_audit)
    if info_audit is not None:
        info_audit["decoded"] = dec

    act = active[..., None]
    agg = aggregate(dec, active, ctx.p, cfg.aggregation)
    g = state.eta_sum + agg if ctx.memory else agg

    noise = normal_block(derive_keys(ctx.root_key, Purpose.NOISE, np.arange(R), k), d)
    theta = state.theta - cfg.gamma * g + math.sqrt(2.0 * cfg.gamma) * noise

    eta, eta_sum = state.eta, state.eta_sum
    if ctx.memory and ctx.alpha != 0.0:
        step = np.where(act, ctx.alpha * dec, 0.0)
        eta = eta + step
        eta_sum = eta_sum + step.sum(axis=1)
        if (k + 1) % RESYNC_EVERY == 0:
            eta_sum = eta.sum(axis=1)

    norms = np.sqrt(np.sum(theta * theta, axis=1))
    if not np.all(np.isfinite(theta)) or np.any(norms > DIVERGENCE_NORM):
        raise DivergenceError(k + 1, f"|theta| left the finite region at iteration {k + 1} (step size too large?)")

    new = ServerState(theta, zeta, eta, eta_sum, k + 1, zeta_grad)
    info = StepInfo(np.where(active, bits, 0).sum(axis=1), active, info_audit or {})
    return new, info


def qlsd_step(state: ServerState, config: SamplerConfig, model: PotentialModel,
              ctx: SamplerContext | None = None) -> ServerState:
    """One iteration of QLSD, QLSD#, QLSD* or LSD*."""
    ctx = ctx or build_context(config, model)
    if ctx.memory:
        raise ConfigError(f"qlsd_step does not run {ctx.algorithm}; use qlsd_pp_step")
    return _advance(ctx, state)[0]


def qlsd_pp_step(state: ServerState, config: SamplerConfig, model: PotentialModel,
                 ctx: SamplerContext | None = None) -> ServerState:
    """One iteration of QLSD++ or LSD++ (memory and control variate)."""
    ctx = ctx or build_context(config, model)
    if not ctx.memory:
        raise ConfigError(f"qlsd_pp_step does not run {ctx.algorithm}; use qlsd_step")
    return _advance(ctx, state)[0]


@dataclass
class Trace:
    """Output of :func:`run_chain`.

    ``samples`` has shape ``(n, R, d)`` (``None`` if not kept), ``bits``
    and ``active`` have shape ``(K, R)``, ``sample_norms`` ``(n, R)``.
    ``moments`` accumulates the post-burn-in samples of every replica.
    """

    config: SamplerConfig
    sample_iters: np.ndarray
    samples: np.ndarray | None
    sample_norms: np.ndarray
    bits: np.ndarray
    active: np.ndarray
    moments: MomentAccumulator
    snapshots: dict
    path: np.ndarray | None
    final_state: ServerState

    @property
    def n_samples(self) -> int:
        return int(self.sample_iters.size)

    def replica(self, r: int = 0) -> np.ndarray:
        if self.samples is None:
            raise ConfigError("samples were not kept for this run")
        return self.samples[:, r, :]

    def bit_ledger(self, r: int = 0) -> BitLedger:
        return BitLedger(self.bits[:, r].tolist())

    def records(self, r: int = 0) -> list:
        """Per-iteration records (k = 1..K) for replica ``r``."""
        out = []
        for k in range(self.bits.shape[0]):
            theta = None if self.path is None else self.path[k + 1, r]
            out.append(IterationRecord(k + 1, theta, int(self.bits[k, r]), int(self.active[k, r])))
        return out


def run_chain(config: SamplerConfig, model: PotentialModel,
              callback: Callable[[ServerState, StepInfo], None] | None = None,
              ctx: SamplerContext | None = None, eta0=None) -> Trace:
    """Run ``K`` iterations from ``theta0`` (zero by default)."""
    ctx = ctx or build_context(config, model)
    cfg = ctx.config
    K, burn, thin = int(cfg.K), int(cfg.burn_in), int(cfg.thinning)
    R, d = ctx.R, model.d
    iters = np.arange(burn + 1, K + 1, thin)
    samples = np.empty((iters.size, R, d)) if cfg.keep_samples else None
    norms = np.empty((iters.size, R))
    bits = np.empty((K, R), dtype=np.int64)
    active = np.empty((K, R), dtype=np.int64)
    path = np.empty((K + 1, R, d)) if cfg.keep_path else None
    want = set(int(k) for k in cfg.snapshots)
    snaps = {}
    acc = MomentAccumulator((R, d))
    state = init_state(ctx, eta0)
    if path is not None:
        path[0] = state.theta
    if 0 in want:
        snaps[0] = state.theta.copy()
    slot = 0
    for k in range(K):
        state, info = _advance(ctx, state)
        bits[k] = info.bits
        active[k] = info.active.sum(axis=1)
        kk = k + 1
        if path is not None:
            path[kk] = state.theta
        if kk in want:
            snaps[kk] = state.theta.copy()
        if slot < iters.size and kk == iters[slot]:
            if samples is not None:
                samples[slot] = state.theta
            norms[slot] = np.sqrt(np.sum(state.theta**2, axis=1))
            acc.update(state.theta[None])
            slot += 1
        if callback is not None:
            callback(state, info)
    return Trace(cfg, iters, samples, norms, bits, active, acc, snaps, path, state)


def write_trace_csv(trace: Trace, path, replica: int = 0, components: bool = False) -> None:
    """CSV with columns ``k, theta_norm | theta_0.., bits_uplink, active_count``.

    Norm/component columns are filled for iterations whose state was
    retained (the full path if kept, otherwise post-burn-in samples) and
    left empty elsewhere.
    """
    d = trace.final_state.theta.shape[1]
    kept = {}
    if trace.path is not None:
        kept = {k: trace.path[k, replica] for k in range(1, trace.bits.shape[0] + 1)}
    elif trace.samples is not None:
        kept = {int(k): trace.samples[i, replica] for i, k in enumerate(trace.sample_iters)}
    norm_at = {int(k): trace.sample_norms[i, replica] for i, k in enumerate(trace.sample_iters)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["k"] + ([f"theta_{j}" for j in range(d)] if components else ["theta_norm"])
        w.writerow(head + ["bits_uplink", "active_count"])
        for k in range(1, trace.bits.shape[0] + 1):
            if components:
                th = kept.get(k)
                vals = [repr(float(x)) for x in th] if th is not None else [""] * d
            else:
                if k in kept:
                    vals = [repr(float(np.sqrt(np.sum(kept[k] ** 2))))]
                elif k in norm_at:
                    vals = [repr(float(norm_at[k]))]
                else:
                    vals = [""]
            w.writerow([k] + vals + [int(trace.bits[k - 1, replica]), int(trace.active[k - 1, replica])])

