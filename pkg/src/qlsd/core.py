"""Keyed counter-based randomness, error types and per-iteration records.

Every random number used by the simulator is a pure function of
``(seed, labels..., counter)``.  The mixing function is the SplitMix64
finaliser; a stream key is obtained by folding the seed and each label
through it, and the ``c``-th 64-bit output of a stream is
``mix(key + (c + 1) * GOLDEN)``, i.e. the SplitMix64 sequence started at
the key.  Because nothing is sequential, keys for many clients/replicas
can be derived and expanded in one vectorised call, and the result does
not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "QLSDError",
    "ConfigError",
    "DomainError",
    "DivergenceError",
    "OptimizationError",
    "CorruptMessageError",
    "ContractError",
    "StateError",
    "Purpose",
    "RandomStream",
    "substream",
    "gaussian_draw",
    "derive_keys",
    "bits_block",
    "uniform_block",
    "uniform_open_block",
    "normal_block",
    "IterationRecord",
    "as_param_vector",
]

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SEED_SALT = np.uint64(0x6A09E667F3BCC909)
_LABEL_SALT = np.uint64(0xBB67AE8584CAA73B)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 2.0**-53


class QLSDError(Exception):
    """Base class for all simulator errors."""


class ConfigError(QLSDError, ValueError):
    """Invalid configuration or generator parameters."""


class DomainError(QLSDError, ValueError):
    """A numeric argument lies outside the domain where a formula is valid."""


class DivergenceError(QLSDError, RuntimeError):
    """The chain left the finite region; carries the iteration index."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = int(iteration)
        super().__init__(message or f"chain diverged at iteration {iteration}")


class OptimizationError(QLSDError, RuntimeError):
    """The minimiser hit its iteration cap."""

    def __init__(self, grad_norm: float, iterations: int):
        self.grad_norm = float(grad_norm)
        self.iterations = int(iterations)
        super().__init__(
            f"no convergence after {iterations} iterations, |grad| = {grad_norm:.3e}"
        )


class CorruptMessageError(QLSDError, ValueError):
    """A compressed message violates its own invariants."""


class ContractError(QLSDError, ValueError):
    """Arguments that are mutually inconsistent for the requested variant."""


class StateError(QLSDError, ValueError):
    """Operation on an object in an unusable state (e.g. an empty trace)."""


class Purpose:
    """First label of every sampler substream."""

    NOISE = 1
    PARTICIPATION = 2
    MINIBATCH = 3
    QUANTIZE = 4
    DATA = 5
    REFERENCE = 6


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind not in "iu":
        raise ContractError("random stream labels must be integers")
    if arr.dtype.kind == "i" and np.any(arr < 0):
        raise ContractError("random stream labels must be nonnegative")
    return arr.astype(np.uint64)


def _seed_key(seed: int) -> np.uint64:
    with np.errstate(over="ignore"):
        return _mix(np.asarray([int(seed) & _MASK], dtype=np.uint64) ^ _SEED_SALT)[0]


def derive_keys(root_key, *labels) -> np.ndarray:
    """Fold labels (scalars or broadcastable integer arrays) into ``root_key``.

    The result has the broadcast shape of all labels and equals, element
    by element, the key of ``substream(root, [l1, l2, ...])``.
    """
    key = _as_u64(root_key)
    with np.errstate(over="ignore"):
        for lab in labels:
            key = _mix(key ^ _mix(_as_u64(lab) + _LABEL_SALT))
    return key


def bits_block(keys, n: int, offset: int = 0) -> np.ndarray:
    """Raw 64-bit outputs ``offset .. offset+n-1`` of each keyed stream.

    Output shape is ``keys.shape + (n,)``.
    """
    keys = _as_u64(keys)
    with np.errstate(over="ignore"):
        ctr = np.arange(offset + 1, offset + n + 1, dtype=np.uint64) * _GOLDEN
        return _mix(keys[..., None] + ctr)


def uniform_block(keys, n: int, offset: int = 0) -> np.ndarray:
    """Uniform doubles on [0, 1) with 53 random bits."""
    return (bits_block(keys, n, offset) >> _S11).astype(np.float64) * _TWO53


def uniform_open_block(keys, n: int, offset: int = 0) -> np.ndarray:
    """Uniform doubles on (0, 1]."""
    return ((bits_block(keys, n, offset) >> _S11).astype(np.float64) + 1.0) * _TWO53


def normal_block(keys, n: int, offset: int = 0) -> np.ndarray:
    """Standard normals by Box-Muller (cosine branch).

    Normal ``c`` consumes counters ``offset + 2c`` and ``offset + 2c + 1``.
    """
    raw = bits_block(keys, 2 * n, offset) >> _S11
    u1 = (raw[..., 0::2].astype(np.float64) + 1.0) * _TWO53
    u2 = raw[..., 1::2].astype(np.float64) * _TWO53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class RandomStream:
    """A keyed stream with a read position.

    Copies made with :meth:`fresh` replay the stream from the start; the
    key itself never changes, so substreams derived from a stream do not
    depend on how much of the parent has been consumed.
    """

    __slots__ = ("seed", "labels", "key", "position")

    def __init__(self, seed: int, labels: Sequence[int] = (), position: int = 0):
        self.seed = int(seed)
        self.labels = tuple(int(x) for x in labels)
        self.key = np.uint64(derive_keys(_seed_key(self.seed), *self.labels))
        self.position = int(position)

    @classmethod
    def from_seed(cls, seed: int) -> "RandomStream":
        return cls(seed)

    def fresh(self) -> "RandomStream":
        return RandomStream(self.seed, self.labels)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RandomStream)
            and self.key == other.key
            and self.position == other.position
        )

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, labels={self.labels}, position={self.position})"

    def bits(self, n: int) -> np.ndarray:
        out = bits_block(self.key, n, self.position)
        self.position += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        out = uniform_block(self.key, n, self.position)
        self.position += n
        return out

    def uniform_open(self, n: int) -> np.ndarray:
        out = uniform_open_block(self.key, n, self.position)
        self.position += n
        return out

    def normal(self, n: int) -> np.ndarray:
        out = normal_block(self.key, n, self.position)
        self.position += 2 * n
        return out


def substream(root: RandomStream, labels: Iterable[int]) -> RandomStream:
    """Stream keyed by ``root``'s key extended with ``labels``."""
    labels = tuple(int(x) for x in labels)
    if not labels:
        raise ContractError("substream needs at least one label")
    return RandomStream(root.seed, root.labels + labels)


def gaussian_draw(stream: RandomStream, d: int) -> np.ndarray:
    """``d`` i.i.d. N(0, 1) variates; advances ``stream``."""
    if int(d) <= 0:
        raise DomainError(f"dimension must be positive, got {d}")
    return stream.normal(int(d))


def as_param_vector(values, d: int | None = None, name: str = "theta") -> np.ndarray:
    """Validate a finite 1-D float vector (optionally of dimension ``d``)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be a 1-D vector")
    if d is not None and arr.shape[0] != d:
        raise ContractError(f"{name} has dimension {arr.shape[0]}, expected {d}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class IterationRecord:
    k: int
    theta: np.ndarray | None
    bits_uplink: int
    active_count: int
    extra: dict = field(default_factory=dict, compare=False)
