"""Stochastic s-level quantisation, exact decoding and bit-exact encoding.

Wire format of a quantised message, most significant bit first::

    [norm as 32-bit IEEE-754 big-endian]
    for each coordinate j:
        Elias-gamma(level_j + 1)
        one sign bit (0 = +, 1 = -) only if level_j > 0

An identity message is the d coordinates as 32-bit floats.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import CorruptMessageError, ConfigError, RandomStream, as_param_vector

__all__ = [
    "QuantizerSpec",
    "CompressedMessage",
    "BitLedger",
    "quantize",
    "decode",
    "omega",
    "bit_cost",
    "elias_gamma_length",
    "encode_message",
    "decode_message",
    "quantize_batch",
    "quant_bits_batch",
]

NORM_BITS = 32


@dataclass(frozen=True)
class QuantizerSpec:
    """``s`` quantisation levels, or ``s=None`` for the identity operator."""

    s: int | None = None

    def __post_init__(self):
        if self.s is not None and (int(self.s) != self.s or self.s < 1):
            raise ConfigError(f"number of levels must be a positive integer, got {self.s}")

    @classmethod
    def identity(cls) -> "QuantizerSpec":
        return cls(None)

    @classmethod
    def with_bits(cls, p: int) -> "QuantizerSpec":
        return cls(2 ** int(p))

    @property
    def is_identity(self) -> bool:
        return self.s is None

    def label(self) -> str:
        return "identity" if self.s is None else f"s={self.s}"

    @classmethod
    def parse(cls, text) -> "QuantizerSpec":
        """Accept ``identity``, an integer ``s``, or ``2^p`` / ``bits:p``."""
        if isinstance(text, QuantizerSpec):
            return text
        if text is None:
            return cls(None)
        if isinstance(text, (int, np.integer)):
            return cls(int(text))
        t = str(text).strip().lower()
        if t in ("identity", "none", "id"):
            return cls(None)
        try:
            if t.startswith("2^"):
                return cls(2 ** int(t[2:]))
            if t.startswith("bits:"):
                return cls(2 ** int(t[5:]))
            if t.startswith("s="):
                t = t[2:]
            return cls(int(t))
        except ValueError as exc:
            raise ConfigError(f"cannot parse compressor {text!r}") from exc


@dataclass(frozen=True)
class CompressedMessage:
    norm: float
    signs: np.ndarray
    levels: np.ndarray
    spec: QuantizerSpec
    values: np.ndarray | None = None  # identity payload
    n_bits: int = field(default=0, compare=False)

    @property
    def d(self) -> int:
        return int(self.values.size if self.spec.is_identity else self.levels.size)

    def __eq__(self, other):
        if not isinstance(other, CompressedMessage) or self.spec != other.spec:
            return False
        if self.spec.is_identity:
            return np.array_equal(self.values, other.values)
        return (
            self.norm == other.norm
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.levels, other.levels)
        )


def omega(spec: QuantizerSpec, d: int) -> float:
    """Relative variance constant ``min(d/s^2, sqrt(d)/s)``; 0 for identity."""
    if d < 1:
        raise ConfigError("dimension must be positive")
    if spec.is_identity:
        return 0.0
    s = float(spec.s)
    return min(d / (s * s), np.sqrt(d) / s)


def elias_gamma_length(n) -> np.ndarray:
    """Length ``2 floor(log2 n) + 1`` of the Elias-gamma code of ``n >= 1``."""
    n = np.asarray(n)
    if np.any(n < 1):
        raise ValueError("Elias-gamma needs positive integers")
    _, exp = np.frexp(n.astype(np.float64))
    return 2 * (exp.astype(np.int64) - 1) + 1


def quantize_batch(V: np.ndarray, s, xi: np.ndarray):
    """Vectorised quantiser on the last axis.

    ``s`` broadcasts against ``V.shape[:-1]``; ``xi`` are uniforms on (0, 1]
    with the shape of ``V``.  Returns ``(norms, signs, levels, decoded)``.
    """
    V = np.asarray(V, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    # scale by the largest entry so tiny or huge vectors neither under- nor overflow
    amax = np.max(np.abs(V), axis=-1)
    unit = np.where(amax > 0.0, amax, 1.0)
    scaled = V / unit[..., None]
    norms = amax * np.sqrt(np.sum(scaled * scaled, axis=-1))
    safe = np.where(norms > 0.0, norms, 1.0)
    # ratio first so a lone nonzero coordinate lands exactly on level s
    r = s[..., None] * (np.abs(V) / safe[..., None])
    r = np.minimum(r, s[..., None])
    low = np.floor(r)
    levels = (low + (xi <= r - low)).astype(np.int64)
    levels[norms == 0.0] = 0
    signs = np.where(V >= 0.0, 1, -1).astype(np.int8)
    decoded = norms[..., None] * (signs * (levels / s[..., None]))
    return norms, signs, levels, decoded


def quant_bits_batch(levels: np.ndarray) -> np.ndarray:
    """Encoded length of quantised messages, one per leading index."""
    levels = np.asarray(levels)
    _, exp = np.frexp((levels + 1).astype(np.float64))
    per = 2 * exp.astype(np.int64) - 1 + (levels > 0)
    return NORM_BITS + per.sum(axis=-1)


def quantize(v, spec: QuantizerSpec, stream: RandomStream) -> CompressedMessage:
    """One realisation of the s-level quantiser (identity passes ``v`` through).

    Consumes exactly ``d`` uniforms from ``stream`` when quantising.
    """
    v = as_param_vector(v, name="v")
    d = v.size
    if spec.is_identity:
        vals = v.copy()
        return CompressedMessage(float(np.linalg.norm(v)), np.where(v >= 0, 1, -1).astype(np.int8),
                                 np.zeros(d, dtype=np.int64), spec, vals, NORM_BITS * d)
    xi = stream.uniform_open(d)
    norm, signs, levels, _ = quantize_batch(v, spec.s, xi)
    return CompressedMessage(float(norm), signs, levels, spec, None, int(quant_bits_batch(levels)))


def decode(msg: CompressedMessage) -> np.ndarray:
    """Realised value ``norm * sign_j * level_j / s``."""
    if msg.spec.is_identity:
        return np.array(msg.values, dtype=np.float64)
    levels = np.asarray(msg.levels)
    if np.any(levels < 0) or np.any(levels > msg.spec.s):
        raise CorruptMessageError(f"levels must lie in [0, {msg.spec.s}]")
    if msg.norm < 0 or not np.isfinite(msg.norm):
        raise CorruptMessageError("norm must be finite and nonnegative")
    if msg.norm == 0.0 and np.any(levels != 0):
        raise CorruptMessageError("zero norm with nonzero levels")
    signs = np.asarray(msg.signs)
    if not np.all((signs == 1) | (signs == -1)):
        raise CorruptMessageError("signs must be +1 or -1")
    return msg.norm * (signs * (levels / float(msg.spec.s)))


def bit_cost(msg: CompressedMessage) -> int:
    if msg.spec.is_identity:
        return NORM_BITS * msg.d
    return int(quant_bits_batch(np.asarray(msg.levels)))


def _float32_bits(x: float) -> str:
    return format(struct.unpack(">I", struct.pack(">f", x))[0], "032b")


def encode_message(msg: CompressedMessage) -> str:
    """Bitstring (``'0'``/``'1'`` characters, MSB first) of a message."""
    if msg.spec.is_identity:
        return "".join(_float32_bits(float(x)) for x in msg.values)
    parts = [_float32_bits(float(msg.norm))]
    for lev, sg in zip(np.asarray(msg.levels).tolist(), np.asarray(msg.signs).tolist()):
        n = lev + 1
        width = n.bit_length()
        parts.append("0" * (width - 1) + format(n, "b"))
        if lev > 0:
            parts.append("0" if sg > 0 else "1")
    return "".join(parts)


def decode_message(bits: str, d: int, spec: QuantizerSpec) -> CompressedMessage:
    """Inverse of :func:`encode_message`; the norm comes back as float32."""
    if set(bits) - {"0", "1"}:
        raise CorruptMessageError("bitstring may contain only 0 and 1")

    def f32(chunk: str) -> float:
        if len(chunk) != 32:
            raise CorruptMessageError("truncated 32-bit field")
        return struct.unpack(">f", struct.pack(">I", int(chunk, 2)))[0]

    if spec.is_identity:
        if len(bits) != NORM_BITS * d:
            raise CorruptMessageError("identity payload has the wrong length")
        vals = np.array([f32(bits[32 * j : 32 * j + 32]) for j in range(d)])
        return quantize(vals, spec, RandomStream(0))
    norm = f32(bits[:32])
    pos = 32
    levels = np.zeros(d, dtype=np.int64)
    signs = np.ones(d, dtype=np.int8)
    for j in range(d):
        zeros = 0
        while pos < len(bits) and bits[pos] == "0":
            zeros += 1
            pos += 1
        end = pos + zeros + 1
        if end > len(bits):
            raise CorruptMessageError("truncated Elias-gamma code")
        levels[j] = int(bits[pos:end], 2) - 1
        pos = end
        if levels[j] > 0:
            if pos >= len(bits):
                raise CorruptMessageError("missing sign bit")
            signs[j] = 1 if bits[pos] == "0" else -1
            pos += 1
    if pos != len(bits):
        raise CorruptMessageError("trailing bits after the last coordinate")
    if np.any(levels > spec.s):
        raise CorruptMessageError(f"levels must lie in [0, {spec.s}]")
    return CompressedMessage(norm, signs, levels, spec, None, len(bits))


class BitLedger:
    """Per-iteration uplink bit counts and their running total."""

    def __init__(self, entries: Iterable[int] = ()):
        self._entries = [int(e) for e in entries]
        if any(e < 0 for e in self._entries):
            raise ValueError("bit counts are nonnegative")

    def append(self, bits: int) -> None:
        if bits < 0:
            raise ValueError("bit counts are nonnegative")
        self._entries.append(int(bits))

    @property
    def entries(self) -> np.ndarray:
        return np.asarray(self._entries, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(sum(self._entries))

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.entries)

    def __len__(self) -> int:
        return len(self._entries)
