"""Top-K truncation of distributions, reconstruction, and the payload codec.

A worker keeps only the K highest-probability tokens of its output
distribution and ships (token id, probability) pairs. The server rebuilds a
full distribution from the payload in one of two ways:

* ``RENORMALIZED``   - rescale the received probabilities to sum to 1 and
                       assign zero to every other token.
* ``RESIDUAL_UNIFORM`` - keep the received probabilities as transmitted and
                       spread the missing mass uniformly over the tail.

Payload body layout (little-endian):

    u32 vocab_size | u32 k | k x (u32 token_id, f32 probability)

entries ordered by (probability desc, token id asc). Framing belongs to the
transport layer; this module only defines the body.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dist import Distribution

# Validation budgets: exact math pre-wire, f32 rounding slack post-wire.
PRE_WIRE_TOLERANCE = 1e-9
POST_WIRE_TOLERANCE = 1e-5

_HEADER_BYTES = 8
_ENTRY_DTYPE = np.dtype([("id", "<u4"), ("p", "<f4")])


class PayloadError(ValueError):
    """A payload or its encoding violates an invariant."""


class TruncatedPayloadError(PayloadError):
    """Byte buffer shorter (or longer) than its header declares."""


class PayloadHeaderError(PayloadError):
    """vocab_size or k out of range."""


class DuplicateTokenError(PayloadError):
    """The same token id appears twice."""


class TokenRangeError(PayloadError):
    """A token id falls outside [0, vocab_size)."""


class ProbabilityValueError(PayloadError):
    """A probability is negative, non-finite, or the total mass is invalid."""


class EntryOrderError(PayloadError):
    """Entries are not sorted by (probability desc, token id asc)."""


class Strategy(enum.IntEnum):
    """Server-side reconstruction strategy selector (also the wire byte)."""

    RENORMALIZED = 1
    RESIDUAL_UNIFORM = 2


@dataclass(frozen=True)
class MassSplit:
    """Retained mass inside the top-K set and residual mass outside it."""

    rho: float
    epsilon: float


class TopKPayload:
    """The top-K tokens of one distribution plus their probabilities.

    ``ids`` and ``probs`` are parallel arrays of length k, sorted by
    (probability desc, token id asc). Probabilities are held at float64;
    the wire narrows them to float32.
    """

    __slots__ = ("vocab_size", "ids", "probs")

    def __init__(self, vocab_size: int, ids, probs, *, tol: float = PRE_WIRE_TOLERANCE) -> None:
        ids_arr = np.asarray(ids, dtype=np.int64)
        probs_arr = np.asarray(probs, dtype=np.float64)
        if ids_arr.ndim != 1 or probs_arr.shape != ids_arr.shape:
            raise PayloadError("ids and probs must be 1-D arrays of equal length")
        k = int(ids_arr.shape[0])
        if vocab_size < 2:
            raise PayloadHeaderError(f"vocab_size must be >= 2, got {vocab_size}")
        if not 1 <= k <= vocab_size:
            raise PayloadHeaderError(f"k={k} out of range [1, {vocab_size}]")
        if np.any(ids_arr < 0) or np.any(ids_arr >= vocab_size):
            raise TokenRangeError("token id outside [0, vocab_size)")
        if np.unique(ids_arr).size != k:
            raise DuplicateTokenError("duplicate token ids in payload")
        if not np.all(np.isfinite(probs_arr)) or np.any(probs_arr < 0.0):
            raise ProbabilityValueError("probabilities must be finite and non-negative")
        diffs = np.diff(probs_arr)
        if np.any(diffs > 0.0):
            raise EntryOrderError("probabilities must be non-increasing")
        ties = diffs == 0.0
        if np.any(ties & (np.diff(ids_arr) <= 0)):
            raise EntryOrderError("tied probabilities must be ordered by ascending token id")
        total = float(probs_arr.sum())
        if total <= 0.0 or total > 1.0 + tol:
            raise ProbabilityValueError(
                f"retained mass {total!r} outside (0, 1 + {tol}]"
            )
        ids_arr.setflags(write=False)
        probs_arr.setflags(write=False)
        object.__setattr__(self, "vocab_size", int(vocab_size))
        object.__setattr__(self, "ids", ids_arr)
        object.__setattr__(self, "probs", probs_arr)

    @property
    def k(self) -> int:
        return int(self.ids.shape[0])

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(p)) for i, p in zip(self.ids, self.probs)]

    def __setattr__(self, name, value):  # noqa: ANN001
        raise AttributeError("TopKPayload is immutable")

    def __repr__(self) -> str:
        return f"TopKPayload(vocab_size={self.vocab_size}, entries={self.entries!r})"


def truncate_topk(d: Distribution, k: int) -> TopKPayload:
    """Keep the k highest-probability tokens of ``d``.

    Ties are broken by ascending token id, both for which tokens enter the
    top-K set and for the order of the entries, so the selection is a total
    order and identical everywhere.
    """
    size = d.vocab_size
    if not 1 <= k <= size:
        raise ValueError(f"k={k} out of range [1, {size}]")
    # lexsort: primary key last; ascending ids break exact ties.
    order = np.lexsort((np.arange(size), -d.probs))[:k]
    return TopKPayload(size, order, d.probs[order])


def mass_split(p: TopKPayload) -> MassSplit:
    """Retained mass rho and residual mass epsilon = 1 - rho.

    Float sums may overshoot 1 by a hair (more so after the f32 wire), in
    which case epsilon clamps to 0; payload validation already bounds the
    overshoot.
    """
    rho = float(p.probs.sum())
    eps = 1.0 - rho
    if eps < 0.0:
        eps = 0.0
    return MassSplit(rho=rho, epsilon=eps)


def reconstruct_renormalized(p: TopKPayload) -> Distribution:
    """Rescale the retained probabilities to sum to 1; zero elsewhere."""
    split = mass_split(p)
    if split.rho <= 0.0:
        raise ValueError("cannot renormalize a payload with zero retained mass")
    out = np.zeros(p.vocab_size, dtype=np.float64)
    if p.k == p.vocab_size:
        # Lossless limit: the whole vocabulary was transmitted, so the
        # payload already is the distribution. Skipping the divide keeps
        # the round trip bit-exact.
        out[p.ids] = p.probs
    else:
        out[p.ids] = p.probs / split.rho
    return Distribution.unchecked(out)


def reconstruct_residual_uniform(p: TopKPayload) -> Distribution:
    """Keep transmitted probabilities; spread the residual over the tail.

    Each of the vocab_size - k untransmitted tokens receives
    epsilon / (vocab_size - k). With k == vocab_size there is no tail and
    the payload is returned as-is.
    """
    tail = p.vocab_size - p.k
    if tail == 0:
        out = np.zeros(p.vocab_size, dtype=np.float64)
        out[p.ids] = p.probs
        return Distribution.unchecked(out)
    split = mass_split(p)
    out = np.full(p.vocab_size, split.epsilon / tail, dtype=np.float64)
    out[p.ids] = p.probs
    return Distribution.unchecked(out)


def reconstruct(p: TopKPayload, strategy: Strategy) -> Distribution:
    """Dispatch to the selected reconstruction strategy."""
    if strategy == Strategy.RENORMALIZED:
        return reconstruct_renormalized(p)
    if strategy == Strategy.RESIDUAL_UNIFORM:
        return reconstruct_residual_uniform(p)
    raise ValueError(f"unknown reconstruction strategy {strategy!r}")


def encode_payload(p: TopKPayload) -> bytes:
    """Serialize a payload to its wire body.

    Probabilities narrow to f32. Narrowing can create new ties between
    adjacent entries, so entries are re-sorted by (f32 probability desc,
    id asc) to keep the ordering invariant valid on the receiving side.
    """
    probs32 = p.probs.astype(np.float32)
    order = np.lexsort((p.ids, -probs32.astype(np.float64)))
    rec = np.empty(p.k, dtype=_ENTRY_DTYPE)
    rec["id"] = p.ids[order]
    rec["p"] = probs32[order]
    header = np.array([p.vocab_size, p.k], dtype="<u4").tobytes()
    return header + rec.tobytes()


def decode_payload(buf: bytes, *, tol: float = POST_WIRE_TOLERANCE) -> TopKPayload:
    """Parse and fully validate a wire body.

    Every ``TopKPayload`` invariant is re-checked at the post-wire
    tolerance; malformed input raises a ``PayloadError`` subclass, never
    anything else.
    """
    if len(buf) < _HEADER_BYTES:
        raise TruncatedPayloadError(f"payload header needs 8 bytes, got {len(buf)}")
    vocab_size, k = (int(x) for x in np.frombuffer(buf[:_HEADER_BYTES], dtype="<u4"))
    if vocab_size < 2:
        raise PayloadHeaderError(f"vocab_size must be >= 2, got {vocab_size}")
    if k < 1 or k > vocab_size:
        raise PayloadHeaderError(f"k={k} out of range [1, {vocab_size}]")
    expected = _HEADER_BYTES + k * _ENTRY_DTYPE.itemsize
    if len(buf) != expected:
        raise TruncatedPayloadError(
            f"payload declares {k} entries ({expected} bytes) but buffer has {len(buf)}"
        )
    rec = np.frombuffer(buf, dtype=_ENTRY_DTYPE, offset=_HEADER_BYTES)
    return TopKPayload(
        vocab_size,
        rec["id"].astype(np.int64),
        rec["p"].astype(np.float64),
        tol=tol,
    )
