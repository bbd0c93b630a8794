"""Probability-model providers standing in for the draft and worker LLMs.

Three families, all deterministic given their construction parameters:

* ``SyntheticModel`` - logits are scaled standard normals keyed by
  (seed, prefix hash). A correlation knob blends in a second normal vector
  drawn from a shared seed, so a worker can overlap the draft model by a
  tunable amount and acceptance rates become tunable rather than accidental.
* ``MarkovModel``  - add-lambda smoothed n-gram counts from an integer
  token corpus, backing off to uniform for unseen contexts.
* ``TraceModel``   - replays distributions recorded to a binary trace file,
  one row per generation step, so a run can be re-scored offline.

No neural inference, no tokenizers; vocabularies are plain integer ranges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dist import Distribution, softmax_with_temperature
from .seeding import keyed_normals, stable_prefix_hash

TRACE_MAGIC = b"SFTR"
TRACE_VERSION = 1
TRACE_SUM_TOLERANCE = 1e-5


class TraceError(ValueError):
    """A trace file is malformed or inconsistent."""


class TraceExhaustedError(TraceError):
    """A replay asked for more steps than were recorded."""


def synthetic_logits(seed: int, prefix: Sequence[int], vocab_size: int, concentration: float) -> np.ndarray:
    """Deterministic pseudo-logits for a prefix.

    concentration scales i.i.d. standard normals keyed by
    (seed, stable hash of prefix); zero concentration means uniform after
    softmax.
    """
    h = stable_prefix_hash(prefix)
    return concentration * keyed_normals(seed, h, vocab_size)


@dataclass(frozen=True)
class SyntheticModel:
    """Deterministic random-logit model.

    With ``correlation`` rho > 0 the logit noise is
    rho * z_shared + sqrt(1 - rho^2) * z_own, where z_shared is keyed by
    ``shared_seed`` (typically the draft model's seed). rho = 1 reproduces
    the shared model's logits exactly; rho = 0 is independent.
    """

    vocab_size: int
    seed: int
    concentration: float = 1.0
    temperature: float = 1.0
    correlation: float = 0.0
    shared_seed: int | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not self.concentration >= 0.0:
            raise ValueError("concentration must be >= 0")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        if self.correlation > 0.0 and self.shared_seed is None:
            raise ValueError("correlation > 0 requires a shared_seed")

    def distribution(self, prefix: Sequence[int]) -> Distribution:
        h = stable_prefix_hash(prefix)
        rho = self.correlation
        if rho == 0.0:
            z = keyed_normals(self.seed, h, self.vocab_size)
        elif rho == 1.0:
            z = keyed_normals(self.shared_seed, h, self.vocab_size)
        else:
            z_shared = keyed_normals(self.shared_seed, h, self.vocab_size)
            z_own = keyed_normals(self.seed, h, self.vocab_size)
            z = rho * z_shared + math.sqrt(1.0 - rho * rho) * z_own
        return softmax_with_temperature(self.concentration * z, self.temperature)


class MarkovModel:
    """Add-lambda smoothed n-gram model over integer tokens.

    p(x | c) = (count(c, x) + lambda) / (count(c, .) + lambda * |V|); a
    context with no observations therefore collapses to uniform.
    """

    __slots__ = ("vocab_size", "order", "smoothing", "_table")

    def __init__(self, vocab_size: int, order: int, smoothing: float,
                 table: dict[tuple[int, ...], np.ndarray]) -> None:
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if order < 1:
            raise ValueError("order must be >= 1")
        if not smoothing > 0.0:
            raise ValueError("smoothing must be > 0")
        self.vocab_size = vocab_size
        self.order = order
        self.smoothing = smoothing
        self._table = table

    @classmethod
    def fit(cls, corpus: Sequence[int], vocab_size: int, order: int = 1,
            smoothing: float = 0.05) -> "MarkovModel":
        tokens = [int(t) for t in corpus]
        for t in tokens:
            if not 0 <= t < vocab_size:
                raise ValueError(f"corpus token {t} outside [0, {vocab_size})")
        table: dict[tuple[int, ...], np.ndarray] = {}
        for i in range(order, len(tokens)):
            ctx = tuple(tokens[i - order:i])
            row = table.get(ctx)
            if row is None:
                row = np.zeros(vocab_size, dtype=np.float64)
                table[ctx] = row
            row[tokens[i]] += 1.0
        return cls(vocab_size, order, smoothing, table)

    def distribution(self, prefix: Sequence[int]) -> Distribution:
        ctx = tuple(int(t) for t in prefix[-self.order:]) if len(prefix) >= self.order else None
        counts = self._table.get(ctx) if ctx is not None else None
        if counts is None:
            counts = np.zeros(self.vocab_size, dtype=np.float64)
        smoothed = counts + self.smoothing
        return Distribution.unchecked(smoothed / smoothed.sum())


def load_corpus(path: str | Path) -> list[int]:
    """Whitespace-separated integer token file."""
    text = Path(path).read_text()
    try:
        return [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise ValueError(f"corpus {path} contains a non-integer token") from exc


def write_trace(path: str | Path, rows: np.ndarray) -> None:
    """Record per-step distributions as dense little-endian f32 rows."""
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 2:
        raise ValueError("trace rows must be a (steps, vocab_size) array")
    steps, vocab_size = arr.shape
    header = TRACE_MAGIC + np.array([TRACE_VERSION], dtype="<u2").tobytes()
    header += np.array([vocab_size, steps], dtype="<u4").tobytes()
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def read_trace(path: str | Path) -> np.ndarray:
    """Load a trace back into float64 rows, validating the header.

    Rows whose sum drifts from 1 by less than the storage tolerance are
    renormalized; larger deviations mean the file is corrupt.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 14 or buf[:4] != TRACE_MAGIC:
        raise TraceError(f"{path} is not a trace file")
    version = int(np.frombuffer(buf, dtype="<u2", count=1, offset=4)[0])
    if version != TRACE_VERSION:
        raise TraceError(f"unsupported trace version {version}")
    vocab_size, steps = (int(x) for x in np.frombuffer(buf, dtype="<u4", count=2, offset=6))
    if vocab_size < 2 or steps < 1:
        raise TraceError(f"trace header has vocab_size={vocab_size}, steps={steps}")
    expected = 14 + 4 * steps * vocab_size
    if len(buf) != expected:
        raise TraceError(f"trace declares {expected} bytes but file has {len(buf)}")
    rows = np.frombuffer(buf, dtype="<f4", offset=14).astype(np.float64)
    rows = rows.reshape(steps, vocab_size)
    out = np.empty_like(rows)
    for i, row in enumerate(rows):
        if np.any(row < 0.0) or not np.all(np.isfinite(row)):
            raise TraceError(f"trace row {i} has invalid probabilities")
        total = row.sum()
        if abs(total - 1.0) >= TRACE_SUM_TOLERANCE or total <= 0.0:
            raise TraceError(f"trace row {i} sums to {total!r}")
        out[i] = row / total if total != 1.0 else row
    return out


class TraceModel:
    """Replays recorded distributions in order; one consumer per instance.

    The cursor advances on every ``distribution`` call whatever the prefix,
    mirroring how the rows were produced (one row per model query).
    """

    __slots__ = ("rows", "_cursor")

    def __init__(self, rows: np.ndarray) -> None:
        self.rows = rows
        self._cursor = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "TraceModel":
        return cls(read_trace(path))

    @property
    def vocab_size(self) -> int:
        return int(self.rows.shape[1])

    @property
    def steps_remaining(self) -> int:
        return int(self.rows.shape[0]) - self._cursor

    def distribution(self, prefix: Sequence[int]) -> Distribution:
        if self._cursor >= self.rows.shape[0]:
            raise TraceExhaustedError(
                f"trace exhausted after {self.rows.shape[0]} steps"
            )
        row = self.rows[self._cursor]
        self._cursor += 1
        return Distribution.unchecked(row.copy())
