"""Generation driver: speculative decode loop over a worker pool.

One sample = one seeded generation. Per block the driver drafts gamma
tokens, fans the draft out to the workers, aggregates their decoded top-K
payloads position by position, verifies the block, and commits the emitted
tokens everywhere (local prefix and worker mirrors).

RNG discipline (the determinism contract): a sample owns two streams keyed
by (sample seed, role) - one consumed only by draft sampling, one only by
verification (a uniform per examined step, then one sampling draw). Worker
scoring consumes no randomness at all, so transport mode and completion
order cannot change the transcript.

``run_reference_sample`` is the uncompressed baseline: identical flow and
RNG schedule, but worker distributions reach aggregation as dense
float32-rounded vectors without the top-K/codec machinery. At k = |V| the
compressed path must reproduce it byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import TopKProfile, WeightVector, aggregate, aggregate_compressed
from .compression import Strategy
from .dist import Distribution
from .dist import sample as sample_token
from .metrics import StepMetrics, instrument_position
from .seeding import (
    MASK64,
    ROLE_AUTOREGRESSIVE,
    ROLE_DRAFT_SAMPLING,
    ROLE_VERIFICATION,
    stable_prefix_hash,
    stream,
)
from .specdec import (
    DraftBlock,
    ModelProvider,
    PrefixState,
    VerificationOutcome,
    generate_draft,
    verify_block,
)
from .transport import WorkerConfig, WorkerFailureError, WorkerPool


@dataclass(frozen=True)
class SessionSettings:
    """Static shape of a generation run, independent of the seed."""

    vocab_size: int
    gamma: int
    strategy: Strategy
    weights: WeightVector
    k_profile: TopKProfile
    max_tokens: int
    prompt: tuple[int, ...] = (0,)
    eos: int | None = None

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if len(self.weights) != len(self.k_profile):
            raise ValueError("weights and k profile must cover the same workers")
        if not self.prompt:
            raise ValueError("prompt must contain at least one token")
        for t in self.prompt:
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"prompt token {t} outside vocabulary")

    @property
    def m(self) -> int:
        return len(self.weights)

    def worker_configs(self, sample_seed: int) -> list[WorkerConfig]:
        return [
            WorkerConfig(
                vocab_size=self.vocab_size,
                k=self.k_profile[i],
                weight=self.weights[i],
                gamma=self.gamma,
                strategy=self.strategy,
                seed_material=sample_seed & MASK64,
            )
            for i in range(self.m)
        ]


@dataclass(frozen=True)
class BlockRecord:
    """Instrumented shadow data for one draft block.

    ``worker_dists[i][t]`` is worker i's exact float64 distribution at
    scored position t (t = gamma is the bonus position), captured before
    truncation and the 32-bit wire.
    """

    draft_tokens: tuple[int, ...]
    q_dists: tuple[Distribution, ...]
    worker_dists: tuple[tuple[Distribution, ...], ...]


@dataclass(frozen=True)
class SampleResult:
    tokens: tuple[int, ...]  # committed output, prompt excluded
    blocks: int
    drafted: int
    accepted: int
    uplink_bytes: int
    records: tuple[BlockRecord, ...]


def sample_seed_for(seed: int, sample_index: int) -> int:
    return (seed + sample_index) & MASK64


def _commit(
    prefix: PrefixState,
    outcome: VerificationOutcome,
    settings: SessionSettings,
    emitted_so_far: int,
) -> tuple[tuple[int, ...], bool]:
    """Truncate a block's emission at EOS / max_tokens and extend the prefix."""
    tokens = list(outcome.emitted_tokens)
    done = False
    if settings.eos is not None and settings.eos in tokens:
        tokens = tokens[: tokens.index(settings.eos) + 1]
        done = True
    room = settings.max_tokens - emitted_so_far
    if len(tokens) >= room:
        tokens = tokens[:room]
        done = True
    prefix.extend(tokens)
    return tuple(tokens), done


def run_sample(
    draft_model: ModelProvider,
    pool: WorkerPool,
    settings: SessionSettings,
    sample_seed: int,
    *,
    instrumented: bool = False,
) -> SampleResult:
    """One seeded generation through a worker pool."""
    pool.configure(settings.worker_configs(sample_seed))
    draft_rng = stream(sample_seed, ROLE_DRAFT_SAMPLING)
    verify_rng = stream(sample_seed, ROLE_VERIFICATION)

    prefix = PrefixState(settings.prompt)
    synced = 0  # prefix tokens already reflected in worker mirrors
    emitted: list[int] = []
    records: list[BlockRecord] = []
    blocks = drafted = accepted = uplink = 0

    while True:
        draft = generate_draft(draft_model, prefix, settings.gamma, draft_rng)
        delta = prefix.tokens[synced:]
        result = pool.score_block(delta, draft.tokens)
        synced = len(prefix)
        expected_sum = stable_prefix_hash(prefix.tokens)
        for i, checksum in enumerate(result.checksums):
            if checksum != expected_sum:
                raise WorkerFailureError(f"worker {i}: prefix mirror diverged")
        uplink += sum(result.uplink_bytes)

        p_bars = [
            aggregate_compressed(
                [result.payloads[i][t] for i in range(settings.m)],
                settings.weights,
                settings.strategy,
            )
            for t in range(settings.gamma + 1)
        ]
        outcome = verify_block(draft, p_bars, verify_rng)
        blocks += 1
        drafted += settings.gamma
        accepted += outcome.accepted_count

        if instrumented:
            if result.shadows is None:
                raise WorkerFailureError("pool does not expose shadow distributions")
            records.append(
                BlockRecord(
                    draft_tokens=draft.tokens,
                    q_dists=draft.draft_dists,
                    worker_dists=tuple(tuple(s) for s in result.shadows),
                )
            )

        committed, done = _commit(prefix, outcome, settings, len(emitted))
        emitted.extend(committed)
        pool.commit(committed)
        synced += len(committed)
        if done:
            return SampleResult(
                tokens=tuple(emitted),
                blocks=blocks,
                drafted=drafted,
                accepted=accepted,
                uplink_bytes=uplink,
                records=tuple(records),
            )


def run_reference_sample(
    draft_model: ModelProvider,
    worker_models: Sequence[ModelProvider],
    settings: SessionSettings,
    sample_seed: int,
    *,
    record: bool = True,
) -> SampleResult:
    """Uncompressed baseline: dense f32 uplink, no top-K, no codec.

    Matches ``run_sample``'s RNG schedule exactly, so a lossless k profile
    must reproduce its transcript bitwise. The recorded shadows feed
    offline sweeps and trace files.
    """
    if len(worker_models) != settings.m:
        raise ValueError("one worker model per weight required")
    draft_rng = stream(sample_seed, ROLE_DRAFT_SAMPLING)
    verify_rng = stream(sample_seed, ROLE_VERIFICATION)

    prefix = PrefixState(settings.prompt)
    emitted: list[int] = []
    records: list[BlockRecord] = []
    blocks = drafted = accepted = 0

    while True:
        draft = generate_draft(draft_model, prefix, settings.gamma, draft_rng)
        context = list(prefix.tokens)
        worker_dists: list[list[Distribution]] = []
        for model in worker_models:
            dists = [
                model.distribution(tuple(context + list(draft.tokens[:t])))
                for t in range(settings.gamma + 1)
            ]
            worker_dists.append(dists)
        p_bars = [
            aggregate(
                [
                    Distribution.unchecked(
                        worker_dists[i][t].probs.astype(np.float32).astype(np.float64)
                    )
                    for i in range(settings.m)
                ],
                settings.weights,
            )
            for t in range(settings.gamma + 1)
        ]
        outcome = verify_block(draft, p_bars, verify_rng)
        blocks += 1
        drafted += settings.gamma
        accepted += outcome.accepted_count

        if record:
            records.append(
                BlockRecord(
                    draft_tokens=draft.tokens,
                    q_dists=draft.draft_dists,
                    worker_dists=tuple(tuple(d) for d in worker_dists),
                )
            )

        committed, done = _commit(prefix, outcome, settings, len(emitted))
        emitted.extend(committed)
        if done:
            return SampleResult(
                tokens=tuple(emitted),
                blocks=blocks,
                drafted=drafted,
                accepted=accepted,
                uplink_bytes=0,
                records=tuple(records),
            )


def run_autoregressive_sample(
    worker_models: Sequence[ModelProvider],
    weights: WeightVector,
    settings: SessionSettings,
    sample_seed: int,
) -> SampleResult:
    """No speculation: sample each token directly from the dense average.

    Uses its own RNG role with one draw per committed token; serves as the
    distribution-level baseline that speculative decoding must match.
    """
    rng = stream(sample_seed, ROLE_AUTOREGRESSIVE)
    prefix = PrefixState(settings.prompt)
    emitted: list[int] = []
    while len(emitted) < settings.max_tokens:
        dense = [
            Distribution.unchecked(
                m.distribution(prefix.tokens).probs.astype(np.float32).astype(np.float64)
            )
            for m in worker_models
        ]
        p_bar = aggregate(dense, weights)
        tok = sample_token(p_bar, rng)
        emitted.append(tok)
        prefix.extend((tok,))
        if settings.eos is not None and tok == settings.eos:
            break
    return SampleResult(
        tokens=tuple(emitted),
        blocks=len(emitted),
        drafted=0,
        accepted=0,
        uplink_bytes=0,
        records=(),
    )


def block_step_metrics(
    record: BlockRecord,
    weights: WeightVector,
    k_profile: TopKProfile,
) -> list[StepMetrics]:
    """Score every position of a recorded block at the given k profile.

    Draft positions carry acceptance metrics; the bonus position only has
    distortion metrics. Pure float64 math over the shadows, so the same
    record can be re-scored for any number of profiles.
    """
    gamma = len(record.draft_tokens)
    out: list[StepMetrics] = []
    for t in range(gamma + 1):
        q = record.q_dists[t] if t < gamma else None
        dists = [record.worker_dists[i][t] for i in range(len(weights))]
        out.append(instrument_position(dists, q, weights, k_profile))
    return out
