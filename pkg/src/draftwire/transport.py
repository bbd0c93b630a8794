"""Server/worker runtime: framed wire protocol plus an in-process twin.

Frame layout (little-endian): u32 body length, u8 kind, u64 correlation id,
then the body. Max frame 64 MiB. Correlation ids strictly increase per
connection; replies echo the request id.

Conversation, orchestrator side:

    HELLO -> HELLO                 version check
    CONFIGURE -> CONFIGURE         vocab, k, weight, gamma, strategy, seed;
                                   resets the worker's prefix mirror
    DRAFT_BROADCAST -> SCORES_UPLOAD
                                   prefix delta + draft tokens out;
                                   mirror checksum + gamma+1 encoded
                                   payloads back
    COMMIT_NOTICE                  committed tokens, no reply
    SHUTDOWN                       no reply, worker exits

Both modes share ``WorkerCore`` for scoring, so a loopback TCP run and an
in-process run execute identical arithmetic in identical order; payload
bytes pass through the same codec either way. Aggregation order is fixed by
worker index regardless of reply arrival order.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .compression import Strategy, TopKPayload, decode_payload, encode_payload, truncate_topk
from .dist import Distribution
from .seeding import stable_prefix_hash
from .specdec import ModelProvider

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024
FRAME_HEADER = struct.Struct("<IBQ")  # body length, kind, correlation id
CONFIGURE_BODY = struct.Struct("<IIdIBQ")  # vocab, k, weight, gamma, strategy, seed
DEFAULT_TIMEOUT = 5.0


class Kind(enum.IntEnum):
    HELLO = 1
    CONFIGURE = 2
    DRAFT_BROADCAST = 3
    SCORES_UPLOAD = 4
    COMMIT_NOTICE = 5
    SHUTDOWN = 6
    ERROR = 7


class FramingError(ValueError):
    """A frame violates the wire format."""


class OversizeFrameError(FramingError):
    """Declared body length exceeds the 64 MiB frame bound."""


class UnknownKindError(FramingError):
    """Frame kind byte is not a known message kind."""


class TruncatedStreamError(FramingError):
    """The stream ended mid-frame."""


class ProtocolError(ValueError):
    """A peer sent a well-formed message at the wrong time."""


class WorkerFailureError(RuntimeError):
    """A decode step failed; the message names the worker."""


@dataclass(frozen=True)
class Message:
    kind: Kind
    corr_id: int
    body: bytes = b""


def frame_encode(m: Message) -> bytes:
    if len(m.body) > MAX_FRAME_BYTES - FRAME_HEADER.size:
        raise OversizeFrameError(f"body of {len(m.body)} bytes exceeds frame bound")
    return FRAME_HEADER.pack(len(m.body), int(m.kind), m.corr_id) + m.body


def frame_decode(read: Callable[[int], bytes]) -> Message:
    """Decode one frame from a blocking reader returning exactly n bytes."""
    header = read(FRAME_HEADER.size)
    if len(header) < FRAME_HEADER.size:
        raise TruncatedStreamError("stream ended inside a frame header")
    body_len, kind_byte, corr_id = FRAME_HEADER.unpack(header)
    if body_len > MAX_FRAME_BYTES - FRAME_HEADER.size:
        raise OversizeFrameError(f"frame declares {body_len}-byte body")
    try:
        kind = Kind(kind_byte)
    except ValueError:
        raise UnknownKindError(f"unknown message kind {kind_byte}") from None
    body = read(body_len) if body_len else b""
    if len(body) < body_len:
        raise TruncatedStreamError("stream ended inside a frame body")
    return Message(kind=kind, corr_id=corr_id, body=body)


# ---------------------------------------------------------------------------
# Body packers


def pack_hello() -> bytes:
    return struct.pack("<H", PROTOCOL_VERSION)


def unpack_hello(body: bytes) -> int:
    if len(body) != 2:
        raise FramingError("HELLO body must be 2 bytes")
    return struct.unpack("<H", body)[0]


@dataclass(frozen=True)
class WorkerConfig:
    vocab_size: int
    k: int
    weight: float
    gamma: int
    strategy: Strategy
    seed_material: int


def pack_configure(cfg: WorkerConfig) -> bytes:
    return CONFIGURE_BODY.pack(cfg.vocab_size, cfg.k, cfg.weight, cfg.gamma,
                               int(cfg.strategy), cfg.seed_material)


def unpack_configure(body: bytes) -> WorkerConfig:
    if len(body) != CONFIGURE_BODY.size:
        raise FramingError(f"CONFIGURE body must be {CONFIGURE_BODY.size} bytes")
    vocab, k, w, gamma, strat, seed = CONFIGURE_BODY.unpack(body)
    try:
        strategy = Strategy(strat)
    except ValueError:
        raise FramingError(f"unknown strategy byte {strat}") from None
    return WorkerConfig(vocab, k, w, gamma, strategy, seed)


def _pack_tokens(tokens: Sequence[int]) -> bytes:
    arr = np.asarray(tokens, dtype="<u4")
    return struct.pack("<I", arr.size) + arr.tobytes()


def _unpack_tokens(body: bytes, offset: int) -> tuple[tuple[int, ...], int]:
    if len(body) < offset + 4:
        raise FramingError("token list header truncated")
    (count,) = struct.unpack_from("<I", body, offset)
    end = offset + 4 + 4 * count
    if len(body) < end:
        raise FramingError("token list truncated")
    toks = np.frombuffer(body, dtype="<u4", count=count, offset=offset + 4)
    return tuple(int(t) for t in toks), end


def pack_draft_broadcast(delta: Sequence[int], draft: Sequence[int]) -> bytes:
    return _pack_tokens(delta) + _pack_tokens(draft)


def unpack_draft_broadcast(body: bytes) -> tuple[tuple[int, ...], tuple[int, ...]]:
    delta, off = _unpack_tokens(body, 0)
    draft, off = _unpack_tokens(body, off)
    if off != len(body):
        raise FramingError("trailing bytes after DRAFT_BROADCAST body")
    return delta, draft


def pack_scores(checksum: int, payload_bodies: Sequence[bytes]) -> bytes:
    parts = [struct.pack("<QI", checksum, len(payload_bodies))]
    for b in payload_bodies:
        parts.append(struct.pack("<I", len(b)))
        parts.append(b)
    return b"".join(parts)


def unpack_scores(body: bytes) -> tuple[int, list[bytes]]:
    if len(body) < 12:
        raise FramingError("SCORES_UPLOAD body truncated")
    checksum, count = struct.unpack_from("<QI", body, 0)
    off = 12
    bodies: list[bytes] = []
    for _ in range(count):
        if len(body) < off + 4:
            raise FramingError("payload length header truncated")
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        if len(body) < off + n:
            raise FramingError("payload bytes truncated")
        bodies.append(body[off:off + n])
        off += n
    if off != len(body):
        raise FramingError("trailing bytes after SCORES_UPLOAD body")
    return checksum, bodies


def pack_commit(tokens: Sequence[int]) -> bytes:
    return _pack_tokens(tokens)


def unpack_commit(body: bytes) -> tuple[int, ...]:
    tokens, off = _unpack_tokens(body, 0)
    if off != len(body):
        raise FramingError("trailing bytes after COMMIT_NOTICE body")
    return tokens


def expected_upload_bytes(gamma: int, k: int) -> int:
    """Wire bytes of one SCORES_UPLOAD frame: header + checksum + payloads."""
    payload = 8 + 8 * k
    return FRAME_HEADER.size + 12 + (gamma + 1) * (4 + payload)


# ---------------------------------------------------------------------------
# Worker side

ModelFactory = Callable[[int, int, int], ModelProvider]
"""(vocab_size, seed_material, worker_index) -> provider."""


class WorkerCore:
    """Scoring state machine shared by the TCP worker and in-process mode.

    Holds the prefix mirror and the configured model; scores gamma+1
    positions per draft block and encodes each to payload bytes. Exposes
    the pre-truncation distributions only when asked (instrumented runs).
    """

    def __init__(self, index: int, factory: ModelFactory, *, expose_shadows: bool = False) -> None:
        self.index = index
        self._factory = factory
        self._expose_shadows = expose_shadows
        self._config: WorkerConfig | None = None
        self._model: ModelProvider | None = None
        self._mirror: list[int] = []

    @property
    def configured(self) -> bool:
        return self._config is not None

    @property
    def mirror(self) -> tuple[int, ...]:
        return tuple(self._mirror)

    def configure(self, cfg: WorkerConfig) -> None:
        if not 1 <= cfg.k <= cfg.vocab_size:
            raise ProtocolError(f"k={cfg.k} out of range [1, {cfg.vocab_size}]")
        if cfg.gamma < 1:
            raise ProtocolError("gamma must be >= 1")
        self._model = self._factory(cfg.vocab_size, cfg.seed_material, self.index)
        self._config = cfg
        self._mirror = []

    def handle_draft(
        self, delta: Sequence[int], draft: Sequence[int]
    ) -> tuple[int, list[bytes], list[Distribution] | None]:
        if self._config is None or self._model is None:
            raise ProtocolError("not configured")
        cfg = self._config
        if len(draft) != cfg.gamma:
            raise ProtocolError(f"expected {cfg.gamma} draft tokens, got {len(draft)}")
        self._mirror.extend(int(t) for t in delta)
        checksum = stable_prefix_hash(self._mirror)
        bodies: list[bytes] = []
        shadows: list[Distribution] | None = [] if self._expose_shadows else None
        context = list(self._mirror)
        for t in range(cfg.gamma + 1):
            d = self._model.distribution(tuple(context + [int(x) for x in draft[:t]]))
            if d.vocab_size != cfg.vocab_size:
                raise ProtocolError(
                    f"model vocabulary {d.vocab_size} != configured {cfg.vocab_size}"
                )
            bodies.append(encode_payload(truncate_topk(d, cfg.k)))
            if shadows is not None:
                shadows.append(d)
        return checksum, bodies, shadows

    def handle_commit(self, tokens: Sequence[int]) -> None:
        if self._config is None:
            raise ProtocolError("not configured")
        self._mirror.extend(int(t) for t in tokens)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def worker_serve(
    host: str,
    port: int,
    factory: ModelFactory,
    *,
    worker_index: int = 0,
    ready: Callable[[int], None] | None = None,
) -> None:
    """Serve score requests until a SHUTDOWN frame arrives.

    One session at a time; a dropped connection returns to accept. The
    bound port (useful with port 0) is reported through ``ready``.
    """
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        if ready is not None:
            ready(listener.getsockname()[1])
        while True:
            conn, _ = listener.accept()
            with conn:
                # frames are tiny and strictly request/response; Nagle plus
                # delayed ACK would stall every exchange
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                if _serve_session(conn, factory, worker_index):
                    return


def _serve_session(conn: socket.socket, factory: ModelFactory, worker_index: int) -> bool:
    """Handle one connection; True means SHUTDOWN was received."""
    core = WorkerCore(worker_index, factory)
    greeted = False
    last_corr = -1

    def reply(kind: Kind, corr_id: int, body: bytes = b"") -> None:
        conn.sendall(frame_encode(Message(kind, corr_id, body)))

    while True:
        try:
            msg = frame_decode(lambda n: _read_exact(conn, n))
        except TruncatedStreamError:
            return False  # peer went away; back to accept
        except FramingError as exc:
            reply(Kind.ERROR, 0, str(exc).encode())
            return False
        if msg.corr_id <= last_corr:
            reply(Kind.ERROR, msg.corr_id, b"correlation id did not increase")
            return False
        last_corr = msg.corr_id
        try:
            if msg.kind == Kind.SHUTDOWN:
                return True
            if msg.kind == Kind.HELLO:
                unpack_hello(msg.body)
                greeted = True
                reply(Kind.HELLO, msg.corr_id, pack_hello())
            elif not greeted:
                raise ProtocolError("expected HELLO first")
            elif msg.kind == Kind.CONFIGURE:
                core.configure(unpack_configure(msg.body))
                reply(Kind.CONFIGURE, msg.corr_id)
            elif msg.kind == Kind.DRAFT_BROADCAST:
                delta, draft = unpack_draft_broadcast(msg.body)
                checksum, bodies, _ = core.handle_draft(delta, draft)
                reply(Kind.SCORES_UPLOAD, msg.corr_id, pack_scores(checksum, bodies))
            elif msg.kind == Kind.COMMIT_NOTICE:
                core.handle_commit(unpack_commit(msg.body))
            else:
                raise ProtocolError(f"unexpected {msg.kind.name}")
        except (ProtocolError, FramingError, ValueError) as exc:
            reply(Kind.ERROR, msg.corr_id, str(exc).encode())
            return False


# ---------------------------------------------------------------------------
# Orchestrator side


@dataclass(frozen=True)
class ScoreResult:
    """Decoded uploads for one draft block, ordered by worker index."""

    payloads: list[list[TopKPayload]]  # M x (gamma + 1)
    checksums: list[int]
    uplink_bytes: list[int]
    shadows: list[list[Distribution]] | None = None


class WorkerPool(Protocol):
    """What the decode engine needs from a set of workers."""

    def configure(self, configs: Sequence[WorkerConfig]) -> None: ...

    def score_block(self, delta: Sequence[int], draft: Sequence[int]) -> ScoreResult: ...

    def commit(self, tokens: Sequence[int]) -> None: ...

    def close(self) -> None: ...


class InProcessPool:
    """Worker pool living in the orchestrator process.

    Payload bytes still pass through encode/decode, so results are
    bit-identical to the TCP pool; uplink accounting mirrors the frames
    that would have crossed the wire.
    """

    def __init__(self, m: int, factory: ModelFactory, *, instrumented: bool = False) -> None:
        self._cores = [WorkerCore(i, factory, expose_shadows=instrumented) for i in range(m)]
        self._instrumented = instrumented
        self.uplink_totals = [0] * m

    def configure(self, configs: Sequence[WorkerConfig]) -> None:
        if len(configs) != len(self._cores):
            raise ValueError("one config per worker required")
        for i, (core, cfg) in enumerate(zip(self._cores, configs)):
            try:
                core.configure(cfg)
            except (ProtocolError, ValueError) as exc:
                raise WorkerFailureError(f"worker {i}: {exc}") from exc

    def score_block(self, delta: Sequence[int], draft: Sequence[int]) -> ScoreResult:
        payloads: list[list[TopKPayload]] = []
        checksums: list[int] = []
        uplink: list[int] = []
        shadows: list[list[Distribution]] = []
        for i, core in enumerate(self._cores):
            try:
                checksum, bodies, shadow = core.handle_draft(delta, draft)
            except (ProtocolError, ValueError) as exc:
                raise WorkerFailureError(f"worker {i}: {exc}") from exc
            payloads.append([decode_payload(b) for b in bodies])
            checksums.append(checksum)
            frame_bytes = FRAME_HEADER.size + len(pack_scores(checksum, bodies))
            uplink.append(frame_bytes)
            self.uplink_totals[i] += frame_bytes
            if shadow is not None:
                shadows.append(shadow)
        return ScoreResult(
            payloads=payloads,
            checksums=checksums,
            uplink_bytes=uplink,
            shadows=shadows if self._instrumented else None,
        )

    def commit(self, tokens: Sequence[int]) -> None:
        for core in self._cores:
            core.handle_commit(tokens)

    def close(self) -> None:
        pass


class TcpPool:
    """Worker pool over framed TCP connections.

    Broadcasts are written to every worker before any reply is read, so
    workers score concurrently; replies are read in worker-index order,
    which also fixes aggregation order. Any timeout, ERROR reply, or
    malformed response fails the decode step naming the worker.
    """

    def __init__(self, endpoints: Sequence[tuple[str, int]], *, timeout: float = DEFAULT_TIMEOUT) -> None:
        self._socks: list[socket.socket] = []
        self._corr = 0
        self.uplink_totals = [0] * len(endpoints)
        try:
            for host, port in endpoints:
                sock = socket.create_connection((host, port), timeout=timeout)
                sock.settimeout(timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._socks.append(sock)
            for i in range(len(self._socks)):
                reply = self._request(i, Kind.HELLO, pack_hello())
                if unpack_hello(reply.body) != PROTOCOL_VERSION:
                    raise WorkerFailureError(f"worker {i}: protocol version mismatch")
        except Exception:
            self.close()
            raise

    def _next_corr(self) -> int:
        self._corr += 1
        return self._corr

    def _send(self, i: int, kind: Kind, body: bytes, corr_id: int) -> None:
        try:
            self._socks[i].sendall(frame_encode(Message(kind, corr_id, body)))
        except OSError as exc:
            raise WorkerFailureError(f"worker {i}: send failed ({exc})") from exc

    def _recv(self, i: int, expect: Kind, corr_id: int) -> Message:
        try:
            msg = frame_decode(lambda n: _read_exact(self._socks[i], n))
        except socket.timeout as exc:
            raise WorkerFailureError(f"worker {i}: timed out waiting for {expect.name}") from exc
        except (FramingError, OSError) as exc:
            raise WorkerFailureError(f"worker {i}: {exc}") from exc
        if msg.kind == Kind.ERROR:
            raise WorkerFailureError(f"worker {i}: remote error: {msg.body.decode(errors='replace')}")
        if msg.kind != expect:
            raise WorkerFailureError(f"worker {i}: expected {expect.name}, got {msg.kind.name}")
        if msg.corr_id != corr_id:
            raise WorkerFailureError(f"worker {i}: correlation id mismatch")
        return msg

    def _request(self, i: int, kind: Kind, body: bytes) -> Message:
        corr = self._next_corr()
        self._send(i, kind, body, corr)
        return self._recv(i, kind, corr)

    def configure(self, configs: Sequence[WorkerConfig]) -> None:
        if len(configs) != len(self._socks):
            raise ValueError("one config per worker required")
        corrs = []
        for i, cfg in enumerate(configs):
            corr = self._next_corr()
            self._send(i, Kind.CONFIGURE, pack_configure(cfg), corr)
            corrs.append(corr)
        for i, corr in enumerate(corrs):
            self._recv(i, Kind.CONFIGURE, corr)

    def score_block(self, delta: Sequence[int], draft: Sequence[int]) -> ScoreResult:
        body = pack_draft_broadcast(delta, draft)
        corrs = []
        for i in range(len(self._socks)):
            corr = self._next_corr()
            self._send(i, Kind.DRAFT_BROADCAST, body, corr)
            corrs.append(corr)
        payloads: list[list[TopKPayload]] = []
        checksums: list[int] = []
        uplink: list[int] = []
        for i, corr in enumerate(corrs):
            msg = self._recv(i, Kind.SCORES_UPLOAD, corr)
            try:
                checksum, bodies = unpack_scores(msg.body)
                decoded = [decode_payload(b) for b in bodies]
            except (FramingError, ValueError) as exc:
                raise WorkerFailureError(f"worker {i}: bad upload ({exc})") from exc
            payloads.append(decoded)
            checksums.append(checksum)
            frame_bytes = FRAME_HEADER.size + len(msg.body)
            uplink.append(frame_bytes)
            self.uplink_totals[i] += frame_bytes
        return ScoreResult(payloads=payloads, checksums=checksums, uplink_bytes=uplink)

    def commit(self, tokens: Sequence[int]) -> None:
        body = pack_commit(tokens)
        for i in range(len(self._socks)):
            self._send(i, Kind.COMMIT_NOTICE, body, self._next_corr())

    def close(self) -> None:
        for i, sock in enumerate(self._socks):
            try:
                sock.sendall(frame_encode(Message(Kind.SHUTDOWN, self._corr + 1 + i)))
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        self._corr += len(self._socks)
