"""Two simulated transports plus the wire codec for protocol frames.

Wireless carries the radio leg: an unauthenticated transport handshake
derives a link key, and every frame passes through the registered
interceptor, which may read, drop, modify, reorder, or inject.  Because
the handshake is unauthenticated, a terminating interceptor ends up
holding a link key for each leg — the parties cannot tell.  The CAN bus
is the plug: frames are deliverable only between endpoints that are
physically connected, travel verbatim, and are invisible to any
interceptor.

Channel assignment used by the protocol: the auth request, the cyber
challenge response, and the closing frame travel on Wireless; the frame
carrying the physical challenge and all metering frames travel on the
CAN bus.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from . import encoding as enc
from .crypto import DeterministicRng, sha256, sym_decrypt, sym_encrypt
from .simtime import Clock

# Fixed constant marking an authentication request from the vehicle side.
AUTH_REQUEST_TAG = b"AUTH-REQ"


class ChannelError(Exception):
    pass


class TruncatedError(ChannelError):
    pass


class UnknownKindError(ChannelError):
    pass


class BadLengthError(ChannelError):
    pass


class NotConnectedError(ChannelError):
    """CAN-bus frame between endpoints that are not plugged together."""


class UnreachableError(ChannelError):
    """Wireless peer is not registered with the fabric."""


class Channel(Enum):
    WIRELESS = "wireless"
    CAN_BUS = "can_bus"


# ---------------------------------------------------------------------------
# Protocol frames
# ---------------------------------------------------------------------------

_KIND_M1 = 0x01
_KIND_M2 = 0x02
_KIND_M3 = 0x03
_KIND_M4 = 0x04
_KIND_METER = 0x05
_KIND_SESSION_DATA = 0x06


@dataclass(frozen=True)
class MessageM1:
    """Auth request: pseudonym, request tag, plain timestamp. Not encrypted."""

    pid: str
    t1_ms: int


@dataclass(frozen=True)
class MessageM2:
    ciphertext: bytes


@dataclass(frozen=True)
class MessageM3:
    ciphertext: bytes


@dataclass(frozen=True)
class MessageM4:
    ciphertext: bytes


@dataclass(frozen=True)
class MeterFrame:
    """Cumulative meter reading for one slot, reported each tick."""

    source_ev: bool
    slot: int
    cumulative_milli_kwh: int
    tick: int


@dataclass(frozen=True)
class SessionDataFrame:
    """Transaction-phase payload under the session key."""

    nonce: bytes
    ciphertext: bytes


Message = Union[MessageM1, MessageM2, MessageM3, MessageM4, MeterFrame, SessionDataFrame]

_CT_KINDS = {MessageM2: _KIND_M2, MessageM3: _KIND_M3, MessageM4: _KIND_M4}
_KIND_CTS = {v: k for k, v in _CT_KINDS.items()}


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, MessageM1):
        return (
            bytes([_KIND_M1])
            + enc.enc_str(msg.pid)
            + AUTH_REQUEST_TAG
            + enc.enc_u64(msg.t1_ms)
        )
    if type(msg) in _CT_KINDS:
        return bytes([_CT_KINDS[type(msg)]]) + enc.enc_bytes(msg.ciphertext)
    if isinstance(msg, MeterFrame):
        return (
            bytes([_KIND_METER, 1 if msg.source_ev else 0])
            + enc.enc_u32(msg.slot)
            + enc.enc_i64(msg.cumulative_milli_kwh)
            + enc.enc_u64(msg.tick)
        )
    if isinstance(msg, SessionDataFrame):
        if len(msg.nonce) != 12:
            raise ValueError("session frame nonce must be 12 bytes")
        return bytes([_KIND_SESSION_DATA]) + msg.nonce + enc.enc_bytes(msg.ciphertext)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def decode_message(data: bytes) -> Message:
    if not data:
        raise TruncatedError("empty frame")
    kind = data[0]
    r = enc.Reader(data[1:])
    try:
        if kind == _KIND_M1:
            pid = r.string()
            tag = r.take(len(AUTH_REQUEST_TAG))
            if tag != AUTH_REQUEST_TAG:
                raise BadLengthError("bad auth request tag")
            msg: Message = MessageM1(pid=pid, t1_ms=r.u64())
        elif kind in _KIND_CTS:
            msg = _KIND_CTS[kind](ciphertext=r.bytestring())
        elif kind == _KIND_METER:
            source = r.take(1)[0]
            if source not in (0, 1):
                raise BadLengthError("bad meter source byte")
            msg = MeterFrame(
                source_ev=source == 1,
                slot=r.u32(),
                cumulative_milli_kwh=r.i64(),
                tick=r.u64(),
            )
        elif kind == _KIND_SESSION_DATA:
            msg = SessionDataFrame(nonce=r.take(12), ciphertext=r.bytestring())
        else:
            raise UnknownKindError(f"unknown kind byte 0x{kind:02x}")
    except enc.DecodeError as exc:
        raise TruncatedError(str(exc)) from exc
    if r.remaining():
        raise BadLengthError(f"{r.remaining()} trailing bytes")
    return msg


# ---------------------------------------------------------------------------
# Envelopes and interception
# ---------------------------------------------------------------------------

@dataclass
class Envelope:
    channel: Channel
    sender: str
    receiver: str
    body: bytes
    transport_ct: bytes = b""


class Interceptor:
    """Adversary hook on the wireless channel.

    Override `on_frame` to act; it sees the frame body in the clear
    (the terminated transport gives the interceptor both leg keys) and
    returns a list of (receiver, body) deliveries — an empty list drops
    the frame, several entries inject extras.
    """

    def on_handshake(self, a: str, b: str, leg_keys: dict[str, bytes]) -> None:
        pass

    def on_frame(self, env: Envelope) -> list[tuple[str, bytes]]:
        return [(env.receiver, env.body)]


@dataclass
class _TransportSession:
    keys: dict[str, bytes]          # endpoint -> link key for its leg
    terminated: bool
    send_counters: dict[str, int]


class ChannelFabric:
    """Owns queues, plug state, transport sessions, and the capture log."""

    def __init__(self, rng: DeterministicRng, clock: Clock):
        self._rng = rng
        self._clock = clock
        self._queues: dict[tuple[str, Channel], deque[Envelope]] = {}
        self._endpoints: set[str] = set()
        self._plugged: set[frozenset[str]] = set()
        self._sessions: dict[frozenset[str], _TransportSession] = {}
        self._interceptor: Optional[Interceptor] = None
        self.capture: list[dict] = []

    # -- topology -----------------------------------------------------------

    def register_endpoint(self, endpoint: str) -> None:
        self._endpoints.add(endpoint)
        self._queues.setdefault((endpoint, Channel.WIRELESS), deque())
        self._queues.setdefault((endpoint, Channel.CAN_BUS), deque())

    def connect_plug(self, a: str, b: str) -> None:
        self._plugged.add(frozenset((a, b)))

    def disconnect_plug(self, a: str, b: str) -> None:
        self._plugged.discard(frozenset((a, b)))

    def is_plugged(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self._plugged

    def install_interceptor(self, interceptor: Optional[Interceptor]) -> None:
        self._interceptor = interceptor

    # -- transport handshake --------------------------------------------------

    def transport_handshake(self, a: str, b: str) -> None:
        """Unauthenticated ephemeral key agreement over Wireless.

        Honest case: one shared link key.  With a terminating interceptor
        installed, each leg gets its own key and the interceptor is handed
        both; the endpoints cannot tell the difference.
        """
        if a not in self._endpoints or b not in self._endpoints:
            raise UnreachableError(f"endpoint not reachable on wireless: {a!r}/{b!r}")
        pair = frozenset((a, b))
        if self._interceptor is not None:
            keys = {a: self._fresh_key(), b: self._fresh_key()}
            self._sessions[pair] = _TransportSession(
                keys=keys, terminated=True, send_counters={a: 0, b: 0}
            )
            self._interceptor.on_handshake(a, b, dict(keys))
        else:
            key = self._fresh_key()
            self._sessions[pair] = _TransportSession(
                keys={a: key, b: key}, terminated=False, send_counters={a: 0, b: 0}
            )

    def _fresh_key(self) -> bytes:
        return sha256(b"transport-link-key" + self._rng.randbytes(32))

    def transport_key_of(self, endpoint: str, peer: str) -> bytes | None:
        """The link key `endpoint` holds for its session with `peer`."""
        session = self._sessions.get(frozenset((endpoint, peer)))
        return session.keys.get(endpoint) if session else None

    # -- send / receive ---------------------------------------------------------

    def send(self, env: Envelope) -> None:
        if env.channel is Channel.CAN_BUS:
            if not self.is_plugged(env.sender, env.receiver):
                raise NotConnectedError(
                    f"{env.sender} and {env.receiver} share no physical link"
                )
            env.transport_ct = env.body  # wired frames travel verbatim
            self._capture(env)
            self._queues[(env.receiver, Channel.CAN_BUS)].append(env)
            return

        if env.receiver not in self._endpoints:
            raise UnreachableError(f"unknown wireless endpoint {env.receiver!r}")
        session = self._sessions.get(frozenset((env.sender, env.receiver)))
        env.transport_ct = self._wrap(session, env.sender, env.body)
        self._capture(env)
        if self._interceptor is not None:
            for receiver, body in self._interceptor.on_frame(env):
                # Second radio leg: the interceptor re-sends toward the
                # receiver under the receiver's leg key.
                out = Envelope(Channel.WIRELESS, env.sender, receiver, body)
                out_session = self._sessions.get(frozenset((env.sender, receiver)))
                out.transport_ct = self._wrap(out_session, receiver, body)
                self._capture(out)
                self._queues[(receiver, Channel.WIRELESS)].append(out)
        else:
            self._queues[(env.receiver, Channel.WIRELESS)].append(env)

    def _wrap(self, session: _TransportSession | None, leg_owner: str, body: bytes) -> bytes:
        # Pre-handshake frames travel bare; that is what an optional,
        # unauthenticated transport layer buys.
        if session is None:
            return body
        counter = session.send_counters.get(leg_owner, 0)
        session.send_counters[leg_owner] = counter + 1
        nonce = counter.to_bytes(12, "big")
        return nonce + sym_encrypt(session.keys[leg_owner], nonce, body)

    def recv(self, endpoint: str, channel: Channel) -> Envelope | None:
        queue = self._queues.get((endpoint, channel))
        if not queue:
            return None
        return queue.popleft()

    # -- capture -------------------------------------------------------------------

    def _capture(self, env: Envelope) -> None:
        self.capture.append(
            {
                "tick": self._clock.ticks,
                "channel": env.channel.value,
                "sender": env.sender,
                "receiver": env.receiver,
                "body": env.body.hex(),
                "wire": env.transport_ct.hex(),
            }
        )

    def write_capture(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.capture:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
