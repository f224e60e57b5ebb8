"""EV and EVCS authentication state machines.

The handshake is a four-frame mutual challenge-response:

  M1  EV -> EVCS   pseudonym, auth request, plain timestamp T1
  M2  EVCS -> EV   Enc_user(C_cyber | station id | T2),  T2 = H(T1)
  M3  EV -> EVCS   Enc_evcs(C_cyber | C_physical | T3),  T3 = H(T2), wired
  M4  EVCS -> EV   Enc_user(C_physical | T4),            T4 = H(T3)

Each side aborts on the first failed check: decryption, timestamp-chain
link, or challenge echo.  After M4 both sides verify the peer's
credential and only then derive the session key; the pseudonym is
consumed in the same step so it can never authenticate twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import encoding as enc
from .channels import MessageM1, MessageM2, MessageM3, MessageM4
from .crypto import (
    CHALLENGE_LEN,
    DeterministicRng,
    TamperedError,
    derive_session_key,
    hash_timestamp,
    pk_decrypt,
    pk_encrypt,
    random_challenge,
    sha256,
)
from .ledger import Ledger
from .pki import CertificateAuthority, PkiError, PseudoIdentity, VerifiableCredential

DEFAULT_FRESHNESS_WINDOW_MS = 120_000


class AuthError(Exception):
    """Base for protocol aborts; raising one moves the session to FAILED."""


class PidConsumedError(AuthError):
    pass


class NotPluggedError(AuthError):
    pass


class StaleTimestampError(AuthError):
    pass


class ReusedPidError(AuthError):
    pass


class DecryptFailedError(AuthError):
    pass


class HashChainMismatchError(AuthError):
    pass


class ChallengeMismatchError(AuthError):
    pass


class NotAuthenticatedError(AuthError):
    pass


class ProtocolOrderError(AuthError):
    """Frame arrived in a state that cannot accept it."""


class EvPhase(Enum):
    IDLE = "idle"
    SENT_M1 = "sent_m1"
    SENT_M3 = "sent_m3"
    AUTHENTICATED = "authenticated"
    FAILED = "failed"


class EvcsPhase(Enum):
    IDLE = "idle"
    SENT_M2 = "sent_m2"
    SENT_M4 = "sent_m4"
    AUTHENTICATED = "authenticated"
    FAILED = "failed"


def _session_context(pid: str, evcs_id: str) -> bytes:
    return enc.enc_str(pid) + enc.enc_str(evcs_id)


class ReplayCache:
    """Remembers recently seen pseudonyms for twice the freshness window."""

    def __init__(self, window_ms: int):
        self.window_ms = window_ms
        self._seen: dict[str, tuple[int, int]] = {}  # pid -> (t1, seen_at)

    def check_and_add(self, pid: str, t1_ms: int, now_ms: int) -> None:
        self._prune(now_ms)
        if pid in self._seen:
            raise ReusedPidError(f"pseudonym {pid[:12]}... seen {now_ms - self._seen[pid][1]} ms ago")
        self._seen[pid] = (t1_ms, now_ms)

    def _prune(self, now_ms: int) -> None:
        expired = [pid for pid, (_, seen) in self._seen.items() if now_ms - seen > self.window_ms]
        for pid in expired:
            del self._seen[pid]


# ---------------------------------------------------------------------------
# EV side
# ---------------------------------------------------------------------------

@dataclass
class EvSession:
    """One authentication attempt by the vehicle."""

    pid: PseudoIdentity
    credential: VerifiableCredential
    pki: CertificateAuthority
    ledger: Ledger
    rng: DeterministicRng
    is_plugged: Callable[[], bool]
    used_pids: set[str] = field(default_factory=set)

    phase: EvPhase = EvPhase.IDLE
    t1_ms: int = 0
    c_physical: bytes = b""
    recovered_c_cyber: bytes = b""
    recovered_evcs_id: str = ""
    recovered_t2: bytes = b""
    t3: bytes = b""
    session_key: Optional[bytes] = None
    peer_credential_ok: Optional[bool] = None

    def _fail(self, error: AuthError) -> AuthError:
        self.phase = EvPhase.FAILED
        return error

    def start_auth(self, now_ms: int) -> MessageM1:
        if self.phase is not EvPhase.IDLE:
            raise self._fail(ProtocolOrderError(f"cannot start in phase {self.phase}"))
        if self.pid.pid in self.used_pids:
            raise self._fail(PidConsumedError("pseudonym already spent on a session"))
        if not self.is_plugged():
            raise self._fail(NotPluggedError("vehicle is not plugged in"))
        self.t1_ms = now_ms
        self.phase = EvPhase.SENT_M1
        return MessageM1(pid=self.pid.pid, t1_ms=now_ms)

    def handle_m2(self, m2: MessageM2) -> MessageM3:
        if self.phase is not EvPhase.SENT_M1:
            raise self._fail(ProtocolOrderError(f"M2 in phase {self.phase}"))
        try:
            plain = pk_decrypt(self.pid.keypair.private_key, m2.ciphertext)
        except TamperedError as exc:
            raise self._fail(DecryptFailedError(str(exc)))
        try:
            r = enc.Reader(plain)
            c_cyber = r.take(CHALLENGE_LEN)
            evcs_id = r.string()
            t2 = r.take(32)
            r.expect_end()
        except enc.DecodeError as exc:
            raise self._fail(DecryptFailedError(f"malformed M2 payload: {exc}"))
        if t2 != hash_timestamp(self.t1_ms):
            raise self._fail(HashChainMismatchError("T2 is not H(T1)"))
        try:
            evcs_pub = self.pki.lookup_evcs_pubkey(evcs_id)
        except PkiError:
            self.phase = EvPhase.FAILED
            raise
        self.recovered_c_cyber = c_cyber
        self.recovered_evcs_id = evcs_id
        self.recovered_t2 = t2
        self.c_physical = random_challenge(self.rng)
        self.t3 = sha256(t2)
        payload = c_cyber + self.c_physical + self.t3
        self.phase = EvPhase.SENT_M3
        return MessageM3(ciphertext=pk_encrypt(self.rng, evcs_pub, payload))

    def handle_m4(self, m4: MessageM4) -> EvPhase:
        if self.phase is not EvPhase.SENT_M3:
            raise self._fail(ProtocolOrderError(f"M4 in phase {self.phase}"))
        try:
            plain = pk_decrypt(self.pid.keypair.private_key, m4.ciphertext)
        except TamperedError as exc:
            raise self._fail(DecryptFailedError(str(exc)))
        if len(plain) != CHALLENGE_LEN + 32:
            raise self._fail(DecryptFailedError("malformed M4 payload"))
        c_physical = plain[:CHALLENGE_LEN]
        t4 = plain[CHALLENGE_LEN:]
        if c_physical != self.c_physical:
            raise self._fail(ChallengeMismatchError("returned physical challenge differs"))
        if t4 != sha256(self.t3):
            raise self._fail(HashChainMismatchError("T4 is not H(T3)"))
        self.phase = EvPhase.AUTHENTICATED
        return self.phase

    def verify_station_credential(self, vc: VerifiableCredential) -> bool:
        """Check the station's credential against the PKI and its on-chain
        anchor; result gates session establishment."""
        ok = self.pki.verify_evcs_credential(self.recovered_evcs_id, vc) and \
            self.ledger.has_credential_anchor(vc.vc_hash())
        self.peer_credential_ok = ok
        return ok

    def establish_session(self) -> bytes:
        if self.phase is not EvPhase.AUTHENTICATED or not self.peer_credential_ok:
            raise NotAuthenticatedError("handshake or credential check incomplete")
        self.session_key = derive_session_key(
            self.recovered_c_cyber,
            self.c_physical,
            _session_context(self.pid.pid, self.recovered_evcs_id),
        )
        self.used_pids.add(self.pid.pid)
        return self.session_key


# ---------------------------------------------------------------------------
# EVCS side
# ---------------------------------------------------------------------------

@dataclass
class EvcsSession:
    """One authentication attempt serviced by the station."""

    evcs_id: str
    private_key: bytes
    pki: CertificateAuthority
    rng: DeterministicRng
    replay_cache: ReplayCache
    freshness_window_ms: int = DEFAULT_FRESHNESS_WINDOW_MS

    phase: EvcsPhase = EvcsPhase.IDLE
    pid: str = ""
    c_cyber: bytes = b""
    t2: bytes = b""
    recovered_c_physical: bytes = b""
    recovered_t3: bytes = b""
    session_key: Optional[bytes] = None
    peer_credential_ok: Optional[bool] = None

    def _fail(self, error: AuthError) -> AuthError:
        self.phase = EvcsPhase.FAILED
        return error

    def handle_m1(self, m1: MessageM1, now_ms: int) -> MessageM2:
        if self.phase is not EvcsPhase.IDLE:
            raise self._fail(ProtocolOrderError(f"M1 in phase {self.phase}"))
        if abs(now_ms - m1.t1_ms) > self.freshness_window_ms:
            raise self._fail(
                StaleTimestampError(f"T1 outside the {self.freshness_window_ms} ms window")
            )
        try:
            self.replay_cache.check_and_add(m1.pid, m1.t1_ms, now_ms)
        except ReusedPidError as exc:
            raise self._fail(exc)
        try:
            user_pub = self.pki.lookup_user_pubkey(m1.pid)
        except PkiError:
            self.phase = EvcsPhase.FAILED
            raise
        self.pid = m1.pid
        self.c_cyber = random_challenge(self.rng)
        self.t2 = hash_timestamp(m1.t1_ms)
        payload = self.c_cyber + enc.enc_str(self.evcs_id) + self.t2
        self.phase = EvcsPhase.SENT_M2
        return MessageM2(ciphertext=pk_encrypt(self.rng, user_pub, payload))

    def handle_m3(self, m3: MessageM3) -> MessageM4:
        if self.phase is not EvcsPhase.SENT_M2:
            raise self._fail(ProtocolOrderError(f"M3 in phase {self.phase}"))
        try:
            plain = pk_decrypt(self.private_key, m3.ciphertext)
        except TamperedError as exc:
            raise self._fail(DecryptFailedError(str(exc)))
        if len(plain) != 2 * CHALLENGE_LEN + 32:
            raise self._fail(DecryptFailedError("malformed M3 payload"))
        c_cyber = plain[:CHALLENGE_LEN]
        c_physical = plain[CHALLENGE_LEN:2 * CHALLENGE_LEN]
        t3 = plain[2 * CHALLENGE_LEN:]
        if c_cyber != self.c_cyber:
            raise self._fail(ChallengeMismatchError("returned cyber challenge differs"))
        if t3 != sha256(self.t2):
            raise self._fail(HashChainMismatchError("T3 is not H(T2)"))
        self.recovered_c_physical = c_physical
        self.recovered_t3 = t3
        t4 = sha256(t3)
        user_pub = self.pki.lookup_user_pubkey(self.pid)
        self.phase = EvcsPhase.SENT_M4
        return MessageM4(ciphertext=pk_encrypt(self.rng, user_pub, c_physical + t4))

    def verify_user_credential(self, vc: VerifiableCredential) -> bool:
        """Check the pseudonym against the PKI hash set and the credential
        signature; result gates session establishment."""
        ok = self.pki.verify_user_credential(self.pid, vc)
        self.peer_credential_ok = ok
        return ok

    def establish_session(self) -> bytes:
        if self.phase is not EvcsPhase.SENT_M4 or not self.peer_credential_ok:
            raise NotAuthenticatedError("handshake or credential check incomplete")
        self.session_key = derive_session_key(
            self.c_cyber,
            self.recovered_c_physical,
            _session_context(self.pid, self.evcs_id),
        )
        # Single-use rule: the station retires the pseudonym with the PKI
        # the moment a session exists under it.
        self.pki.mark_pid_consumed(self.pid)
        self.phase = EvcsPhase.AUTHENTICATED
        return self.session_key
