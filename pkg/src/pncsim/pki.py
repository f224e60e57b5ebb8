"""Certificate-authority service for users and charging stations.

The CA registers users under a verified identifier, hands each one a root
pseudonym plus wallet keys, and mints batches of single-use session
pseudonyms with their own key pairs.  Stations get rotating identities.
Every credential is anchored on the ledger at issuance.

Privacy contract: nothing returned to an EV or EVCS caller ever links a
session pseudonym to the root pseudonym.  The linkage table lives only
inside this module.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import encoding as enc
from .crypto import DeterministicRng, KeyPair, generate_keypair, generate_signing_keypair, sha256, sign, verify_signature
from .ledger import CredentialAnchorPayload, EntryKind, Ledger, LedgerEntry
from .simtime import Clock

DEFAULT_VC_VALIDITY_MS = 24 * 3600 * 1000


class PkiError(Exception):
    pass


class DuplicateIdentityError(PkiError):
    pass


class UnknownUserError(PkiError):
    pass


class UnknownPidError(PkiError):
    pass


class ConsumedPidError(PkiError):
    pass


class AlreadyConsumedError(PkiError):
    pass


class UnknownStationError(PkiError):
    pass


class StaleEpochError(PkiError):
    """Station id belongs to a superseded credential epoch."""


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerifiableCredential:
    subject: str
    issuer: str
    payload_hash: bytes
    expiry_ms: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return (
            enc.enc_str(self.subject)
            + enc.enc_str(self.issuer)
            + self.payload_hash
            + enc.enc_u64(self.expiry_ms)
        )

    def vc_hash(self) -> bytes:
        return sha256(self.signed_bytes() + self.signature)


@dataclass(frozen=True)
class PseudoIdentity:
    """Session pseudonym as handed to its owner. No root linkage on board."""

    pid: str
    keypair: KeyPair
    consumed: bool = False


@dataclass(frozen=True)
class EvcsRecord:
    evcs_id: str
    keypair: KeyPair
    credential: VerifiableCredential
    epoch: int


@dataclass(frozen=True)
class UserRegistration:
    root_pid: str
    wallet: KeyPair
    credential: VerifiableCredential


@dataclass
class _UserEntry:
    real_id: str
    root_pid: str
    wallet: KeyPair
    credential: VerifiableCredential
    pid_count: int = 0


@dataclass
class _PidEntry:
    pid: str
    keypair: KeyPair
    parent_root_pid: str
    consumed: bool = False


@dataclass
class _StationEntry:
    station_no: int
    current: EvcsRecord


class CertificateAuthority:
    """Single-owner registry; the simulation serializes all calls."""

    def __init__(
        self,
        rng: DeterministicRng,
        clock: Clock,
        ledger: Ledger,
        ca_id: str = "ca-0",
        vc_validity_ms: int = DEFAULT_VC_VALIDITY_MS,
    ):
        self._rng = rng
        self._clock = clock
        self._ledger = ledger
        self.ca_id = ca_id
        self._vc_validity_ms = vc_validity_ms
        self._salt = rng.randbytes(32)
        self._signing = generate_signing_keypair(rng.randbytes(32))
        self._users: dict[str, _UserEntry] = {}          # real_id -> entry
        self._roots: dict[str, _UserEntry] = {}          # root_pid -> entry
        self._pids: dict[str, _PidEntry] = {}            # pid -> entry
        self._stations: dict[str, _StationEntry] = {}    # current evcs_id -> entry
        self._stale_evcs_ids: set[str] = set()
        self._station_count = 0

    @property
    def public_key(self) -> bytes:
        return self._signing.public_key

    # -- credential plumbing -------------------------------------------------

    def _issue_credential(self, subject: str, payload_hash: bytes) -> VerifiableCredential:
        expiry = self._clock.now_ms + self._vc_validity_ms
        unsigned = VerifiableCredential(
            subject=subject,
            issuer=self.ca_id,
            payload_hash=payload_hash,
            expiry_ms=expiry,
            signature=b"",
        )
        vc = replace(unsigned, signature=sign(self._signing.private_key, unsigned.signed_bytes()))
        self._anchor(vc)
        return vc

    def _anchor(self, vc: VerifiableCredential) -> None:
        payload = CredentialAnchorPayload(
            subject=vc.subject,
            vc_hash=vc.vc_hash(),
            issuer=vc.issuer,
            expiry_ms=vc.expiry_ms,
        )
        self._ledger.append_entry(
            LedgerEntry(
                kind=EntryKind.CREDENTIAL_ANCHOR,
                payload=payload.encode(),
                timestamp_ms=self._clock.now_ms,
                author=self.ca_id,
            )
        )

    def _vc_signature_ok(self, vc: VerifiableCredential) -> bool:
        return (
            vc.issuer == self.ca_id
            and verify_signature(self._signing.public_key, vc.signed_bytes(), vc.signature)
            and vc.expiry_ms > self._clock.now_ms
        )

    # -- user registration ----------------------------------------------------

    def register_user(self, real_id: str) -> UserRegistration:
        """Register a verified identifier; returns the user's private bundle."""
        if real_id in self._users:
            raise DuplicateIdentityError(f"identifier {real_id!r} already registered")
        root_pid = sha256(b"root-pid" + self._salt + real_id.encode("utf-8")).hex()
        wallet = generate_keypair(self._rng.randbytes(32))
        # The credential names the wallet key hash, never the root pseudonym,
        # so presenting it to a station leaks no cross-session identifier the
        # PKI is responsible for.
        subject = "wallet:" + sha256(wallet.public_key).hex()[:32]
        vc = self._issue_credential(subject, sha256(wallet.public_key))
        entry = _UserEntry(real_id=real_id, root_pid=root_pid, wallet=wallet, credential=vc)
        self._users[real_id] = entry
        self._roots[root_pid] = entry
        return UserRegistration(root_pid=root_pid, wallet=wallet, credential=vc)

    def issue_pseudo_batch(self, root_pid: str, n: int) -> list[PseudoIdentity]:
        """Mint `n` fresh single-use pseudonyms for the given root."""
        if n < 1:
            raise ValueError("batch size must be >= 1")
        entry = self._roots.get(root_pid)
        if entry is None:
            raise UnknownUserError("root pseudonym not registered")
        out = []
        for _ in range(n):
            index = entry.pid_count
            entry.pid_count += 1
            pid = sha256(
                b"session-pid" + self._salt + root_pid.encode("utf-8") + enc.enc_u32(index)
            ).hex()
            keypair = generate_keypair(
                sha256(b"pid-key" + self._salt + pid.encode("utf-8"))
            )
            self._pids[pid] = _PidEntry(pid=pid, keypair=keypair, parent_root_pid=root_pid)
            out.append(PseudoIdentity(pid=pid, keypair=keypair))
        return out

    # -- station registration --------------------------------------------------

    def _mint_station_record(self, station_no: int, epoch: int) -> EvcsRecord:
        evcs_id = "evcs-" + self._rng.randbytes(8).hex()
        keypair = generate_keypair(self._rng.randbytes(32))
        vc = self._issue_credential(evcs_id, sha256(keypair.public_key))
        return EvcsRecord(evcs_id=evcs_id, keypair=keypair, credential=vc, epoch=epoch)

    def register_evcs(self) -> EvcsRecord:
        station_no = self._station_count
        self._station_count += 1
        record = self._mint_station_record(station_no, epoch=0)
        self._stations[record.evcs_id] = _StationEntry(station_no=station_no, current=record)
        return record

    def rotate_evcs_credentials(self, evcs_id: str) -> EvcsRecord:
        """Rotate id, keys, and credential; the prior id and VC go stale."""
        station = self._stations.get(evcs_id)
        if station is None:
            if evcs_id in self._stale_evcs_ids:
                raise StaleEpochError(f"{evcs_id} was rotated out")
            raise UnknownStationError(f"unknown station id {evcs_id}")
        record = self._mint_station_record(station.station_no, epoch=station.current.epoch + 1)
        del self._stations[evcs_id]
        self._stale_evcs_ids.add(evcs_id)
        self._stations[record.evcs_id] = _StationEntry(station_no=station.station_no, current=record)
        return record

    # -- lookups used during authentication -------------------------------------

    def lookup_user_pubkey(self, pid: str) -> bytes:
        entry = self._pids.get(pid)
        if entry is None:
            raise UnknownPidError("pseudonym was never issued")
        if entry.consumed:
            raise ConsumedPidError("pseudonym already consumed")
        return entry.keypair.public_key

    def lookup_evcs_pubkey(self, evcs_id: str) -> bytes:
        station = self._stations.get(evcs_id)
        if station is None:
            if evcs_id in self._stale_evcs_ids:
                raise StaleEpochError(f"{evcs_id} was rotated out")
            raise UnknownStationError(f"unknown station id {evcs_id}")
        return station.current.keypair.public_key

    def pid_hash_set(self) -> set[bytes]:
        """Hashes of every issued, unconsumed pseudonym."""
        return {
            sha256(entry.pid.encode("utf-8"))
            for entry in self._pids.values()
            if not entry.consumed
        }

    def verify_user_credential(self, pid: str, vc: VerifiableCredential) -> bool:
        """Station-side check: pseudonym in the live hash set, credential
        signature valid, credential unexpired."""
        if sha256(pid.encode("utf-8")) not in self.pid_hash_set():
            return False
        return self._vc_signature_ok(vc)

    def verify_evcs_credential(self, evcs_id: str, vc: VerifiableCredential) -> bool:
        """EV-side check: credential is the station's current one and valid."""
        station = self._stations.get(evcs_id)
        if station is None:
            return False
        if station.current.credential.vc_hash() != vc.vc_hash():
            return False
        return self._vc_signature_ok(vc)

    def mark_pid_consumed(self, pid: str) -> None:
        entry = self._pids.get(pid)
        if entry is None:
            raise UnknownPidError("pseudonym was never issued")
        if entry.consumed:
            raise AlreadyConsumedError("pseudonym already consumed")
        entry.consumed = True
