"""Consortium-ledger simulation: a single-writer, hash-linked chain.

Entries queue up between block seals; sealing computes the block hash over
the canonical encoding of everything in the block, so any later bit flip in
sealed content breaks `verify_chain`.  Consensus is out of scope: the chain
has one deterministic sequencer and never forks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator

from . import encoding as enc
from .crypto import sha256

GENESIS_PREV_HASH = b"\x00" * 32


class LedgerError(Exception):
    pass


class MalformedEntryError(LedgerError):
    """Entry payload is not a canonical encoding of its declared kind."""


class EntryKind(IntEnum):
    CREDENTIAL_ANCHOR = 1
    TRANSACTION = 2
    DISPUTE = 3


class DisputeCause(IntEnum):
    METER_MISMATCH = 1
    BILL_REJECTED = 2
    PAYMENT_DEFAULT = 3


# ---------------------------------------------------------------------------
# Payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CredentialAnchorPayload:
    """Anchors a credential on chain by the hash of its canonical bytes."""

    subject: str
    vc_hash: bytes
    issuer: str
    expiry_ms: int

    def encode(self) -> bytes:
        return (
            enc.enc_str(self.subject)
            + self.vc_hash
            + enc.enc_str(self.issuer)
            + enc.enc_u64(self.expiry_ms)
        )

    @classmethod
    def decode(cls, data: bytes) -> "CredentialAnchorPayload":
        r = enc.Reader(data)
        out = cls(
            subject=r.string(),
            vc_hash=r.take(32),
            issuer=r.string(),
            expiry_ms=r.u64(),
        )
        r.expect_end()
        return out


@dataclass(frozen=True)
class TransactionPayload:
    """Finalized energy exchange. Fixed-point: milli-kWh and milli-currency."""

    pid: str
    evcs_id: str
    slot: int
    energy_milli_kwh: int
    amount_milli: int
    finalized_at_ms: int

    def encode(self) -> bytes:
        return (
            enc.enc_str(self.pid)
            + enc.enc_str(self.evcs_id)
            + enc.enc_u32(self.slot)
            + enc.enc_i64(self.energy_milli_kwh)
            + enc.enc_i64(self.amount_milli)
            + enc.enc_u64(self.finalized_at_ms)
        )

    @classmethod
    def decode(cls, data: bytes) -> "TransactionPayload":
        r = enc.Reader(data)
        out = cls(
            pid=r.string(),
            evcs_id=r.string(),
            slot=r.u32(),
            energy_milli_kwh=r.i64(),
            amount_milli=r.i64(),
            finalized_at_ms=r.u64(),
        )
        r.expect_end()
        return out


@dataclass(frozen=True)
class DisputePayload:
    pid: str
    evcs_id: str
    slot: int
    cause: DisputeCause
    evidence_hash: bytes
    opened_at_ms: int

    def encode(self) -> bytes:
        return (
            enc.enc_str(self.pid)
            + enc.enc_str(self.evcs_id)
            + enc.enc_u32(self.slot)
            + bytes([self.cause])
            + self.evidence_hash
            + enc.enc_u64(self.opened_at_ms)
        )

    @classmethod
    def decode(cls, data: bytes) -> "DisputePayload":
        r = enc.Reader(data)
        out = cls(
            pid=r.string(),
            evcs_id=r.string(),
            slot=r.u32(),
            cause=DisputeCause(r.take(1)[0]),
            evidence_hash=r.take(32),
            opened_at_ms=r.u64(),
        )
        r.expect_end()
        return out


_PAYLOAD_TYPES = {
    EntryKind.CREDENTIAL_ANCHOR: CredentialAnchorPayload,
    EntryKind.TRANSACTION: TransactionPayload,
    EntryKind.DISPUTE: DisputePayload,
}


def decode_payload(kind: EntryKind, data: bytes):
    try:
        return _PAYLOAD_TYPES[EntryKind(kind)].decode(data)
    except (enc.DecodeError, ValueError, KeyError) as exc:
        raise MalformedEntryError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Entries and blocks
# ---------------------------------------------------------------------------

@dataclass
class LedgerEntry:
    kind: EntryKind
    payload: bytes
    timestamp_ms: int
    author: str

    def canonical(self) -> bytes:
        return (
            bytes([self.kind])
            + enc.enc_u64(self.timestamp_ms)
            + enc.enc_str(self.author)
            + enc.enc_u32(len(self.payload))
            + self.payload
        )

    def decoded(self):
        return decode_payload(self.kind, self.payload)


@dataclass
class Block:
    height: int
    prev_hash: bytes
    entries: list[LedgerEntry] = field(default_factory=list)
    block_hash: bytes = b""


def compute_block_hash(height: int, prev_hash: bytes, entries: list[LedgerEntry]) -> bytes:
    body = enc.enc_u64(height) + prev_hash
    for entry in entries:
        body += entry.canonical()
    return sha256(body)


class Ledger:
    """Append-only chain with pending-entry queue and chain-order queries."""

    def __init__(self):
        self._blocks: list[Block] = []
        self._pending: list[LedgerEntry] = []
        self._anchor_index: set[bytes] = set()

    # -- writes ------------------------------------------------------------

    def append_entry(self, entry: LedgerEntry) -> int:
        """Queue `entry` for the next block; returns its pending position."""
        if entry.kind not in _PAYLOAD_TYPES:
            raise MalformedEntryError(f"unknown entry kind {entry.kind}")
        decoded = decode_payload(entry.kind, entry.payload)
        if decoded.encode() != entry.payload:
            raise MalformedEntryError("payload is not in canonical form")
        self._pending.append(entry)
        if entry.kind == EntryKind.CREDENTIAL_ANCHOR:
            self._anchor_index.add(decoded.vc_hash)
        return len(self._pending) - 1

    def seal_block(self) -> Block:
        """Seal all pending entries into a new block (possibly empty)."""
        height = len(self._blocks)
        prev_hash = self._blocks[-1].block_hash if self._blocks else GENESIS_PREV_HASH
        entries, self._pending = self._pending, []
        block = Block(
            height=height,
            prev_hash=prev_hash,
            entries=entries,
            block_hash=compute_block_hash(height, prev_hash, entries),
        )
        self._blocks.append(block)
        return block

    # -- reads -------------------------------------------------------------

    @property
    def height(self) -> int:
        return len(self._blocks)

    @property
    def blocks(self) -> list[Block]:
        return self._blocks

    def verify_chain(self) -> bool:
        """True iff every block hash and prev-link verifies from genesis."""
        prev = GENESIS_PREV_HASH
        for i, block in enumerate(self._blocks):
            if block.height != i or block.prev_hash != prev:
                return False
            if compute_block_hash(block.height, block.prev_hash, block.entries) != block.block_hash:
                return False
            prev = block.block_hash
        return True

    def entries(self) -> Iterator[LedgerEntry]:
        for block in self._blocks:
            yield from block.entries

    def query(
        self,
        kind: EntryKind | None = None,
        pid: str | None = None,
        evcs_id: str | None = None,
        slot_range: tuple[int, int] | None = None,
        vc_hash: bytes | None = None,
    ) -> list[LedgerEntry]:
        """All sealed entries matching every given filter, in chain order."""
        hits = []
        for entry in self.entries():
            if kind is not None and entry.kind != kind:
                continue
            decoded = entry.decoded()
            if pid is not None:
                subject = getattr(decoded, "pid", getattr(decoded, "subject", None))
                if subject != pid:
                    continue
            if evcs_id is not None:
                station = getattr(decoded, "evcs_id", getattr(decoded, "subject", None))
                if station != evcs_id:
                    continue
            if slot_range is not None:
                slot = getattr(decoded, "slot", None)
                if slot is None or not (slot_range[0] <= slot <= slot_range[1]):
                    continue
            if vc_hash is not None and getattr(decoded, "vc_hash", None) != vc_hash:
                continue
            hits.append(entry)
        return hits

    def has_credential_anchor(self, vc_hash: bytes) -> bool:
        """O(1) anchor lookup; covers pending and sealed anchors."""
        return vc_hash in self._anchor_index

    # -- export ------------------------------------------------------------

    def export_jsonl(self, path: str) -> None:
        """One block per line, fields in canonical order, hashes hex."""
        with open(path, "w", encoding="utf-8") as fh:
            for block in self._blocks:
                fh.write(json.dumps(_block_to_json(block), sort_keys=False) + "\n")

    @classmethod
    def import_jsonl(cls, path: str) -> "Ledger":
        ledger = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                entries = [
                    LedgerEntry(
                        kind=EntryKind(e["kind"]),
                        payload=bytes.fromhex(e["payload"]),
                        timestamp_ms=e["timestamp_ms"],
                        author=e["author"],
                    )
                    for e in obj["entries"]
                ]
                block = Block(
                    height=obj["height"],
                    prev_hash=bytes.fromhex(obj["prev_hash"]),
                    entries=entries,
                    block_hash=bytes.fromhex(obj["block_hash"]),
                )
                ledger._blocks.append(block)
                for entry in entries:
                    if entry.kind == EntryKind.CREDENTIAL_ANCHOR:
                        ledger._anchor_index.add(entry.decoded().vc_hash)
        return ledger


def _block_to_json(block: Block) -> dict:
    return {
        "height": block.height,
        "prev_hash": block.prev_hash.hex(),
        "entries": [
            {
                "kind": int(e.kind),
                "timestamp_ms": e.timestamp_ms,
                "author": e.author,
                "payload": e.payload.hex(),
            }
            for e in block.entries
        ],
        "block_hash": block.block_hash.hex(),
    }
