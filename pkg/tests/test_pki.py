"""Registration, pseudonym lifecycle, rotation, and credential checks."""

import pytest

from pncsim.crypto import DeterministicRng, sha256
from pncsim.ledger import EntryKind, Ledger
from pncsim.pki import (
    AlreadyConsumedError,
    CertificateAuthority,
    ConsumedPidError,
    DuplicateIdentityError,
    StaleEpochError,
    UnknownPidError,
    UnknownStationError,
    UnknownUserError,
)
from pncsim.simtime import Clock


def make_ca(seed: bytes = b"\x01" * 32):
    clock = Clock()
    ledger = Ledger()
    ca = CertificateAuthority(DeterministicRng(seed).child("pki"), clock, ledger)
    return ca, clock, ledger


# ---------------------------------------------------------------------------
# User registration
# ---------------------------------------------------------------------------

def test_register_two_users_distinct_root_pids():
    ca, _, _ = make_ca()
    a = ca.register_user("gov-id-alice")
    b = ca.register_user("gov-id-bob")
    assert a.root_pid != b.root_pid


def test_register_duplicate_identity_rejected():
    ca, _, _ = make_ca()
    ca.register_user("gov-id-alice")
    with pytest.raises(DuplicateIdentityError):
        ca.register_user("gov-id-alice")


def test_user_credential_verifies_and_is_anchored():
    ca, _, ledger = make_ca()
    reg = ca.register_user("gov-id-alice")
    ledger.seal_block()
    assert ca._vc_signature_ok(reg.credential)
    hits = ledger.query(kind=EntryKind.CREDENTIAL_ANCHOR, vc_hash=reg.credential.vc_hash())
    assert len(hits) == 1


def test_credential_never_names_root_pid():
    ca, _, _ = make_ca()
    reg = ca.register_user("gov-id-alice")
    assert reg.root_pid not in reg.credential.subject


# ---------------------------------------------------------------------------
# Pseudonym batches
# ---------------------------------------------------------------------------

def test_batch_pids_pairwise_distinct():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    batch = ca.issue_pseudo_batch(reg.root_pid, 10)
    assert len({p.pid for p in batch}) == 10


def test_batch_size_zero_rejected():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    with pytest.raises(ValueError):
        ca.issue_pseudo_batch(reg.root_pid, 0)


def test_batch_for_unknown_root_rejected():
    ca, _, _ = make_ca()
    with pytest.raises(UnknownUserError):
        ca.issue_pseudo_batch("deadbeef", 1)


def test_issued_pseudonym_carries_no_parent_linkage():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    fields = set(vars(pid))
    assert fields == {"pid", "keypair", "consumed"}
    assert reg.root_pid not in pid.pid


def test_observer_cannot_assign_pids_to_users_above_chance():
    # Deanonymization game: the observer knows one labeled pseudonym per
    # user and assigns every other pseudonym to the user whose anchor it
    # most resembles (longest common hex prefix).  Salted hashing should
    # pin accuracy to chance = 1/5.
    def common_prefix(a: str, b: str) -> int:
        n = 0
        for x, y in zip(a, b):
            if x != y:
                break
            n += 1
        return n

    accuracies = []
    for trial in range(20):
        ca, _, _ = make_ca(bytes([trial + 1]) * 32)
        anchors = {}
        unlabeled = []
        for user in range(5):
            reg = ca.register_user(f"user-{user}")
            batch = ca.issue_pseudo_batch(reg.root_pid, 11)
            anchors[user] = batch[0].pid
            unlabeled += [(p.pid, user) for p in batch[1:]]
        correct = 0
        for pid, truth in unlabeled:
            guess = max(anchors, key=lambda u: (common_prefix(pid, anchors[u]), -u))
            correct += guess == truth
        accuracies.append(correct / len(unlabeled))
    mean = sum(accuracies) / len(accuracies)
    assert 0.1 <= mean <= 0.3, f"observer accuracy {mean:.3f} should sit at chance"


# ---------------------------------------------------------------------------
# Pseudonym lookups and consumption
# ---------------------------------------------------------------------------

def test_lookup_returns_issued_public_key():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    assert ca.lookup_user_pubkey(pid.pid) == pid.keypair.public_key


def test_lookup_unknown_pid():
    ca, _, _ = make_ca()
    with pytest.raises(UnknownPidError):
        ca.lookup_user_pubkey("never-issued")


def test_consumed_pid_lookup_fails():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    ca.mark_pid_consumed(pid.pid)
    with pytest.raises(ConsumedPidError):
        ca.lookup_user_pubkey(pid.pid)


def test_double_consumption_rejected():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    ca.mark_pid_consumed(pid.pid)
    with pytest.raises(AlreadyConsumedError):
        ca.mark_pid_consumed(pid.pid)


def test_hash_set_tracks_unconsumed_pids():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    batch = ca.issue_pseudo_batch(reg.root_pid, 5)
    assert len(ca.pid_hash_set()) == 5
    for p in batch:
        assert sha256(p.pid.encode()) in ca.pid_hash_set()
    ca.mark_pid_consumed(batch[0].pid)
    assert len(ca.pid_hash_set()) == 4
    assert sha256(batch[0].pid.encode()) not in ca.pid_hash_set()


# ---------------------------------------------------------------------------
# User credential verification
# ---------------------------------------------------------------------------

def test_verify_user_credential_happy_path():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    assert ca.verify_user_credential(pid.pid, reg.credential)


def test_verify_user_credential_unknown_pid_false():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    assert not ca.verify_user_credential("f" * 64, reg.credential)


def test_verify_user_credential_flipped_signature_false():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    rng = DeterministicRng(b"\x02" * 32)
    sig = bytearray(reg.credential.signature)
    sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
    from dataclasses import replace

    bad_vc = replace(reg.credential, signature=bytes(sig))
    assert not ca.verify_user_credential(pid.pid, bad_vc)


def test_verify_user_credential_expired_false():
    ca, clock, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    clock.advance_ms(25 * 3600 * 1000)
    assert not ca.verify_user_credential(pid.pid, reg.credential)


def test_verify_user_credential_consumed_pid_false():
    ca, _, _ = make_ca()
    reg = ca.register_user("u")
    pid = ca.issue_pseudo_batch(reg.root_pid, 1)[0]
    ca.mark_pid_consumed(pid.pid)
    assert not ca.verify_user_credential(pid.pid, reg.credential)


# ---------------------------------------------------------------------------
# Station registration and rotation
# ---------------------------------------------------------------------------

def test_fresh_station_credential_verifies():
    ca, _, _ = make_ca()
    rec = ca.register_evcs()
    assert ca.verify_evcs_credential(rec.evcs_id, rec.credential)


def test_rotation_invalidates_prior_credential():
    ca, _, _ = make_ca()
    old = ca.register_evcs()
    new = ca.rotate_evcs_credentials(old.evcs_id)
    assert new.evcs_id != old.evcs_id
    assert not ca.verify_evcs_credential(old.evcs_id, old.credential)
    assert ca.verify_evcs_credential(new.evcs_id, new.credential)


def test_rotation_epoch_counter():
    ca, _, _ = make_ca()
    rec = ca.register_evcs()
    for i in range(100):
        rec = ca.rotate_evcs_credentials(rec.evcs_id)
        assert rec.epoch == i + 1


def test_stale_id_lookup_raises_stale_epoch():
    ca, _, _ = make_ca()
    old = ca.register_evcs()
    ca.rotate_evcs_credentials(old.evcs_id)
    with pytest.raises(StaleEpochError):
        ca.lookup_evcs_pubkey(old.evcs_id)


def test_unknown_station_lookup():
    ca, _, _ = make_ca()
    with pytest.raises(UnknownStationError):
        ca.lookup_evcs_pubkey("evcs-unknown")


def test_two_stations_distinct_keys():
    ca, _, _ = make_ca()
    a = ca.register_evcs()
    b = ca.register_evcs()
    assert a.keypair.public_key != b.keypair.public_key


def test_every_issuance_anchors_exactly_once():
    ca, _, ledger = make_ca()
    reg = ca.register_user("u")
    rec = ca.register_evcs()
    rec2 = ca.rotate_evcs_credentials(rec.evcs_id)
    ledger.seal_block()
    for vc in (reg.credential, rec.credential, rec2.credential):
        hits = ledger.query(kind=EntryKind.CREDENTIAL_ANCHOR, vc_hash=vc.vc_hash())
        assert len(hits) == 1
