"""Handshake state machines: happy path, every abort path, key agreement."""

import pytest

from pncsim import encoding as enc
from pncsim.actors import (
    ChallengeMismatchError,
    DecryptFailedError,
    EvPhase,
    EvcsPhase,
    HashChainMismatchError,
    NotAuthenticatedError,
    NotPluggedError,
    PidConsumedError,
    ProtocolOrderError,
    ReusedPidError,
    StaleTimestampError,
)
from pncsim.channels import MessageM2, MessageM3, MessageM4
from pncsim.crypto import DeterministicRng, encode_timestamp, pk_encrypt, sha256
from pncsim.pki import ConsumedPidError, StaleEpochError, UnknownPidError

from conftest import build_rig


# ---------------------------------------------------------------------------
# Happy path
# ---------------------------------------------------------------------------

def test_honest_handshake_reaches_authenticated_with_equal_keys(rig):
    ev, evcs, ev_key, evcs_key = rig.complete_handshake()
    assert ev.phase is EvPhase.AUTHENTICATED
    assert evcs.phase is EvcsPhase.AUTHENTICATED
    assert ev_key == evcs_key
    assert len(ev_key) == 32


def test_completeness_sweep_over_seeds():
    for seed_byte in range(25):
        rig = build_rig(bytes([seed_byte + 1]) * 32)
        _, _, ev_key, evcs_key = rig.complete_handshake()
        assert ev_key == evcs_key


def test_recovered_values_match_peers(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m2 = evcs.handle_m1(m1, rig.clock.now_ms)
    m3 = ev.handle_m2(m2)
    assert ev.recovered_c_cyber == evcs.c_cyber
    assert ev.recovered_evcs_id == evcs.evcs_id
    evcs.handle_m3(m3)
    assert evcs.recovered_c_physical == ev.c_physical


# ---------------------------------------------------------------------------
# start_auth
# ---------------------------------------------------------------------------

def test_start_auth_records_t1_and_pid(rig):
    ev = rig.ev_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    assert m1.pid == rig.pids[0].pid
    assert m1.t1_ms == rig.clock.now_ms
    assert ev.phase is EvPhase.SENT_M1


def test_start_auth_consumed_pid_rejected(rig):
    rig.complete_handshake(pid_index=0)
    ev = rig.ev_session(pid_index=0)
    with pytest.raises(PidConsumedError):
        ev.start_auth(rig.clock.now_ms)


def test_start_auth_unplugged_rejected(rig):
    ev = rig.ev_session(plugged=False)
    with pytest.raises(NotPluggedError):
        ev.start_auth(rig.clock.now_ms)
    assert ev.phase is EvPhase.FAILED


# ---------------------------------------------------------------------------
# handle_m1
# ---------------------------------------------------------------------------

def test_m1_fresh_within_window_accepted(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m2 = evcs.handle_m1(m1, rig.clock.now_ms + 120_000)
    assert evcs.phase is EvcsPhase.SENT_M2
    assert m2.ciphertext


def test_m1_one_ms_past_window_stale(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    with pytest.raises(StaleTimestampError):
        evcs.handle_m1(m1, rig.clock.now_ms + 120_001)
    assert evcs.phase is EvcsPhase.FAILED


def test_m1_duplicate_within_window_reused(rig):
    ev = rig.ev_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    rig.evcs_session().handle_m1(m1, rig.clock.now_ms)
    with pytest.raises(ReusedPidError):
        rig.evcs_session().handle_m1(m1, rig.clock.now_ms + 1_000)


def test_m1_duplicate_after_cache_window_not_reused(rig):
    # Outside the replay window the cache forgets; the single-use rule
    # then rests on pid consumption, tested separately.
    ev = rig.ev_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    rig.evcs_session().handle_m1(m1, rig.clock.now_ms)
    late = rig.clock.now_ms + 300_000
    with pytest.raises(StaleTimestampError):
        rig.evcs_session().handle_m1(m1, late)


def test_m1_unknown_pid(rig):
    from pncsim.channels import MessageM1

    evcs = rig.evcs_session()
    with pytest.raises(UnknownPidError):
        evcs.handle_m1(MessageM1(pid="f" * 64, t1_ms=rig.clock.now_ms), rig.clock.now_ms)
    assert evcs.phase is EvcsPhase.FAILED


# ---------------------------------------------------------------------------
# handle_m2
# ---------------------------------------------------------------------------

def test_m2_byte_flip_decrypt_failed(rig):
    r = DeterministicRng(b"\x31" * 32)
    for _ in range(20):
        rig2 = build_rig(r.randbytes(32))
        ev = rig2.ev_session()
        evcs = rig2.evcs_session()
        m1 = ev.start_auth(rig2.clock.now_ms)
        m2 = evcs.handle_m1(m1, rig2.clock.now_ms)
        ct = bytearray(m2.ciphertext)
        ct[r.randrange(len(ct))] ^= 1 << r.randrange(8)
        with pytest.raises(DecryptFailedError):
            ev.handle_m2(MessageM2(ciphertext=bytes(ct)))
        assert ev.phase is EvPhase.FAILED


def test_m2_rebuilt_with_shifted_t1_hash_chain_mismatch(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    evcs.handle_m1(m1, rig.clock.now_ms)
    # A station that hashes a perturbed T1 encrypts correctly but breaks
    # the chain; the vehicle must catch it rather than decrypt-fail.
    bad_t2 = sha256(encode_timestamp(m1.t1_ms + 1))
    payload = evcs.c_cyber + enc.enc_str(evcs.evcs_id) + bad_t2
    forged = pk_encrypt(rig.rng.child("forge"), rig.pids[0].keypair.public_key, payload)
    with pytest.raises(HashChainMismatchError):
        ev.handle_m2(MessageM2(ciphertext=forged))


def test_m2_from_rotated_station_fails_lookup(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m2 = evcs.handle_m1(m1, rig.clock.now_ms)
    rig.ca.rotate_evcs_credentials(rig.station.evcs_id)
    with pytest.raises(StaleEpochError):
        ev.handle_m2(m2)
    assert ev.phase is EvPhase.FAILED


# ---------------------------------------------------------------------------
# handle_m3
# ---------------------------------------------------------------------------

def test_m3_random_challenge_guess_mismatch(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    evcs.handle_m1(m1, rig.clock.now_ms)
    guess_rng = DeterministicRng(b"\x41" * 32)
    t3 = sha256(sha256(encode_timestamp(m1.t1_ms)))
    payload = guess_rng.randbytes(32) + guess_rng.randbytes(32) + t3
    forged = MessageM3(
        ciphertext=pk_encrypt(guess_rng, rig.station.keypair.public_key, payload)
    )
    with pytest.raises(ChallengeMismatchError):
        evcs.handle_m3(forged)


def test_m3_relayed_from_other_session_mismatch(rig):
    # Two parallel handshakes; A's M3 answers A's challenge, not B's.
    ev_a = rig.ev_session(0)
    ev_b = rig.ev_session(1)
    evcs_a = rig.evcs_session()
    evcs_b = rig.evcs_session()
    m1_a = ev_a.start_auth(rig.clock.now_ms)
    m1_b = ev_b.start_auth(rig.clock.now_ms + 1)
    m3_a = ev_a.handle_m2(evcs_a.handle_m1(m1_a, rig.clock.now_ms))
    evcs_b.handle_m1(m1_b, rig.clock.now_ms)
    with pytest.raises((ChallengeMismatchError, DecryptFailedError)):
        evcs_b.handle_m3(m3_a)


def test_m3_tampered_chain_detected(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    evcs.handle_m1(m1, rig.clock.now_ms)
    bad_t3 = sha256(sha256(encode_timestamp(m1.t1_ms + 1)))
    payload = evcs.c_cyber + DeterministicRng(b"\x42" * 32).randbytes(32) + bad_t3
    forged = MessageM3(
        ciphertext=pk_encrypt(rig.rng.child("f3"), rig.station.keypair.public_key, payload)
    )
    with pytest.raises(HashChainMismatchError):
        evcs.handle_m3(forged)


# ---------------------------------------------------------------------------
# handle_m4
# ---------------------------------------------------------------------------

def test_m4_guessed_challenge_mismatch(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m3 = ev.handle_m2(evcs.handle_m1(m1, rig.clock.now_ms))
    evcs.handle_m3(m3)
    guess = DeterministicRng(b"\x43" * 32).randbytes(32)
    t4 = sha256(ev.t3)
    forged = MessageM4(
        ciphertext=pk_encrypt(rig.rng.child("f4"), rig.pids[0].keypair.public_key, guess + t4)
    )
    with pytest.raises(ChallengeMismatchError):
        ev.handle_m4(forged)


def test_m4_replay_from_previous_session_rejected(rig):
    ev1 = rig.ev_session(0)
    evcs1 = rig.evcs_session()
    m1 = ev1.start_auth(rig.clock.now_ms)
    m3 = ev1.handle_m2(evcs1.handle_m1(m1, rig.clock.now_ms))
    old_m4 = evcs1.handle_m3(m3)
    # Fresh session under a different pseudonym cannot accept the stale M4.
    ev2 = rig.ev_session(1)
    evcs2 = rig.evcs_session()
    m1b = ev2.start_auth(rig.clock.now_ms + 5_000)
    ev2.handle_m2(evcs2.handle_m1(m1b, rig.clock.now_ms + 5_000))
    with pytest.raises((DecryptFailedError, ChallengeMismatchError)):
        ev2.handle_m4(old_m4)


def test_m4_wrong_chain_detected(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m3 = ev.handle_m2(evcs.handle_m1(m1, rig.clock.now_ms))
    evcs.handle_m3(m3)
    bad_t4 = sha256(sha256(ev.t3))  # one link too far
    forged = MessageM4(
        ciphertext=pk_encrypt(
            rig.rng.child("f5"), rig.pids[0].keypair.public_key, ev.c_physical + bad_t4
        )
    )
    with pytest.raises(HashChainMismatchError):
        ev.handle_m4(forged)


# ---------------------------------------------------------------------------
# Step 5: credentials and key establishment
# ---------------------------------------------------------------------------

def test_rotated_station_credential_fails_ev_side(rig):
    ev, evcs = rig.ev_session(), rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m3 = ev.handle_m2(evcs.handle_m1(m1, rig.clock.now_ms))
    ev.handle_m4(evcs.handle_m3(m3))
    old_credential = rig.station.credential
    rig.ca.rotate_evcs_credentials(rig.station.evcs_id)
    assert not ev.verify_station_credential(old_credential)
    with pytest.raises(NotAuthenticatedError):
        ev.establish_session()


def test_absent_pid_hash_fails_evcs_side(rig):
    ev, evcs = rig.ev_session(), rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m3 = ev.handle_m2(evcs.handle_m1(m1, rig.clock.now_ms))
    ev.handle_m4(evcs.handle_m3(m3))
    rig.ca.mark_pid_consumed(rig.pids[0].pid)  # now absent from the hash set
    assert not evcs.verify_user_credential(rig.user.credential)
    with pytest.raises(NotAuthenticatedError):
        evcs.establish_session()


def test_establish_without_m4_rejected(rig):
    ev = rig.ev_session()
    ev.start_auth(rig.clock.now_ms)
    with pytest.raises(NotAuthenticatedError):
        ev.establish_session()


def test_establishment_consumes_pid_at_pki(rig):
    rig.complete_handshake(pid_index=0)
    with pytest.raises(ConsumedPidError):
        rig.ca.lookup_user_pubkey(rig.pids[0].pid)


def test_session_key_only_in_authenticated_phase(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    assert ev.session_key is None and evcs.session_key is None
    m1 = ev.start_auth(rig.clock.now_ms)
    m2 = evcs.handle_m1(m1, rig.clock.now_ms)
    assert ev.session_key is None and evcs.session_key is None
    m3 = ev.handle_m2(m2)
    m4 = evcs.handle_m3(m3)
    assert ev.session_key is None and evcs.session_key is None
    ev.handle_m4(m4)
    ev.verify_station_credential(rig.station.credential)
    evcs.verify_user_credential(rig.user.credential)
    assert evcs.establish_session() == ev.establish_session()


# ---------------------------------------------------------------------------
# State discipline
# ---------------------------------------------------------------------------

def test_out_of_order_frames_rejected(rig):
    ev = rig.ev_session()
    evcs = rig.evcs_session()
    m1 = ev.start_auth(rig.clock.now_ms)
    m2 = evcs.handle_m1(m1, rig.clock.now_ms)
    m3 = ev.handle_m2(m2)
    with pytest.raises(ProtocolOrderError):
        ev.handle_m2(m2)  # M2 again after moving past SENT_M1
    evcs.handle_m3(m3)
    with pytest.raises(ProtocolOrderError):
        evcs.handle_m3(m3)


def test_failed_session_stays_failed(rig):
    ev = rig.ev_session(plugged=False)
    with pytest.raises(NotPluggedError):
        ev.start_auth(rig.clock.now_ms)
    with pytest.raises(ProtocolOrderError):
        ev.start_auth(rig.clock.now_ms)
    assert ev.phase is EvPhase.FAILED
