"""Shared wiring for protocol-level tests."""

from dataclasses import dataclass

import pytest

from pncsim.actors import EvSession, EvcsSession, ReplayCache
from pncsim.crypto import DeterministicRng
from pncsim.ledger import Ledger
from pncsim.pki import CertificateAuthority, EvcsRecord, PseudoIdentity, UserRegistration
from pncsim.simtime import Clock


@dataclass
class AuthRig:
    """One registered user and station with everything needed to handshake."""

    clock: Clock
    rng: DeterministicRng
    ledger: Ledger
    ca: CertificateAuthority
    user: UserRegistration
    pids: list[PseudoIdentity]
    station: EvcsRecord
    replay_cache: ReplayCache
    used_pids: set
    session_counter: int = 0

    def _next_stream(self, side: str) -> "DeterministicRng":
        self.session_counter += 1
        return self.rng.child(f"{side}-{self.session_counter}")

    def ev_session(self, pid_index: int = 0, plugged: bool = True) -> EvSession:
        return EvSession(
            pid=self.pids[pid_index],
            credential=self.user.credential,
            pki=self.ca,
            ledger=self.ledger,
            rng=self._next_stream("ev"),
            is_plugged=lambda: plugged,
            used_pids=self.used_pids,
        )

    def evcs_session(self) -> EvcsSession:
        return EvcsSession(
            evcs_id=self.station.evcs_id,
            private_key=self.station.keypair.private_key,
            pki=self.ca,
            rng=self._next_stream("evcs"),
            replay_cache=self.replay_cache,
        )

    def complete_handshake(self, pid_index: int = 0):
        """Run the full honest handshake; returns (ev, evcs, ev_key, evcs_key)."""
        ev = self.ev_session(pid_index)
        evcs = self.evcs_session()
        m1 = ev.start_auth(self.clock.now_ms)
        m2 = evcs.handle_m1(m1, self.clock.now_ms)
        m3 = ev.handle_m2(m2)
        m4 = evcs.handle_m3(m3)
        ev.handle_m4(m4)
        assert ev.verify_station_credential(self.station.credential)
        assert evcs.verify_user_credential(self.user.credential)
        evcs_key = evcs.establish_session()
        ev_key = ev.establish_session()
        return ev, evcs, ev_key, evcs_key


def build_rig(seed: bytes = b"\x21" * 32, n_pids: int = 8) -> AuthRig:
    clock = Clock()
    rng = DeterministicRng(seed)
    ledger = Ledger()
    ca = CertificateAuthority(rng.child("ca"), clock, ledger)
    user = ca.register_user("driver-1")
    pids = ca.issue_pseudo_batch(user.root_pid, n_pids)
    station = ca.register_evcs()
    ledger.seal_block()
    return AuthRig(
        clock=clock,
        rng=rng,
        ledger=ledger,
        ca=ca,
        user=user,
        pids=pids,
        station=station,
        replay_cache=ReplayCache(window_ms=240_000),
        used_pids=set(),
    )


@pytest.fixture
def rig() -> AuthRig:
    return build_rig()
