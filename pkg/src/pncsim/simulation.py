"""End-to-end simulation: wires PKI, ledger, channels, actors, and the
contract into registration, authentication, and trading cycles.

Every run is a pure function of (config, seed): component randomness comes
from named substreams of one master generator, time from the simulated
clock, and frames move through the channel fabric so an installed
interceptor sees exactly what a radio adversary would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .actors import (
    AuthError,
    EvSession,
    EvcsSession,
    ReplayCache,
    DEFAULT_FRESHNESS_WINDOW_MS,
)
from .channels import (
    Channel,
    ChannelError,
    ChannelFabric,
    Envelope,
    MessageM1,
    MessageM2,
    MessageM3,
    MessageM4,
    MeterFrame,
    SessionDataFrame,
    decode_message,
    encode_message,
)
from .contract import (
    BatteryState,
    ContractSession,
    ContractError,
    MissingReadingError,
    RejectedError,
    StationTerms,
    UserUtility,
)
from .crypto import DeterministicRng, SessionCipher, TamperedError
from .ledger import DisputeCause, Ledger
from .pki import CertificateAuthority, PkiError, PseudoIdentity, UserRegistration, EvcsRecord
from .simtime import Clock


@dataclass
class Range:
    lo: float
    hi: float

    def draw(self, rng: DeterministicRng) -> float:
        return rng.uniform(self.lo, self.hi)


@dataclass
class ScenarioConfig:
    seed: int = 1
    users: int = 2
    stations: int = 1
    slots: int = 3
    slot_ticks: int = 5
    inter_slot_gap_s: int = 0
    freshness_window_ms: int = DEFAULT_FRESHNESS_WINDOW_MS
    meter_tolerance_kwh: float = 0.05
    capture: bool = False
    attacks: list[dict] = field(default_factory=list)
    # privacy-scenario knobs: vehicles return with a fresh state of charge
    # between slots, and the ablated arm reuses one pseudonym per user
    reset_soc_each_slot: bool = False
    reuse_pids: bool = False
    # per-session draws
    alpha_range: Range = field(default_factory=lambda: Range(0.3, 0.7))
    beta_range: Range = field(default_factory=lambda: Range(0.005, 0.02))
    gamma_range: Range = field(default_factory=lambda: Range(0.05, 0.15))
    delta_range: Range = field(default_factory=lambda: Range(0.005, 0.02))
    p_c_range: Range = field(default_factory=lambda: Range(0.15, 0.25))
    p_d_range: Range = field(default_factory=lambda: Range(0.2, 0.3))
    c_g_range: Range = field(default_factory=lambda: Range(0.05, 0.12))
    v_g_range: Range = field(default_factory=lambda: Range(0.25, 0.35))
    fee_range: Range = field(default_factory=lambda: Range(0.3, 0.7))
    capacity_range: Range = field(default_factory=lambda: Range(50.0, 80.0))
    soc_fraction_range: Range = field(default_factory=lambda: Range(0.2, 0.8))
    charger_limit_range: Range = field(default_factory=lambda: Range(10.0, 25.0))


# ---------------------------------------------------------------------------
# Devices
# ---------------------------------------------------------------------------

@dataclass
class EvDevice:
    name: str
    endpoint: str
    registration: UserRegistration
    pids: list[PseudoIdentity]
    battery: BatteryState
    used_pids: set[str] = field(default_factory=set)
    pid_cursor: int = 0
    local_log: list[dict] = field(default_factory=list)
    reuse_first_pid: bool = False
    # misbehavior knobs used by attack scenarios
    meter_skew_kwh: float = 0.0
    refuse_to_pay: bool = False
    silent_meter: bool = False
    shift_t3_chain: bool = False

    def next_pid(self) -> PseudoIdentity:
        if self.reuse_first_pid:
            return self.pids[0]
        pid = self.pids[self.pid_cursor]
        self.pid_cursor += 1
        return pid

    def current_pid(self) -> PseudoIdentity:
        return self.pids[max(self.pid_cursor - 1, 0)]


@dataclass
class StationDevice:
    endpoint: str
    record: EvcsRecord
    replay_cache: ReplayCache
    # misbehavior knobs used by attack scenarios
    meter_skew_kwh: float = 0.0
    bill_price_substitute: Optional[float] = None
    shift_t2_ms: int = 0
    shift_t4_chain: bool = False


class World:
    """Everything one scenario run owns."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = DeterministicRng(config.seed)
        self.clock = Clock()
        self.ledger = Ledger()
        self.ca = CertificateAuthority(self.rng.child("pki"), self.clock, self.ledger)
        self.fabric = ChannelFabric(self.rng.child("fabric"), self.clock)
        self.evs: list[EvDevice] = []
        self.stations: list[StationDevice] = []
        self.session_counter = 0

    def session_rng(self, side: str) -> DeterministicRng:
        self.session_counter += 1
        return self.rng.child(f"{side}-{self.session_counter}")


def build_world(config: ScenarioConfig, pids_per_user: Optional[int] = None) -> World:
    world = World(config)
    rng = world.rng.child("setup")
    for s in range(config.stations):
        record = world.ca.register_evcs()
        endpoint = f"station-{s}"
        world.fabric.register_endpoint(endpoint)
        world.stations.append(
            StationDevice(
                endpoint=endpoint,
                record=record,
                replay_cache=ReplayCache(window_ms=2 * config.freshness_window_ms),
            )
        )
    for u in range(config.users):
        registration = world.ca.register_user(f"driver-{u}")
        pids = world.ca.issue_pseudo_batch(
            registration.root_pid, pids_per_user or max(config.slots, 1)
        )
        endpoint = f"ev-{u}"
        world.fabric.register_endpoint(endpoint)
        capacity = config.capacity_range.draw(rng)
        world.evs.append(
            EvDevice(
                name=f"ev-{u}",
                endpoint=endpoint,
                registration=registration,
                pids=pids,
                battery=BatteryState(
                    capacity_kwh=capacity,
                    soc_kwh=capacity * config.soc_fraction_range.draw(rng),
                    charger_limit_kwh=config.charger_limit_range.draw(rng),
                ),
            )
        )
    world.ledger.seal_block()  # registration epoch
    return world


# ---------------------------------------------------------------------------
# Authentication over the fabric
# ---------------------------------------------------------------------------

@dataclass
class AuthOutcome:
    pid: str
    evcs_id: str
    authenticated: bool
    error: Optional[str] = None
    ev_session: Optional[EvSession] = None
    evcs_session: Optional[EvcsSession] = None


def _send(world: World, channel: Channel, sender: str, receiver: str, msg) -> None:
    world.fabric.send(Envelope(channel, sender, receiver, encode_message(msg)))


def _recv(world: World, endpoint: str, channel: Channel):
    env = world.fabric.recv(endpoint, channel)
    return None if env is None else decode_message(env.body)


def run_authentication(
    world: World,
    ev: EvDevice,
    station: StationDevice,
    consume_pid: bool = True,
    pid: Optional[PseudoIdentity] = None,
) -> AuthOutcome:
    """Plug in, handshake the transport, and run the four-frame exchange
    plus credential checks through the channel fabric."""
    pid = pid or ev.next_pid()
    ev_session = EvSession(
        pid=pid,
        credential=ev.registration.credential,
        pki=world.ca,
        ledger=world.ledger,
        rng=world.session_rng("ev"),
        is_plugged=lambda: world.fabric.is_plugged(ev.endpoint, station.endpoint),
        used_pids=ev.used_pids,
    )
    evcs_session = EvcsSession(
        evcs_id=station.record.evcs_id,
        private_key=station.record.keypair.private_key,
        pki=world.ca,
        rng=world.session_rng("evcs"),
        replay_cache=station.replay_cache,
        freshness_window_ms=world.config.freshness_window_ms,
    )
    outcome = AuthOutcome(
        pid=pid.pid,
        evcs_id=station.record.evcs_id,
        authenticated=False,
        ev_session=ev_session,
        evcs_session=evcs_session,
    )

    world.fabric.connect_plug(ev.endpoint, station.endpoint)
    try:
        world.fabric.transport_handshake(ev.endpoint, station.endpoint)

        m1 = ev_session.start_auth(world.clock.now_ms)
        _send(world, Channel.WIRELESS, ev.endpoint, station.endpoint, m1)

        got_m1 = _recv(world, station.endpoint, Channel.WIRELESS)
        if not isinstance(got_m1, MessageM1):
            outcome.error = "dropped:m1"
            return outcome
        m2 = evcs_session.handle_m1(got_m1, world.clock.now_ms)
        m2 = _station_tamper_m2(station, evcs_session, got_m1, m2, world)
        _send(world, Channel.WIRELESS, station.endpoint, ev.endpoint, m2)

        got_m2 = _recv(world, ev.endpoint, Channel.WIRELESS)
        if not isinstance(got_m2, MessageM2):
            outcome.error = "dropped:m2"
            return outcome
        m3 = ev_session.handle_m2(got_m2)
        m3 = _ev_tamper_m3(ev, ev_session, m3, world)
        # The physical challenge rides the wired link only.
        _send(world, Channel.CAN_BUS, ev.endpoint, station.endpoint, m3)

        got_m3 = _recv(world, station.endpoint, Channel.CAN_BUS)
        if not isinstance(got_m3, MessageM3):
            outcome.error = "dropped:m3"
            return outcome
        m4 = evcs_session.handle_m3(got_m3)
        m4 = _station_tamper_m4(station, evcs_session, m4, world)
        _send(world, Channel.WIRELESS, station.endpoint, ev.endpoint, m4)

        got_m4 = _recv(world, ev.endpoint, Channel.WIRELESS)
        if not isinstance(got_m4, MessageM4):
            outcome.error = "dropped:m4"
            return outcome
        ev_session.handle_m4(got_m4)

        if not ev_session.verify_station_credential(station.record.credential):
            outcome.error = "station_credential_rejected"
            return outcome
        if not evcs_session.verify_user_credential(ev.registration.credential):
            outcome.error = "user_credential_rejected"
            return outcome

        evcs_key = evcs_session.establish_session()
        ev_key = ev_session.establish_session()
        if not consume_pid:
            # Ablation hook for privacy scenarios: single-use is the defense
            # under test, so the disabled arm puts the pseudonym back.
            world.ca._pids[pid.pid].consumed = False
            ev.used_pids.discard(pid.pid)
        outcome.authenticated = ev_key == evcs_key
        if not outcome.authenticated:
            outcome.error = "session_key_mismatch"
    except (AuthError, PkiError, ChannelError, TamperedError) as exc:
        outcome.error = f"{type(exc).__name__}: {exc}"
    return outcome


def _station_tamper_m2(
    station: StationDevice,
    session: EvcsSession,
    m1: MessageM1,
    m2: MessageM2,
    world: World,
) -> MessageM2:
    """Hash-chain perturbation hook: rebuild M2 with T2 = H(T1 + shift)."""
    if station.shift_t2_ms == 0:
        return m2
    from . import encoding as enc
    from .crypto import hash_timestamp, pk_encrypt

    bad_t2 = hash_timestamp(m1.t1_ms + station.shift_t2_ms)
    payload = session.c_cyber + enc.enc_str(session.evcs_id) + bad_t2
    user_pub = world.ca.lookup_user_pubkey(m1.pid)
    return MessageM2(ciphertext=pk_encrypt(world.session_rng("tamper"), user_pub, payload))


def _station_tamper_m4(
    station: StationDevice, session: EvcsSession, m4: MessageM4, world: World
) -> MessageM4:
    """Hash-chain perturbation hook: rebuild M4 with a broken T4 link."""
    if not station.shift_t4_chain:
        return m4
    from .crypto import pk_encrypt, sha256

    bad_t4 = sha256(sha256(session.recovered_t3))  # one link too far
    user_pub = world.ca.lookup_user_pubkey(session.pid)
    return MessageM4(
        ciphertext=pk_encrypt(
            world.session_rng("tamper"), user_pub, session.recovered_c_physical + bad_t4
        )
    )


def _ev_tamper_m3(
    ev: EvDevice, session: EvSession, m3: MessageM3, world: World
) -> MessageM3:
    """Hash-chain perturbation hook: rebuild M3 with a broken T3 link."""
    if not ev.shift_t3_chain:
        return m3
    from .crypto import pk_encrypt, sha256

    bad_t3 = sha256(sha256(session.recovered_t2))  # one link too far
    evcs_pub = world.ca.lookup_evcs_pubkey(session.recovered_evcs_id)
    payload = session.recovered_c_cyber + session.c_physical + bad_t3
    return MessageM3(ciphertext=pk_encrypt(world.session_rng("tamper"), evcs_pub, payload))


# ---------------------------------------------------------------------------
# Trading over an authenticated session
# ---------------------------------------------------------------------------

@dataclass
class SlotOutcome:
    slot: int
    pid: str
    evcs_id: str
    x_star_kwh: float = 0.0
    bill_total: float = 0.0
    status: str = "skipped"
    dispute_cause: Optional[str] = None

    def to_report(self) -> dict:
        return {
            "slot": self.slot,
            "pid": self.pid,
            "evcs_id": self.evcs_id,
            "x_star_kwh": round(self.x_star_kwh, 6),
            "bill_total": round(self.bill_total, 6),
            "status": self.status,
            "dispute_cause": self.dispute_cause,
        }


def _draw_user_utility(config: ScenarioConfig, rng: DeterministicRng) -> UserUtility:
    return UserUtility(
        alpha=config.alpha_range.draw(rng),
        beta=config.beta_range.draw(rng),
        gamma=config.gamma_range.draw(rng),
        delta=config.delta_range.draw(rng),
    )


def _draw_station_terms(config: ScenarioConfig, rng: DeterministicRng) -> StationTerms:
    return StationTerms(
        p_c=config.p_c_range.draw(rng),
        p_d=config.p_d_range.draw(rng),
        c_g=config.c_g_range.draw(rng),
        v_g=config.v_g_range.draw(rng),
        fee=config.fee_range.draw(rng),
    )


def run_trading_slot(
    world: World,
    ev: EvDevice,
    station: StationDevice,
    auth: AuthOutcome,
    slot: int,
) -> SlotOutcome:
    """One scheduled exchange: params over the encrypted session channel,
    metering over the wire, billing, finalize-or-dispute, cycle prep."""
    config = world.config
    outcome = SlotOutcome(slot=slot, pid=auth.pid, evcs_id=auth.evcs_id)
    if not auth.authenticated:
        return outcome

    ev_cipher = SessionCipher(auth.ev_session.session_key, initiator=True)
    evcs_cipher = SessionCipher(auth.evcs_session.session_key, initiator=False)
    contract = ContractSession(
        ledger=world.ledger,
        clock=world.clock,
        pid=auth.pid,
        evcs_id=auth.evcs_id,
        slot=slot,
        authenticated=True,
        tolerance_kwh=config.meter_tolerance_kwh,
    )

    # Vehicle submits its utility shape under the session key.
    draw_rng = world.session_rng("terms")
    user_utility = _draw_user_utility(config, draw_rng)
    submission = json.dumps(
        {
            "alpha": user_utility.alpha,
            "beta": user_utility.beta,
            "gamma": user_utility.gamma,
            "delta": user_utility.delta,
        },
        sort_keys=True,
    ).encode()
    nonce, ct = ev_cipher.encrypt(submission)
    _send(world, Channel.WIRELESS, ev.endpoint, station.endpoint, SessionDataFrame(nonce, ct))

    frame = _recv(world, station.endpoint, Channel.WIRELESS)
    if not isinstance(frame, SessionDataFrame):
        outcome.status = "params_lost"
        return outcome
    received = json.loads(evcs_cipher.decrypt(frame.nonce, frame.ciphertext))
    station_terms = _draw_station_terms(config, draw_rng)
    bounds = ev.battery.bounds()
    x_star = contract.submit_utilities(
        UserUtility(**received), station_terms, bounds
    )
    outcome.x_star_kwh = x_star

    # Station confirms the agreed schedule and terms under the session key.
    schedule = {
        "x_star": x_star,
        "p_c": station_terms.p_c,
        "p_d": station_terms.p_d,
        "fee": station_terms.fee,
    }
    nonce, ct = evcs_cipher.encrypt(json.dumps(schedule, sort_keys=True).encode())
    _send(world, Channel.WIRELESS, station.endpoint, ev.endpoint, SessionDataFrame(nonce, ct))
    frame = _recv(world, ev.endpoint, Channel.WIRELESS)
    if not isinstance(frame, SessionDataFrame):
        outcome.status = "schedule_lost"
        return outcome
    agreed = json.loads(ev_cipher.decrypt(frame.nonce, frame.ciphertext))

    # Metering: both meters track the scheduled transfer at milli-kWh
    # resolution; skews model fraud.
    per_tick = x_star / config.slot_ticks
    ev_final = 0.0
    try:
        for t in range(1, config.slot_ticks + 1):
            world.clock.tick()
            true_kwh = per_tick * t
            ev_kwh: Optional[float] = None
            if not ev.silent_meter:
                _send(
                    world,
                    Channel.CAN_BUS,
                    ev.endpoint,
                    station.endpoint,
                    MeterFrame(
                        source_ev=True,
                        slot=slot,
                        cumulative_milli_kwh=_milli_kwh(true_kwh + ev.meter_skew_kwh),
                        tick=world.clock.ticks,
                    ),
                )
                got = _recv(world, station.endpoint, Channel.CAN_BUS)
                ev_kwh = (
                    got.cumulative_milli_kwh / 1000.0
                    if isinstance(got, MeterFrame)
                    else None
                )
            evcs_kwh = _milli_kwh(true_kwh + station.meter_skew_kwh) / 1000.0
            status = contract.record_tick(world.clock.ticks, ev_kwh, evcs_kwh)
            ev_final = ev_kwh if ev_kwh is not None else ev_final
            if not status.ok:
                break
    except MissingReadingError:
        case = contract.open_dispute(
            DisputeCause.METER_MISMATCH, {"missing": "ev", "slot": slot}
        )
        contract.resolve_dispute()
        outcome.status = "disputed"
        outcome.dispute_cause = case.cause.name.lower()
        _close_slot(world, ev, station, contract, outcome)
        return outcome

    contract.end_slot()

    if not contract.monitor.ok:
        v = contract.monitor.violation
        case = contract.open_dispute(
            DisputeCause.METER_MISMATCH,
            {"tick": v.tick, "ev_kwh": v.ev_kwh, "evcs_kwh": v.evcs_kwh},
        )
        contract.resolve_dispute()
        outcome.status = "disputed"
        outcome.dispute_cause = case.cause.name.lower()
        outcome.bill_total = case.settled_bill.total if case.settled_bill else 0.0
        _close_slot(world, ev, station, contract, outcome)
        return outcome

    # Billing: station presents, vehicle validates against the agreed terms.
    bill = contract.generate_bill()
    presented_total = bill.total
    if station.bill_price_substitute is not None and bill.energy_kwh > 0:
        presented_total = station.bill_price_substitute * bill.energy_kwh + bill.fee
    presented = {
        "slot": slot,
        "energy_kwh": bill.energy_kwh,
        "total": presented_total,
    }
    nonce, ct = evcs_cipher.encrypt(json.dumps(presented, sort_keys=True).encode())
    _send(world, Channel.WIRELESS, station.endpoint, ev.endpoint, SessionDataFrame(nonce, ct))
    frame = _recv(world, ev.endpoint, Channel.WIRELESS)
    presented = json.loads(ev_cipher.decrypt(frame.nonce, frame.ciphertext))

    expected = _ev_expected_bill(agreed, ev_final)
    bill_matches = abs(presented["total"] - expected) <= 1e-6
    ev_ack = bill_matches and not ev.refuse_to_pay

    try:
        record = contract.finalize(ev_ack=ev_ack, evcs_ack=True)
        outcome.status = "finalized"
        outcome.bill_total = bill.total
        ev.local_log.append(
            {
                "slot": slot,
                "evcs_id": auth.evcs_id,
                "energy_kwh": record.energy_milli_kwh / 1000.0,
                "amount": record.amount_milli / 1000.0,
            }
        )
    except RejectedError:
        cause = DisputeCause.BILL_REJECTED if not bill_matches else DisputeCause.PAYMENT_DEFAULT
        case = contract.open_dispute(
            cause, {"presented_total": presented["total"], "expected_total": expected}
        )
        contract.resolve_dispute()
        outcome.status = "disputed"
        outcome.dispute_cause = case.cause.name.lower()
        outcome.bill_total = case.settled_bill.total if case.settled_bill else 0.0

    _close_slot(world, ev, station, contract, outcome)
    return outcome


def _milli_kwh(kwh: float) -> int:
    return int(round(kwh * 1000))


def _ev_expected_bill(agreed: dict, ev_final_kwh: float) -> float:
    if ev_final_kwh > 0:
        return agreed["p_c"] * ev_final_kwh + agreed["fee"]
    if ev_final_kwh < 0:
        return agreed["p_d"] * -ev_final_kwh + agreed["fee"]
    return agreed["fee"]


def _close_slot(world, ev, station, contract, outcome) -> None:
    try:
        contract.log_and_prepare_next(ev.battery)
    except ContractError:
        pass
    world.fabric.disconnect_plug(ev.endpoint, station.endpoint)


# ---------------------------------------------------------------------------
# Full scenario
# ---------------------------------------------------------------------------

def run_cycles(world: World) -> tuple[list[AuthOutcome], list[SlotOutcome]]:
    """Registration already done in build_world; run all slots for all EVs."""
    config = world.config
    pairing_rng = world.rng.child("pairing")
    auth_outcomes: list[AuthOutcome] = []
    slot_outcomes: list[SlotOutcome] = []
    soc_rng = world.rng.child("soc-redraw")
    for slot in range(config.slots):
        for ev in world.evs:
            if config.reset_soc_each_slot:
                ev.battery.soc_kwh = ev.battery.capacity_kwh * config.soc_fraction_range.draw(soc_rng)
            ev.reuse_first_pid = config.reuse_pids
            station = world.stations[pairing_rng.randrange(len(world.stations))]
            auth = run_authentication(world, ev, station, consume_pid=not config.reuse_pids)
            auth_outcomes.append(auth)
            if auth.authenticated:
                slot_outcomes.append(run_trading_slot(world, ev, station, auth, slot))
            else:
                slot_outcomes.append(
                    SlotOutcome(slot=slot, pid=auth.pid, evcs_id=auth.evcs_id, status="auth_failed")
                )
            world.fabric.disconnect_plug(ev.endpoint, station.endpoint)
        world.ledger.seal_block()
        if config.inter_slot_gap_s:
            world.clock.advance_ms(config.inter_slot_gap_s * 1000)
    return auth_outcomes, slot_outcomes
