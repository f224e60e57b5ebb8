"""Smart-contract engine for one charging slot.

Flow per slot: both sides submit utility terms, the contract computes the
energy schedule that maximizes their joint surplus, monitors paired meter
reports against a tolerance, bills at slot end, and either finalizes onto
the ledger (both acks) or opens a dispute.

Utility model (concave piecewise-quadratic, x in kWh, positive = charge):

  user, charging     a*x - b*x^2 - p_c*x
  user, discharging  p_d*s - g*s - d*s^2        with s = -x
  station, charging  (p_c - c_g)*x
  station, discharging (v_g - p_d)*s

Price terms transfer between the parties and cancel in the sum, so the
joint surplus is (a - c_g)*x - b*x^2 when charging and
(v_g - g)*s - d*s^2 when discharging, maximized in closed form at the
clamped vertex of each branch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .crypto import sha256
from .ledger import (
    DisputeCause,
    DisputePayload,
    EntryKind,
    Ledger,
    LedgerEntry,
    TransactionPayload,
)
from .simtime import Clock

DEFAULT_METER_TOLERANCE_KWH = 0.05

# Guard against float dust when readings accumulate; one micro-Wh.
_METER_EPS = 1e-9


class ContractError(Exception):
    pass


class InvalidParamsError(ContractError):
    pass


class NoSessionError(ContractError):
    """Operation requires an authenticated charging session."""


class MissingReadingError(ContractError):
    """One side reported nothing for a full tick."""


class MeteringUnresolvedError(ContractError):
    pass


class RejectedError(ContractError):
    """Billing was not acknowledged by both parties."""


class SlotNotEndedError(ContractError):
    pass


class UnresolvedSlotError(ContractError):
    pass


# ---------------------------------------------------------------------------
# Parameters and bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserUtility:
    """Vehicle-side utility shape, $/kWh and $/kWh^2."""

    alpha: float   # marginal charging benefit
    beta: float    # charging-benefit curvature, > 0
    gamma: float   # discharge degradation cost
    delta: float   # discharge inconvenience curvature, > 0


@dataclass(frozen=True)
class StationTerms:
    """Station-side prices, grid costs, and the flat service fee."""

    p_c: float     # charging price
    p_d: float     # discharging price
    c_g: float     # grid procurement cost
    v_g: float     # grid value of injected energy
    fee: float     # flat service fee, paid by the vehicle


@dataclass(frozen=True)
class TradeParams:
    alpha: float
    beta: float
    gamma: float
    delta: float
    p_c: float
    p_d: float
    c_g: float
    v_g: float
    fee: float

    def validate(self) -> None:
        if self.beta <= 0 or self.delta <= 0:
            raise InvalidParamsError("curvatures beta and delta must be positive")
        for name in ("alpha", "gamma", "p_c", "p_d", "c_g", "v_g", "fee"):
            if getattr(self, name) < 0:
                raise InvalidParamsError(f"{name} must be non-negative")

    @classmethod
    def merge(cls, user: UserUtility, station: StationTerms) -> "TradeParams":
        params = cls(
            alpha=user.alpha,
            beta=user.beta,
            gamma=user.gamma,
            delta=user.delta,
            p_c=station.p_c,
            p_d=station.p_d,
            c_g=station.c_g,
            v_g=station.v_g,
            fee=station.fee,
        )
        params.validate()
        return params


@dataclass(frozen=True)
class EnergyBounds:
    """Feasible exchange this slot: x_min <= 0 <= x_max, kWh."""

    x_min: float
    x_max: float

    def validate(self) -> None:
        if not (self.x_min <= 0.0 <= self.x_max):
            raise InvalidParamsError("bounds must straddle zero")


@dataclass
class BatteryState:
    capacity_kwh: float
    soc_kwh: float
    charger_limit_kwh: float
    efficiency: float = 1.0

    def bounds(self) -> EnergyBounds:
        return EnergyBounds(
            x_min=-min(self.charger_limit_kwh, self.soc_kwh),
            x_max=min(self.charger_limit_kwh, self.capacity_kwh - self.soc_kwh),
        )

    def apply_exchange(self, x_kwh: float) -> None:
        if x_kwh >= 0:
            self.soc_kwh = min(self.capacity_kwh, self.soc_kwh + x_kwh * self.efficiency)
        else:
            self.soc_kwh = max(0.0, self.soc_kwh - (-x_kwh) / self.efficiency)


# ---------------------------------------------------------------------------
# Joint utility and its maximizer
# ---------------------------------------------------------------------------

def user_utility(x_kwh: float, p: TradeParams) -> float:
    if x_kwh >= 0:
        return p.alpha * x_kwh - p.beta * x_kwh**2 - p.p_c * x_kwh
    s = -x_kwh
    return p.p_d * s - p.gamma * s - p.delta * s**2


def station_utility(x_kwh: float, p: TradeParams) -> float:
    if x_kwh >= 0:
        return (p.p_c - p.c_g) * x_kwh
    s = -x_kwh
    return (p.v_g - p.p_d) * s


def joint_utility(x_kwh: float, p: TradeParams) -> float:
    if x_kwh >= 0:
        return (p.alpha - p.c_g) * x_kwh - p.beta * x_kwh**2
    s = -x_kwh
    return (p.v_g - p.gamma) * s - p.delta * s**2


def compute_optimal_exchange(p: TradeParams, bounds: EnergyBounds) -> float:
    """Argmax of the joint utility over [x_min, x_max].

    Each branch is concave, so the maximum sits at a clamped vertex or at
    zero; ties break toward the smaller exchange.
    """
    bounds.validate()
    charge_vertex = (p.alpha - p.c_g) / (2.0 * p.beta)
    discharge_vertex = -(p.v_g - p.gamma) / (2.0 * p.delta)
    candidates = [
        0.0,
        min(max(charge_vertex, 0.0), bounds.x_max),
        max(min(discharge_vertex, 0.0), bounds.x_min),
    ]
    return max(candidates, key=lambda x: (joint_utility(x, p), -abs(x)))


# ---------------------------------------------------------------------------
# Metering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeterReading:
    source_ev: bool
    slot: int
    cumulative_kwh: float
    tick: int


@dataclass(frozen=True)
class TickStatus:
    tick: int
    ev_kwh: float
    evcs_kwh: float
    ok: bool


class MeteringMonitor:
    """Per-tick comparison of both cumulative meters; first violation latches."""

    def __init__(self, tolerance_kwh: float = DEFAULT_METER_TOLERANCE_KWH):
        self.tolerance_kwh = tolerance_kwh
        self.statuses: list[TickStatus] = []
        self.violation: Optional[TickStatus] = None
        self.last_ev_kwh: Optional[float] = None
        self.last_evcs_kwh: Optional[float] = None

    def check_tick(
        self, tick: int, ev_kwh: Optional[float], evcs_kwh: Optional[float]
    ) -> TickStatus:
        if ev_kwh is None or evcs_kwh is None:
            silent = "EV" if ev_kwh is None else "EVCS"
            raise MissingReadingError(f"{silent} reported no reading for tick {tick}")
        ok = abs(ev_kwh - evcs_kwh) <= self.tolerance_kwh + _METER_EPS
        status = TickStatus(tick=tick, ev_kwh=ev_kwh, evcs_kwh=evcs_kwh, ok=ok)
        self.statuses.append(status)
        if not ok and self.violation is None:
            self.violation = status
        self.last_ev_kwh = ev_kwh
        self.last_evcs_kwh = evcs_kwh
        return status

    @property
    def ok(self) -> bool:
        return self.violation is None


# ---------------------------------------------------------------------------
# Billing
# ---------------------------------------------------------------------------

class Payer(Enum):
    EV = "ev"
    EVCS = "evcs"


@dataclass(frozen=True)
class Bill:
    slot: int
    energy_kwh: float
    energy_amount: float
    fee: float
    total: float
    payer: Payer

    def flows(self) -> dict[str, float]:
        """Signed money movement per party; always sums to zero."""
        if self.energy_kwh > 0:
            return {
                "ev": -(self.energy_amount + self.fee),
                "evcs": self.energy_amount,
                "operator": self.fee,
            }
        return {
            "ev": self.energy_amount - self.fee,
            "evcs": -self.energy_amount,
            "operator": self.fee,
        }


def generate_bill(delivered_kwh: float, p: TradeParams, slot: int) -> Bill:
    """Bill for the energy exchanged plus the flat fee (always the EV's).

    The energy payment runs EV -> station when charging and station -> EV
    when discharging; `total` is all money moved including the fee.
    """
    if delivered_kwh > 0:
        energy_amount = p.p_c * delivered_kwh
        payer = Payer.EV
    elif delivered_kwh < 0:
        energy_amount = p.p_d * -delivered_kwh
        payer = Payer.EVCS
    else:
        energy_amount = 0.0
        payer = Payer.EV  # fee-only bill
    return Bill(
        slot=slot,
        energy_kwh=delivered_kwh,
        energy_amount=energy_amount,
        fee=p.fee,
        total=abs(energy_amount) + p.fee,
        payer=payer,
    )


# ---------------------------------------------------------------------------
# Disputes
# ---------------------------------------------------------------------------

class Resolution(Enum):
    SETTLED_MINIMUM = "settled_minimum"
    VOIDED = "voided"


@dataclass
class DisputeCase:
    slot: int
    cause: DisputeCause
    evidence: dict
    resolution: Optional[Resolution] = None
    settled_bill: Optional[Bill] = None


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

class SlotPhase(Enum):
    AWAIT_PARAMS = "await_params"
    METERING = "metering"
    SLOT_ENDED = "slot_ended"
    FINALIZED = "finalized"
    DISPUTED = "disputed"
    RESOLVED = "resolved"
    CLOSED = "closed"


def _milli(value: float) -> int:
    return int(round(value * 1000))


@dataclass
class ContractSession:
    """Contract instance governing a single authenticated session's slot."""

    ledger: Ledger
    clock: Clock
    pid: str
    evcs_id: str
    slot: int
    authenticated: bool
    tolerance_kwh: float = DEFAULT_METER_TOLERANCE_KWH

    phase: SlotPhase = SlotPhase.AWAIT_PARAMS
    params: Optional[TradeParams] = None
    bounds: Optional[EnergyBounds] = None
    x_star: Optional[float] = None
    monitor: MeteringMonitor = field(init=False)
    bill: Optional[Bill] = None
    dispute: Optional[DisputeCase] = None
    transaction: Optional[TransactionPayload] = None

    def __post_init__(self):
        self.monitor = MeteringMonitor(self.tolerance_kwh)

    # -- scheduling ---------------------------------------------------------

    def submit_utilities(
        self, user: UserUtility, station: StationTerms, bounds: EnergyBounds
    ) -> float:
        """Merge both parties' terms and publish the slot schedule."""
        if not self.authenticated:
            raise NoSessionError("no authenticated session for this contract")
        if self.phase is not SlotPhase.AWAIT_PARAMS:
            raise ContractError(f"cannot submit in phase {self.phase}")
        params = TradeParams.merge(user, station)
        bounds.validate()
        self.params = params
        self.bounds = bounds
        self.x_star = compute_optimal_exchange(params, bounds)
        self.phase = SlotPhase.METERING
        return self.x_star

    # -- metering -----------------------------------------------------------

    def record_tick(
        self, tick: int, ev_kwh: Optional[float], evcs_kwh: Optional[float]
    ) -> TickStatus:
        if self.phase is not SlotPhase.METERING:
            raise ContractError(f"not metering in phase {self.phase}")
        return self.monitor.check_tick(tick, ev_kwh, evcs_kwh)

    def end_slot(self) -> None:
        if self.phase is not SlotPhase.METERING:
            raise ContractError(f"cannot end slot in phase {self.phase}")
        self.phase = SlotPhase.SLOT_ENDED

    # -- billing and finalization ---------------------------------------------

    def generate_bill(self) -> Bill:
        if self.phase is not SlotPhase.SLOT_ENDED:
            raise SlotNotEndedError("bill requested before slot end")
        if not self.monitor.ok:
            raise MeteringUnresolvedError("metering violation latched for this slot")
        delivered = self.monitor.last_evcs_kwh or 0.0  # station meter of record
        self.bill = generate_bill(delivered, self.params, self.slot)
        return self.bill

    def finalize(self, ev_ack: bool, evcs_ack: bool) -> TransactionPayload:
        """Both acks finalize onto the ledger; anything else is rejected."""
        if self.phase is not SlotPhase.SLOT_ENDED:
            raise SlotNotEndedError("finalize before slot end")
        if not self.monitor.ok:
            raise MeteringUnresolvedError("metering violation latched for this slot")
        if self.bill is None:
            raise ContractError("no bill generated")
        if not (ev_ack and evcs_ack):
            raise RejectedError("billing amount was not acknowledged by both parties")
        payload = TransactionPayload(
            pid=self.pid,
            evcs_id=self.evcs_id,
            slot=self.slot,
            energy_milli_kwh=_milli(self.bill.energy_kwh),
            amount_milli=_milli(self.bill.total),
            finalized_at_ms=self.clock.now_ms,
        )
        self.ledger.append_entry(
            LedgerEntry(
                kind=EntryKind.TRANSACTION,
                payload=payload.encode(),
                timestamp_ms=self.clock.now_ms,
                author=self.evcs_id,
            )
        )
        self.transaction = payload
        self.phase = SlotPhase.FINALIZED
        return payload

    # -- disputes ------------------------------------------------------------

    def open_dispute(self, cause: DisputeCause, evidence: dict) -> DisputeCase:
        """Record the dispute on the ledger; at most one per slot."""
        if self.dispute is not None:
            return self.dispute
        if self.phase is SlotPhase.FINALIZED:
            raise ContractError("slot already finalized")
        case = DisputeCase(slot=self.slot, cause=cause, evidence=evidence)
        evidence_hash = sha256(json.dumps(evidence, sort_keys=True).encode("utf-8"))
        payload = DisputePayload(
            pid=self.pid,
            evcs_id=self.evcs_id,
            slot=self.slot,
            cause=cause,
            evidence_hash=evidence_hash,
            opened_at_ms=self.clock.now_ms,
        )
        self.ledger.append_entry(
            LedgerEntry(
                kind=EntryKind.DISPUTE,
                payload=payload.encode(),
                timestamp_ms=self.clock.now_ms,
                author=self.evcs_id,
            )
        )
        self.dispute = case
        self.phase = SlotPhase.DISPUTED
        return case

    def resolve_dispute(self) -> Resolution:
        """Deterministic resolution; resolving twice is a no-op.

        Meter mismatch settles at the undisputed quantity (the smaller
        absolute reading); rejection and default void the energy payment
        with the fee still owed.
        """
        if self.dispute is None:
            raise ContractError("no dispute open")
        case = self.dispute
        if case.resolution is not None:
            return case.resolution
        if case.cause is DisputeCause.METER_MISMATCH:
            ev_kwh = self.monitor.last_ev_kwh or 0.0
            evcs_kwh = self.monitor.last_evcs_kwh or 0.0
            undisputed = min(abs(ev_kwh), abs(evcs_kwh))
            sign = 1.0 if (ev_kwh + evcs_kwh) >= 0 else -1.0
            case.settled_bill = generate_bill(sign * undisputed, self.params, self.slot)
            case.resolution = Resolution.SETTLED_MINIMUM
        else:
            case.settled_bill = generate_bill(0.0, self.params, self.slot)
            case.resolution = Resolution.VOIDED
        self.phase = SlotPhase.RESOLVED
        return case.resolution

    # -- cycle preparation ---------------------------------------------------

    def log_and_prepare_next(self, battery: BatteryState) -> EnergyBounds:
        """Apply the scheduled exchange to the battery and emit next bounds."""
        if self.phase not in (SlotPhase.FINALIZED, SlotPhase.RESOLVED):
            raise UnresolvedSlotError(f"slot {self.slot} is {self.phase.value}")
        battery.apply_exchange(self.x_star or 0.0)
        self.phase = SlotPhase.CLOSED
        return battery.bounds()
