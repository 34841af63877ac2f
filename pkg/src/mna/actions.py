"""Network action registry and the concrete actions.

Handlers receive an action context from the engine (see
:class:`mna.engine.ActionContext`) and talk to node state only through it,
so the same handler serves single-packet processing and batch plans.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, Optional, Sequence

from .codec import FIELD_SHIFTS, FormatC, FormatD, MAX_OPCODE

log = logging.getLogger(__name__)


class Opcode(IntEnum):
    """Placeholder opcodes used until real assignments exist."""

    NOOP = 1
    NFFRR = 2
    AMM = 3
    NRP = 4
    DUMMY = 5


COLOR_NAMES = ("a", "b")

AMM_FLOW_BITS = 18
NRP_SELECTOR_BITS = 13
NFFRR_REROUTED = 0x1

_D_LO_WIDTH = FIELD_SHIFTS["D"]["data_lo"][1]
D_MUTABLE_MASK = (1 << _D_LO_WIDTH) - 1  # data_lo is the low part of a D value


def amm_encode(flow_id: int, loss_color: int, delay_color: int = 0) -> FormatC:
    """Format C LSE for the AMM action: flow id, then the L and D bits."""
    if not 0 <= flow_id < (1 << AMM_FLOW_BITS):
        raise ValueError(f"flow id {flow_id} does not fit in {AMM_FLOW_BITS} bits")
    if loss_color not in (0, 1) or delay_color not in (0, 1):
        raise ValueError("color bits must be 0 or 1")
    return FormatC(Opcode.AMM, amm_data(flow_id, loss_color, delay_color), nal=0)


def amm_data(flow_id: int, loss_color: int, delay_color: int = 0) -> int:
    return (flow_id << 2) | (loss_color << 1) | delay_color


def amm_decode(data: int) -> tuple[int, int, int]:
    return data >> 2, (data >> 1) & 1, data & 1


@dataclass(frozen=True)
class ExportRecord:
    node_id: str
    flow_id: int
    color: str
    counter: int
    timestamp: int

    def to_line(self) -> str:
        return f"{self.node_id},{self.flow_id},{self.color},{self.counter},{self.timestamp}"

    @classmethod
    def from_line(cls, line: str) -> "ExportRecord":
        node, flow, color, counter, ts = line.strip().split(",")
        return cls(node, int(flow), color, int(counter), int(ts))


@dataclass
class FlowCounters:
    n_a: int = 0
    n_b: int = 0
    last_color: Optional[int] = None

    def get(self, color: int) -> int:
        return self.n_a if color == 0 else self.n_b


@dataclass
class AmmState:
    """Per-flow color counters of one node."""

    node_id: str = ""
    flows: dict[int, FlowCounters] = field(default_factory=dict)

    def flow(self, flow_id: int) -> FlowCounters:
        fc = self.flows.get(flow_id)
        if fc is None:
            fc = self.flows[flow_id] = FlowCounters()
        return fc

    def count(self, flow_id: int, color: int, now: int) -> Optional[ExportRecord]:
        fc = self.flow(flow_id)
        export = None
        if fc.last_color is not None and color != fc.last_color:
            export = ExportRecord(self.node_id, flow_id, COLOR_NAMES[fc.last_color],
                                  fc.get(fc.last_color), now)
        if color == 0:
            fc.n_a += 1
        else:
            fc.n_b += 1
        fc.last_color = color
        return export

    def flush(self, now: int) -> list[ExportRecord]:
        """Export the running color of every flow (end-of-run timer)."""
        return [ExportRecord(self.node_id, flow, COLOR_NAMES[fc.last_color],
                             fc.get(fc.last_color), now)
                for flow, fc in sorted(self.flows.items())
                if fc.last_color is not None]


def amm_process(state: AmmState, lse: FormatC, now: int) -> Optional[ExportRecord]:
    flow, loss, _delay = amm_decode(lse.data)
    return state.count(flow, loss, now)


class TokenBucket:
    """Integer token bucket.

    Rates are capacity units per tick and time is counted in slots
    (``slots_per_tick`` per tick).  Internally the fill is kept in
    units times slots-per-tick, which keeps every update exact.
    """

    def __init__(self, rate: int, burst: int, slots_per_tick: int = 1):
        if rate < 0 or burst < 0:
            raise ValueError("meter rate and burst must be non-negative")
        self.rate = int(rate)
        self.burst = int(burst)
        self.slots_per_tick = int(slots_per_tick)
        self.cap = self.burst * self.slots_per_tick
        self.credits = self.cap
        self.last = 0

    @property
    def tokens(self) -> float:
        return self.credits / self.slots_per_tick

    def consume(self, size: int, now: int) -> bool:
        if now > self.last:
            self.credits = min(self.cap, self.credits + self.rate * (now - self.last))
            self.last = now
        need = size * self.slots_per_tick
        if self.credits >= need:
            self.credits -= need
            return True
        return False


class MeterVerdict(Enum):
    PASS = "pass"
    DROP = "drop"


@dataclass
class MeterState:
    meters: dict[int, TokenBucket] = field(default_factory=dict)
    default: Optional[TokenBucket] = None

    def bucket(self, selector: Optional[int]) -> Optional[TokenBucket]:
        if selector is not None and selector in self.meters:
            return self.meters[selector]
        return self.default


def nrp_process(meters: MeterState, selector: Optional[int], pkt_size: int,
                now: int) -> MeterVerdict:
    bucket = meters.bucket(selector)
    if bucket is None or bucket.consume(pkt_size, now):
        return MeterVerdict.PASS
    return MeterVerdict.DROP


def nffrr_process(bit: int, packet) -> bool:
    """Fold the reroute bit of an NFFRR action into the packet's mark."""
    if bit & NFFRR_REROUTED:
        packet.reroute_marked = True
    return packet.reroute_marked


def dummy_process(data: int, ad: Sequence[FormatD], stamp: int) -> list[int]:
    """New AD values: ``stamp`` written into the mutable bits of each LSE."""
    return [(d.data & ~D_MUTABLE_MASK) | ((stamp + i) & D_MUTABLE_MASK)
            for i, d in enumerate(ad)]


Handler = Callable[[object], None]


@dataclass(frozen=True)
class Action:
    opcode: int
    name: str
    handler: Handler


class ActionRegistry:
    def __init__(self, actions: Iterable[Action] = ()):
        self._by_opcode: dict[int, Action] = {}
        for a in actions:
            self.register(a)

    def register(self, action: Action) -> None:
        if not 0 <= action.opcode <= MAX_OPCODE:
            raise ValueError(f"opcode {action.opcode} outside 0..{MAX_OPCODE}")
        if action.opcode in self._by_opcode:
            raise ValueError(f"opcode {action.opcode} already registered")
        self._by_opcode[action.opcode] = action

    def get(self, opcode: int) -> Optional[Action]:
        return self._by_opcode.get(opcode)

    def name(self, opcode: int) -> str:
        a = self._by_opcode.get(opcode)
        return a.name if a else f"op{opcode}"

    def __contains__(self, opcode: int) -> bool:
        return opcode in self._by_opcode

    def __iter__(self):
        return iter(sorted(self._by_opcode.values(), key=lambda a: a.opcode))


def _noop(ctx) -> None:
    pass


def _nffrr(ctx) -> None:
    if ctx.data & NFFRR_REROUTED:
        ctx.mark_rerouted()


def _amm(ctx) -> None:
    flow, loss, _delay = amm_decode(ctx.data)
    ctx.amm(flow, loss)


def _nrp(ctx) -> None:
    ctx.meter(ctx.data)


def _dummy(ctx) -> None:
    for i, value in enumerate(dummy_process(ctx.data, ctx.ad, ctx.node.stamp)):
        ctx.write_ad(i, value)


def default_registry() -> ActionRegistry:
    return ActionRegistry([
        Action(Opcode.NOOP, "noop", _noop),
        Action(Opcode.NFFRR, "nffrr", _nffrr),
        Action(Opcode.AMM, "amm", _amm),
        Action(Opcode.NRP, "nrp", _nrp),
        Action(Opcode.DUMMY, "dummy", _dummy),
    ])
