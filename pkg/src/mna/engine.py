"""Per-node label switching with network action execution.

One code path (:func:`_run`) implements the node behaviour.  It reaches
node state only through an action context: :class:`DirectContext` applies
effects immediately for a single packet, :class:`CompileContext` records
them so the structural result can be cached per distinct stack and
replayed over whole batches by the simulator.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Optional, Sequence, Union

from .actions import (
    NFFRR_REROUTED, ActionRegistry, AmmState, D_MUTABLE_MASK, ExportRecord,
    MeterState, MeterVerdict, Opcode, default_registry, nrp_process,
)
from .codec import (
    FIELD_SHIFTS, IMMUTABLE_MASK, NAS_INDICATOR_BSPL, FormatD, MalformedNas, Nas,
    Scope, _scan, bytes_to_words, make_nas, words_to_bytes,
)
from .composer import NodeCapabilities

log = logging.getLogger(__name__)

_LABEL_SHIFT = FIELD_SHIFTS["LSE"]["label"][0]
_LABEL_MASK = ((1 << 20) - 1) << _LABEL_SHIFT
_TTL_MASK = 0xFF
_S_MASK = 1 << FIELD_SHIFTS["LSE"]["s"][0]


class FwdAction(IntEnum):
    POP_AND_FORWARD = 0
    SWAP = 1
    DELIVER = 2


@dataclass(frozen=True)
class ForwardingEntry:
    action: FwdAction
    next_hop: Optional[str] = None
    new_label: Optional[int] = None

    def __post_init__(self):
        if self.action != FwdAction.DELIVER and self.next_hop is None:
            raise ValueError(f"{self.action.name} needs a next hop")
        if self.action == FwdAction.SWAP and self.new_label is None:
            raise ValueError("SWAP needs a new label")


class ForwardingTable(dict):
    """label -> :class:`ForwardingEntry`."""

    def __setitem__(self, label: int, entry: ForwardingEntry):
        if not 16 <= label < (1 << 20):
            raise ValueError(f"label {label} is reserved or out of range")
        if entry.new_label is not None and not 16 <= entry.new_label < (1 << 20):
            raise ValueError(f"label {entry.new_label} is reserved or out of range")
        super().__setitem__(label, entry)

    def pop_to(self, label: int, next_hop: str) -> None:
        self[label] = ForwardingEntry(FwdAction.POP_AND_FORWARD, next_hop)

    def swap(self, label: int, new_label: int, next_hop: str) -> None:
        self[label] = ForwardingEntry(FwdAction.SWAP, next_hop, new_label)

    def deliver(self, label: int) -> None:
        self[label] = ForwardingEntry(FwdAction.DELIVER)


class Verdict(Enum):
    FORWARD = "forward"
    DELIVERED = "delivered"
    DROPPED = "dropped"


class DropCause(Enum):
    TTL_EXPIRED = "ttl_expired"
    NFFRR = "nffrr"
    METER_EXCEEDED = "meter_exceeded"
    NO_ROUTE = "no_route"
    MALFORMED = "malformed"
    RANDOM_LOSS = "random_loss"
    LINK_CAPACITY = "link_capacity"  # raised by the simulator, not by a node


@dataclass(frozen=True)
class BackupTunnel:
    labels: tuple[int, ...]
    via: str


@dataclass
class Packet:
    words: list[int]
    payload_len: int = 1  # capacity units
    flow_key: object = None
    reroute_marked: bool = False
    trace: list = field(default_factory=list)
    hops: int = 0

    @classmethod
    def from_bytes(cls, data: bytes, **kw) -> "Packet":
        return cls(bytes_to_words(data), **kw)

    @property
    def stack_bytes(self) -> bytes:
        return words_to_bytes(self.words)


@dataclass
class Disposition:
    verdict: Verdict
    packet: Packet
    next_hop: Optional[str] = None
    cause: Optional[DropCause] = None
    executed: list = field(default_factory=list)  # (scope, opcode)

    @property
    def link(self) -> Optional[tuple[str, str]]:
        return None if self.next_hop is None else (self.packet.trace[-1][0], self.next_hop)


@dataclass(eq=False)
class NodeState:
    node_id: str
    capabilities: Optional[NodeCapabilities] = None
    forwarding: ForwardingTable = field(default_factory=ForwardingTable)
    ingress_drop_prob: float = 0.0
    registry: ActionRegistry = field(default_factory=default_registry)
    amm: Optional[AmmState] = None
    meters: MeterState = field(default_factory=MeterState)
    enforcement: bool = False
    nffrr: bool = True
    strict_opcodes: bool = False
    backup_tunnels: dict = field(default_factory=dict)  # protected next hop -> BackupTunnel
    down_links: set = field(default_factory=set)  # next hops behind failed links
    bspl: int = NAS_INDICATOR_BSPL
    exports: list = field(default_factory=list)
    tally: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if not 0.0 <= self.ingress_drop_prob <= 1.0:
            raise ValueError(f"{self.node_id}: drop probability outside [0, 1]")
        if self.capabilities is None:
            self.capabilities = NodeCapabilities(self.node_id)
        if self.amm is None:
            self.amm = AmmState(self.node_id)
        self.stamp = zlib.crc32(self.node_id.encode()) & D_MUTABLE_MASK
        self.epoch = 0
        self._plans: dict = {}
        self._plan_epoch = 0

    @property
    def rld_limit(self) -> Optional[int]:
        rld = self.capabilities.rld
        return None if rld == math.inf else int(rld)

    def set_link(self, next_hop: str, up: bool) -> None:
        if up:
            self.down_links.discard(next_hop)
        else:
            self.down_links.add(next_hop)
        self.epoch += 1

    def touch(self) -> None:
        """Invalidate cached plans after a configuration change."""
        self.epoch += 1

    def plan(self, key: bytes, marked: bool) -> "Plan":
        if self._plan_epoch != self.epoch:
            self._plans.clear()
            self._plan_epoch = self.epoch
        p = self._plans.get((key, marked))
        if p is None:
            p = self._plans[(key, marked)] = compile_plan(self, bytes_to_words(key), marked)
        return p


@dataclass
class Outcome:
    verdict: Verdict
    words: list
    marked: bool
    next_hop: Optional[str] = None
    cause: Optional[DropCause] = None
    executed: list = field(default_factory=list)
    popped: int = 0  # LSEs removed or rewritten at the top
    pushed: int = 0  # LSEs at the top of the result that replace them


# -- action contexts -------------------------------------------------------

class ActionContext:
    """What a handler may see and touch while one action runs."""

    def __init__(self, node: NodeState, words: list):
        self.node = node
        self.words = words
        self.data = 0
        self.ad: tuple = ()
        self.scope: Optional[Scope] = None
        self.opcode = 0
        self._ad_base = 0
        self.marked = False
        self.metered = False
        self.dropped = False
        self.unknown: Optional[int] = None  # opcode that stopped a strict node

    def write_ad(self, i: int, value: int) -> None:
        pos = self._ad_base + i
        old = FormatD.from_word(self.words[pos])
        if (value ^ old.data) & ~D_MUTABLE_MASK:
            raise ValueError("network actions may only change mutable AD bits")
        self.words[pos] = FormatD(value, old.s).word()

    def mark_rerouted(self) -> None:
        self.marked = True

    def count(self, scope: Scope, opcode: int) -> None:
        raise NotImplementedError

    def amm(self, flow: int, color: int) -> None:
        raise NotImplementedError

    def meter(self, selector: Optional[int]) -> bool:
        raise NotImplementedError


class DirectContext(ActionContext):
    def __init__(self, node: NodeState, words: list, size: int, now: int):
        super().__init__(node, words)
        self.size = size
        self.now = now

    def count(self, scope, opcode):
        self.node.tally[(scope, opcode)] += 1

    def amm(self, flow, color):
        rec = self.node.amm.count(flow, color, self.now)
        if rec is not None:
            self.node.exports.append(rec)

    def meter(self, selector):
        self.metered = True
        if not self.node.enforcement:
            return True
        if nrp_process(self.node.meters, selector, self.size, self.now) == MeterVerdict.DROP:
            self.dropped = True
            return False
        return True


@dataclass(frozen=True)
class TallyOp:
    scope: Scope
    opcode: int


@dataclass(frozen=True)
class AmmOp:
    flow: int
    color: int


@dataclass(frozen=True)
class MeterOp:
    selector: Optional[int]  # None is the default meter


PlanOp = Union[TallyOp, AmmOp, MeterOp]


class CompileContext(ActionContext):
    """Records stateful effects; every meter is assumed to pass."""

    def __init__(self, node: NodeState, words: list):
        super().__init__(node, words)
        self.ops: list[PlanOp] = []

    def count(self, scope, opcode):
        self.ops.append(TallyOp(scope, opcode))

    def amm(self, flow, color):
        self.ops.append(AmmOp(flow, color))

    def meter(self, selector):
        self.metered = True
        if self.node.enforcement:
            self.ops.append(MeterOp(selector))
        return True


@dataclass(frozen=True)
class Plan:
    outcome: Outcome
    ops: tuple[PlanOp, ...]
    key: bytes = b""
    next_key: bytes = b""

    @property
    def meter_count(self) -> int:
        return sum(isinstance(op, MeterOp) for op in self.ops)


def compile_plan(node: NodeState, words: Sequence[int], marked: bool) -> Plan:
    ctx = CompileContext(node, list(words))
    out = _run(node, ctx.words, marked, ctx)
    return Plan(out, tuple(ctx.ops), words_to_bytes(list(words)),
                words_to_bytes(out.words) if out.verdict == Verdict.FORWARD else b"")


# -- NAS execution ----------------------------------------------------------

def execute_nas(node: NodeState, nas: Nas, ctx: Optional[ActionContext] = None, *,
                offset: int = 0, scope: Optional[Scope] = None) -> list[tuple[int, int, int]]:
    """Dispatch the actions of ``nas``; returns ``(index, opcode, nal)`` per dispatch.

    Index 0 is the format B LSE.  Every dispatched opcode LSE and its AD
    LSEs are marked processed, so AD words are never read as opcodes.
    ``offset`` is the word index of the NAS indicator inside ``ctx.words``.
    """
    if ctx is None:
        ctx = CompileContext(node, nas.words())
        offset = 0
    scope = nas.scope if scope is None else scope
    chain = (nas.initial,) + tuple(nas.rest)
    processed = [False] * len(chain)
    done = []
    for i, lse in enumerate(chain):
        if processed[i]:
            continue
        if isinstance(lse, FormatD):
            raise MalformedNas("opcode expected, found ancillary data", offset + 1 + i)
        nal = lse.nal
        if i + nal >= len(chain):
            raise MalformedNas("AD LSE missing", offset + 1 + i)
        for k in range(i, i + nal + 1):
            processed[k] = True
        action = node.registry.get(lse.opcode)
        if action is None:
            if node.strict_opcodes:
                ctx.dropped = True
                ctx.unknown = lse.opcode
                return done
            log.info("%s: skipping unknown opcode %d", node.node_id, lse.opcode)
            continue
        ctx.scope, ctx.opcode, ctx.data = scope, lse.opcode, lse.data
        ctx.ad = tuple(x if isinstance(x, FormatD) else FormatD.from_word(x.word())
                       for x in chain[i + 1:i + 1 + nal])
        ctx._ad_base = offset + 2 + i
        ctx.count(scope, lse.opcode)
        action.handler(ctx)
        done.append((i, lse.opcode, nal))
        if ctx.dropped:
            return done
    return done


def _frr_nas_words(bspl: int) -> list[int]:
    return make_nas(Scope.HBH, [(Opcode.NFFRR, NFFRR_REROUTED, ())], bspl).words()


def _reroute(node: NodeState, out: Outcome) -> Outcome:
    """Steer a swapped packet into the backup tunnel of its failed next hop."""
    if node.nffrr and out.marked:
        return _drop(out, DropCause.NFFRR)
    tunnel = node.backup_tunnels.get(out.next_hop)
    if tunnel is None:
        return _drop(out, DropCause.NO_ROUTE)
    if out.pushed == 0:  # popped: the exposed label is the one carried through
        out.popped += 1
        out.pushed = 1
    top = out.words[0]
    keep = top & ~_LABEL_MASK & ~_S_MASK
    pushed = [(lab << _LABEL_SHIFT) | keep for lab in tunnel.labels]
    extra = _frr_nas_words(node.bspl) if node.nffrr else []
    if extra and top & _S_MASK:  # the NAS becomes the new bottom
        top &= ~_S_MASK
        extra[-1] |= 1 << FIELD_SHIFTS["B"]["s"][0]
    out.words[:1] = pushed + [top] + extra
    out.pushed += len(pushed) + len(extra)
    out.next_hop = tunnel.via
    if node.nffrr:
        out.marked = True
    return out


def _drop(out: Outcome, cause: DropCause) -> Outcome:
    out.verdict = Verdict.DROPPED
    out.cause = cause
    out.next_hop = None
    return out


def _run(node: NodeState, words: list, marked: bool, ctx: ActionContext) -> Outcome:
    try:
        return _run_checked(node, words, marked, ctx)
    except MalformedNas:
        return _drop(Outcome(Verdict.DROPPED, words, marked), DropCause.MALFORMED)


def _run_checked(node: NodeState, words: list, marked: bool, ctx: ActionContext) -> Outcome:
    out = Outcome(Verdict.FORWARD, words, marked)
    ctx.marked = marked
    if not words:  # unlabeled packet: nothing left to switch on
        out.verdict = Verdict.DELIVERED
        return out
    scan = _scan(words, node.rld_limit, node.bspl)
    if scan.error is not None or not scan.entries or (
            not scan.truncated and (not scan.bottom_seen or scan.trailing)):
        return _drop(out, DropCause.MALFORMED)
    entries, offsets = scan.entries, scan.offsets

    def run_nas(k: int) -> bool:
        nas = entries[k]
        for _i, opcode, _nal in execute_nas(node, nas, ctx, offset=offsets[k]):
            out.executed.append((nas.scope, opcode))
        out.marked = ctx.marked
        return not ctx.dropped

    def finish_actions() -> bool:
        if ctx.dropped:
            _drop(out, DropCause.MALFORMED if ctx.unknown is not None
                  else DropCause.METER_EXCEEDED)
            return False
        if node.enforcement and not ctx.metered:
            if not ctx.meter(None):
                _drop(out, DropCause.METER_EXCEEDED)
                return False
        return True

    for k, e in enumerate(entries):
        if isinstance(e, Nas) and e.scope == Scope.HBH:
            if not run_nas(k):
                finish_actions()
                return out
            break

    incoming_ttl = words[0] & _TTL_MASK
    top = entries[0]
    if isinstance(top, Nas):
        return _egress(entries, 0, run_nas, finish_actions, out)
    fwd = node.forwarding.get(top.label)
    if fwd is None:
        return _drop(out, DropCause.NO_ROUTE)
    if fwd.action == FwdAction.DELIVER:
        return _egress(entries, 1, run_nas, finish_actions, out)

    if fwd.action == FwdAction.SWAP:
        words[0] = (words[0] & ~_LABEL_MASK) | (fwd.new_label << _LABEL_SHIFT)
        out.popped = out.pushed = 1
    else:
        k = 1
        while k < len(entries) and isinstance(entries[k], Nas):
            k += 1
        exposed = entries[1:k]
        at_bottom = bool(exposed) and (exposed[-1].bos or exposed[-1].scope == Scope.I2E)
        if exposed and not at_bottom:
            if exposed[0].scope == Scope.SELECT and not run_nas(1):
                finish_actions()
                return out
            cut = offsets[k] if k < len(entries) else scan.complete
        else:
            cut = 1  # nothing or only the egress's NASes follow: pop the label alone
        del words[:cut]
        out.popped = cut
        if not words:
            out.next_hop = fwd.next_hop
            finish_actions()
            return out
    if not finish_actions():
        return out

    ttl = incoming_ttl - 1
    if ttl <= 0:
        return _drop(out, DropCause.TTL_EXPIRED)
    words[0] = (words[0] & ~_TTL_MASK) | ttl
    out.next_hop = fwd.next_hop
    if fwd.next_hop in node.down_links:
        return _reroute(node, out)
    return out


def _egress(entries, start: int, run_nas, finish_actions, out: Outcome) -> Outcome:
    if start < len(entries) and isinstance(entries[start], Nas) \
            and entries[start].scope == Scope.SELECT:
        if not run_nas(start):
            finish_actions()
            return out
    last = len(entries) - 1
    if last >= start and isinstance(entries[last], Nas) \
            and entries[last].scope == Scope.I2E:
        if not run_nas(last):
            finish_actions()
            return out
    if not finish_actions():
        return out
    out.popped = len(out.words)
    out.words.clear()
    out.verdict = Verdict.DELIVERED
    return out


def _to_disposition(node: NodeState, pkt: Packet, out: Outcome) -> Disposition:
    pkt.words = out.words
    pkt.reroute_marked = out.marked
    event = out.verdict.value if out.cause is None else f"dropped:{out.cause.value}"
    pkt.trace.append((node.node_id, event))
    return Disposition(out.verdict, pkt, out.next_hop, out.cause, list(out.executed))


def run_actions(node: NodeState, words: Sequence[int], marked: bool, size: int = 1,
                now: int = 0) -> Outcome:
    """Node processing after the ingress drop stage, effects applied directly."""
    words = list(words)
    return _run(node, words, marked, DirectContext(node, words, size, now))


def step(node: NodeState, words: Sequence[int], marked: bool, size: int = 1,
         now: int = 0, rng=None) -> Outcome:
    p = node.ingress_drop_prob
    if p > 0:
        if rng is None:
            raise ValueError(f"{node.node_id} drops randomly but no generator was given")
        if rng.random() < p:
            return Outcome(Verdict.DROPPED, list(words), marked, cause=DropCause.RANDOM_LOSS)
    return run_actions(node, words, marked, size, now)


def process_packet(node: NodeState, pkt: Packet, rng=None, now: int = 0) -> Disposition:
    """Run one packet through ``node``.  Failures become ``DROPPED`` verdicts."""
    pkt.hops += 1
    out = step(node, pkt.words, pkt.reroute_marked, pkt.payload_len, now, rng)
    return _to_disposition(node, pkt, out)


def apply_frr(node: NodeState, pkt: Packet, failed_next_hop: str) -> Disposition:
    """Reroute a packet whose top label already names ``failed_next_hop``."""
    out = Outcome(Verdict.FORWARD, list(pkt.words), pkt.reroute_marked,
                  next_hop=failed_next_hop, popped=1, pushed=1)
    return _to_disposition(node, pkt, _reroute(node, out))


def immutable_tail_ok(before: Sequence[int], out: Outcome) -> bool:
    """LSEs the node neither removed nor pushed keep their first 20 bits."""
    old = before[out.popped:]
    new = out.words[out.pushed:]
    if out.verdict != Verdict.FORWARD:
        return True
    if len(old) != len(new):
        return False
    return all((a ^ b) & IMMUTABLE_MASK == 0 for a, b in zip(old, new))


__all__ = [
    "ActionContext", "AmmOp", "BackupTunnel", "CompileContext", "DirectContext",
    "Disposition", "DropCause", "ExportRecord", "ForwardingEntry", "ForwardingTable",
    "FwdAction", "MeterOp", "NodeState", "Outcome", "Packet", "Plan", "TallyOp",
    "Verdict", "apply_frr", "compile_plan", "execute_nas", "immutable_tail_ok",
    "process_packet", "run_actions", "step",
]
