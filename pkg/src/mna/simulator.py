"""Deterministic packet-level scenario runner and the AMM collector.

Time advances in ticks.  Every tick the constant-bit-rate streams emit
their packets at evenly spaced slots (``spt`` slots per tick, the least
common multiple of all stream rates), then the packets walk the topology
hop round by hop round until each one is delivered or dropped.  There are
no queues: link capacity is a per-tick budget and excess traffic is lost.

Two execution modes produce bit-identical reports:

* ``batch`` groups packets that carry identical stacks, evaluates each
  distinct stack once per node (:meth:`NodeState.plan`) and runs the
  stateful parts (random drops, meters, AMM counters, link budgets) as
  vectorised kernels in packet order.
* ``packet`` calls :func:`mna.engine.step` for every packet, in the same
  order.  It is the reference the batch mode is tested against.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .actions import (
    COLOR_NAMES, ExportRecord, Opcode, TokenBucket, amm_decode,
)
from .codec import LabelStack, RawLse, Scope, bytes_to_words, make_nas, words_to_bytes
from .composer import (
    ComposeError, NasRequest, NodeCapabilities, PathSpec, compose_stack,
)
from .engine import (
    AmmOp, BackupTunnel, DropCause, MeterOp, NodeState, TallyOp, Verdict,
    immutable_tail_ok, run_actions, step,
)

REPORT_SCHEMA = "mna.simreport/1"
GENERATOR = "gen"


class ScenarioInvalid(ValueError):
    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class SimulationError(RuntimeError):
    pass


class MissingCounter(KeyError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"no AMM counter exported by {node}")

    def __str__(self):
        return self.args[0]


# -- analytic helpers -----------------------------------------------------

def expected_e2e_drop(probs: Sequence[float]) -> float:
    """Probability that a packet is lost somewhere along independent drops."""
    keep = Fraction(1)
    for p in probs:
        if not 0 <= p <= 1:
            raise ValueError(f"drop probability {p} outside [0, 1]")
        # decimal parse so that 0.1 means exactly one tenth
        keep *= 1 - (Fraction(str(p)) if isinstance(p, float) else Fraction(p))
    return float(1 - keep)


@dataclass(frozen=True)
class LinkLoss:
    upstream: str
    downstream: str
    delta: int
    rate: float


def collector_link_loss(totals: Sequence[int],
                        nodes: Optional[Sequence[str]] = None) -> list[LinkLoss]:
    """Per-link loss from per-node packet totals along a path.

    ``totals[0]`` is the number of packets the generator sent, the rest are
    the counts of the nodes in path order.
    """
    if nodes is None:
        nodes = [GENERATOR] + [f"n{i}" for i in range(1, len(totals))]
    if len(nodes) != len(totals):
        raise ValueError("one node name per total is needed")
    out = []
    for i in range(len(totals) - 1):
        up, down = totals[i], totals[i + 1]
        delta = up - down
        out.append(LinkLoss(nodes[i], nodes[i + 1], delta, delta / up if up else 0.0))
    return out


class Collector:
    """Receives AMM exports and correlates them per flow."""

    def __init__(self, records: Sequence[ExportRecord] = ()):
        self.records: list[ExportRecord] = []
        for r in records:
            self.add(r)

    def add(self, rec: ExportRecord) -> None:
        self.records.append(rec)

    def node_total(self, node: str, flow: int) -> int:
        """Latest counter of color a plus latest counter of color b."""
        latest: dict[str, tuple[int, int]] = {}
        seen = False
        for r in self.records:
            if r.node_id != node or r.flow_id != flow:
                continue
            seen = True
            prev = latest.get(r.color)
            if prev is None or (r.timestamp, r.counter) >= prev:
                latest[r.color] = (r.timestamp, r.counter)
        if not seen:
            raise MissingCounter(node)
        return sum(c for _, c in latest.values())

    def link_loss(self, flow: int, nodes: Sequence[str], sent: int) -> list[LinkLoss]:
        totals = [sent] + [self.node_total(n, flow) for n in nodes]
        return collector_link_loss(totals, [GENERATOR] + list(nodes))


# -- scenario model -------------------------------------------------------

@dataclass(frozen=True)
class Route:
    label: int
    action: str  # "swap" | "pop" | "deliver"
    new_label: Optional[int] = None
    next_hop: Optional[str] = None


@dataclass
class NodeSpec:
    name: str
    rld: float = math.inf
    max_select_nas: int = 17
    max_hbh_nas: int = 17
    mna: bool = True
    drop_prob: float = 0.0
    routes: list = field(default_factory=list)
    default_rate: Optional[int] = None
    default_burst: Optional[int] = None
    where: str = ""

    def capabilities(self) -> NodeCapabilities:
        return NodeCapabilities(self.name, self.rld, self.max_select_nas,
                                self.max_hbh_nas, self.mna)


@dataclass
class LinkSpec:
    a: str
    b: str
    capacity: Optional[int] = None  # units per tick, None = unlimited
    up: bool = True
    bidirectional: bool = True
    where: str = ""


@dataclass
class TunnelSpec:
    node: str
    protects: str  # next hop behind the protected link
    labels: tuple
    via: str
    where: str = ""


@dataclass
class PathDef:
    name: str
    hops: list  # (node, label or None)
    php: bool = False
    requests: list = field(default_factory=list)
    where: str = ""

    def spec(self) -> PathSpec:
        nodes = tuple(n for n, _ in self.hops)
        labels = tuple(lab for _, lab in self.hops if lab is not None)
        return PathSpec(nodes, labels, self.php)


@dataclass
class NrpSpec:
    name: str
    node: str
    selector: int
    rate: int
    burst: Optional[int] = None
    where: str = ""


@dataclass
class StreamSpec:
    name: str
    rate: int  # packets per tick
    packets: int
    size: int = 1
    path: Optional[str] = None
    ingress: Optional[str] = None
    labels: tuple = ()
    requests: list = field(default_factory=list)
    start: int = 0
    ttl: int = 64
    tc: int = 0
    amm_period: Optional[Fraction] = None  # ticks per color
    amm_batch: Optional[int] = None  # packets per color
    where: str = ""


_BOOL = {"on": True, "off": False, "true": True, "false": False, "yes": True,
         "no": False, "1": True, "0": False}


def parse_bool(text: str) -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


@dataclass
class Options:
    enforcement: bool = True
    nffrr: bool = True
    strict_opcodes: bool = False
    unit_nas: bool = False
    check_immutable: bool = True
    mode: str = "batch"

    def set(self, key: str, value) -> None:
        key = key.strip().replace("-", "_")
        if key not in self.__dataclass_fields__:
            raise ValueError(f"unknown option {key!r}")
        if key == "mode":
            if value not in ("batch", "packet"):
                raise ValueError(f"mode must be batch or packet, not {value!r}")
            self.mode = value
        else:
            setattr(self, key, value if isinstance(value, bool) else parse_bool(value))


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    nodes: dict = field(default_factory=dict)
    links: list = field(default_factory=list)
    tunnels: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)
    streams: list = field(default_factory=list)
    nrps: list = field(default_factory=list)
    options: Options = field(default_factory=Options)
    where: str = ""


# -- topology -------------------------------------------------------------

@dataclass
class Link:
    capacity: Optional[int] = None
    up: bool = True


@dataclass
class Topology:
    nodes: dict
    links: dict  # (a, b) -> Link
    backup_tunnels: dict = field(default_factory=dict)  # (a, b) -> BackupTunnel

    def set_link_state(self, a: str, b: str, up: bool) -> None:
        self.links[(a, b)].up = up
        self.nodes[a].set_link(b, up)


def _stream_path(sc: Scenario, st: StreamSpec) -> Optional[PathDef]:
    if st.path is None:
        return None
    p = sc.paths.get(st.path)
    if p is None:
        raise ScenarioInvalid(f"stream {st.name} uses unknown path {st.path}", st.where)
    return p


def _with_color(requests: Sequence[NasRequest], color: int) -> list[NasRequest]:
    out = []
    for r in requests:
        acts = tuple(replace(a, data=(a.data & ~2) | (color << 1)) if a.opcode == Opcode.AMM
                     else a for a in r.actions)
        out.append(replace(r, actions=acts))
    return out


def _has_amm(requests: Sequence[NasRequest]) -> bool:
    return any(a.opcode == Opcode.AMM for r in requests for a in r.actions)


def stream_stacks(sc: Scenario, st: StreamSpec) -> list[bytes]:
    """Encoded stack per AMM color (one entry when the stream is uncolored)."""
    path = _stream_path(sc, st)
    requests = list(path.requests if path else []) + list(st.requests)
    colors = (0, 1) if _has_amm(requests) else (0,)
    caps = {n: s.capabilities() for n, s in sc.nodes.items()}
    out = []
    for c in colors:
        reqs = _with_color(requests, c)
        try:
            if path is not None:
                stack = compose_stack(path.spec(), reqs, caps, unit_nas=sc.options.unit_nas,
                                      ttl=st.ttl, tc=st.tc)
            else:
                entries: list = [RawLse(lab, st.tc, False, st.ttl) for lab in st.labels]
                for scope in (Scope.HBH, Scope.I2E):
                    acts = [a for r in reqs if r.scope == scope for a in r.actions]
                    if acts:
                        entries.append(make_nas(scope, [(a.opcode, a.data, a.ad) for a in acts]))
                if any(r.scope == Scope.SELECT for r in reqs):
                    raise ScenarioInvalid("select NAS needs a path", st.where)
                stack = LabelStack(tuple(entries)).with_bottom()
        except (ComposeError, ValueError) as e:
            if isinstance(e, ScenarioInvalid):
                raise
            raise ScenarioInvalid(f"stream {st.name}: {e}", st.where) from None
        out.append(words_to_bytes(stack.words()))
    return out


def slots_per_tick(sc: Scenario) -> int:
    return math.lcm(*(st.rate for st in sc.streams)) if sc.streams else 1


def validate_scenario(sc: Scenario) -> None:
    names = set(sc.nodes)
    link_pairs = set()
    for ln in sc.links:
        for n in (ln.a, ln.b):
            if n not in names:
                raise ScenarioInvalid(f"link references unknown node {n}", ln.where)
        if ln.capacity is not None and ln.capacity < 0:
            raise ScenarioInvalid("link capacity must be non-negative", ln.where)
        link_pairs.add((ln.a, ln.b))
        if ln.bidirectional:
            link_pairs.add((ln.b, ln.a))
    for ns in sc.nodes.values():
        if not 0 <= ns.drop_prob <= 1:
            raise ScenarioInvalid(f"drop probability of {ns.name} outside [0, 1]", ns.where)
        for r in ns.routes:
            if r.next_hop is not None and (ns.name, r.next_hop) not in link_pairs:
                raise ScenarioInvalid(f"route {r.label} of {ns.name} uses missing link "
                                      f"to {r.next_hop}", ns.where)
    for t in sc.tunnels:
        for n in (t.node, t.protects, t.via):
            if n not in names:
                raise ScenarioInvalid(f"tunnel references unknown node {n}", t.where)
        if (t.node, t.protects) not in link_pairs:
            raise ScenarioInvalid(f"tunnel protects missing link {t.node}-{t.protects}",
                                  t.where)
        if (t.node, t.via) not in link_pairs:
            raise ScenarioInvalid(f"tunnel leaves over missing link {t.node}-{t.via}",
                                  t.where)
    for p in sc.paths.values():
        for n, _ in p.hops:
            if n not in names:
                raise ScenarioInvalid(f"path {p.name} references unknown node {n}", p.where)
        for (a, _), (b, _) in zip(p.hops, p.hops[1:]):
            if (a, b) not in link_pairs:
                raise ScenarioInvalid(f"path {p.name} needs a link {a}-{b}", p.where)
        for r in p.requests:
            if r.target is not None and r.target not in names:
                raise ScenarioInvalid(f"select target {r.target} is unknown", p.where)
    for nrp in sc.nrps:
        if nrp.node not in names:
            raise ScenarioInvalid(f"nrp {nrp.name} references unknown node {nrp.node}",
                                  nrp.where)
        if not 0 <= nrp.selector < (1 << 13):
            raise ScenarioInvalid("nrp selector must fit in 13 bits", nrp.where)
    if not sc.streams:
        raise ScenarioInvalid("scenario has no streams", sc.where)
    seen = set()
    for st in sc.streams:
        if st.name in seen:
            raise ScenarioInvalid(f"duplicate stream {st.name}", st.where)
        seen.add(st.name)
        if st.rate <= 0 or st.packets <= 0 or st.size <= 0:
            raise ScenarioInvalid("stream rate, packets and size must be positive", st.where)
        if st.path is None:
            if st.ingress is None or not st.labels:
                raise ScenarioInvalid("stream needs a path or labels plus ingress", st.where)
            if st.ingress not in names:
                raise ScenarioInvalid(f"unknown ingress {st.ingress}", st.where)
        else:
            _stream_path(sc, st)
        if st.amm_period is not None and st.amm_period <= 0:
            raise ScenarioInvalid("amm_period must be positive", st.where)
        if st.amm_batch is not None and st.amm_batch <= 0:
            raise ScenarioInvalid("amm_batch must be positive", st.where)
        for r in st.requests:
            if r.target is not None and r.target not in names:
                raise ScenarioInvalid(f"select target {r.target} is unknown", st.where)
        stream_stacks(sc, st)


def build_topology(sc: Scenario, spt: int = 1) -> Topology:
    validate_scenario(sc)
    opts = sc.options
    max_size = max(st.size for st in sc.streams)
    nodes: dict[str, NodeState] = {}
    for name, ns in sorted(sc.nodes.items()):
        node = NodeState(name, ns.capabilities(), ingress_drop_prob=ns.drop_prob,
                         enforcement=opts.enforcement, nffrr=opts.nffrr,
                         strict_opcodes=opts.strict_opcodes)
        if ns.default_rate is not None:
            burst = ns.default_burst if ns.default_burst is not None else 2 * max_size
            node.meters.default = TokenBucket(ns.default_rate, burst, spt)
        nodes[name] = node

    def install(node: NodeState, r: Route, where: str):
        table = node.forwarding
        try:
            if r.action == "swap":
                table.swap(r.label, r.new_label, r.next_hop)
            elif r.action == "pop":
                table.pop_to(r.label, r.next_hop)
            else:
                table.deliver(r.label)
        except ValueError as e:
            raise ScenarioInvalid(str(e), where) from None

    for ns in sc.nodes.values():
        for r in ns.routes:
            install(nodes[ns.name], r, ns.where)
    for p in sc.paths.values():
        for i, (n, lab) in enumerate(p.hops):
            if lab is None:
                continue
            nxt = p.hops[i + 1][0] if i + 1 < len(p.hops) else None
            r = Route(lab, "pop", None, nxt) if nxt else Route(lab, "deliver")
            have = nodes[n].forwarding.get(lab)
            if have is not None:
                want = (r.action == "pop" and have.next_hop == nxt) or \
                       (r.action == "deliver" and have.next_hop is None)
                if not want:
                    raise ScenarioInvalid(f"path {p.name} conflicts with route {lab} "
                                          f"of {n}", p.where)
                continue
            install(nodes[n], r, p.where)

    for nrp in sc.nrps:
        burst = nrp.burst if nrp.burst is not None else 2 * max_size
        nodes[nrp.node].meters.meters[nrp.selector] = TokenBucket(nrp.rate, burst, spt)

    links: dict = {}
    for ln in sc.links:
        links[(ln.a, ln.b)] = Link(ln.capacity, ln.up)
        if ln.bidirectional:
            links[(ln.b, ln.a)] = Link(ln.capacity, ln.up)
    topo = Topology(nodes, links)
    for t in sc.tunnels:
        bt = BackupTunnel(tuple(t.labels), t.via)
        nodes[t.node].backup_tunnels[t.protects] = bt
        topo.backup_tunnels[(t.node, t.protects)] = bt
    for (a, b), link in links.items():
        if not link.up:
            nodes[a].set_link(b, False)
    return topo


# -- report ---------------------------------------------------------------

@dataclass
class SimReport:
    scenario: str
    seed: int
    mode: str
    slots_per_tick: int
    ticks: int
    streams: dict
    nodes: dict
    links: dict
    collector: dict
    hops: dict
    exports: list
    backend: str = ""
    schema: str = REPORT_SCHEMA

    def to_dict(self, exports: bool = True) -> dict:
        d = {
            "schema": self.schema, "scenario": self.scenario, "seed": self.seed,
            "mode": self.mode, "slots_per_tick": self.slots_per_tick,
            "ticks": self.ticks, "streams": self.streams, "nodes": self.nodes,
            "links": self.links, "collector": self.collector, "hops": self.hops,
        }
        if exports:
            d["exports"] = [r.to_line() for r in self.exports]
        return d

    def to_json(self, exports: bool = True) -> str:
        return json.dumps(self.to_dict(exports), indent=2, sort_keys=True)

    def comparable(self) -> dict:
        """Everything except the fields naming how the run was executed."""
        d = self.to_dict()
        d.pop("mode")
        return d

    def loss(self, stream: str) -> float:
        return self.streams[stream]["loss"]

    def summary(self) -> str:
        lines = [f"scenario {self.scenario}  seed {self.seed}  ticks {self.ticks}", "",
                 f"{'stream':<14}{'sent':>10}{'received':>10}{'loss':>9}  drops"]
        for name, s in self.streams.items():
            drops = ", ".join(f"{k}={v}" for k, v in sorted(s["dropped"].items())) or "-"
            lines.append(f"{name:<14}{s['sent']:>10}{s['received']:>10}"
                         f"{s['loss']:>9.4f}  {drops}")
        for name, col in self.collector.items():
            lines += ["", f"AMM flow {col['flow']} of stream {name}",
                      f"{'link':<16}{'delta':>10}{'rate':>9}{'ledger':>10}"]
            for ln in col["links"]:
                lines.append(f"{ln['link']:<16}{ln['delta']:>10}{ln['rate']:>9.4f}"
                             f"{ln['ledger']:>10}")
        return "\n".join(lines)


# -- run ------------------------------------------------------------------

@dataclass
class _Tick:
    slot: np.ndarray
    stream: np.ndarray
    size: np.ndarray
    key: np.ndarray
    node: np.ndarray
    prev: np.ndarray
    marked: np.ndarray
    hops: np.ndarray


class _Runner:
    def __init__(self, sc: Scenario, seed: int, mode: str):
        self.sc = sc
        self.seed = seed
        self.mode = mode
        self.spt = slots_per_tick(sc)
        self.topo = build_topology(sc, self.spt)
        self.names = sorted(self.topo.nodes)
        self.nid = {n: i for i, n in enumerate(self.names)}
        self.node_objs = [self.topo.nodes[n] for n in self.names]
        children = np.random.SeedSequence(seed).spawn(len(self.names))
        self.rngs = [np.random.default_rng(c) for c in children]

        self.keys: list[bytes] = []
        self.key_id: dict[bytes, int] = {}
        self.key_words: list[list[int]] = []
        self.streams = sc.streams
        self.stream_keys = [[self.intern(b) for b in stream_stacks(sc, st)]
                            for st in self.streams]
        ns = len(self.streams)
        self.sent = np.zeros(ns, dtype=np.int64)
        self.received = np.zeros(ns, dtype=np.int64)
        self.dropped = [Counter() for _ in range(ns)]
        self.ingress_ledger = Counter()  # (stream, prev, node) -> random drops
        self.link_ledger = Counter()  # (stream, a, b) -> capacity drops
        self.hops_delivered = Counter()
        self.hops_dropped = Counter()
        self.checked_plans: set = set()
        self.link_index = {}
        for (a, b), link in self.topo.links.items():
            self.link_index[(self.nid[a], self.nid[b])] = link
        self.ticks = max(st.start + -(-st.packets // st.rate) for st in self.streams)

    def intern(self, key: bytes) -> int:
        k = self.key_id.get(key)
        if k is None:
            k = self.key_id[key] = len(self.keys)
            self.keys.append(key)
            self.key_words.append(list(np.frombuffer(key, dtype=">u4").astype(np.int64)))
        return k

    # generation

    def _color(self, st: StreamSpec, seq: np.ndarray, slot: np.ndarray) -> np.ndarray:
        if st.amm_batch is not None:
            return (seq // st.amm_batch) % 2
        period = st.amm_period if st.amm_period is not None else Fraction(max(self.ticks, 1))
        rel = slot - st.start * self.spt
        return ((rel * period.denominator) // (period.numerator * self.spt)) % 2

    def _generate(self, t: int) -> Optional[_Tick]:
        parts = []
        for si, st in enumerate(self.streams):
            if t < st.start:
                continue
            first = (t - st.start) * st.rate
            count = min(st.rate, st.packets - first)
            if count <= 0:
                continue
            i = np.arange(count, dtype=np.int64)
            slot = t * self.spt + i * (self.spt // st.rate)
            keys = self.stream_keys[si]
            if len(keys) == 1:
                key = np.full(count, keys[0], dtype=np.int64)
            else:
                color = self._color(st, first + i, slot)
                key = np.where(color == 0, keys[0], keys[1]).astype(np.int64)
            parts.append((slot, np.full(count, si, dtype=np.int64), key))
            self.sent[si] += count
        if not parts:
            return None
        slot = np.concatenate([p[0] for p in parts])
        stream = np.concatenate([p[1] for p in parts])
        key = np.concatenate([p[2] for p in parts])
        order = np.lexsort((stream, slot))  # by slot, then stream; seq order is kept
        slot, stream, key = slot[order], stream[order], key[order]
        n = len(slot)
        size = np.array([st.size for st in self.streams], dtype=np.int64)[stream]
        ingress = np.array([self.nid[self._ingress(st)] for st in self.streams],
                           dtype=np.int64)[stream]
        return _Tick(slot, stream, size, key, ingress, np.full(n, -1, dtype=np.int64),
                     np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64))

    def _ingress(self, st: StreamSpec) -> str:
        if st.path is not None:
            return self.sc.paths[st.path].hops[0][0]
        return st.ingress

    # bookkeeping

    def _deliver(self, tk: _Tick, ids: np.ndarray) -> None:
        if ids.size:
            self.received += np.bincount(tk.stream[ids], minlength=len(self.streams))
            self.hops_delivered.update(tk.hops[ids].tolist())

    def _drop(self, tk: _Tick, ids: np.ndarray, cause: DropCause) -> None:
        if not ids.size:
            return
        counts = np.bincount(tk.stream[ids], minlength=len(self.streams))
        for si in np.flatnonzero(counts):
            self.dropped[si][cause.value] += int(counts[si])
        self.hops_dropped.update(tk.hops[ids].tolist())

    def _ledger(self, ledger: Counter, tk: _Tick, ids: np.ndarray, node: np.ndarray) -> None:
        if not ids.size:
            return
        n = len(self.names) + 1
        code = (tk.stream[ids] * n + (tk.prev[ids] + 1)) * n + node
        uniq, counts = np.unique(code, return_counts=True)
        for c, k in zip(uniq.tolist(), counts.tolist()):
            si, rest = divmod(c, n * n)
            prev, nd = divmod(rest, n)
            ledger[(si, prev - 1, nd)] += k

    def _check_plan(self, node: NodeState, plan) -> None:
        if not self.sc.options.check_immutable or id(plan) in self.checked_plans:
            return
        self.checked_plans.add(id(plan))
        if not immutable_tail_ok(bytes_to_words(plan.key), plan.outcome):
            raise SimulationError(f"{node.node_id} altered the immutable region of a stack")

    # batch mode

    def _node_batch(self, tk: _Tick, nid: int, idx: np.ndarray, fwd: list) -> None:
        node = self.node_objs[nid]
        tk.hops[idx] += 1
        p = node.ingress_drop_prob
        if p > 0:
            lost = self.rngs[nid].random(idx.size) < p
            gone = idx[lost]
            self._drop(tk, gone, DropCause.RANDOM_LOSS)
            self._ledger(self.ingress_ledger, tk, gone, np.full(gone.size, nid))
            idx = idx[~lost]
        if not idx.size:
            return
        codes = tk.key[idx] * 2 + tk.marked[idx]
        uniq, inv = np.unique(codes, return_inverse=True)
        plans = [node.plan(self.keys[c >> 1], bool(c & 1)) for c in uniq.tolist()]
        for plan in plans:
            self._check_plan(node, plan)
        if any(plan.meter_count > 1 for plan in plans):
            self._node_direct(tk, nid, idx, fwd)
            return

        times = tk.slot[idx]
        alive = np.ones(idx.size, dtype=bool)
        members = [np.flatnonzero(inv == pi) for pi in range(len(plans))]
        meter_at: dict[int, int] = {}
        buckets: dict[int, tuple] = {}
        for pi, plan in enumerate(plans):
            for oi, op in enumerate(plan.ops):
                if isinstance(op, MeterOp):
                    meter_at[pi] = oi
                    b = node.meters.bucket(op.selector)
                    if b is not None:
                        buckets.setdefault(id(b), (b, []))[1].append(members[pi])
        for b, parts in buckets.values():
            pos = np.sort(np.concatenate(parts))
            need = tk.size[idx[pos]] * b.slots_per_tick
            mask, b.credits, b.last = kernels.meter_run(
                times[pos], need, b.rate, b.cap, b.credits, b.last)
            alive[pos] = mask

        amm_events: dict[int, list] = defaultdict(list)
        for pi, plan in enumerate(plans):
            sel = members[pi]
            m = meter_at.get(pi)
            sel_alive = sel[alive[sel]] if m is not None else sel
            for oi, op in enumerate(plan.ops):
                use = sel if m is None or oi < m else sel_alive
                if isinstance(op, TallyOp):
                    if use.size:
                        node.tally[(op.scope, op.opcode)] += int(use.size)
                elif isinstance(op, AmmOp):
                    amm_events[op.flow].append((use, op.color))
        for flow in sorted(amm_events):
            evs = amm_events[flow]
            pos = np.concatenate([u for u, _ in evs])
            if not pos.size:
                continue
            colors = np.concatenate([np.full(u.size, c, dtype=np.uint8) for u, c in evs])
            order = np.argsort(pos, kind="stable")
            pos, colors = pos[order], colors[order]
            fc = node.amm.flow(flow)
            last = -1 if fc.last_color is None else fc.last_color
            fc.n_a, fc.n_b, last, epos, ecnt = kernels.amm_run(colors, fc.n_a, fc.n_b, last)
            fc.last_color = last
            for ep, cnt in zip(epos.tolist(), ecnt.tolist()):
                node.exports.append(ExportRecord(node.node_id, flow,
                                                 COLOR_NAMES[1 - int(colors[ep])], cnt,
                                                 int(times[pos[ep]])))

        self._drop(tk, idx[~alive], DropCause.METER_EXCEEDED)
        for pi, plan in enumerate(plans):
            sel = members[pi]
            ids = idx[sel[alive[sel]]]
            if ids.size:
                self._apply(tk, nid, ids, plan.outcome, plan.next_key, fwd)

    def _apply(self, tk: _Tick, nid: int, ids: np.ndarray, out, next_key: bytes,
               fwd: list) -> None:
        if out.verdict == Verdict.DELIVERED:
            self._deliver(tk, ids)
        elif out.verdict == Verdict.DROPPED:
            self._drop(tk, ids, out.cause)
        else:
            nxt = self.nid.get(out.next_hop)
            if nxt is None or (nid, nxt) not in self.link_index:
                self._drop(tk, ids, DropCause.NO_ROUTE)
                return
            tk.key[ids] = self.intern(next_key)
            tk.marked[ids] = out.marked
            tk.prev[ids] = nid
            tk.node[ids] = nxt
            fwd.append(ids)

    def _node_direct(self, tk: _Tick, nid: int, idx: np.ndarray, fwd: list) -> None:
        node = self.node_objs[nid]
        for i in idx.tolist():
            out = run_actions(node, self.key_words[tk.key[i]], bool(tk.marked[i]),
                              int(tk.size[i]), int(tk.slot[i]))
            self._finish_one(tk, nid, i, out, fwd)

    def _finish_one(self, tk: _Tick, nid: int, i: int, out, fwd: list) -> None:
        if self.sc.options.check_immutable and \
                not immutable_tail_ok(self.key_words[tk.key[i]], out):
            raise SimulationError(
                f"{self.names[nid]} altered the immutable region of a stack")
        ids = np.array([i], dtype=np.int64)
        key = words_to_bytes(out.words) if out.verdict == Verdict.FORWARD else b""
        self._apply(tk, nid, ids, out, key, fwd)

    def _admit(self, tk: _Tick, ids: np.ndarray, budgets: dict) -> np.ndarray:
        """Apply link budgets to freshly forwarded packets (in packet order)."""
        if not ids.size:
            return ids
        n = len(self.names)
        code = tk.prev[ids] * n + tk.node[ids]
        keep = np.ones(ids.size, dtype=bool)
        for c in np.unique(code).tolist():
            link = self.link_index[divmod(c, n)]
            if link.capacity is None:
                continue
            pos = np.flatnonzero(code == c)
            mask, budgets[c] = kernels.admit_run(tk.size[ids[pos]],
                                                 budgets.get(c, link.capacity))
            keep[pos] = mask
        lost = ids[~keep]
        self._drop(tk, lost, DropCause.LINK_CAPACITY)
        self._ledger(self.link_ledger, tk, lost, tk.node[lost])
        return ids[keep]

    def _tick_batch(self, tk: _Tick) -> None:
        act = np.arange(len(tk.slot), dtype=np.int64)
        budgets: dict = {}
        while act.size:
            order = np.argsort(tk.node[act], kind="stable")
            grouped = act[order]
            nodes = tk.node[grouped]
            cuts = np.flatnonzero(np.diff(nodes)) + 1
            fwd: list = []
            for part in np.split(grouped, cuts):
                self._node_batch(tk, int(tk.node[part[0]]), part, fwd)
            act = np.sort(np.concatenate(fwd)) if fwd else np.empty(0, dtype=np.int64)
            act = self._admit(tk, act, budgets)

    # packet mode

    def _tick_packet(self, tk: _Tick) -> None:
        act = list(range(len(tk.slot)))
        budgets: dict = {}
        n = len(self.names)
        while act:
            nxt_round = []
            for i in act:
                nid = int(tk.node[i])
                node = self.node_objs[nid]
                tk.hops[i] += 1
                out = step(node, self.key_words[tk.key[i]], bool(tk.marked[i]),
                           int(tk.size[i]), int(tk.slot[i]), self.rngs[nid])
                ids = np.array([i], dtype=np.int64)
                if out.cause == DropCause.RANDOM_LOSS:
                    self._drop(tk, ids, out.cause)
                    self._ledger(self.ingress_ledger, tk, ids, np.array([nid]))
                    continue
                fwd: list = []
                self._finish_one(tk, nid, i, out, fwd)
                if not fwd:
                    continue
                c = int(tk.prev[i]) * n + int(tk.node[i])
                link = self.link_index[(int(tk.prev[i]), int(tk.node[i]))]
                if link.capacity is not None:
                    left = budgets.get(c, link.capacity)
                    if tk.size[i] > left:
                        self._drop(tk, ids, DropCause.LINK_CAPACITY)
                        self._ledger(self.link_ledger, tk, ids, tk.node[ids])
                        continue
                    budgets[c] = left - int(tk.size[i])
                nxt_round.append(i)
            act = nxt_round

    # driver

    def run(self) -> SimReport:
        tick_fn = self._tick_batch if self.mode == "batch" else self._tick_packet
        for t in range(self.ticks):
            tk = self._generate(t)
            if tk is not None:
                tick_fn(tk)
        end = self.ticks * self.spt
        for node in self.node_objs:
            node.exports.extend(node.amm.flush(end))
        return self._report()

    def _report(self) -> SimReport:
        streams = {}
        for si, st in enumerate(self.streams):
            sent, recv = int(self.sent[si]), int(self.received[si])
            drops = dict(sorted(self.dropped[si].items()))
            if sent != recv + sum(drops.values()):
                raise SimulationError(f"stream {st.name} lost track of packets")
            streams[st.name] = {"sent": sent, "received": recv, "dropped": drops,
                                "loss": (sent - recv) / sent if sent else 0.0}
        exports = sorted((r for node in self.node_objs for r in node.exports),
                         key=lambda r: (r.timestamp, r.node_id, r.flow_id, r.color, r.counter))
        nodes = {}
        for node in self.node_objs:
            tally = {f"{scope.name}:{node.registry.name(op)}": n
                     for (scope, op), n in sorted(node.tally.items(),
                                                  key=lambda kv: (kv[0][0], kv[0][1]))}
            amm = {str(f): {"a": fc.n_a, "b": fc.n_b}
                   for f, fc in sorted(node.amm.flows.items())}
            nodes[node.node_id] = {"actions": tally, "amm": amm}
        links: dict = defaultdict(lambda: {"random_loss": 0, "link_capacity": 0})
        for (si, a, b), k in self.ingress_ledger.items():
            links[self._link_name(a, b)]["random_loss"] += k
        for (si, a, b), k in self.link_ledger.items():
            links[self._link_name(a, b)]["link_capacity"] += k
        collector = self._collector(exports)
        return SimReport(
            scenario=self.sc.name, seed=self.seed, mode=self.mode,
            slots_per_tick=self.spt, ticks=self.ticks, streams=streams, nodes=nodes,
            links=dict(sorted(links.items())), collector=collector,
            hops={"delivered": {str(k): v for k, v in sorted(self.hops_delivered.items())},
                  "dropped": {str(k): v for k, v in sorted(self.hops_dropped.items())}},
            exports=exports, backend=kernels.BACKEND)

    def _link_name(self, a: int, b: int) -> str:
        return f"{GENERATOR if a < 0 else self.names[a]}->{self.names[b]}"

    def _ledger_between(self, si: int, a: int, b: int) -> int:
        return self.ingress_ledger.get((si, a, b), 0) + self.link_ledger.get((si, a, b), 0)

    def _collector(self, exports) -> dict:
        col = Collector(exports)
        out = {}
        for si, st in enumerate(self.streams):
            path = self.sc.paths.get(st.path) if st.path else None
            if path is None:
                continue
            reqs = list(path.requests) + list(st.requests)
            flows = [amm_decode(a.data)[0] for r in reqs if r.scope == Scope.HBH
                     for a in r.actions if a.opcode == Opcode.AMM]
            if not flows:
                continue
            flow = flows[0]
            nodes = [n for n, _ in path.hops]
            try:
                losses = col.link_loss(flow, nodes, int(self.sent[si]))
            except MissingCounter as e:
                out[st.name] = {"flow": flow, "error": str(e), "links": []}
                continue
            ids = [-1] + [self.nid[n] for n in nodes]
            links = []
            for k, ll in enumerate(losses):
                ledger = self._ledger_between(si, ids[k], ids[k + 1])
                links.append({"link": f"{ll.upstream}->{ll.downstream}", "delta": ll.delta,
                              "rate": ll.rate, "ledger": ledger,
                              "agrees": ledger == ll.delta})
            out[st.name] = {"flow": flow, "nodes": nodes, "links": links}
        return out


def run_scenario(sc: Scenario, seed: Optional[int] = None,
                 mode: Optional[str] = None) -> SimReport:
    """Run ``sc`` once; the same scenario and seed always give the same report."""
    seed = sc.seed if seed is None else int(seed)
    mode = mode or sc.options.mode
    if mode not in ("batch", "packet"):
        raise ValueError(f"unknown mode {mode!r}")
    return _Runner(sc, seed, mode).run()
