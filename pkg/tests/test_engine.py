import numpy as np
import pytest
from hypothesis import given, strategies as st

from mna.actions import Action, ActionRegistry, Opcode, default_registry
from mna.codec import (
    FormatA, FormatB, FormatC, FormatD, LabelStack, Nas, RawLse, Scope, decode_stack,
    make_nas, words_to_bytes,
)
from mna.composer import ActionSpec, NasRequest, NodeCapabilities, PathSpec, compose
from mna.engine import (
    BackupTunnel, DropCause, NodeState, Packet, Verdict, apply_frr, execute_nas,
    immutable_tail_ok, process_packet, run_actions,
)

import oracles


def _recording_registry(opcodes):
    seen = []
    reg = ActionRegistry()
    for op in opcodes:
        reg.register(Action(op, f"op{op}", lambda ctx: seen.append((ctx.opcode, len(ctx.ad)))))
    return reg, seen


def _chain(nas):
    out = [("B", nas.initial.opcode, nas.initial.nal)]
    for x in nas.rest:
        out.append(("C", x.opcode, x.nal) if isinstance(x, FormatC) else ("D", None, 0))
    return out


# -- NAS dispatch --------------------------------------------------------------

def test_fig23_dispatch_order():
    x, y = 20, 21
    nas = Nas(FormatA(), FormatB(x, nasl=3, nal=1), (FormatD(7), FormatC(y, nal=1), FormatD(8)))
    reg, seen = _recording_registry([x, y])
    node = NodeState("R", registry=reg)
    done = execute_nas(node, nas)
    assert [(i, op) for i, op, _ in done] == [(0, x), (2, y)]
    assert seen == [(x, 1), (y, 1)]
    assert all(i not in (1, 3) for i, _, _ in done)


def test_single_b_dispatch():
    reg, seen = _recording_registry([9])
    done = execute_nas(NodeState("R", registry=reg), make_nas(Scope.HBH, [(9, 0, ())]))
    assert done == [(0, 9, 0)] and seen == [(9, 0)]


def test_unknown_opcode_skipped():
    nas = make_nas(Scope.HBH, [(20, 0, (1,)), (99, 0, (2, 3)), (21, 0, ())])
    reg, seen = _recording_registry([20, 21])
    done = execute_nas(NodeState("R", registry=reg), nas)
    want, skipped = oracles.nal_walk(_chain(nas), {20, 21})
    assert done == want and skipped == [(2, 99)]
    assert seen == [(20, 1), (21, 0)]


def test_unknown_opcode_strict_drops():
    node = NodeState("R", strict_opcodes=True)
    node.forwarding.pop_to(100, "R2")
    stack = LabelStack((RawLse(100), RawLse(200), make_nas(Scope.HBH, [(99, 0, ())])))
    out = run_actions(node, stack.with_bottom().words(), False)
    assert out.verdict == Verdict.DROPPED and out.cause == DropCause.MALFORMED


@st.composite
def chains(draw):
    known = draw(st.sets(st.integers(1, 12), max_size=8))
    actions = []
    room = 15
    while True:
        nal = draw(st.integers(0, min(7, room - (0 if not actions else 1))))
        actions.append((draw(st.integers(1, 12)), 0, tuple(range(nal))))
        room -= nal + (1 if len(actions) > 1 else 0)
        if room < 1 or not draw(st.booleans()):
            break
    return known, make_nas(Scope.HBH, actions)


@given(chains())
def test_dispatch_matches_reference_walk(case):
    known, nas = case
    reg, seen = _recording_registry(sorted(known))
    done = execute_nas(NodeState("R", registry=reg), nas)
    want, _ = oracles.nal_walk(_chain(nas), known)
    assert done == want
    assert [op for op, _ in seen] == [op for _, op, _ in want]


# -- forwarding ----------------------------------------------------------------

def _line(n=3, **kw):
    nodes = {}
    for i in range(n):
        name = f"R{i + 1}"
        ns = NodeState(name, **kw)
        if i < n - 1:
            ns.forwarding.pop_to(1001 + i, f"R{i + 2}")
        else:
            ns.forwarding.deliver(1001 + i)
        nodes[name] = ns
    return nodes


def _walk(nodes, words, start="R1", rng=None):
    pkt = Packet(list(words))
    at, ds = start, []
    while True:
        before = list(pkt.words)
        d = process_packet(nodes[at], pkt, rng)
        ds.append((before, d))
        if d.verdict != Verdict.FORWARD:
            return pkt, ds
        at = d.next_hop


def _sr_stack(nas_entries=()):
    entries = [RawLse(1001 + i) for i in range(3)]
    return LabelStack(tuple(entries) + tuple(nas_entries)).with_bottom()


def test_plain_stack_forwards_without_actions():
    pkt, ds = _walk(_line(), _sr_stack().words())
    assert [d.verdict for _, d in ds] == [Verdict.FORWARD] * 2 + [Verdict.DELIVERED]
    assert all(d.executed == [] for _, d in ds)


def test_hbh_amm_executes_everywhere():
    path = PathSpec(("R1", "R2", "R3"), (1001, 1002, 1003))
    caps = {n: NodeCapabilities(n) for n in path.nodes}
    req = NasRequest(Scope.HBH, (ActionSpec(Opcode.NOOP), ActionSpec(Opcode.AMM, 7 << 2)))
    stack = compose(path, [req], caps).stack
    nodes = _line()
    pkt, ds = _walk(nodes, stack.words())
    assert ds[-1][1].verdict == Verdict.DELIVERED
    for _, d in ds:
        assert (Scope.HBH, Opcode.AMM) in d.executed
    assert all(n.amm.flows[7].n_a == 1 for n in nodes.values())


def test_ttl_expiry_on_swap():
    node = NodeState("R")
    node.forwarding.swap(100, 200, "R2")
    out = run_actions(node, [oracles.lse_word(100, 0, 1, 1)], False)
    assert out.verdict == Verdict.DROPPED and out.cause == DropCause.TTL_EXPIRED
    out = run_actions(node, [oracles.lse_word(100, 0, 1, 5)], False)
    assert out.words == [oracles.lse_word(200, 0, 1, 4)]


def test_unknown_label_no_route():
    out = run_actions(NodeState("R"), [oracles.lse_word(100, 0, 1, 5)], False)
    assert out.cause == DropCause.NO_ROUTE


def test_random_ingress_drop():
    node = NodeState("R", ingress_drop_prob=1.0)
    node.forwarding.deliver(100)
    d = process_packet(node, Packet([oracles.lse_word(100, 0, 1, 5)]), np.random.default_rng(1))
    assert d.cause == DropCause.RANDOM_LOSS
    with pytest.raises(ValueError):
        NodeState("R", ingress_drop_prob=1.5)


def test_select_nas_popped_at_its_node():
    sel = make_nas(Scope.SELECT, [(Opcode.NOOP, 0, ())])
    stack = LabelStack((RawLse(1001), RawLse(1002), sel, RawLse(1003))).with_bottom()
    pkt, ds = _walk(_line(), stack.words())
    assert ds[0][1].executed == []
    assert ds[1][1].executed == [(Scope.SELECT, Opcode.NOOP)]
    after_r2 = decode_stack(words_to_bytes(ds[2][0]))
    assert not after_r2.stack.nas_entries()
    assert ds[-1][1].verdict == Verdict.DELIVERED


def test_i2e_runs_at_egress_only():
    i2e = make_nas(Scope.I2E, [(Opcode.NOOP, 0, ())])
    pkt, ds = _walk(_line(), _sr_stack([i2e]).words())
    assert [d.executed for _, d in ds] == [[], [], [(Scope.I2E, Opcode.NOOP)]]


def test_php_keeps_exposed_nas_for_egress():
    i2e = make_nas(Scope.I2E, [(Opcode.NOOP, 0, ())])
    stack = LabelStack((RawLse(1001), RawLse(1002), i2e)).with_bottom()
    nodes = _line(2)
    nodes["R2"].forwarding.clear()
    nodes["R2"].forwarding.pop_to(1002, "R3")
    nodes["R3"] = NodeState("R3")
    pkt, ds = _walk(nodes, stack.words())
    assert ds[1][1].verdict == Verdict.FORWARD
    assert ds[-1][1].verdict == Verdict.DELIVERED
    assert ds[-1][1].executed == [(Scope.I2E, Opcode.NOOP)]


def test_only_topmost_hbh_copy_runs():
    path = PathSpec(("R1", "R2", "R3"), (1001, 1002, 1003))
    caps = {n: NodeCapabilities(n, 4, 1, 2) for n in path.nodes}
    stack = compose(path, [NasRequest(Scope.HBH, (ActionSpec(Opcode.NOOP),))], caps).stack
    assert len(stack.nas_entries()) == 2
    nodes = _line(capabilities=None)
    for n in nodes.values():
        n.capabilities = caps[n.node_id]
    pkt, ds = _walk(nodes, stack.words())
    assert [sum(s == Scope.HBH for s, _ in d.executed) for _, d in ds] == [1, 1, 1]


def test_dummy_writes_only_mutable_bits():
    nas = make_nas(Scope.HBH, [(Opcode.DUMMY, 0, ((1 << 30) - 1, 0))])
    stack = _sr_stack([nas])
    pkt, ds = _walk(_line(), stack.words())
    assert ds[0][1].executed == [(Scope.HBH, Opcode.DUMMY)]
    # after R1 the NAS still has the same structure, only the low AD bits moved
    first = ds[1][0]
    got = decode_stack(words_to_bytes(first)).stack.nas_entries()[0]
    assert [type(x) for x in got.rest] == [FormatD, FormatD]
    assert got.rest[0].data >> 11 == ((1 << 30) - 1) >> 11
    assert got.rest[1].data >> 11 == 0


@given(st.integers(0, (1 << 30) - 1), st.integers(0, (1 << 30) - 1))
def test_immutable_region_preserved_per_hop(a, b):
    nas = make_nas(Scope.HBH, [(Opcode.NOOP, 0, ()), (Opcode.DUMMY, 3, (a, b))])
    stack = _sr_stack([nas])
    nodes = _line()
    pkt = Packet(stack.words())
    at = "R1"
    while True:
        before = list(pkt.words)
        out = run_actions(nodes[at], before, False)
        assert immutable_tail_ok(before, out)
        if out.verdict != Verdict.FORWARD:
            break
        pkt.words, at = out.words, out.next_hop


# -- FRR -----------------------------------------------------------------------

def _fig10(nffrr):
    names = ["R1", "R2", "R3", "R4", "R5", "R6"]
    n = {x: NodeState(x, nffrr=nffrr) for x in names}
    n["R1"].forwarding.swap(100, 101, "R2")
    n["R2"].forwarding.swap(101, 102, "R3")
    n["R2"].forwarding.swap(102, 102, "R3")
    n["R6"].forwarding.swap(102, 102, "R3")
    n["R3"].forwarding.swap(102, 103, "R4")
    n["R4"].forwarding.deliver(103)
    n["R5"].forwarding.pop_to(201, "R6")
    n["R5"].forwarding.pop_to(301, "R2")
    n["R2"].backup_tunnels["R3"] = BackupTunnel((201,), "R5")
    n["R6"].backup_tunnels["R3"] = BackupTunnel((301,), "R5")
    return n


def test_single_failure_reroutes_and_marks():
    n = _fig10(True)
    n["R2"].set_link("R3", False)
    pkt, ds = _walk(n, [oracles.lse_word(100, 0, 1, 64)])
    assert ds[-1][1].verdict == Verdict.DELIVERED
    assert [t[0] for t in pkt.trace] == ["R1", "R2", "R5", "R6", "R3", "R4"]
    assert pkt.reroute_marked


def test_double_failure_with_nffrr_drops_on_second_reroute():
    n = _fig10(True)
    n["R2"].set_link("R3", False)
    n["R6"].set_link("R3", False)
    pkt, ds = _walk(n, [oracles.lse_word(100, 0, 1, 64)])
    assert ds[-1][1].cause == DropCause.NFFRR
    assert pkt.hops <= 6 and pkt.trace[-1][0] == "R6"


def test_double_failure_without_nffrr_loops_until_ttl():
    n = _fig10(False)
    n["R2"].set_link("R3", False)
    n["R6"].set_link("R3", False)
    pkt, ds = _walk(n, [oracles.lse_word(100, 0, 1, 64)])
    assert ds[-1][1].cause == DropCause.TTL_EXPIRED
    assert pkt.hops == 64


def test_apply_frr_direct():
    n = _fig10(True)
    marked = Packet([oracles.lse_word(102, 0, 1, 60)], reroute_marked=True)
    assert apply_frr(n["R6"], marked, "R3").cause == DropCause.NFFRR
    fresh = Packet([oracles.lse_word(102, 0, 1, 60)])
    d = apply_frr(n["R2"], fresh, "R3")
    assert d.verdict == Verdict.FORWARD and d.next_hop == "R5" and fresh.reroute_marked
    assert apply_frr(n["R1"], Packet([oracles.lse_word(101, 0, 1, 60)]), "R2").cause \
        == DropCause.NO_ROUTE


def test_malformed_stack_dropped():
    node = NodeState("R")
    node.forwarding.pop_to(100, "R2")
    words = [oracles.lse_word(100, 0, 0, 64), oracles.lse_word(4, 0, 0, 0),
             oracles.b_word(1, 0, 1, 1, 2, s=1)]
    out = run_actions(node, words, False)
    assert out.cause == DropCause.MALFORMED


def test_registry_default_opcodes():
    reg = default_registry()
    assert [a.opcode for a in reg] == [1, 2, 3, 4, 5]
    with pytest.raises(ValueError):
        reg.register(Action(1, "again", lambda ctx: None))
    with pytest.raises(ValueError):
        reg.register(Action(128, "big", lambda ctx: None))
