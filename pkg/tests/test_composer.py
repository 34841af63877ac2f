import math
from itertools import product

import pytest
from hypothesis import assume, given, strategies as st

from mna.codec import LabelStack, Nas, RawLse, Scope, encode_stack
from mna.composer import (
    ActionSpec, CapacityExceeded, ComposeError, IssueKind, NasRequest, NasTooLarge,
    NodeCapabilities, NotMnaCapable, PathSpec, compose, in_between_capacity, validate_stack,
)
from mna.engine import NodeState, Packet, Verdict, process_packet

import oracles

HBH_NOOP = NasRequest(Scope.HBH, (ActionSpec(1),))


def _path(n, php=False):
    nodes = tuple(f"R{i + 1}" for i in range(n))
    labels = tuple(101 + i for i in range(n - (1 if php else 0)))
    return PathSpec(nodes, labels, php)


def _caps(path, rlds, max_select=0, max_hbh=2):
    return {n: NodeCapabilities(n, r, max_select, max_hbh) for n, r in zip(path.nodes, rlds)}


# -- in-between capacity ------------------------------------------------------

@pytest.mark.parametrize("args,want", [((51, 17, 17), 16), ((51, 9, 9), 32), ((35, 17, 17), 0)])
def test_in_between_capacity(args, want):
    assert in_between_capacity(*args) == want


@given(st.integers(0, 200), st.integers(0, 17), st.integers(0, 17), st.integers(1, 5))
def test_in_between_capacity_monotone(rld, ms, mh, d):
    base = in_between_capacity(rld, ms, mh)
    assert in_between_capacity(rld + d, ms, mh) > base
    assert in_between_capacity(rld, ms + d, mh) < base
    assert in_between_capacity(rld, ms, mh + d) < base
    assert (base < 0) == (rld < ms + mh + 1)


# -- placement ----------------------------------------------------------------

def test_fig28_unit_nas():
    path = _path(3)
    caps = _caps(path, [3, 3, 3], max_select=1, max_hbh=1)
    comp = compose(path, [HBH_NOOP], caps, unit_nas=True)
    assert comp.hbh_slots == (1, 2)
    kinds = [("L", e.label) if isinstance(e, RawLse) else ("N", e.scope)
             for e in comp.stack.entries]
    assert kinds == [("L", 101), ("L", 102), ("N", Scope.HBH), ("L", 103), ("N", Scope.HBH)]
    assert validate_stack(comp.stack, path, caps, unit_nas=True).ok


def _without(stack, k):
    return LabelStack(stack.entries[:k] + stack.entries[k + 1:]).with_bottom()


def test_fig28_removed_copies_flagged():
    path = _path(3)
    caps = _caps(path, [3, 3, 3], max_select=1, max_hbh=1)
    stack = compose(path, [HBH_NOOP], caps, unit_nas=True).stack
    upper = _without(stack, 2)  # only the bottom copy is left
    rep = validate_stack(upper, path, caps, unit_nas=True)
    assert IssueKind.HBH_OUT_OF_RLD in rep.kinds() and "R1" in rep.nodes()
    lower = _without(stack, 4)
    rep = validate_stack(lower, path, caps, unit_nas=True)
    assert IssueKind.HBH_MISSING in rep.kinds()


def test_unlimited_rld_single_copy_at_bottom():
    path = _path(4)
    caps = _caps(path, [math.inf] * 4)
    comp = compose(path, [HBH_NOOP], caps)
    assert comp.hbh_slots == (3,)
    assert isinstance(comp.stack.entries[-1], Nas)


def test_scope_placement():
    path = _path(3)
    caps = _caps(path, [math.inf] * 3, max_select=17, max_hbh=17)
    reqs = [NasRequest(Scope.SELECT, (ActionSpec(4, 2),), "R2"),
            NasRequest(Scope.I2E, (ActionSpec(1),)), HBH_NOOP]
    stack = compose(path, reqs, caps).stack
    e = stack.entries
    assert isinstance(e[2], Nas) and e[2].scope == Scope.SELECT and e[1].label == 102
    assert e[-1].scope == Scope.I2E
    assert stack.forwarding_labels() == list(path.labels)
    encode_stack(stack)


def test_nas_too_large():
    path = _path(2)
    caps = _caps(path, [math.inf, math.inf], max_select=9, max_hbh=9)
    big = NasRequest(Scope.HBH, (ActionSpec(5, 0, tuple(range(7))), ActionSpec(5, 0, (1, 2))))
    with pytest.raises(NasTooLarge):
        compose(path, [big], caps)
    # the validator reports the same stack as too large
    loose = _caps(path, [math.inf, math.inf], max_select=17, max_hbh=17)
    stack = compose(path, [big], loose).stack
    assert stack.nas_entries()[0].lse_count == 12
    assert IssueKind.NAS_TOO_LARGE in validate_stack(stack, path, caps).kinds()


def test_capacity_exceeded_and_incapable():
    # with PHP the copy for R2 cannot sit under R2's own label and must
    # follow the select NAS of R3
    php = _path(3, php=True)
    caps = _caps(php, [math.inf, 3, math.inf], max_select=0, max_hbh=2)
    caps["R3"] = NodeCapabilities("R3", math.inf, 2, 2)
    with pytest.raises(CapacityExceeded) as exc:
        compose(php, [HBH_NOOP, NasRequest(Scope.SELECT, (ActionSpec(1),), "R3")], caps)
    assert exc.value.node == "R2" and exc.value.required == 5
    path = _path(2)
    caps = _caps(path, [5, 5])
    caps["R2"] = NodeCapabilities("R2", 5, 0, 2, mna=False)
    with pytest.raises(NotMnaCapable):
        compose(path, [HBH_NOOP], caps)
    with pytest.raises(ComposeError):
        compose(path, [NasRequest(Scope.SELECT, (ActionSpec(1),), "R9")], _caps(path, [5, 5]))


def test_php_leaves_last_node_unlabelled():
    path = _path(3, php=True)
    caps = _caps(path, [math.inf] * 3)
    comp = compose(path, [HBH_NOOP], caps)
    assert comp.stack.forwarding_labels() == [101, 102]
    assert validate_stack(comp.stack, path, caps).ok


# -- minimality against the exhaustive oracle ---------------------------------

RLD_CHOICES = (3, 4, 5, 6, 7, math.inf)


def _check_config(rlds, sel_targets=()):
    n = len(rlds)
    path = _path(n)
    caps = {f"R{i + 1}": NodeCapabilities(f"R{i + 1}", r, 2 if i in sel_targets else 0, 2)
            for i, r in enumerate(rlds)}
    if any(rlds[t] < 5 for t in sel_targets):  # 1 + 2 + 2 readable LSEs needed
        with pytest.raises(NotMnaCapable):
            compose(path, [HBH_NOOP] + [NasRequest(Scope.SELECT, (ActionSpec(1),), f"R{t + 1}")
                                        for t in sel_targets], caps)
        return None
    reqs = [HBH_NOOP] + [NasRequest(Scope.SELECT, (ActionSpec(1),), f"R{t + 1}")
                         for t in sel_targets]
    sel_sizes = [2 if i in sel_targets else 0 for i in range(n)]
    best = oracles.min_copies(rlds, sel_sizes, 2)
    try:
        comp = compose(path, reqs, caps)
    except CapacityExceeded:
        assert best is None, (rlds, sel_targets)
        return None
    assert best is not None
    assert len(comp.hbh_slots) == best, (rlds, sel_targets, comp.hbh_slots)
    assert oracles.hbh_reach_ok(comp.hbh_slots, rlds, sel_sizes, 2)
    assert validate_stack(comp.stack, path, caps).ok
    return comp


def test_minimal_copies_exhaustive():
    checked = 0
    for n in range(1, 6):
        for rlds in product(RLD_CHOICES, repeat=n):
            _check_config(list(rlds))
            checked += 1
    assert checked == sum(len(RLD_CHOICES) ** n for n in range(1, 6))


@given(st.lists(st.sampled_from(RLD_CHOICES), min_size=1, max_size=5), st.data())
def test_minimal_copies_with_select(rlds, data):
    sel = data.draw(st.sets(st.integers(0, len(rlds) - 1)))
    _check_config(rlds, tuple(sorted(sel)))


def _engine_hbh_hits(stack, path, caps):
    """Run the stack through engine nodes; count HBH executions per node."""
    nodes = {}
    for i, name in enumerate(path.nodes):
        ns = NodeState(name, caps[name])
        if i < len(path.nodes) - 1:
            ns.forwarding.pop_to(path.labels[i], path.nodes[i + 1])
        else:
            ns.forwarding.deliver(path.labels[i])
        nodes[name] = ns
    pkt = Packet(stack.words())
    hits = []
    at = path.nodes[0]
    while True:
        d = process_packet(nodes[at], pkt)
        hits.append(sum(1 for scope, _ in d.executed if scope == Scope.HBH))
        if d.verdict != Verdict.FORWARD:
            return d.verdict, hits
        at = d.next_hop


@given(st.lists(st.sampled_from(RLD_CHOICES), min_size=1, max_size=5))
def test_composed_stack_executes_hbh_once_per_node(rlds):
    path = _path(len(rlds))
    caps = _caps(path, rlds)
    try:
        comp = compose(path, [HBH_NOOP], caps)
    except CapacityExceeded:
        assume(False)
    verdict, hits = _engine_hbh_hits(comp.stack, path, caps)
    assert verdict == Verdict.DELIVERED
    assert hits == [1] * len(rlds)


@given(st.lists(st.sampled_from(RLD_CHOICES), min_size=1, max_size=5), st.data())
def test_compose_then_validate_is_clean(rlds, data):
    n = len(rlds)
    php = n > 2 and data.draw(st.booleans())
    path = _path(n, php)
    caps = _caps(path, rlds, max_select=2, max_hbh=2)
    reqs = [HBH_NOOP]
    if data.draw(st.booleans()):
        reqs.append(NasRequest(Scope.I2E, (ActionSpec(1),)))
    try:
        comp = compose(path, reqs, caps)
    except ComposeError:
        assume(False)
    assert validate_stack(comp.stack, path, caps).ok
    stripped = [e.label for e in comp.stack.entries if isinstance(e, RawLse)]
    assert stripped == list(path.labels)
