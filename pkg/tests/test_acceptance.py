"""Acceptance criteria, one test each, each printing a PASS/FAIL line."""

import random
import time
from itertools import product

import pytest

from mna.codec import (
    NAS_INDICATOR_BSPL, FormatA, FormatB, FormatC, FormatD, LabelStack, Nas, RawLse, Scope,
    decode_stack, encode_stack, mutable_bit_report,
)
from mna.composer import IssueKind, compose, in_between_capacity, \
    validate_stack
from mna.simulator import collector_link_loss, expected_e2e_drop, run_scenario
from mna.textfmt import BUNDLED, load_scenario

import test_composer as tc


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return emit


def _random_stack(rnd):
    """Valid stack from a plain seeded generator (no hypothesis overhead)."""
    n = rnd.randint(1, 8)
    entries = []
    for i in range(n):
        prev_select = bool(entries) and isinstance(entries[-1], Nas) \
            and entries[-1].scope == Scope.SELECT
        if rnd.random() < 0.5:
            label = rnd.randrange(1 << 20)
            if label == NAS_INDICATOR_BSPL:
                label += 1
            entries.append(RawLse(label, rnd.randrange(8), False, rnd.randrange(256)))
            continue
        scopes = [Scope.HBH] + ([] if prev_select else [Scope.SELECT]) \
            + ([Scope.I2E] if i == n - 1 else [])
        room = rnd.randint(0, 15)
        first_nal = rnd.randint(0, min(7, room))
        rest = [FormatD(rnd.randrange(1 << 30)) for _ in range(first_nal)]
        room -= first_nal
        while room > 0:
            nal = rnd.randint(0, min(7, room - 1))
            rest.append(FormatC(rnd.randrange(128), rnd.randrange(1 << 20), nal))
            rest.extend(FormatD(rnd.randrange(1 << 30)) for _ in range(nal))
            room -= 1 + nal
        b = FormatB(rnd.randrange(128), rnd.randrange(1 << 13), rnd.choice(scopes),
                    len(rest), first_nal, rnd.randrange(2), False, rnd.randrange(2))
        entries.append(Nas(FormatA(NAS_INDICATOR_BSPL, rnd.randrange(8), False,
                                   rnd.randrange(256)), b, tuple(rest)))
    return LabelStack(tuple(entries)).with_bottom()


def test_01_codec_roundtrip(verdict):
    rnd = random.Random(1)
    t0 = time.perf_counter()
    failures = 0
    for _ in range(10_000):
        s = _random_stack(rnd)
        if decode_stack(encode_stack(s)).stack != s:
            failures += 1
    dt = time.perf_counter() - t0
    verdict(1, "codec roundtrip", failures == 0 and dt < 5,
            f"10000 stacks, {failures} failures, {dt:.2f}s (limit 5s)")


def test_02_e2e_drop(verdict):
    exact = expected_e2e_drop([0.1, 0.2, 0.3])
    t0 = time.perf_counter()
    losses = []
    sc = load_scenario("e5")
    for seed in range(10):
        rep = run_scenario(sc, seed=seed)
        assert rep.streams["s"]["sent"] == 1_000_000
        losses.append(rep.loss("s"))
    dt = time.perf_counter() - t0
    mean = sum(losses) / len(losses)
    ok = exact == 0.496 and abs(mean - 0.496) <= 0.005 and dt < 60
    verdict(2, "end-to-end drop", ok,
            f"expected {exact}, simulated mean {mean:.5f} over 10 seeds x 1e6 packets, "
            f"{dt:.1f}s (limit 60s)")


def test_03_table4(verdict):
    links = collector_link_loss([1913168832, 1721832612, 1377440738, 964199933])
    deltas = [l.delta for l in links]
    rates = [f"{l.rate:.4f}" for l in links]
    ok = deltas == [191336220, 344391874, 413240805] and rates == ["0.1000", "0.2000", "0.3000"]
    verdict(3, "link loss arithmetic", ok, f"deltas {deltas}, rates {rates}")


def test_04_amm_link_loss(verdict):
    t0 = time.perf_counter()
    rep = run_scenario(load_scenario("e6"))
    dt = time.perf_counter() - t0
    col = rep.collector["s"]
    rates = [l["rate"] for l in col["links"]]
    close = all(abs(r - p) <= 0.01 for r, p in zip(rates, (0.1, 0.2, 0.3)))
    exact = all(l["delta"] == l["ledger"] for l in col["links"])
    # color changes seen at the first node, not counting the end-of-run flush
    changes = sum(1 for r in rep.exports if r.node_id == "R1"
                  and r.timestamp < rep.ticks * rep.slots_per_tick)
    ok = close and exact and changes == 10 and rep.streams["s"]["sent"] == 1_000_000 \
        and dt < 60
    verdict(4, "AMM link loss", ok,
            f"rates {[round(r, 4) for r in rates]}, ledger agreement {exact}, "
            f"{changes} color alternations, {dt:.1f}s (limit 60s)")


def test_05_nrp_slicing(verdict):
    sc = load_scenario("e7")
    on = run_scenario(sc)
    sc.options.set("enforcement", "off")
    off = run_scenario(sc)
    load = sum(s["sent"] for s in on.streams.values()) / on.ticks
    nrp_zero = all(on.loss(s) == 0 for s in "XYZ")
    absorbed = set(on.streams["interference"]["dropped"]) == {"meter_exceeded"} and all(
        not on.streams[s]["dropped"] for s in "XYZ")
    all_hit = all(off.loss(s) > 0.3 for s in off.streams)
    ok = nrp_zero and absorbed and all_hit and load == 200
    verdict(5, "NRP slicing", ok,
            f"offered {load:.0f}/tick on 100/tick; enforcement on: "
            f"{ {s: round(on.loss(s), 3) for s in on.streams} }; enforcement off: "
            f"{ {s: round(off.loss(s), 3) for s in off.streams} }")


def test_06_in_between_capacity(verdict):
    a, b = in_between_capacity(51, 17, 17), in_between_capacity(51, 9, 9)
    prop = all((in_between_capacity(r, s, h) < 0) == (r < s + h + 1)
               for r in range(0, 60) for s in range(18) for h in range(18))
    threshold = min(r for r in range(60) if in_between_capacity(r, 17, 17) >= 0)
    ok = a == 16 and b == 32 and prop and threshold == 35
    verdict(6, "in-between stack size", ok,
            f"(51,17,17)={a}, (51,9,9)={b}, sign property {prop}, minimum rld {threshold}")


def test_07_hbh_placement(verdict):
    t0 = time.perf_counter()
    path = tc._path(3)
    caps = tc._caps(path, [3, 3, 3], max_select=1, max_hbh=1)
    comp = compose(path, [tc.HBH_NOOP], caps, unit_nas=True)
    below = [path.labels[i] for i in comp.hbh_slots]
    removed = tc._without(comp.stack, 2)
    rep = validate_stack(removed, path, caps, unit_nas=True)
    flagged = IssueKind.HBH_OUT_OF_RLD in rep.kinds() and rep.nodes() & {"R1", "R2"}
    count = 0
    for n in range(1, 6):
        for rlds in product(tc.RLD_CHOICES, repeat=n):
            tc._check_config(list(rlds))
            count += 1
    dt = time.perf_counter() - t0
    ok = below == [102, 103] and bool(flagged) and dt < 10
    verdict(7, "HBH copy placement", ok,
            f"copies below labels {below}, removed copy flagged at {sorted(rep.nodes())}, "
            f"{count} RLD assignments minimal, {dt:.1f}s (limit 10s)")


def test_08_nffrr(verdict):
    sc = load_scenario("nffrr-fig10")
    ttl = sc.streams[0].ttl
    on = run_scenario(sc)
    sc.options.set("nffrr", "off")
    off = run_scenario(sc)
    off_hops = [int(h) for h in off.hops["dropped"]]
    on_hops = [int(h) for h in on.hops["dropped"]]
    ok = off.streams["probe"]["dropped"] == {"ttl_expired": 1} and off_hops == [ttl] \
        and on.streams["probe"]["dropped"] == {"nffrr": 1} and max(on_hops) <= 6
    verdict(8, "reroute loop suppression", ok,
            f"without: ttl_expired after {off_hops} hops (ttl {ttl}); "
            f"with: {on.streams['probe']['dropped']} after {on_hops} hops")


def test_09_mutable_bits(verdict):
    rest = tuple(FormatD() for _ in range(7)) + (FormatC(2, nal=7),) \
        + tuple(FormatD() for _ in range(7))
    rep = mutable_bit_report(Nas(FormatA(), FormatB(1, nasl=15, nal=7), rest))
    ok = rep.total_bits == 544 and rep.mutable_bits == 161 and rep.data_bits == 453
    verdict(9, "mutable bits", ok,
            f"total {rep.total_bits}, mutable {rep.mutable_bits}, data {rep.data_bits} "
            "(the published figure of 424 data bits does not match 13 + 20 + 14 x 30)")


def test_10_immutable_region_over_fixtures(verdict):
    runs = []
    for name in BUNDLED:
        sc = load_scenario(name)
        assert sc.options.check_immutable
        run_scenario(sc)  # raises on any per-hop violation
        small = load_scenario(name)
        for s in small.streams:
            s.packets = min(s.packets, 2000)
        run_scenario(small, mode="packet")
        runs.append(name)
    verdict(10, "immutable region per hop", len(runs) == len(BUNDLED),
            f"clean over {', '.join(runs)} (line-rate and latency figures are out of scope)")
