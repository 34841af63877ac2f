"""Hypothesis strategies for valid label stacks."""

from hypothesis import strategies as st

from mna.codec import (
    NAS_INDICATOR_BSPL, FormatA, FormatB, FormatC, FormatD, LabelStack, Nas, RawLse, Scope,
)

labels = st.integers(0, (1 << 20) - 1).filter(lambda v: v != NAS_INDICATOR_BSPL)
raw_lses = st.builds(RawLse, labels, st.integers(0, 7), st.just(False), st.integers(0, 255))


@st.composite
def action_groups(draw, room):
    """(first_nal, [(opcode, data, nal)...], ad values) fitting ``room`` LSEs."""
    first_nal = draw(st.integers(0, min(7, room)))
    left = room - first_nal
    rest = []
    while left > 0 and draw(st.booleans()):
        nal = draw(st.integers(0, min(7, left - 1)))
        rest.append((draw(st.integers(0, 127)), draw(st.integers(0, (1 << 20) - 1)), nal))
        left -= 1 + nal
    return first_nal, rest


@st.composite
def nases(draw, scope=None):
    scope = draw(st.sampled_from([Scope.SELECT, Scope.HBH, Scope.I2E])) \
        if scope is None else scope
    first_nal, later = draw(action_groups(15))
    ad = lambda: FormatD(draw(st.integers(0, (1 << 30) - 1)))  # noqa: E731
    rest = [ad() for _ in range(first_nal)]
    for opcode, data, nal in later:
        rest.append(FormatC(opcode, data, nal, reserved=draw(st.integers(0, 1))))
        rest.extend(ad() for _ in range(nal))
    initial = FormatB(draw(st.integers(0, 127)), draw(st.integers(0, (1 << 13) - 1)),
                      scope, len(rest), first_nal, draw(st.integers(0, 1)), False,
                      draw(st.integers(0, 1)))
    indicator = FormatA(NAS_INDICATOR_BSPL, draw(st.integers(0, 7)), False,
                        draw(st.integers(0, 255)))
    return Nas(indicator, initial, tuple(rest))


@st.composite
def label_stacks(draw, max_entries=6):
    n = draw(st.integers(1, max_entries))
    entries = []
    for i in range(n):
        last = i == n - 1
        prev_select = bool(entries) and isinstance(entries[-1], Nas) \
            and entries[-1].scope == Scope.SELECT
        if draw(st.booleans()):
            entries.append(draw(raw_lses))
            continue
        scopes = [Scope.HBH] + ([] if prev_select else [Scope.SELECT]) \
            + ([Scope.I2E] if last else [])
        entries.append(draw(nases(draw(st.sampled_from(scopes)))))
    return LabelStack(tuple(entries)).with_bottom()
