"""Bit-exact codec for MPLS label stacks carrying network action sub-stacks.

A stack is a sequence of 32-bit label stack entries (LSEs) in network byte
order.  Plain forwarding LSEs use the classic layout::

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |                Label                  | TC  |S|      TTL      |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+

A network action sub-stack (NAS) starts with an indicator LSE (format A, a
forwarding-style LSE whose label is the NAS indicator special purpose label)
followed by one initial opcode LSE (format B) and ``nasl`` further LSEs that
are either subsequent opcodes (format C) or ancillary data (format D).  The
field offsets of B, C and D live in :data:`FIELD_LAYOUTS`; everything else in
this module is derived from that table.

C and D words are told apart by walking the NAL chain only: the ``nal`` words
after an opcode are ancillary data, the next one is an opcode again.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional, Sequence, Union

LAYOUT_VERSION = "mna-isd-1"

#: Placeholder special purpose label announcing a NAS (no IANA value yet).
NAS_INDICATOR_BSPL = 4

MAX_NASL = 15
MAX_NAL = 7
MAX_NAS_LSES = MAX_NASL + 2
MAX_OPCODE = 127

#: Leading bits of every LSE that transit nodes may hash for ECMP.
IMMUTABLE_BITS = 20
IMMUTABLE_MASK = 0xFFFFF000

# (field, width) from the most significant bit down; each sums to 32.
FIELD_LAYOUTS: dict[str, tuple[tuple[str, int], ...]] = {
    "LSE": (("label", 20), ("tc", 3), ("s", 1), ("ttl", 8)),
    "A": (("label", 20), ("tc", 3), ("s", 1), ("ttl", 8)),
    "B": (("opcode", 7), ("data", 13), ("ihs", 2), ("nasl", 4),
          ("nal", 3), ("r", 1), ("s", 1), ("u", 1)),
    "C": (("opcode", 7), ("data_hi", 13), ("data_lo", 7), ("nal", 3),
          ("s", 1), ("reserved", 1)),
    "D": (("data_hi", 19), ("disc", 1), ("data_lo", 11), ("s", 1)),
}

#: Fields holding opcode-specific data, most significant part first.
DATA_FIELDS: dict[str, tuple[str, ...]] = {
    "LSE": (),
    "A": (),
    "B": ("data",),
    "C": ("data_hi", "data_lo"),
    "D": ("data_hi", "data_lo"),
}


def _shifts(layout):
    out = {}
    offset = 0
    for name, width in layout:
        out[name] = (32 - offset - width, width)
        offset += width
    assert offset == 32
    return out


FIELD_SHIFTS: dict[str, dict[str, tuple[int, int]]] = {
    fmt: _shifts(layout) for fmt, layout in FIELD_LAYOUTS.items()
}


def _get(word: int, fmt: str, name: str) -> int:
    shift, width = FIELD_SHIFTS[fmt][name]
    return (word >> shift) & ((1 << width) - 1)


def _put(fmt: str, **values: int) -> int:
    word = 0
    for name, value in values.items():
        shift, width = FIELD_SHIFTS[fmt][name]
        word |= (int(value) & ((1 << width) - 1)) << shift
    return word


def field_mask(fmt: str, name: str) -> int:
    shift, width = FIELD_SHIFTS[fmt][name]
    return ((1 << width) - 1) << shift


def data_width(fmt: str) -> int:
    return sum(FIELD_SHIFTS[fmt][f][1] for f in DATA_FIELDS[fmt])


def mutable_data_bits(fmt: str) -> int:
    """Data bits of one LSE that sit outside the leading immutable region."""
    count = 0
    for name in DATA_FIELDS[fmt]:
        shift, width = FIELD_SHIFTS[fmt][name]
        for bit in range(shift, shift + width):
            if 31 - bit >= IMMUTABLE_BITS:
                count += 1
    return count


class CodecError(ValueError):
    """Base class for stack encoding and decoding failures."""


class InvariantViolation(CodecError):
    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        where = f" (entry {index})" if index is not None else ""
        super().__init__(message + where)


class MalformedNas(CodecError):
    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        where = f" (LSE {index})" if index is not None else ""
        super().__init__(message + where)


class MalformedStack(CodecError):
    pass


class TrailingGarbage(MalformedStack):
    pass


class Scope(IntEnum):
    """Value of the IHS field: where a NAS is executed."""

    I2E = 0
    HBH = 1
    SELECT = 2
    RESERVED = 3

    @property
    def spelled(self) -> str:
        return _SCOPE_NAMES[self]


_SCOPE_NAMES = {
    Scope.I2E: "ingress-to-egress",
    Scope.HBH: "hop-by-hop",
    Scope.SELECT: "select",
    Scope.RESERVED: "reserved",
}


def _check_range(name: str, value: int, bits: int) -> None:
    if not 0 <= int(value) < (1 << bits):
        raise InvariantViolation(f"{name}={value} does not fit in {bits} bits")


@dataclass(frozen=True)
class RawLse:
    """Plain forwarding label stack entry."""

    label: int
    tc: int = 0
    bos: bool = False
    ttl: int = 64

    def __post_init__(self):
        _check_range("label", self.label, 20)
        _check_range("tc", self.tc, 3)
        _check_range("ttl", self.ttl, 8)

    def word(self) -> int:
        return _put("LSE", label=self.label, tc=self.tc, s=self.bos, ttl=self.ttl)

    @classmethod
    def from_word(cls, word: int) -> "RawLse":
        return cls(_get(word, "LSE", "label"), _get(word, "LSE", "tc"),
                   bool(_get(word, "LSE", "s")), _get(word, "LSE", "ttl"))

    @property
    def s(self) -> bool:
        return self.bos


@dataclass(frozen=True)
class FormatA:
    """NAS indicator."""

    bspl_value: int = NAS_INDICATOR_BSPL
    tc: int = 0
    bos: bool = False
    ttl: int = 0

    def __post_init__(self):
        _check_range("bspl_value", self.bspl_value, 20)
        _check_range("tc", self.tc, 3)
        _check_range("ttl", self.ttl, 8)

    def word(self) -> int:
        return _put("A", label=self.bspl_value, tc=self.tc, s=self.bos, ttl=self.ttl)

    @classmethod
    def from_word(cls, word: int) -> "FormatA":
        return cls(_get(word, "A", "label"), _get(word, "A", "tc"),
                   bool(_get(word, "A", "s")), _get(word, "A", "ttl"))

    @property
    def s(self) -> bool:
        return self.bos


@dataclass(frozen=True)
class FormatB:
    """Initial opcode LSE; its ``ihs`` and ``nasl`` apply to the whole NAS."""

    opcode: int
    data: int = 0
    ihs: Scope = Scope.HBH
    nasl: int = 0
    nal: int = 0
    r: int = 0
    s: bool = False
    u: int = 0

    def __post_init__(self):
        _check_range("opcode", self.opcode, 7)
        _check_range("data", self.data, 13)
        _check_range("ihs", self.ihs, 2)
        _check_range("nasl", self.nasl, 4)
        _check_range("nal", self.nal, 3)
        _check_range("r", self.r, 1)
        _check_range("u", self.u, 1)
        if not isinstance(self.ihs, Scope):
            object.__setattr__(self, "ihs", Scope(self.ihs))

    def word(self) -> int:
        return _put("B", opcode=self.opcode, data=self.data, ihs=self.ihs,
                    nasl=self.nasl, nal=self.nal, r=self.r, s=self.s, u=self.u)

    @classmethod
    def from_word(cls, word: int) -> "FormatB":
        g = lambda name: _get(word, "B", name)  # noqa: E731
        return cls(g("opcode"), g("data"), Scope(g("ihs")), g("nasl"), g("nal"),
                   g("r"), bool(g("s")), g("u"))


@dataclass(frozen=True)
class FormatC:
    """Subsequent opcode LSE with 20 bits of inline data."""

    opcode: int
    data: int = 0
    nal: int = 0
    s: bool = False
    reserved: int = 0

    def __post_init__(self):
        _check_range("opcode", self.opcode, 7)
        _check_range("data", self.data, 20)
        _check_range("nal", self.nal, 3)
        _check_range("reserved", self.reserved, 1)

    @property
    def data_hi(self) -> int:
        return self.data >> 7

    @property
    def data_lo(self) -> int:
        return self.data & 0x7F

    def word(self) -> int:
        return _put("C", opcode=self.opcode, data_hi=self.data_hi,
                    data_lo=self.data_lo, nal=self.nal, s=self.s,
                    reserved=self.reserved)

    @classmethod
    def from_word(cls, word: int) -> "FormatC":
        g = lambda name: _get(word, "C", name)  # noqa: E731
        return cls(g("opcode"), (g("data_hi") << 7) | g("data_lo"), g("nal"),
                   bool(g("s")), g("reserved"))


@dataclass(frozen=True)
class FormatD:
    """Ancillary data LSE with 30 data bits; the discriminator is always 0."""

    data: int = 0
    s: bool = False

    def __post_init__(self):
        _check_range("data", self.data, 30)

    @property
    def data_hi(self) -> int:
        return self.data >> 11

    @property
    def data_lo(self) -> int:
        return self.data & 0x7FF

    def word(self) -> int:
        return _put("D", data_hi=self.data_hi, disc=0, data_lo=self.data_lo, s=self.s)

    @classmethod
    def from_word(cls, word: int) -> "FormatD":
        return cls((_get(word, "D", "data_hi") << 11) | _get(word, "D", "data_lo"),
                   bool(_get(word, "D", "s")))


NasLse = Union[FormatC, FormatD]


@dataclass(frozen=True)
class NasAction:
    """One network action found by walking the NAL chain of a NAS."""

    index: int  # 0 is the format B LSE, i > 0 is rest[i - 1]
    opcode: int
    nal: int
    data: int
    ad: tuple[FormatD, ...]


@dataclass(frozen=True)
class Nas:
    indicator: FormatA
    initial: FormatB
    rest: tuple[NasLse, ...] = ()

    @property
    def scope(self) -> Scope:
        return self.initial.ihs

    @property
    def lse_count(self) -> int:
        return 2 + len(self.rest)

    @property
    def bos(self) -> bool:
        return self.lses()[-1].s

    def lses(self) -> tuple:
        return (self.indicator, self.initial) + tuple(self.rest)

    def words(self) -> list[int]:
        return [lse.word() for lse in self.lses()]

    def check(self, bspl: int = NAS_INDICATOR_BSPL, index: Optional[int] = None) -> None:
        """Raise :class:`InvariantViolation` unless the NAS is well formed."""
        if self.indicator.bspl_value != bspl:
            raise InvariantViolation(
                f"NAS indicator label {self.indicator.bspl_value} != {bspl}", index)
        if self.initial.nasl != len(self.rest):
            raise InvariantViolation(
                f"nasl={self.initial.nasl} but {len(self.rest)} LSEs follow format B",
                index)
        pending = self.initial.nal
        for pos, lse in enumerate(self.rest, start=1):
            if pending:
                if not isinstance(lse, FormatD):
                    raise InvariantViolation(
                        f"NAS LSE {pos} must be ancillary data (format D)", index)
                pending -= 1
            else:
                if not isinstance(lse, FormatC):
                    raise InvariantViolation(
                        f"NAS LSE {pos} must be an opcode (format C)", index)
                pending = lse.nal
        if pending:
            raise InvariantViolation("NAL exceeds NASL", index)

    def actions(self) -> Iterator[NasAction]:
        """Walk the NAL chain; assumes :meth:`check` passes."""
        chain = (self.initial,) + tuple(self.rest)
        idx = 0
        while idx < len(chain):
            op = chain[idx]
            ad = tuple(chain[idx + 1: idx + 1 + op.nal])
            yield NasAction(idx, op.opcode, op.nal, op.data, ad)
            idx += 1 + op.nal

    def with_bos(self, bos: bool) -> "Nas":
        lses = list(self.lses())
        for i, lse in enumerate(lses):
            want = bos and i == len(lses) - 1
            if lse.s != want:
                lses[i] = _with_s(lse, want)
        return Nas(lses[0], lses[1], tuple(lses[2:]))


def _with_s(lse, s: bool):
    from dataclasses import replace
    if isinstance(lse, (RawLse, FormatA)):
        return replace(lse, bos=s)
    return replace(lse, s=s)


Entry = Union[RawLse, Nas]


@dataclass(frozen=True)
class LabelStack:
    entries: tuple[Entry, ...] = ()

    def __post_init__(self):
        if not isinstance(self.entries, tuple):
            object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def lse_count(self) -> int:
        return sum(e.lse_count if isinstance(e, Nas) else 1 for e in self.entries)

    def words(self) -> list[int]:
        out: list[int] = []
        for e in self.entries:
            if isinstance(e, Nas):
                out.extend(e.words())
            else:
                out.append(e.word())
        return out

    def forwarding_labels(self) -> list[int]:
        return [e.label for e in self.entries if isinstance(e, RawLse)]

    def nas_entries(self) -> list[Nas]:
        return [e for e in self.entries if isinstance(e, Nas)]

    def with_bottom(self) -> "LabelStack":
        """Copy with bottom-of-stack set on the final LSE only."""
        out = []
        last = len(self.entries) - 1
        for i, e in enumerate(self.entries):
            want = i == last
            if isinstance(e, Nas):
                out.append(e.with_bos(want))
            elif e.bos != want:
                out.append(_with_s(e, want))
            else:
                out.append(e)
        return LabelStack(tuple(out))


def check_stack(stack: LabelStack, bspl: int = NAS_INDICATOR_BSPL) -> None:
    """Raise :class:`InvariantViolation` naming the first offending entry."""
    if not stack.entries:
        raise InvariantViolation("empty stack")
    last = len(stack.entries) - 1
    prev: Optional[Entry] = None
    for i, entry in enumerate(stack.entries):
        if isinstance(entry, Nas):
            entry.check(bspl, i)
            inner = entry.lses()[:-1]
            if any(lse.s for lse in inner):
                raise InvariantViolation("bottom-of-stack set inside a NAS", i)
            if entry.scope == Scope.SELECT and isinstance(prev, Nas) \
                    and prev.scope == Scope.SELECT:
                raise InvariantViolation(
                    "two select-scoped NAS below the same forwarding label", i)
            if isinstance(prev, Nas) and prev.scope == Scope.I2E:
                raise InvariantViolation("entry follows the I2E-scoped NAS", i)
        elif isinstance(entry, RawLse):
            if entry.label == bspl:
                raise InvariantViolation(
                    f"forwarding label {entry.label} collides with the NAS indicator", i)
            if isinstance(prev, Nas) and prev.scope == Scope.I2E:
                raise InvariantViolation("entry follows the I2E-scoped NAS", i)
        else:
            raise InvariantViolation(f"unknown entry type {type(entry).__name__}", i)
        if entry.bos != (i == last):
            msg = "bottom-of-stack missing on final entry" if i == last \
                else "bottom-of-stack set before the final entry"
            raise InvariantViolation(msg, i)
        prev = entry


def words_to_bytes(words: Sequence[int]) -> bytes:
    return struct.pack(f"!{len(words)}I", *words)


def bytes_to_words(data: bytes) -> list[int]:
    if len(data) % 4:
        raise MalformedStack(f"{len(data)} bytes is not a whole number of LSEs")
    return list(struct.unpack(f"!{len(data) // 4}I", data))


def encode_stack(stack: LabelStack, bspl: int = NAS_INDICATOR_BSPL) -> bytes:
    check_stack(stack, bspl)
    return words_to_bytes(stack.words())


@dataclass(frozen=True)
class ClassifiedLse:
    """One consumed word with the format it was classified as."""

    index: int
    fmt: str  # "LSE", "A", "B", "C" or "D"
    word: int
    record: object


@dataclass(frozen=True)
class ParsedStack:
    entries: tuple[Entry, ...]
    truncated: bool
    consumed_lse_count: int
    lses: tuple[ClassifiedLse, ...] = ()
    offsets: tuple[int, ...] = ()  # first word index of each entry
    complete_lse_count: int = 0  # words covered by ``entries``
    trailing_lse_count: int = 0

    @property
    def stack(self) -> LabelStack:
        return LabelStack(self.entries)


@dataclass
class _Scan:
    lses: list = field(default_factory=list)
    entries: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    complete: int = 0
    truncated: bool = False
    bottom_seen: bool = False
    error: Optional[CodecError] = None
    trailing: int = 0


def _scan(words: Sequence[int], rld: Optional[int], bspl: int) -> _Scan:
    out = _Scan()
    n = len(words)
    limit = n if rld is None else min(n, rld)
    i = 0

    def classify(fmt, cls):
        rec = cls.from_word(words[i])
        out.lses.append(ClassifiedLse(i, fmt, words[i], rec))
        return rec

    while i < n:
        if i >= limit:
            out.truncated = True
            return out
        if _get(words[i], "LSE", "label") != bspl:
            lse = classify("LSE", RawLse)
            out.entries.append(lse)
            out.offsets.append(i)
            i += 1
            out.complete = i
            if lse.bos:
                out.bottom_seen = True
                break
            continue

        start = i
        indicator = classify("A", FormatA)
        if indicator.bos:
            out.error = MalformedNas("NAS indicator carries bottom-of-stack", i)
            return out
        i += 1
        if i >= n:
            out.error = MalformedNas("format B LSE missing after NAS indicator", i)
            return out
        if i >= limit:
            out.truncated = True
            return out
        initial = classify("B", FormatB)
        rest: list = []
        pending = initial.nal
        i += 1
        last_s = initial.s
        for k in range(initial.nasl):
            if last_s:
                out.error = MalformedNas(
                    f"nasl={initial.nasl} but bottom-of-stack after {k} LSEs", i - 1)
                return out
            if i >= n:
                out.error = MalformedNas(
                    f"nasl={initial.nasl} but only {k} LSEs present", i)
                return out
            if i >= limit:
                out.truncated = True
                return out
            if pending:
                lse = classify("D", FormatD)
                pending -= 1
            else:
                lse = classify("C", FormatC)
                pending = lse.nal
            rest.append(lse)
            last_s = lse.s
            i += 1
        if pending:
            out.error = MalformedNas("NAL exceeds NASL", start + 1)
            return out
        out.entries.append(Nas(indicator, initial, tuple(rest)))
        out.offsets.append(start)
        out.complete = i
        if last_s:
            out.bottom_seen = True
            break

    out.trailing = n - i
    return out


def decode_stack(data: bytes, rld: Optional[int] = None, *, strict: bool = True,
                 bspl: int = NAS_INDICATOR_BSPL) -> ParsedStack:
    """Decode ``data`` reading at most ``rld`` LSEs (``None`` reads all).

    Malformed NAS structure always raises.  A missing bottom-of-stack or
    words after it raise only in strict mode.
    """
    if rld is not None and rld < 1:
        raise ValueError("rld must be positive")
    words = bytes_to_words(data)
    scan = _scan(words, rld, bspl)
    if scan.error is not None:
        raise scan.error
    if strict and not scan.truncated:
        if not scan.bottom_seen:
            raise MalformedStack("no bottom-of-stack LSE")
        if scan.trailing:
            raise TrailingGarbage(f"{scan.trailing} LSEs after bottom-of-stack")
    return ParsedStack(tuple(scan.entries), scan.truncated, len(scan.lses),
                       tuple(scan.lses), tuple(scan.offsets), scan.complete,
                       scan.trailing)


@dataclass(frozen=True)
class MutableBitReport:
    total_bits: int
    data_bits: int
    mutable_bits: int


def mutable_bit_report(nas: Nas) -> MutableBitReport:
    """Bit accounting of a NAS including its indicator.

    Mutable bits are data bits located after the leading 20 bits of their
    LSE; those leading bits may be hashed for ECMP and must stay intact.
    """
    fmts = ["A", "B"] + ["C" if isinstance(l, FormatC) else "D" for l in nas.rest]
    return MutableBitReport(
        total_bits=32 * len(fmts),
        data_bits=sum(data_width(f) for f in fmts),
        mutable_bits=sum(mutable_data_bits(f) for f in fmts),
    )


def make_nas(scope: Scope, actions: Sequence[tuple[int, int, Sequence[int]]],
             bspl: int = NAS_INDICATOR_BSPL) -> Nas:
    """Build a NAS from ``(opcode, inline_data, ad_payloads)`` triples.

    The first action becomes the format B LSE, later ones format C; each
    payload becomes one format D LSE.
    """
    if not actions:
        raise InvariantViolation("a NAS needs at least one action")
    rest: list = []
    first_op, first_data, first_ad = actions[0]
    if len(first_ad) > MAX_NAL:
        raise InvariantViolation(f"{len(first_ad)} AD LSEs exceed NAL limit {MAX_NAL}")
    rest.extend(FormatD(v) for v in first_ad)
    for opcode, data, ad in actions[1:]:
        if len(ad) > MAX_NAL:
            raise InvariantViolation(f"{len(ad)} AD LSEs exceed NAL limit {MAX_NAL}")
        rest.append(FormatC(opcode, data, len(ad)))
        rest.extend(FormatD(v) for v in ad)
    if len(rest) > MAX_NASL:
        raise InvariantViolation(
            f"NAS needs {len(rest)} LSEs after format B, at most {MAX_NASL} fit")
    initial = FormatB(first_op, first_data, Scope(scope), len(rest), len(first_ad))
    return Nas(FormatA(bspl), initial, tuple(rest))


def _fmt_fields(fmt: str, rec) -> str:
    if fmt in ("LSE", "A"):
        name = "label" if fmt == "LSE" else "bspl"
        value = rec.label if fmt == "LSE" else rec.bspl_value
        return (f"{name}={value} (0x{value:05x}) tc={rec.tc} s={int(rec.bos)} "
                f"ttl={rec.ttl} (0x{rec.ttl:02x})")
    if fmt == "B":
        return (f"opcode={rec.opcode} (0x{rec.opcode:02x}) data={rec.data} "
                f"(0x{rec.data:04x}) scope={rec.ihs.spelled} nasl={rec.nasl} "
                f"nal={rec.nal} r={rec.r} s={int(rec.s)} u={rec.u}")
    if fmt == "C":
        return (f"opcode={rec.opcode} (0x{rec.opcode:02x}) data={rec.data} "
                f"(0x{rec.data:05x}) nal={rec.nal} s={int(rec.s)}")
    return f"data={rec.data} (0x{rec.data:08x}) s={int(rec.s)}"


_TAGS = {"LSE": "LSE  ", "A": "NAS-A", "B": "NAS-B", "C": "NAS-C", "D": "NAS-D"}


def dissect_text(data: bytes, rld: Optional[int] = None,
                 bspl: int = NAS_INDICATOR_BSPL) -> str:
    """Render one annotated line per LSE; problems are reported inline."""
    if not data:
        return "empty stack"
    notes = []
    whole = len(data) - len(data) % 4
    if whole != len(data):
        notes.append(f"MALFORMED: {len(data) - whole} trailing bytes do not form an LSE")
    words = bytes_to_words(data[:whole])
    if not words:
        return "\n".join(["empty stack"] + notes)
    scan = _scan(words, rld, bspl)
    lines = []
    for c in scan.lses:
        lines.append(f"[{c.index:2d}] {_TAGS[c.fmt]} 0x{c.word:08x}  "
                     f"{_fmt_fields(c.fmt, c.record)}")
    if scan.error is not None:
        lines.append(f"MALFORMED: {scan.error}")
    elif scan.truncated:
        lines.append(f"TRUNCATED at RLD {rld}: {len(words) - len(scan.lses)} "
                     "LSEs not parsed")
    else:
        if not scan.bottom_seen:
            lines.append("MALFORMED: no bottom-of-stack LSE")
        if scan.trailing:
            lines.append(f"TRAILING: {scan.trailing} LSEs after bottom-of-stack")
    return "\n".join(lines + notes)
