"""Line-oriented text formats: scenario files and stack descriptions.

Both formats are documented in ``docs/formats.md``.  Every error names the
source and line it was found on.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .actions import Opcode, amm_data
from .codec import NAS_INDICATOR_BSPL, LabelStack, RawLse, Scope, make_nas
from .composer import ActionSpec, NasRequest
from .simulator import (
    LinkSpec, NodeSpec, NrpSpec, Options, PathDef, Route, Scenario, ScenarioInvalid,
    StreamSpec, TunnelSpec, parse_bool,
)


class FormatError(ScenarioInvalid):
    pass


_ACTION_RE = re.compile(r"(\w+)(?:\(([^)]*)\))?")
_SECTION_RE = re.compile(r"^\[([^\]]+)\]$")


def _int(text: str, where: str, what: str = "value") -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise FormatError(f"{what} {text!r} is not an integer", where) from None


def _ad_list(text: str, where: str) -> tuple[int, ...]:
    return tuple(_int(v, where, "AD value") for v in text.split(":") if v)


def _action(name: str, args: dict, where: str) -> ActionSpec:
    def take(key, default=None):
        if key in args:
            return _int(args.pop(key), where, key)
        if default is None:
            raise FormatError(f"{name} needs {key}=", where)
        return default

    if name == "noop":
        spec = ActionSpec(Opcode.NOOP, take("data", 0))
    elif name == "nffrr":
        spec = ActionSpec(Opcode.NFFRR, take("bit", 0))
    elif name == "amm":
        flow, loss, delay = take("flow"), take("loss", 0), take("delay", 0)
        if not 0 <= flow < (1 << 18) or loss not in (0, 1) or delay not in (0, 1):
            raise FormatError("amm flow must fit 18 bits and colors must be 0 or 1", where)
        spec = ActionSpec(Opcode.AMM, amm_data(flow, loss, delay))
    elif name == "nrp":
        spec = ActionSpec(Opcode.NRP, take("selector"))
    elif name == "dummy":
        ad = _ad_list(args.pop("ad"), where) if "ad" in args else (0,) * take("nal", 0)
        spec = ActionSpec(Opcode.DUMMY, take("data", 0), ad)
    elif name == "op":
        ad = _ad_list(args.pop("ad"), where) if "ad" in args else ()
        spec = ActionSpec(take("opcode"), take("data", 0), ad)
    else:
        raise FormatError(f"unknown action {name!r}", where)
    if args:
        raise FormatError(f"{name} does not take {', '.join(sorted(args))}", where)
    return spec


def parse_actions(text: str, where: str = "") -> tuple[ActionSpec, ...]:
    """``noop amm(flow=7) op(opcode=9,data=1,ad=1:2)`` -> action specs.

    The first action of a NAS lands in the 13-bit format B data field, so a
    ``noop`` is put in front of an AMM action that would otherwise lead.
    """
    text = text.strip()
    specs = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _ACTION_RE.match(text, pos)
        if not m:
            raise FormatError(f"cannot parse action list at {text[pos:]!r}", where)
        args = {}
        if m.group(2):
            for item in m.group(2).split(","):
                if not item.strip():
                    continue
                if "=" not in item:
                    raise FormatError(f"argument {item.strip()!r} needs key=value", where)
                k, v = item.split("=", 1)
                args[k.strip()] = v.strip()
        specs.append(_action(m.group(1), args, where))
        pos = m.end()
    if not specs:
        raise FormatError("a NAS needs at least one action", where)
    if specs[0].opcode == Opcode.AMM:
        specs.insert(0, ActionSpec(Opcode.NOOP))
    return tuple(specs)


def parse_nas_request(text: str, where: str = "") -> NasRequest:
    """``hbh noop``, ``i2e ...`` or ``select@R2 nrp(selector=1)``."""
    parts = text.strip().split(None, 1)
    if len(parts) < 2:
        raise FormatError("expected '<scope> <actions>'", where)
    scope_txt, actions = parts
    target = None
    if scope_txt.startswith("select@"):
        target = scope_txt.split("@", 1)[1]
        scope = Scope.SELECT
    elif scope_txt in ("hbh", "i2e"):
        scope = Scope.HBH if scope_txt == "hbh" else Scope.I2E
    else:
        raise FormatError(f"unknown scope {scope_txt!r} (hbh, i2e or select@NODE)", where)
    return NasRequest(scope, parse_actions(actions, where), target)


# -- stack descriptions ---------------------------------------------------

def _kv_tokens(tokens, where, allowed):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise FormatError(f"expected key=value, got {tok!r}", where)
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise FormatError(f"unknown key {k!r}", where)
        out[k] = _int(v, where, k)
    return out


def parse_stack_description(text: str, source: str = "<stack>",
                            bspl: int = NAS_INDICATOR_BSPL) -> LabelStack:
    """Build a stack from ``label``/``nas`` lines; bottom-of-stack is implied."""
    entries: list = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        if head == "label":
            tokens = rest.split()
            if not tokens:
                raise FormatError("label needs a value", where)
            value = _int(tokens[0], where, "label")
            kv = _kv_tokens(tokens[1:], where, {"ttl", "tc"})
            try:
                entries.append(RawLse(value, kv.get("tc", 0), False, kv.get("ttl", 64)))
            except ValueError as e:
                raise FormatError(str(e), where) from None
        elif head == "nas":
            scope_txt, _, actions = rest.strip().partition(" ")
            scopes = {"hbh": Scope.HBH, "i2e": Scope.I2E, "select": Scope.SELECT}
            if scope_txt not in scopes:
                raise FormatError(f"unknown scope {scope_txt!r}", where)
            specs = parse_actions(actions, where)
            try:
                entries.append(make_nas(scopes[scope_txt],
                                        [(a.opcode, a.data, a.ad) for a in specs], bspl))
            except ValueError as e:
                raise FormatError(str(e), where) from None
        else:
            raise FormatError(f"expected 'label' or 'nas', got {head!r}", where)
    if not entries:
        raise FormatError("stack description is empty", f"{source}:1")
    return LabelStack(tuple(entries)).with_bottom()


# -- scenarios ------------------------------------------------------------

class _Section:
    def __init__(self, kind: str, args: list[str], where: str):
        self.kind, self.args, self.where = kind, args, where
        self.items: list[tuple[str, str, str]] = []  # key, value, where

    def get(self, key: str) -> Optional[tuple[str, str]]:
        found = [(v, w) for k, v, w in self.items if k == key]
        if len(found) > 1:
            raise FormatError(f"{key} given more than once", found[1][1])
        return found[0] if found else None

    def all(self, key: str) -> list[tuple[str, str]]:
        return [(v, w) for k, v, w in self.items if k == key]

    def keys(self) -> set[str]:
        return {k for k, _, _ in self.items}


def _sections(text: str, source: str) -> list[_Section]:
    out: list[_Section] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            parts = m.group(1).split()
            out.append(_Section(parts[0], parts[1:], where))
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value' or '[section]', got {line!r}", where)
        if not out:
            raise FormatError("key outside of any section", where)
        k, v = line.split("=", 1)
        out[-1].items.append((k.strip(), v.strip(), where))
    return out


_ALLOWED = {
    "scenario": {"seed", "enforcement", "nffrr", "strict_opcodes", "unit_nas",
                 "check_immutable", "mode", "option"},
    "node": {"rld", "max_select", "max_hbh", "mna", "drop", "route", "default_rate",
             "default_burst"},
    "link": {"capacity", "up", "oneway"},
    "tunnel": {"labels", "via"},
    "path": {"hops", "php", "nas"},
    "stream": {"path", "labels", "ingress", "rate", "packets", "duration", "size", "ttl",
               "tc", "start", "amm_period", "amm_batch", "nas"},
    "nrp": {"node", "selector", "rate", "burst"},
}


def _check_keys(sec: _Section) -> None:
    allowed = _ALLOWED[sec.kind]
    for k, _, w in sec.items:
        if k not in allowed:
            raise FormatError(f"unknown key {k!r} in [{sec.kind}]", w)


def _bool(v: str, w: str) -> bool:
    try:
        return parse_bool(v)
    except ValueError as e:
        raise FormatError(str(e), w) from None


def _one(sec: _Section, key: str, conv, default=None, required=False):
    got = sec.get(key)
    if got is None:
        if required:
            raise FormatError(f"[{sec.kind}] needs {key}", sec.where)
        return default
    v, w = got
    if conv is int:
        return _int(v, w, key)
    if conv is bool:
        return _bool(v, w)
    try:
        return conv(v)
    except (ValueError, ZeroDivisionError):
        raise FormatError(f"bad {key} {v!r}", w) from None


def _rld(v: str):
    return math.inf if v.strip().lower() in ("inf", "unlimited") else int(v, 0)


def _route(text: str, where: str) -> Route:
    t = text.split()
    if len(t) == 4 and t[1] == "swap":
        return Route(_int(t[0], where), "swap", _int(t[2], where), t[3])
    if len(t) == 3 and t[1] == "pop":
        return Route(_int(t[0], where), "pop", None, t[2])
    if len(t) == 2 and t[1] == "deliver":
        return Route(_int(t[0], where), "deliver")
    raise FormatError("route must be '<label> swap <label> <node>', '<label> pop <node>' "
                      "or '<label> deliver'", where)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    sc = Scenario(where=f"{source}:1")
    have_header = False
    for sec in _sections(text, source):
        if sec.kind not in _ALLOWED:
            raise FormatError(f"unknown section [{sec.kind}]", sec.where)
        _check_keys(sec)
        name = sec.args[0] if sec.args else None
        if sec.kind == "scenario":
            if have_header:
                raise FormatError("second [scenario] section", sec.where)
            have_header = True
            sc.name = name or sc.name
            sc.where = sec.where
            sc.seed = _one(sec, "seed", int, 0)
            for k, v, w in sec.items:
                try:
                    if k == "option":
                        if "=" not in v:
                            raise ValueError(f"option {v!r} needs key=value")
                        ok, ov = v.split("=", 1)
                        sc.options.set(ok, ov.strip())
                    elif k != "seed":
                        sc.options.set(k, v)
                except ValueError as e:
                    raise FormatError(str(e), w) from None
        elif sec.kind == "node":
            if len(sec.args) != 1:
                raise FormatError("[node NAME]", sec.where)
            if name in sc.nodes:
                raise FormatError(f"node {name} defined twice", sec.where)
            ns = NodeSpec(name, where=sec.where)
            ns.rld = _one(sec, "rld", _rld, math.inf)
            ns.max_select_nas = _one(sec, "max_select", int, 17)
            ns.max_hbh_nas = _one(sec, "max_hbh", int, 17)
            ns.mna = _one(sec, "mna", bool, True)
            ns.drop_prob = _one(sec, "drop", float, 0.0)
            ns.default_rate = _one(sec, "default_rate", int)
            ns.default_burst = _one(sec, "default_burst", int)
            ns.routes = [_route(v, w) for v, w in sec.all("route")]
            try:
                ns.capabilities()
            except ValueError as e:
                raise FormatError(str(e), sec.where) from None
            sc.nodes[name] = ns
        elif sec.kind == "link":
            if len(sec.args) != 2:
                raise FormatError("[link A B]", sec.where)
            sc.links.append(LinkSpec(sec.args[0], sec.args[1],
                                     _one(sec, "capacity", int),
                                     _one(sec, "up", bool, True),
                                     not _one(sec, "oneway", bool, False), sec.where))
        elif sec.kind == "tunnel":
            if len(sec.args) != 2:
                raise FormatError("[tunnel NODE PROTECTED_NEXT_HOP]", sec.where)
            labels_txt, lw = sec.get("labels") or ("", sec.where)
            labels = tuple(_int(x, lw, "label") for x in labels_txt.split())
            if not labels:
                raise FormatError("tunnel needs labels", sec.where)
            sc.tunnels.append(TunnelSpec(sec.args[0], sec.args[1], labels,
                                         _one(sec, "via", str, required=True), sec.where))
        elif sec.kind == "path":
            if len(sec.args) != 1:
                raise FormatError("[path NAME]", sec.where)
            hops_txt, hw = sec.get("hops") or (None, sec.where)
            if not hops_txt:
                raise FormatError("path needs hops", sec.where)
            hops = []
            for tok in hops_txt.split():
                node, _, lab = tok.partition(":")
                hops.append((node, _int(lab, hw, "label") if lab else None))
            php = _one(sec, "php", bool, False)
            for i, (node, lab) in enumerate(hops):
                if lab is None and not (php and i == len(hops) - 1):
                    raise FormatError(f"hop {node} needs a label", hw)
            p = PathDef(name, hops, php, [parse_nas_request(v, w) for v, w in sec.all("nas")],
                        sec.where)
            try:
                p.spec()
            except ValueError as e:
                raise FormatError(str(e), hw) from None
            sc.paths[name] = p
        elif sec.kind == "stream":
            if len(sec.args) != 1:
                raise FormatError("[stream NAME]", sec.where)
            rate = _one(sec, "rate", int, required=True)
            packets = _one(sec, "packets", int)
            duration = _one(sec, "duration", int)
            if (packets is None) == (duration is None):
                raise FormatError("stream needs exactly one of packets or duration", sec.where)
            if packets is None:
                packets = rate * duration
            labels_txt = sec.get("labels")
            labels = tuple(_int(x, labels_txt[1], "label") for x in labels_txt[0].split()) \
                if labels_txt else ()
            sc.streams.append(StreamSpec(
                name, rate, packets,
                size=_one(sec, "size", int, 1),
                path=_one(sec, "path", str),
                ingress=_one(sec, "ingress", str),
                labels=labels,
                requests=[parse_nas_request(v, w) for v, w in sec.all("nas")],
                start=_one(sec, "start", int, 0),
                ttl=_one(sec, "ttl", int, 64),
                tc=_one(sec, "tc", int, 0),
                amm_period=_one(sec, "amm_period", Fraction),
                amm_batch=_one(sec, "amm_batch", int),
                where=sec.where))
        elif sec.kind == "nrp":
            sc.nrps.append(NrpSpec(name or "nrp", _one(sec, "node", str, required=True),
                                   _one(sec, "selector", int, required=True),
                                   _one(sec, "rate", int, required=True),
                                   _one(sec, "burst", int), sec.where))
    if not have_header:
        raise FormatError("missing [scenario] section", f"{source}:1")
    return sc


BUNDLED = ("e1", "e2", "e3", "e4", "e5", "e6", "e7", "nffrr-fig10", "rld-fig28")


def bundled_path(name: str):
    return resources.files("mna") / "scenarios" / f"{name}.scenario"


def load_scenario(ref: Union[str, Path]) -> Scenario:
    """Load a scenario file, or a bundled one by name (``e5``, ``nffrr-fig10``...)."""
    p = Path(ref)
    if p.exists():
        return parse_scenario(p.read_text(), str(p))
    name = str(ref)
    if name.endswith(".scenario"):
        name = name[: -len(".scenario")]
    res = bundled_path(name)
    if res.is_file():
        return parse_scenario(res.read_text(), f"{name}.scenario")
    raise FormatError(f"no scenario file or bundled scenario named {ref!r}")
