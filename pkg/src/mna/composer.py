"""Ingress stack composition under readable-label-depth limits.

A composed stack looks like::

    L1 [select(R1)] [HBH copy] L2 [select(R2)] [HBH copy] ... Ln ... [I2E]

Every node must find an HBH NAS within its RLD, counted from the top of
the stack as the node receives it (its own forwarding label included).
Copies sitting below an already popped label are popped with it, so the
copy a node executes is always the topmost one it can see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

from .codec import (
    NAS_INDICATOR_BSPL, LabelStack, Nas, RawLse, Scope, make_nas,
)

Depth = Union[int, float]  # float only for math.inf


class ComposeError(ValueError):
    pass


class CapacityExceeded(ComposeError):
    def __init__(self, node: str, required: Depth, available: Depth, what: str = "HBH NAS"):
        self.node, self.required, self.available = node, required, available
        super().__init__(f"{node}: {what} needs {required} readable LSEs, rld is {available}")


class NasTooLarge(ComposeError):
    def __init__(self, node: str, scope: Scope, size: int, cap: int):
        self.node, self.scope, self.size, self.cap = node, scope, size, cap
        super().__init__(f"{node}: {scope.name} NAS of {size} LSEs exceeds cap {cap}")


class NotMnaCapable(ComposeError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"{node} cannot process network actions")


def in_between_capacity(rld: Depth, max_select: int, max_hbh: int) -> Depth:
    """LSEs left between a node's own label and the NAS it must reach."""
    if min(rld, max_select, max_hbh) < 0:
        raise ValueError("arguments must be non-negative")
    return rld - max_select - max_hbh - 1


@dataclass(frozen=True)
class NodeCapabilities:
    node_id: str
    rld: Depth = math.inf
    max_select_nas: int = 17
    max_hbh_nas: int = 17
    mna: bool = True

    def __post_init__(self):
        if not self.rld >= 1:
            raise ValueError(f"{self.node_id}: rld must be positive")
        for name in ("max_select_nas", "max_hbh_nas"):
            v = getattr(self, name)
            if not 0 <= v <= 17:
                raise ValueError(f"{self.node_id}: {name}={v} outside 0..17")

    @property
    def mna_capable(self) -> bool:
        return self.mna and in_between_capacity(
            self.rld, self.max_select_nas, self.max_hbh_nas) >= 0


@dataclass(frozen=True)
class ActionSpec:
    opcode: int
    data: int = 0
    ad: tuple[int, ...] = ()


@dataclass(frozen=True)
class NasRequest:
    scope: Scope
    actions: tuple[ActionSpec, ...]
    target: Optional[str] = None  # select scope only

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if (self.scope == Scope.SELECT) != (self.target is not None):
            raise ValueError("a target node is required for select scope and only there")
        if self.scope == Scope.RESERVED:
            raise ValueError("reserved scope cannot be requested")


@dataclass(frozen=True)
class PathSpec:
    """Nodes in traversal order and the label each node looks up.

    With ``php`` the last node receives no forwarding label, so ``labels``
    is one shorter than ``nodes``.
    """

    nodes: tuple[str, ...]
    labels: tuple[int, ...]
    php: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.nodes:
            raise ValueError("path has no nodes")
        want = len(self.nodes) - (1 if self.php else 0)
        if len(self.labels) != want:
            raise ValueError(f"path of {len(self.nodes)} nodes needs {want} labels, "
                             f"got {len(self.labels)}")
        for lab in self.labels:
            if not 16 <= lab < (1 << 20):
                raise ValueError(f"label {lab} is reserved or out of range")


def _merge(requests: Sequence[NasRequest], bspl: int):
    """One NAS per scope (and per target for select)."""
    hbh: list[ActionSpec] = []
    i2e: list[ActionSpec] = []
    sel: dict[str, list[ActionSpec]] = {}
    for r in requests:
        if r.scope == Scope.HBH:
            hbh.extend(r.actions)
        elif r.scope == Scope.I2E:
            i2e.extend(r.actions)
        else:
            sel.setdefault(r.target, []).extend(r.actions)

    def build(scope, acts):
        return make_nas(scope, [(a.opcode, a.data, a.ad) for a in acts], bspl) if acts else None

    return (build(Scope.HBH, hbh), build(Scope.I2E, i2e),
            {t: build(Scope.SELECT, a) for t, a in sel.items()})


def _size(nas: Optional[Nas], unit_nas: bool) -> int:
    if nas is None:
        return 0
    return 1 if unit_nas else nas.lse_count


@dataclass(frozen=True)
class Composition:
    stack: LabelStack
    hbh_slots: tuple[int, ...]  # node indexes whose label has an HBH copy below it


def hbh_windows(path: PathSpec, caps: Mapping[str, NodeCapabilities], hbh_size: int,
                sel_sizes: Sequence[int]) -> list[tuple[int, int]]:
    """Per node ``j`` the range of slots ``[j, r_j]`` where a copy is readable."""
    n = len(path.nodes)
    label = [1 if i < len(path.labels) else 0 for i in range(n)]
    allowed = [not (path.php and i == n - 2) for i in range(n)]
    out = []
    for j, node in enumerate(path.nodes):
        rld = caps[node].rld
        depth = 0
        right = None
        for k in range(j, n):
            depth += label[k] + sel_sizes[k]
            if depth + hbh_size > rld:
                break
            if allowed[k]:
                right = k
        if right is None:
            first = next(k for k in range(j, n) if allowed[k])
            need = sum(label[m] + sel_sizes[m] for m in range(j, first + 1)) + hbh_size
            raise CapacityExceeded(node, need, rld)
        out.append((j, right))
    return out


def place_copies(windows: Sequence[tuple[int, int]]) -> list[int]:
    """Fewest slots hitting every window: sweep by right end, stab at it."""
    slots: list[int] = []
    for left, right in sorted(windows, key=lambda w: (w[1], w[0])):
        if not any(left <= s <= right for s in slots):
            slots.append(right)
    return sorted(slots)


def compose(path: PathSpec, requests: Sequence[NasRequest],
            caps: Mapping[str, NodeCapabilities], *, unit_nas: bool = False,
            ttl: int = 64, tc: int = 0, bspl: int = NAS_INDICATOR_BSPL) -> Composition:
    for node in path.nodes:
        if node not in caps:
            raise ComposeError(f"no capabilities for {node}")
    n = len(path.nodes)
    hbh, i2e, sel = _merge(requests, bspl)
    index = {node: i for i, node in enumerate(path.nodes)}

    sel_at: list[Optional[Nas]] = [None] * n
    for target, nas in sel.items():
        if target not in index:
            raise ComposeError(f"select target {target} is not on the path")
        i = index[target]
        if path.php and i == n - 2:
            raise ComposeError(f"{target} pops the last label; its select NAS "
                               "would be left for the egress")
        c = caps[target]
        if not c.mna_capable:
            raise NotMnaCapable(target)
        size = _size(nas, unit_nas)
        if size > c.max_select_nas:
            raise NasTooLarge(target, Scope.SELECT, size, c.max_select_nas)
        depth = (1 if i < len(path.labels) else 0) + size
        if depth > c.rld:
            raise CapacityExceeded(target, depth, c.rld, "select NAS")
        sel_at[i] = nas
    sel_sizes = [_size(s, unit_nas) for s in sel_at]

    slots: list[int] = []
    hbh_size = _size(hbh, unit_nas)
    if hbh is not None:
        for node in path.nodes:
            c = caps[node]
            if not c.mna_capable:
                raise NotMnaCapable(node)
            if hbh_size > c.max_hbh_nas:
                raise NasTooLarge(node, Scope.HBH, hbh_size, c.max_hbh_nas)
        slots = place_copies(hbh_windows(path, caps, hbh_size, sel_sizes))

    if i2e is not None:
        egress = path.nodes[-1]
        c = caps[egress]
        if not c.mna:
            raise NotMnaCapable(egress)
        depth = (1 if n - 1 < len(path.labels) else 0) + sel_sizes[-1] + \
            (hbh_size if hbh is not None else 0) + _size(i2e, unit_nas)
        if depth > c.rld:
            raise CapacityExceeded(egress, depth, c.rld, "I2E NAS")

    entries: list = []
    for i in range(n):
        if i < len(path.labels):
            entries.append(RawLse(path.labels[i], tc, False, ttl))
        if sel_at[i] is not None:
            entries.append(sel_at[i])
        if i in slots:
            entries.append(hbh)
    if i2e is not None:
        entries.append(i2e)
    return Composition(LabelStack(tuple(entries)).with_bottom(), tuple(slots))


def compose_stack(path: PathSpec, requests: Sequence[NasRequest],
                  caps: Mapping[str, NodeCapabilities], **kw) -> LabelStack:
    return compose(path, requests, caps, **kw).stack


class IssueKind(Enum):
    HBH_MISSING = "hbh-missing"
    HBH_OUT_OF_RLD = "hbh-out-of-rld"
    SELECT_OUT_OF_RLD = "select-out-of-rld"
    I2E_OUT_OF_RLD = "i2e-out-of-rld"
    NAS_TOO_LARGE = "nas-too-large"
    NOT_MNA_CAPABLE = "not-mna-capable"
    LABEL_MISMATCH = "label-mismatch"


@dataclass(frozen=True)
class Issue:
    node: str
    kind: IssueKind
    detail: str = ""

    def __str__(self):
        return f"{self.node}: {self.kind.value}" + (f" ({self.detail})" if self.detail else "")


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __bool__(self) -> bool:
        return bool(self.issues)

    def kinds(self) -> set[IssueKind]:
        return {i.kind for i in self.issues}

    def nodes(self) -> set[str]:
        return {i.node for i in self.issues}


def validate_stack(stack: LabelStack, path: PathSpec,
                   caps: Mapping[str, NodeCapabilities], *,
                   unit_nas: bool = False) -> ValidationReport:
    """Walk the path popping labels as the nodes would and report problems."""
    report = ValidationReport()
    add = lambda node, kind, detail="": report.issues.append(Issue(node, kind, detail))  # noqa: E731
    view = list(stack.entries)
    want_hbh = any(isinstance(e, Nas) and e.scope == Scope.HBH for e in view)
    n = len(path.nodes)

    for j, node in enumerate(path.nodes):
        c = caps.get(node)
        if c is None:
            add(node, IssueKind.NOT_MNA_CAPABLE, "no capabilities")
            break
        has_label = j < len(path.labels)
        if has_label:
            top = view[0] if view else None
            if not isinstance(top, RawLse) or top.label != path.labels[j]:
                got = top.label if isinstance(top, RawLse) else "a NAS" if top else "nothing"
                add(node, IssueKind.LABEL_MISMATCH, f"expected {path.labels[j]}, got {got}")
                break

        sizes = [_size(e, unit_nas) if isinstance(e, Nas) else 1 for e in view]
        depths, acc = [], 0
        for s in sizes:
            acc += s
            depths.append(acc)
        visible_nas = [(k, e) for k, e in enumerate(view) if isinstance(e, Nas)]
        own = 1 if has_label else 0
        own_select = len(view) > own and isinstance(view[own], Nas) \
            and view[own].scope == Scope.SELECT
        if (want_hbh or own_select) and not c.mna_capable:
            add(node, IssueKind.NOT_MNA_CAPABLE)

        if want_hbh:
            hbh = next(((k, e) for k, e in visible_nas if e.scope == Scope.HBH), None)
            if hbh is None:
                add(node, IssueKind.HBH_MISSING)
            else:
                k, e = hbh
                if depths[k] > c.rld:
                    add(node, IssueKind.HBH_OUT_OF_RLD, f"depth {depths[k]} > rld {c.rld}")
                if sizes[k] > c.max_hbh_nas:
                    add(node, IssueKind.NAS_TOO_LARGE,
                        f"HBH NAS {sizes[k]} > cap {c.max_hbh_nas}")

        if own_select:
            if depths[own] > c.rld:
                add(node, IssueKind.SELECT_OUT_OF_RLD, f"depth {depths[own]} > rld {c.rld}")
            if sizes[own] > c.max_select_nas:
                add(node, IssueKind.NAS_TOO_LARGE,
                    f"select NAS {sizes[own]} > cap {c.max_select_nas}")

        if j == n - 1:
            if view and isinstance(view[-1], Nas) and view[-1].scope == Scope.I2E \
                    and depths[-1] > c.rld:
                add(node, IssueKind.I2E_OUT_OF_RLD, f"depth {depths[-1]} > rld {c.rld}")
            break

        # pop own label, then the NASes it exposes unless nothing else follows
        rest = view[own:]
        k = 0
        while k < len(rest) and isinstance(rest[k], Nas):
            k += 1
        view = rest[k:] if k < len(rest) else rest
    return report
