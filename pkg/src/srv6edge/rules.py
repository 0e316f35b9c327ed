"""Per-gateway steering tables.

A :class:`RuleTable` is an immutable, versioned snapshot.  Updates build a
new snapshot and a :class:`RuleStore` swaps the reference in one assignment,
so a reader holding a snapshot sees either the old rule set or the new one.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv4Network, IPv6Address, IPv6Network, ip_network
from typing import Iterable, Union

from .behaviors import SegmentList

Address = Union[IPv4Address, IPv6Address]
Network = Union[IPv4Network, IPv6Network]


class RuleError(ValueError):
    pass


class NoMatch(LookupError):
    pass


class UnknownRuleId(RuleError):
    pass


class DuplicateRuleId(RuleError):
    pass


class ShapeViolation(RuleError):
    pass


@dataclass(frozen=True)
class UplinkRule:
    rule_id: int
    teid: int
    action: SegmentList
    qfi: int | None = None
    inner_src_prefix: Network | None = None
    priority: int = 0

    def matches(self, teid: int, qfi: int | None, inner_src: Address | None) -> bool:
        if teid != self.teid:
            return False
        if self.qfi is not None and qfi != self.qfi:
            return False
        if self.inner_src_prefix is not None:
            if inner_src is None or inner_src.version != self.inner_src_prefix.version:
                return False
            if inner_src not in self.inner_src_prefix:
                return False
        return True

    def content(self) -> tuple:
        return ("uplink", self.teid, self.qfi, self.inner_src_prefix, self.priority, tuple(self.action))


@dataclass(frozen=True)
class DownlinkRule:
    rule_id: int
    ue_prefix: Network
    action: SegmentList

    def content(self) -> tuple:
        return ("downlink", self.ue_prefix, tuple(self.action))


Rule = Union[UplinkRule, DownlinkRule]


def _uplink_order(rule: UplinkRule) -> tuple[int, int]:
    return (-rule.priority, rule.rule_id)


@dataclass(frozen=True)
class RuleTable:
    version: int = 0
    uplink: dict[int, UplinkRule] = field(default_factory=dict)
    downlink: dict[int, DownlinkRule] = field(default_factory=dict)
    gtp6e_locators: tuple[IPv6Network, ...] = ()
    _by_teid: dict[int, list[UplinkRule]] = field(default_factory=dict, repr=False, compare=False)
    _by_len: dict[tuple[int, int], dict[Network, DownlinkRule]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        by_teid: dict[int, list[UplinkRule]] = {}
        for rule in self.uplink.values():
            by_teid.setdefault(rule.teid, []).append(rule)
        for rules in by_teid.values():
            rules.sort(key=_uplink_order)
        by_len: dict[tuple[int, int], dict[Network, DownlinkRule]] = {}
        for rule in sorted(self.downlink.values(), key=lambda r: r.rule_id):
            key = (rule.ue_prefix.version, rule.ue_prefix.prefixlen)
            by_len.setdefault(key, {}).setdefault(rule.ue_prefix, rule)
        ordered = dict(sorted(by_len.items(), key=lambda kv: -kv[0][1]))
        object.__setattr__(self, "_by_teid", by_teid)
        object.__setattr__(self, "_by_len", ordered)

    def __len__(self) -> int:
        return len(self.uplink) + len(self.downlink)

    def classify_uplink(self, teid: int, qfi: int | None, inner_src: Address | None) -> SegmentList:
        for rule in self._by_teid.get(teid, ()):
            if rule.matches(teid, qfi, inner_src):
                return rule.action
        raise NoMatch(f"no uplink rule for teid={teid} qfi={qfi} src={inner_src}")

    def classify_downlink(self, inner_dst: Address) -> SegmentList:
        return self.match_downlink(inner_dst).action

    def match_downlink(self, inner_dst: Address) -> DownlinkRule:
        for (version, plen), rules in self._by_len.items():
            if version != inner_dst.version:
                continue
            net = ip_network((int(inner_dst), plen), strict=False)
            rule = rules.get(net)
            if rule is not None:
                return rule
        raise NoMatch(f"no downlink rule for {inner_dst}")

    def rules(self) -> list[Rule]:
        return [*self.uplink.values(), *self.downlink.values()]

    def contents(self) -> set[tuple]:
        return {r.content() for r in self.rules()}


def classify_uplink(table: RuleTable, teid: int, qfi: int | None, inner_src: Address | None) -> SegmentList:
    return table.classify_uplink(teid, qfi, inner_src)


def classify_downlink(table: RuleTable, inner_dst: Address) -> SegmentList:
    return table.classify_downlink(inner_dst)


def check_downlink_shape(rule: DownlinkRule, gtp6e_locators: Iterable[IPv6Network] = ()) -> None:
    """Downlink actions end ``[..., GTP6.E SID, gNB address]``."""
    if len(rule.action) < 2:
        raise ShapeViolation(f"rule {rule.rule_id}: downlink path needs a GTP6.E SID and a gNB address")
    locators = tuple(gtp6e_locators)
    if locators and not any(rule.action[-2] in loc for loc in locators):
        raise ShapeViolation(f"rule {rule.rule_id}: {rule.action[-2]} is not a GTP6.E SID")


def apply_update(table: RuleTable, add: Iterable[Rule] = (), remove: Iterable[int] = ()) -> RuleTable:
    """Return the next table version with ``remove`` dropped and ``add`` installed.

    Validation happens before anything is built, so a failing update leaves
    no trace.
    """
    add = list(add)
    remove = list(remove)
    uplink = dict(table.uplink)
    downlink = dict(table.downlink)
    for rid in remove:
        if rid in uplink:
            del uplink[rid]
        elif rid in downlink:
            del downlink[rid]
        else:
            raise UnknownRuleId(f"rule {rid} is not installed")
    for rule in add:
        if rule.rule_id in uplink or rule.rule_id in downlink:
            raise DuplicateRuleId(f"rule {rule.rule_id} already installed")
        if isinstance(rule, UplinkRule):
            uplink[rule.rule_id] = rule
        else:
            check_downlink_shape(rule, table.gtp6e_locators)
            downlink[rule.rule_id] = rule
    return RuleTable(table.version + 1, uplink, downlink, table.gtp6e_locators)


class RuleStore:
    """Single-writer, many-reader holder of the current :class:`RuleTable`."""

    def __init__(self, gtp6e_locators: Iterable[IPv6Network] = ()):
        self._table = RuleTable(gtp6e_locators=tuple(gtp6e_locators))
        self._write_lock = threading.Lock()

    def snapshot(self) -> RuleTable:
        return self._table

    def prepare(self, add: Iterable[Rule] = (), remove: Iterable[int] = ()) -> RuleTable:
        return apply_update(self._table, add, remove)

    def commit(self, new: RuleTable) -> None:
        with self._write_lock:
            if new.version != self._table.version + 1:
                raise RuleError(f"stale update: table is at v{self._table.version}, got v{new.version}")
            self._table = new

    def update(self, add: Iterable[Rule] = (), remove: Iterable[int] = ()) -> RuleTable:
        with self._write_lock:
            self._table = apply_update(self._table, add, remove)
            return self._table
