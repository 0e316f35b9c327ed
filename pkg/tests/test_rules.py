import random
import threading
from ipaddress import IPv6Address, IPv6Network

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (
    GNB,
    GTP6E,
    random_downlink_rules,
    random_query_dst,
    random_uplink_query,
    random_uplink_rules,
    scan_downlink,
    scan_uplink,
)
from srv6edge.behaviors import SegmentList
from srv6edge.rules import (
    DownlinkRule,
    DuplicateRuleId,
    NoMatch,
    RuleError,
    RuleStore,
    RuleTable,
    ShapeViolation,
    UnknownRuleId,
    UplinkRule,
    apply_update,
    classify_downlink,
    classify_uplink,
)

P1 = SegmentList(["2001:db8::1"])
P2 = SegmentList(["2001:db8::2"])
SID = IPv6Address(int(GTP6E.network_address) | 7)


def down(rid, prefix, sid=SID):
    return DownlinkRule(rid, IPv6Network(prefix), SegmentList([sid, GNB]))


def outcome(fn):
    try:
        return fn()
    except NoMatch:
        return None


class TestClassifyUplink:
    def test_teid_only(self):
        t = apply_update(RuleTable(), [UplinkRule(1, 100, P1)])
        assert classify_uplink(t, 100, 9, IPv6Address("2001:db8:1::2")) == P1

    def test_priority_order(self):
        t = apply_update(RuleTable(), [UplinkRule(1, 100, P1, qfi=9, priority=10), UplinkRule(2, 100, P2, priority=1)])
        assert classify_uplink(t, 100, 9, None) == P1
        assert classify_uplink(t, 100, 5, None) == P2

    def test_tie_breaks_on_lowest_id(self):
        t = apply_update(RuleTable(), [UplinkRule(9, 100, P2), UplinkRule(3, 100, P1)])
        assert classify_uplink(t, 100, None, None) == P1

    def test_source_prefix(self):
        t = apply_update(
            RuleTable(),
            [UplinkRule(1, 100, P1, inner_src_prefix=IPv6Network("2001:db8:1::/64"), priority=5), UplinkRule(2, 100, P2)],
        )
        assert classify_uplink(t, 100, None, IPv6Address("2001:db8:1::9")) == P1
        assert classify_uplink(t, 100, None, IPv6Address("2001:db8:2::9")) == P2

    def test_no_match(self):
        with pytest.raises(NoMatch):
            classify_uplink(RuleTable(), 1, None, None)

    def test_randomized_against_linear_scan(self):
        rng = random.Random(11)
        for _ in range(20):
            rules = random_uplink_rules(rng, rng.randrange(1, 200), teids=16)
            t = apply_update(RuleTable(), rules)
            for _ in range(200):
                q = random_uplink_query(rng, rules, teids=16)
                assert outcome(lambda: t.classify_uplink(*q)) == outcome(lambda: scan_uplink(rules, *q))


class TestClassifyDownlink:
    def test_longest_prefix_wins(self):
        t = apply_update(RuleTable(), [down(1, "2001:db8:1::/56"), down(2, "2001:db8:1::/64", IPv6Address(int(SID) + 1))])
        assert classify_downlink(t, IPv6Address("2001:db8:1::5"))[0] == IPv6Address(int(SID) + 1)
        assert classify_downlink(t, IPv6Address("2001:db8:1:ff::5"))[0] == SID

    def test_default_route(self):
        t = apply_update(RuleTable(), [down(1, "::/0")])
        assert classify_downlink(t, IPv6Address("fe80::1"))[-1] == GNB

    def test_no_match(self):
        t = apply_update(RuleTable(), [down(1, "2001:db8:1::/64")])
        with pytest.raises(NoMatch):
            classify_downlink(t, IPv6Address("2001:db8:2::1"))

    def test_randomized_against_linear_scan(self):
        rng = random.Random(12)
        for _ in range(20):
            rules = random_downlink_rules(rng, rng.randrange(1, 200))
            t = apply_update(RuleTable(), rules)
            for _ in range(200):
                q = random_query_dst(rng, rules)
                assert outcome(lambda: t.classify_downlink(q)) == outcome(lambda: scan_downlink(rules, q))

    @given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 32)), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
    def test_nested_prefixes(self, specs, probe):
        # everything below one /96 so prefixes nest heavily
        base = 0x20010DB8 << 96
        rules = [
            DownlinkRule(i + 1, IPv6Network((base | v, 96 + plen), strict=False), SegmentList([IPv6Address(int(SID) + i), GNB]))
            for i, (v, plen) in enumerate(specs)
        ]
        t = apply_update(RuleTable(), rules)
        dst = IPv6Address(base | probe)
        assert outcome(lambda: t.classify_downlink(dst)) == outcome(lambda: scan_downlink(rules, dst))


class TestApplyUpdate:
    def test_add_to_empty(self):
        t = apply_update(RuleTable(), [UplinkRule(1, 100, P1)])
        assert t.version == 1
        assert classify_uplink(t, 100, None, None) == P1

    def test_remove_only_match(self):
        t = apply_update(RuleTable(), [UplinkRule(1, 100, P1)])
        t = apply_update(t, remove=[1])
        assert t.version == 2
        with pytest.raises(NoMatch):
            classify_uplink(t, 100, None, None)

    def test_unknown_rule_id(self):
        with pytest.raises(UnknownRuleId):
            apply_update(RuleTable(), remove=[5])

    def test_duplicate_rule_id(self):
        t = apply_update(RuleTable(), [UplinkRule(1, 100, P1)])
        with pytest.raises(DuplicateRuleId):
            apply_update(t, [UplinkRule(1, 200, P2)])

    def test_shape_violation(self):
        with pytest.raises(ShapeViolation):
            apply_update(RuleTable(), [DownlinkRule(1, IPv6Network("::/0"), SegmentList([GNB]))])
        t = RuleTable(gtp6e_locators=(GTP6E,))
        with pytest.raises(ShapeViolation):
            apply_update(t, [DownlinkRule(1, IPv6Network("::/0"), SegmentList([IPv6Address("2001:db8::1"), GNB]))])
        assert apply_update(t, [down(1, "::/0")]).version == 1

    def test_failed_update_leaves_table_untouched(self):
        t = apply_update(RuleTable(), [UplinkRule(1, 100, P1)])
        with pytest.raises(RuleError):
            apply_update(t, [UplinkRule(2, 200, P2)], remove=[99])
        assert t.version == 1 and set(t.uplink) == {1}

    def test_original_snapshot_is_immutable(self):
        t0 = RuleTable()
        t1 = apply_update(t0, [UplinkRule(1, 100, P1)])
        assert len(t0) == 0 and len(t1) == 1


class TestRuleStore:
    def test_stale_commit_rejected(self):
        store = RuleStore()
        a = store.prepare([UplinkRule(1, 1, P1)])
        b = store.prepare([UplinkRule(2, 2, P2)])
        store.commit(a)
        with pytest.raises(RuleError):
            store.commit(b)

    def test_version_determines_result_under_concurrent_updates(self):
        # Each version v holds exactly rules teid=0..v-1, all mapping to path v.
        # A reader that sees version v must see exactly that set.
        store = RuleStore()
        expected = {0: frozenset()}
        stop = threading.Event()
        errors = []

        def path_for(v):
            return SegmentList([IPv6Address(v + 1)])

        def writer():
            for v in range(1, 200):
                old = store.snapshot()
                adds = [UplinkRule(1000 * v + t, t, path_for(v)) for t in range(v)]
                store.update(adds, remove=list(old.uplink))
                expected[v] = frozenset(range(v))
            stop.set()

        def reader():
            while not stop.is_set():
                snap = store.snapshot()
                teids = {r.teid for r in snap.uplink.values()}
                paths = {r.action for r in snap.uplink.values()}
                if teids != set(range(snap.version)) or (snap.version and paths != {path_for(snap.version)}):
                    errors.append(snap.version)

        readers = [threading.Thread(target=reader) for _ in range(4)]
        for r in readers:
            r.start()
        writer()
        for r in readers:
            r.join()
        assert not errors

    def test_exhaustive_interleaving_small(self):
        # The writer does prepare then commit; a reader looking up both
        # teids at any point sees the old pair or the new pair, never a mix.
        old_rules = [UplinkRule(1, 1, P1), UplinkRule(2, 2, P1)]
        new_rules = [UplinkRule(3, 1, P2), UplinkRule(4, 2, P2)]
        for reader_at in range(3):
            store = RuleStore()
            store.update(old_rules)
            snap_at = {}
            prepared = None
            for step in range(3):
                if step == reader_at:
                    snap_at[step] = store.snapshot()
                if step == 0:
                    prepared = store.prepare(new_rules, [1, 2])
                elif step == 1:
                    store.commit(prepared)
            snap = snap_at[reader_at]
            got = {snap.classify_uplink(1, None, None), snap.classify_uplink(2, None, None)}
            assert got == ({P1} if snap.version == 1 else {P2})
