import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flow
from immunids.barrier import BarrierRuleSet, check, merge_rules
from immunids.errors import ParseError, ValidationError


def rules_of(*items, origin="external_feed"):
    rs = BarrierRuleSet()
    for kind, value in items:
        rs.add(kind, value, origin)
    return rs


def test_irc_port_matches():
    v = check(flow(0, dport=6667), rules_of(("port", 6667)))
    assert v.matched and v.probability == 1.0 and v.matched_rule == ("port", 6667)


def test_empty_rules_never_match():
    v = check(flow(0), BarrierRuleSet())
    assert not v.matched and v.probability == 0.0 and v.matched_rule is None


def test_first_match_order():
    rs = rules_of(("ip", "10.0.0.5"))
    v = check(flow(0, src="10.0.0.5", dport=6667), rs)
    assert v.matched_rule == ("ip", "10.0.0.5")
    # every position, and the fixed order src_ip, dst_ip, src_port, dst_port
    rs = rules_of(("ip", "10.0.0.5"), ("ip", "10.0.0.6"), ("port", 1111), ("port", 2222))
    f = dict(src="10.0.0.5", dst="10.0.0.6", sport=1111, dport=2222)
    assert check(flow(0, **f), rs).matched_rule == ("ip", "10.0.0.5")
    f["src"] = "1.1.1.1"
    assert check(flow(0, **f), rs).matched_rule == ("ip", "10.0.0.6")
    f["dst"] = "1.1.1.2"
    assert check(flow(0, **f), rs).matched_rule == ("port", 1111)
    f["sport"] = 9
    assert check(flow(0, **f), rs).matched_rule == ("port", 2222)
    f["dport"] = 10
    assert not check(flow(0, **f), rs).matched


def test_add_is_idempotent_and_first_provenance_wins():
    rs = BarrierRuleSet()
    assert rs.add("port", 6667, "external_feed", 1)
    assert not rs.add("port", 6667, "sync", 2)
    assert len(rs) == 1
    assert rs.provenance[("port", 6667)].origin == "external_feed"


def test_add_ip():
    rs = BarrierRuleSet()
    rs.add("ip", "10.0.0.5")
    assert rs.malicious_ips == {"10.0.0.5"}


def test_add_port_out_of_range():
    with pytest.raises(ValidationError):
        BarrierRuleSet().add("port", 70000)
    with pytest.raises(ValidationError):
        BarrierRuleSet().add("ip", "300.0.0.1")
    with pytest.raises(ValidationError):
        BarrierRuleSet().add("port", 1, origin="rumour")


def test_merge_identity_and_union():
    x = rules_of(("port", 6667), ("ip", "1.2.3.4"))
    assert merge_rules(x, BarrierRuleSet()).value_sets() == x.value_sets()
    m = merge_rules(rules_of(("port", 6667)), rules_of(("port", 6667), ("ip", "9.9.9.9")))
    assert m.value_sets() == (frozenset({"9.9.9.9"}), frozenset({6667}))


def test_merge_local_provenance_wins():
    local = rules_of(("port", 1), origin="external_feed")
    remote = rules_of(("port", 1), ("port", 2), origin="sync")
    m = merge_rules(local, remote)
    assert m.provenance[("port", 1)].origin == "external_feed"
    assert m.provenance[("port", 2)].origin == "sync"


def test_serialization_stable_order():
    rs = BarrierRuleSet()
    for kind, value in (("port", 8080), ("ip", "10.0.0.9"), ("port", 22), ("ip", "10.0.0.10")):
        rs.add(kind, value, "external_feed", 3)
    text = rs.to_text()
    assert text.splitlines() == ["ip 10.0.0.10 external_feed 3", "ip 10.0.0.9 external_feed 3",
                                 "port 22 external_feed 3", "port 8080 external_feed 3"]
    again = BarrierRuleSet.from_text(text)
    assert again == rs
    with pytest.raises(ParseError):
        BarrierRuleSet.from_text("port\n")


ips = st.integers(0, 6).map(lambda k: f"10.0.0.{k}")
ports = st.integers(0, 8)
rule_items = st.lists(st.one_of(st.tuples(st.just("ip"), ips), st.tuples(st.just("port"), ports)), max_size=10)


@settings(max_examples=200, deadline=None)
@given(rule_items, rule_items, rule_items)
def test_property_merge_is_set_union(a, b, c):
    ra, rb, rc = rules_of(*a), rules_of(*b), rules_of(*c)
    want = set(a) | set(b)
    m = merge_rules(ra, rb)
    assert set(m.rules()) == want and len(m) == len(want)
    assert merge_rules(ra, rb).value_sets() == merge_rules(rb, ra).value_sets()
    assert (merge_rules(merge_rules(ra, rb), rc).value_sets()
            == merge_rules(ra, merge_rules(rb, rc)).value_sets())


@settings(max_examples=200, deadline=None)
@given(rule_items, ips, ips, ports, ports)
def test_property_check_is_crisp_and_pure(items, s, d, sp, dp):
    rs = rules_of(*items)
    f = flow(0, src=s, dst=d, sport=sp, dport=dp)
    v = check(f, rs)
    assert v.probability in (0.0, 1.0)
    assert v.matched == (v.probability == 1.0) == (v.matched_rule is not None)
    expect = (s in rs.malicious_ips or d in rs.malicious_ips or sp in rs.malicious_ports
              or dp in rs.malicious_ports)
    assert v.matched == expect
    assert check(f, rs) == v
