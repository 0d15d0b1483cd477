"""Pipeline checks against the single-directory overlay."""

import pytest

from dpsim.engine import MessageKind, NetworkModel
from dpsim.errors import InvalidParams, OriginDown, UnknownNode, UnsupportedOperation
from dpsim.protocols import ProtocolSpec, make_overlay


def build_dummy(n, key_bits=16):
    ov = make_overlay(ProtocolSpec("dummy", key_bits=key_bits),
                      model=NetworkModel())
    ov.build(n, ids=range(n))
    return ov


def test_first_join_is_free():
    ov = make_overlay(ProtocolSpec("dummy"))
    report = ov.join(0)
    assert report.hops == 0
    assert ov.bootstrap_id == 0


def test_every_later_join_costs_one_hop():
    ov = build_dummy(10)
    assert ov.metrics.summary("join_hops").count == 9
    assert ov.metrics.summary("join_hops").max == 1
    assert ov.metrics.summary("join_hops").min == 1
    assert ov.engine.log.count(MessageKind.JOIN_RESP) == 9


def test_all_lookups_cost_one_hop():
    ov = build_dummy(100)
    for origin in (0, 1, 57, 99):
        res = ov.lookup(origin, 123)
        assert res.hops == 1
        assert res.owner == 0
        assert len(res.path) == res.hops + 1
        assert not res.failed
    assert ov.metrics.summary("lookup_hops").mean == 1.0


def test_read_your_write():
    ov = build_dummy(5)
    ov.insert(3, 42, "payload")
    res = ov.lookup(1, 42)
    assert res.found and res.value == "payload"
    dr = ov.delete(2, 42)
    assert dr.found and dr.hops == 1
    assert not ov.lookup(4, 42).found
    assert not ov.delete(4, 42).found


def test_metric_pipeline_records_each_op_kind():
    ov = build_dummy(4)
    ov.insert(1, 7, "x")
    ov.lookup(2, 7)
    ov.delete(3, 7)
    for name in ("join_hops", "lookup_hops", "insert_hops", "delete_hops"):
        assert ov.metrics.summary(name).count > 0
        assert ov.metrics.summary(name).mean == 1.0


def test_origin_checks():
    ov = build_dummy(3)
    with pytest.raises(UnknownNode):
        ov.lookup(77, 1)
    ov.depart_sync(2)
    with pytest.raises(OriginDown):
        ov.lookup(2, 1)


def test_key_domain_checked():
    ov = build_dummy(3, key_bits=8)
    with pytest.raises(InvalidParams):
        ov.lookup(0, 256)
    with pytest.raises(InvalidParams):
        ov.insert(0, -1, "x")


def test_range_query_unsupported():
    ov = build_dummy(3)
    with pytest.raises(UnsupportedOperation):
        ov.range_query(0, 1, 5)


def test_departure_prunes_directory():
    ov = build_dummy(6)
    report = ov.depart_sync(4)
    assert report == 0
    assert 4 not in ov.contacts(0)
    assert ov.engine.log.count(MessageKind.REPLACEMENT_RESP) == 0


def test_reserved_plugin_names_rejected():
    with pytest.raises(UnsupportedOperation):
        make_overlay(ProtocolSpec("art"))
    with pytest.raises(InvalidParams):
        ProtocolSpec("kademlia").validate()


def test_routing_tables_form_a_star():
    ov = build_dummy(5)
    assert len(ov.routing_table(3)) == 1
    assert len(ov.routing_table(0)) == 4
    with pytest.raises(UnknownNode):
        ov.routing_table(99)
