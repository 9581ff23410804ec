"""Architecture IR: validation, shapes, serialization, DOT export."""

import dataclasses

import pytest
from hypothesis import given, settings

from hwnas.arch import (
    BlockSpec,
    InvalidArchitectureError,
    LayerSpec,
    NetworkSpec,
    ParseError,
    default_layout,
    derive_shapes,
    deserialize,
    export_dot,
    functional_signature,
    ibn,
    iter_layers,
    round8,
    serialize,
    toy2_layout,
    tucker,
    validate,
)
from strategies import make_layout, nets


def replace_layer(net, bi, li, **changes):
    block = net.blocks[bi]
    layers = list(block.layers)
    layers[li] = dataclasses.replace(layers[li], **changes)
    blocks = list(net.blocks)
    blocks[bi] = dataclasses.replace(block, layers=tuple(layers))
    return dataclasses.replace(net, blocks=tuple(blocks))


@pytest.mark.parametrize(
    "value,expected",
    [(1, 8), (4, 8), (8, 8), (12, 16), (20, 24), (30, 32), (48, 48), (0.5 * 16, 8)],
)
def test_round8(value, expected):
    assert round8(value) == expected


def test_default_layout_is_valid():
    assert validate(default_layout()) == []


def test_toy2_layout_is_valid():
    assert validate(toy2_layout()) == []


def test_residual_violation_names_the_layer():
    net = make_layout(32, 16, [(16, 1, 1), (24, 1, 1)])
    bad = replace_layer(net, 1, 0, residual=True)  # 16 -> 24, can't skip
    violations = validate(bad)
    assert len(violations) == 1
    assert "block 1 layer 0" in violations[0]
    assert "residual" in violations[0]


def test_rounding_violation():
    net = make_layout(32, 16, [(16, 1, 1)])
    bad = replace_layer(net, 0, 0, c_out=20)
    assert any("c_out 20" in v and "round8" in v for v in validate(bad))


def test_even_kernel_violation():
    net = make_layout(32, 16, [(16, 1, 1)])
    bad = replace_layer(net, 0, 0, kind=ibn(4, 4))
    assert any("kernel must be odd" in v for v in validate(bad))


def test_stride_only_on_first_layer():
    net = make_layout(32, 16, [(16, 2, 1)])
    bad = replace_layer(net, 0, 1, stride=2, residual=False)
    assert any("only the first layer" in v for v in validate(bad))


def test_channel_continuity_violation():
    net = make_layout(32, 16, [(16, 1, 1), (16, 1, 1)])
    bad = replace_layer(net, 1, 0, c_in=24, residual=False)
    assert any("channel continuity" in v for v in validate(bad))


def test_default_endpoints_enforced():
    net = dataclasses.replace(default_layout(), endpoint_c4=2)
    assert any("endpoint c4 must be block 5" in v for v in validate(net))


def test_derive_shapes_two_halvings():
    net = make_layout(320, 32, [(32, 2, 2)])
    trace = derive_shapes(net)
    assert (trace.stem.height, trace.stem.width) == (160, 160)
    assert all(e.height == e.width == 80 for e in trace.layers)


def test_derive_shapes_default_c5_at_10x10():
    net = default_layout(320)
    trace = derive_shapes(net)
    assert len(trace.layers) == 17
    # blocks 6..8 sit at output stride 32
    assert all(e.height == e.width == 10 for e in trace.layers[-5:])


def test_derive_shapes_ceil_division():
    net = make_layout(321, 16, [(16, 1, 1)])
    assert derive_shapes(net).stem.height == 161


def test_derive_shapes_rejects_invalid():
    bad = replace_layer(make_layout(32, 16, [(16, 1, 1)]), 0, 0, c_out=20)
    with pytest.raises(InvalidArchitectureError) as err:
        derive_shapes(bad)
    assert err.value.violations


def test_serialize_round_trip_default():
    net = default_layout()
    assert deserialize(serialize(net)) == net


def test_serialize_round_trip_residual_off():
    # residual=False on an eligible layer is valid and must survive the trip
    net = make_layout(32, 16, [(16, 2, 1)])
    assert net.blocks[0].layers[1].residual
    off = replace_layer(net, 0, 1, residual=False)
    assert deserialize(serialize(off)) == off


def test_deserialize_missing_blocks():
    with pytest.raises(ParseError, match="missing field.*blocks"):
        deserialize('{"input_resolution": 32, "stem_channels": 16, "endpoints": {"c4": -1, "c5": -1}}')


def test_deserialize_rejects_unknown_fields():
    doc = serialize(default_layout()).replace('"input_resolution"', '"bogus": 1, "input_resolution"', 1)
    with pytest.raises(ParseError, match="unknown field"):
        deserialize(doc)


def test_deserialize_even_kernel():
    doc = serialize(make_layout(32, 16, [(16, 1, 1)])).replace('"kernel": 3', '"kernel": 4')
    with pytest.raises(InvalidArchitectureError, match="kernel must be odd"):
        deserialize(doc)


def test_deserialize_bad_json_reports_location():
    with pytest.raises(ParseError, match="line 1"):
        deserialize("{nope")


def test_deserialize_ignores_meta():
    text = serialize(toy2_layout())
    import json

    doc = json.loads(text)
    doc["_meta"] = {"tool": "test"}
    assert deserialize(json.dumps(doc)) == toy2_layout()


def test_export_dot_counts():
    net = make_layout(32, 16, [(16, 1, 1)])
    dot = export_dot(net)
    edges = [line for line in dot.splitlines() if " -> " in line]
    labels = [line for line in dot.splitlines() if "label=" in line and "node [" not in line]
    assert len(edges) == 2
    assert len(labels) == 3  # stem, one layer, head


def test_export_dot_tucker_label():
    net = make_layout(32, 16, [(16, 1, 1)])
    net = replace_layer(net, 0, 0, kind=tucker(3, 0.25, 0.75))
    assert "Tucker 3x3 0.25-0.75" in export_dot(net)


def test_export_dot_endpoint_annotation():
    # three stride-2 blocks reach output stride 16 at block 2
    net = dataclasses.replace(
        make_layout(64, 16, [(16, 1, 2), (16, 1, 2), (24, 2, 2)]), endpoint_c4=2
    )
    assert validate(net) == []
    lines = [line for line in export_dot(net).splitlines() if "C4" in line]
    assert len(lines) == 1 and "b2_l1" in lines[0]


def test_functional_signature_ignores_multiplier_bookkeeping():
    base = make_layout(32, 16, [(16, 1, 1)])
    block = base.blocks[0]
    alias = dataclasses.replace(
        base, blocks=(dataclasses.replace(block, base_channels=32, multiplier=0.5),)
    )
    assert validate(alias) == []
    assert base != alias
    assert functional_signature(base) == functional_signature(alias)


@settings(max_examples=60)
@given(nets())
def test_round_trip_property(net):
    assert deserialize(serialize(net)) == net


@settings(max_examples=60)
@given(nets())
def test_shapes_monotone_property(net):
    trace = derive_shapes(net)
    sizes = [(trace.stem.height, trace.stem.width)] + [
        (e.height, e.width) for e in trace.layers
    ]
    for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
        assert h1 <= h0 and w1 <= w0
        assert h1 >= 1 and w1 >= 1


@settings(max_examples=60)
@given(nets())
def test_valid_nets_analyze_cleanly(net):
    from hwnas.analysis import network_cost

    assert validate(net) == []
    assert len(derive_shapes(net).layers) == sum(b.num_layers for b in net.blocks)
    cost = network_cost(net)
    assert cost.total_madds == cost.stem_madds + sum(cost.per_layer_madds)
    assert cost.total_params == cost.stem_params + sum(cost.per_layer_params)
    export_dot(net)
