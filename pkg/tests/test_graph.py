import numpy as np
import pytest

from convshrink import (
    Add,
    BatchNorm2d,
    Conv2d,
    CycleError,
    Graph,
    IndexAdd,
    IndexMap,
    InputOp,
    Node,
    OutputOp,
    ReLU,
    Upsample,
    channel_counts,
    conv_pad_amounts,
    count_macs,
    count_params,
    identity_index_map,
    spatial_shapes,
    topo_order,
    validate_graph,
)
from fixtures import chain_graph, rb1_graph, seeded_conv


def _rules(graph):
    return {v.rule for v in validate_graph(graph)}


def _conv(f_out, f_in, k=3, stride=1, padding="same", bias=True, seed=0):
    return seeded_conv(np.random.default_rng(seed), f_out, f_in, k=k,
                       stride=stride, padding=padding, bias=bias)


def _bn(ch, seed=0):
    rng = np.random.default_rng(seed)
    return BatchNorm2d(
        gamma=rng.standard_normal(ch).astype(np.float32),
        beta=rng.standard_normal(ch).astype(np.float32),
        running_mean=rng.standard_normal(ch).astype(np.float32),
        running_var=rng.uniform(0.5, 1.5, ch).astype(np.float32),
    )


class TestTopoOrder:
    def test_declaration_order_is_kept_for_independent_nodes(self):
        g = rb1_graph()
        order = topo_order(g)
        assert order == [n.id for n in g.nodes]

    def test_cycle_raises(self):
        nodes = (
            Node("in", InputOp()),
            Node("a", Add(), ("in", "b")),
            Node("b", ReLU(), ("a",)),
            Node("out", OutputOp(), ("b",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        with pytest.raises(CycleError):
            topo_order(g)


class TestValidate:
    def test_clean_graph_has_no_violations(self):
        assert validate_graph(rb1_graph()) == []
        assert validate_graph(chain_graph()) == []

    def test_duplicate_id(self):
        nodes = (
            Node("in", InputOp()),
            Node("x", _conv(2, 1), ("in",)),
            Node("x", ReLU(), ("x",)),
            Node("out", OutputOp(), ("x",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "duplicate-id" in _rules(g)

    def test_unknown_input(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1), ("ghost",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "unknown-input" in _rules(g)

    def test_forward_reference_is_an_order_violation(self):
        nodes = (
            Node("in", InputOp()),
            Node("r", ReLU(), ("c",)),
            Node("c", _conv(2, 1), ("in",)),
            Node("out", OutputOp(), ("r",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "order" in _rules(g)

    def test_arity(self):
        nodes = (
            Node("in", InputOp()),
            Node("a", Add(), ("in",)),
            Node("out", OutputOp(), ("a",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "arity" in _rules(g)

    def test_conv_weight_shape_mismatch(self):
        op = _conv(2, 1)
        bad = Conv2d(2, 1, (3, 3), 1, "same",
                     np.zeros((2, 2, 3, 3), dtype=np.float32), None)
        nodes = (
            Node("in", InputOp()),
            Node("c", bad, ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "conv-shape" in _rules(g)
        assert op.weights.shape == (2, 1, 3, 3)

    def test_channel_mismatch(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 3), ("in",)),  # graph input has 1 channel
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "channel-mismatch" in _rules(g)

    def test_add_width_mismatch(self):
        nodes = (
            Node("in", InputOp()),
            Node("c2", _conv(2, 1), ("in",)),
            Node("c3", _conv(3, 1), ("in",)),
            Node("a", Add(), ("c2", "c3")),
            Node("out", OutputOp(), ("a",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "channel-mismatch" in _rules(g)

    def test_bn_width_disagrees_with_producer(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1), ("in",)),
            Node("b", _bn(3), ("c",)),
            Node("out", OutputOp(), ("b",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "channel-mismatch" in _rules(g)

    def test_bn_internally_inconsistent_arrays(self):
        ok = _bn(2)
        bad = BatchNorm2d(gamma=ok.gamma, beta=ok.beta[:1],
                          running_mean=ok.running_mean,
                          running_var=ok.running_var)
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1), ("in",)),
            Node("b", bad, ("c",)),
            Node("out", OutputOp(), ("b",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "bn-shape" in _rules(g)

    def test_nonfinite_weights_flagged(self):
        op = _conv(2, 1)
        w = op.weights.copy()
        w[0, 0, 0, 0] = np.nan
        bad = Conv2d(2, 1, (3, 3), 1, "same", w, None)
        nodes = (
            Node("in", InputOp()),
            Node("c", bad, ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "nonfinite-param" in _rules(g)

    def test_unreachable_node(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1), ("in",)),
            Node("island", ReLU(), ("island2",)),
            Node("island2", ReLU(), ("island",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        rules = _rules(g)
        assert rules & {"unreachable", "order", "cycle"}

    def test_output_must_reference_declared_node(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("nope",))
        assert "output-ref" in _rules(g)

    def test_upsample_factor(self):
        nodes = (
            Node("in", InputOp()),
            Node("u", Upsample(factor=0), ("in",)),
            Node("out", OutputOp(), ("u",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "upsample-factor" in _rules(g)

    def test_index_map_zero_zero_row_rejected(self):
        m = IndexMap(i_a=(1, 0), i_b=(0, 0), n_a=1, n_b=1)
        nodes = (
            Node("in", InputOp()),
            Node("a", _conv(1, 1), ("in",)),
            Node("b", _conv(1, 1), ("in",)),
            Node("ia", IndexAdd(m), ("a", "b")),
            Node("out", OutputOp(), ("ia",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "index-map" in _rules(g)

    def test_index_map_out_of_order_sources_rejected_at_graph_level(self):
        # the operator itself accepts unordered maps; graphs do not
        m = IndexMap(i_a=(2, 1), i_b=(0, 0), n_a=2, n_b=1)
        assert m.check() == []
        assert not m.sources_increasing()
        nodes = (
            Node("in", InputOp()),
            Node("a", _conv(2, 1), ("in",)),
            Node("b", _conv(1, 1), ("in",)),
            Node("ia", IndexAdd(m), ("a", "b")),
            Node("out", OutputOp(), ("ia",)),
        )
        g = Graph(input_shape=(1, 4, 4), nodes=nodes, output_ids=("out",))
        assert "index-map" in _rules(g)


class TestIndexMap:
    def test_identity_map(self):
        m = identity_index_map(3)
        assert m.i_a == (1, 2, 3)
        assert m.i_b == (1, 2, 3)
        assert m.n_a == m.n_b == m.n_c == 3
        assert m.is_identity()

    def test_non_identity(self):
        m = IndexMap(i_a=(1, 0, 2), i_b=(1, 2, 0), n_a=2, n_b=2)
        assert not m.is_identity()
        assert m.n_c == 3
        assert m.check() == []
        assert m.sources_increasing()

    def test_width_overflow_detected(self):
        m = IndexMap(i_a=(3,), i_b=(0,), n_a=2, n_b=0)
        assert m.check()


class TestShapes:
    def test_same_padding_preserves_spatial(self):
        hw = spatial_shapes(chain_graph())
        assert hw["convA"] == (8, 8)
        assert hw["convB"] == (8, 8)

    def test_valid_padding_shrinks(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1, k=3, padding="valid"), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 5, 5), nodes=nodes, output_ids=("out",))
        assert spatial_shapes(g)["c"] == (3, 3)

    def test_strided_same_padding_rounds_up(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(2, 1, k=3, stride=2), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(1, 7, 7), nodes=nodes, output_ids=("out",))
        assert spatial_shapes(g)["c"] == (4, 4)

    def test_pad_amounts_put_extra_pixel_at_bottom_right(self):
        op = _conv(2, 1, k=3, stride=2)
        assert conv_pad_amounts((8, 8), op) == (0, 1, 0, 1)
        op1 = _conv(2, 1, k=3, stride=1)
        assert conv_pad_amounts((8, 8), op1) == (1, 1, 1, 1)

    def test_channel_counts(self):
        counts = channel_counts(rb1_graph())
        assert counts["in"] == 2
        assert counts["conv1"] == counts["add"] == 3
        assert counts["conv4"] == counts["out"] == 2


class TestCounting:
    def test_param_count_conv_with_bias(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(4, 3), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(3, 8, 8), nodes=nodes, output_ids=("out",))
        assert count_params(g) == 112

    def test_param_count_no_bias(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(4, 3, bias=False), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(3, 8, 8), nodes=nodes, output_ids=("out",))
        assert count_params(g) == 108

    def test_param_count_with_batchnorm(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(4, 3), ("in",)),
            Node("b", _bn(4), ("c",)),
            Node("out", OutputOp(), ("b",)),
        )
        g = Graph(input_shape=(3, 8, 8), nodes=nodes, output_ids=("out",))
        assert count_params(g) == 128

    def test_mac_count_stride_one(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(4, 3), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(3, 8, 8), nodes=nodes, output_ids=("out",))
        assert count_macs(g) == 6912

    def test_mac_count_stride_two(self):
        nodes = (
            Node("in", InputOp()),
            Node("c", _conv(4, 3, stride=2), ("in",)),
            Node("out", OutputOp(), ("c",)),
        )
        g = Graph(input_shape=(3, 8, 8), nodes=nodes, output_ids=("out",))
        assert count_macs(g) == 1728

    def test_mac_count_chained(self):
        assert count_macs(chain_graph()) == 16128

    def test_corpus_graphs_all_validate(self):
        import graphgen
        for e in graphgen.corpus(25):
            assert validate_graph(e.graph) == []
