# -*- coding: utf-8 -*-

"""
archgraph.py -- compiles a block plus macro parameters into a layer graph
with per-node shapes, parameter counts and multiply-accumulate counts

network = stem (3x3 conv, BN, ReLU)
          -> stages of n blocks, first block of stages 2.. is a reduction block
          -> global average pool -> dense -> softmax
block   = entry 1x1 conv to C/4 (stride 2 when reducing)
          -> B branches -> combine -> exit 1x1 conv to C
          -> residual add with the block input (1x1 stride-2 conv when reducing)
every convolution is followed by batch norm then ReLU
shapes are (height, width, channels) without the batch dimension,
the head (pool, dense, softmax) has shape (units,)
"""

import unittest
from dataclasses import dataclass, replace

import blockspace
from blockspace import BlockConfig, format_config, parse_config
from nas_common import NasParseException, NasRunException, text_hash

CONV_KINDS = ("stem_conv", "conv2d")

GRAPH_FORMAT_VERSION = 1


class ArchGraphError(NasParseException):
    pass


class ShapeMismatchError(NasRunException):
    pass


@dataclass(frozen=True)
class MacroConfig:
    stages: int = 3
    repeats: int = 3
    initial_filters: int = 112
    input_shape: tuple = (32, 32, 3)
    num_classes: int = 10

    # append a ReLU after each residual add (ResNet style)
    post_add_relu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.stages < 1:
            raise ArchGraphError("stages must be >= 1, got %d" % self.stages)
        if self.repeats < 1:
            raise ArchGraphError("repeats per stage must be >= 1, got %d" % self.repeats)
        if self.initial_filters < 1 or self.initial_filters % 4 != 0:
            raise ArchGraphError(
                "initial filters must be a positive multiple of 4, got %d" % self.initial_filters
            )
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchGraphError("input shape must be (height, width, channels), got %s" % (self.input_shape,))
        if self.num_classes < 2:
            raise ArchGraphError("need at least 2 classes, got %d" % self.num_classes)
        need = 2 ** (self.stages - 1)
        h, w, _ = self.input_shape
        if h < need or w < need:
            raise ArchGraphError(
                "input %dx%d exhausted by %d reductions, need at least %dx%d"
                % (h, w, self.stages - 1, need, need)
            )

    # channel count of stage s, stages numbered from 1

    def stage_channels(self, s):
        return self.initial_filters * 2 ** (s - 1)

    def to_dict(self):
        return {
            "stages": self.stages,
            "repeats": self.repeats,
            "initial-filters": self.initial_filters,
            "input-shape": list(self.input_shape),
            "classes": self.num_classes,
            "post-add-relu": self.post_add_relu,
        }

    @staticmethod
    def from_dict(d):
        dflt = MacroConfig()
        return MacroConfig(
            stages=int(d.get("stages", dflt.stages)),
            repeats=int(d.get("repeats", dflt.repeats)),
            initial_filters=int(d.get("initial-filters", dflt.initial_filters)),
            input_shape=tuple(d.get("input-shape", dflt.input_shape)),
            num_classes=int(d.get("classes", dflt.num_classes)),
            post_add_relu=bool(d.get("post-add-relu", dflt.post_add_relu)),
        )


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    name: str
    inputs: tuple = ()
    kh: int = 0
    kw: int = 0
    stride: int = 1
    channels: int = 0  # output channels (conv, dense) or normalized channels (BN)
    combiner: str = ""

    def attr_text(self):
        if self.kind in CONV_KINDS:
            return "k=%dx%d s=%d out=%d same" % (self.kh, self.kw, self.stride, self.channels)
        if self.kind == "depthwise_conv":
            return "k=%dx%d s=%d same" % (self.kh, self.kw, self.stride)
        if self.kind == "batch_norm":
            return "c=%d" % self.channels
        if self.kind == "combine":
            return self.combiner
        if self.kind == "dense":
            return "out=%d" % self.channels
        return "-"


@dataclass(frozen=True)
class ArchGraph:
    nodes: tuple
    input_shape: tuple
    num_classes: int
    block: str = ""
    shapes: tuple = None
    param_count: int = 0
    mac_count: int = 0

    @property
    def output_id(self):
        return self.nodes[-1].id

    # the dense node feeding the softmax, training works on its logits

    @property
    def logits_id(self):
        return self.nodes[self.output_id].inputs[0]

    def in_shape(self, node):
        return self.shapes[node.inputs[0]]


class GraphBuilder:
    def __init__(self):
        self.nodes = []

    def add(self, kind, name, inputs=(), **attrs):
        node = LayerNode(id=len(self.nodes), kind=kind, name=name, inputs=tuple(inputs), **attrs)
        self.nodes.append(node)
        return node.id

    def conv_bn_relu(self, name, x, kh, kw, stride, cout, kind="conv2d"):
        c = self.add(kind, name, (x,), kh=kh, kw=kw, stride=stride, channels=cout)
        b = self.add("batch_norm", name + ".bn", (c,), channels=cout)
        return self.add("relu", name + ".relu", (b,))

    def depthwise_bn_relu(self, name, x, k, channels):
        c = self.add("depthwise_conv", name, (x,), kh=k, kw=k, stride=1)
        b = self.add("batch_norm", name + ".bn", (c,), channels=channels)
        return self.add("relu", name + ".relu", (b,))


def add_branch(g, name, x, op, width):
    k = op.kernel
    if op.kind == "conv":
        return g.conv_bn_relu(name + ".conv", x, k, k, 1, width)
    if op.kind == "rc_conv":
        # k x 1 then 1 x k, intermediate width = output width
        y = g.conv_bn_relu(name + ".col", x, k, 1, 1, width)
        return g.conv_bn_relu(name + ".row", y, 1, k, 1, width)
    # sp_conv: depthwise (multiplier 1) then pointwise
    y = g.depthwise_bn_relu(name + ".dw", x, k, width)
    return g.conv_bn_relu(name + ".pw", y, 1, 1, 1, width)


def add_block(g, name, x, block, channels, reduction, post_add_relu=False):
    width = channels // 4
    stride = 2 if reduction else 1
    e = g.conv_bn_relu(name + ".entry", x, 1, 1, stride, width)
    outs = [add_branch(g, "%s.br%d" % (name, i), e, op, width) for i, op in enumerate(block.branches)]
    comb = g.add("combine", name + ".combine", outs, combiner=block.combiner)
    out = g.conv_bn_relu(name + ".exit", comb, 1, 1, 1, channels)
    if reduction:
        shortcut = g.conv_bn_relu(name + ".shortcut", x, 1, 1, 2, channels)
    else:
        shortcut = x
    r = g.add("residual_add", name + ".add", (shortcut, out))
    if post_add_relu:
        r = g.add("relu", name + ".add.relu", (r,))
    return r


def build_architecture(block, macro):
    if not isinstance(block, BlockConfig):
        raise ArchGraphError("block must be a BlockConfig, got %s" % type(block).__name__)
    g = GraphBuilder()
    x = g.add("input", "input")
    x = g.conv_bn_relu("stem", x, 3, 3, 1, macro.initial_filters, kind="stem_conv")
    for s in range(1, macro.stages + 1):
        channels = macro.stage_channels(s)
        for r in range(macro.repeats):
            reduction = s > 1 and r == 0
            x = add_block(g, "s%d.b%d" % (s, r), x, block, channels, reduction, macro.post_add_relu)
    x = g.add("global_avg_pool", "head.pool", (x,))
    x = g.add("dense", "head.dense", (x,), channels=macro.num_classes)
    g.add("softmax", "head.softmax", (x,))
    graph = ArchGraph(
        nodes=tuple(g.nodes),
        input_shape=macro.input_shape,
        num_classes=macro.num_classes,
        block=format_config(block),
    )
    graph = replace(graph, shapes=tuple(infer_shapes(graph)))
    return replace(graph, param_count=count_params(graph), mac_count=count_macs(graph))


def ceil_div(a, b):
    return -(-a // b)


def shape_text(shape):
    return "x".join(str(d) for d in shape)


def infer_shapes(graph):
    shapes = []
    for node in graph.nodes:
        for i in node.inputs:
            if i >= node.id:
                raise ShapeMismatchError(
                    "node %d (%s) reads node %d which does not precede it" % (node.id, node.name, i)
                )
        ins = [shapes[i] for i in node.inputs]
        k = node.kind
        if k == "input":
            shapes.append(tuple(graph.input_shape))
        elif k in CONV_KINDS or k == "depthwise_conv":
            h, w, c = ins[0]
            cout = node.channels if k in CONV_KINDS else c
            shapes.append((ceil_div(h, node.stride), ceil_div(w, node.stride), cout))
        elif k == "batch_norm":
            if ins[0][-1] != node.channels:
                raise ShapeMismatchError(
                    "node %d (%s) normalizes %d channels but input has shape %s"
                    % (node.id, node.name, node.channels, shape_text(ins[0]))
                )
            shapes.append(ins[0])
        elif k == "relu":
            shapes.append(ins[0])
        elif k == "combine":
            shapes.append(combine_shape(graph, node, ins))
        elif k == "residual_add":
            a, b = node.inputs
            if shapes[a] != shapes[b]:
                raise ShapeMismatchError(
                    "residual add %d (%s): node %d (%s) has shape %s but node %d (%s) has shape %s"
                    % (
                        node.id, node.name,
                        a, graph.nodes[a].name, shape_text(shapes[a]),
                        b, graph.nodes[b].name, shape_text(shapes[b]),
                    )
                )
            shapes.append(shapes[a])
        elif k == "global_avg_pool":
            shapes.append((ins[0][-1],))
        elif k == "dense":
            shapes.append((node.channels,))
        elif k == "softmax":
            shapes.append(ins[0])
        else:
            raise ShapeMismatchError("node %d has unknown kind %s" % (node.id, k))
    return shapes


def combine_shape(graph, node, ins):
    first = node.inputs[0]
    for i, shp in zip(node.inputs, ins):
        if node.combiner == "concat":
            same = shp[:2] == ins[0][:2]
        else:
            same = shp == ins[0]
        if not same:
            raise ShapeMismatchError(
                "combine %d (%s, %s): node %d (%s) has shape %s but node %d (%s) has shape %s"
                % (
                    node.id, node.name, node.combiner,
                    first, graph.nodes[first].name, shape_text(ins[0]),
                    i, graph.nodes[i].name, shape_text(shp),
                )
            )
    if node.combiner == "concat":
        return ins[0][:2] + (sum(s[2] for s in ins),)
    return ins[0]


# convolutions carry no bias (batch norm follows), dense keeps one


def node_param_count(node, in_shape):
    if node.kind in CONV_KINDS:
        return node.kh * node.kw * in_shape[-1] * node.channels
    if node.kind == "depthwise_conv":
        return node.kh * node.kw * in_shape[-1]
    if node.kind == "batch_norm":
        return 2 * node.channels
    if node.kind == "dense":
        return in_shape[-1] * node.channels + node.channels
    return 0


def node_mac_count(node, in_shape, out_shape):
    if node.kind in CONV_KINDS or node.kind == "depthwise_conv":
        return node_param_count(node, in_shape) * out_shape[0] * out_shape[1]
    if node.kind == "dense":
        return in_shape[-1] * node.channels
    return 0


def count_params(graph):
    return sum(
        node_param_count(n, graph.in_shape(n)) for n in graph.nodes if n.inputs
    )


def count_macs(graph):
    return sum(
        node_mac_count(n, graph.in_shape(n), graph.shapes[n.id]) for n in graph.nodes if n.inputs
    )


def emit_graph_description(graph):
    lines = [
        "# blocksearch graph v%d" % GRAPH_FORMAT_VERSION,
        "block: %s" % graph.block,
        "input: %s  classes: %d" % (shape_text(graph.input_shape), graph.num_classes),
        "%5s  %-16s %-24s %-10s %-24s %-12s %10s %12s"
        % ("id", "kind", "name", "inputs", "attributes", "shape", "params", "macs"),
    ]
    for n in graph.nodes:
        if n.inputs:
            params = node_param_count(n, graph.in_shape(n))
            macs = node_mac_count(n, graph.in_shape(n), graph.shapes[n.id])
        else:
            params = macs = 0
        lines.append(
            "%5d  %-16s %-24s %-10s %-24s %-12s %10d %12d"
            % (
                n.id,
                n.kind,
                n.name,
                ",".join(str(i) for i in n.inputs) or "-",
                n.attr_text(),
                shape_text(graph.shapes[n.id]),
                params,
                macs,
            )
        )
    lines.append("nodes: %d" % len(graph.nodes))
    lines.append("total params: %d" % graph.param_count)
    lines.append("total macs: %d" % graph.mac_count)
    return "\n".join(lines) + "\n"


def description_hash(graph):
    return text_hash(emit_graph_description(graph))


# node count walking the construction rules, independent of the builder


def expected_node_count(block, macro):
    per_op = {"conv": 3, "rc_conv": 6, "sp_conv": 6}
    branch_nodes = sum(per_op[op.kind] for op in block.branches)
    block_nodes = 3 + branch_nodes + 1 + 3 + 1 + (1 if macro.post_add_relu else 0)
    total = 1 + 3 + 3
    total += macro.stages * macro.repeats * block_nodes
    total += 3 * (macro.stages - 1)  # shortcut conv, BN, ReLU per reduction
    return total


class TestArchGraph(unittest.TestCase):
    def setUp(self):
        self.cifar10 = parse_config(blockspace.WINNING_BLOCKS["cifar10"])
        self.svhn = parse_config(blockspace.WINNING_BLOCKS["svhn"])
        self.macro64 = MacroConfig(stages=3, repeats=3, initial_filters=64)

    def find(self, graph, name):
        for n in graph.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def test_winning_cifar10_block_builds(self):
        g = build_architecture(self.cifar10, self.macro64)
        softmax = [n for n in g.nodes if n.kind == "softmax"]
        self.assertEqual(len(softmax), 1)
        self.assertEqual(g.shapes[softmax[0].id], (10,))
        for n in g.nodes:
            if n.kind == "residual_add":
                self.assertEqual(g.shapes[n.inputs[0]], g.shapes[n.inputs[1]])

    def test_non_reduction_blocks_preserve_shape(self):
        g = build_architecture(self.cifar10, self.macro64)
        for s in range(1, 4):
            for r in range(3):
                if s > 1 and r == 0:
                    continue
                add = self.find(g, "s%d.b%d.add" % (s, r))
                entry = self.find(g, "s%d.b%d.entry" % (s, r))
                self.assertEqual(g.shapes[add.id], g.shapes[entry.inputs[0]])

    def test_reduction_block(self):
        macro = MacroConfig(stages=2, repeats=1, initial_filters=64, input_shape=(32, 32, 3))
        g = build_architecture(self.cifar10, macro)
        before = self.find(g, "s1.b0.add")
        after = self.find(g, "s2.b0.add")
        self.assertEqual(g.shapes[before.id], (32, 32, 64))
        self.assertEqual(g.shapes[after.id], (16, 16, 128))

    def test_stage_transitions_halve_and_double(self):
        g = build_architecture(self.svhn, MacroConfig(stages=3, repeats=2, initial_filters=16, input_shape=(15, 15, 3)))
        s1 = g.shapes[self.find(g, "s1.b1.add").id]
        s2 = g.shapes[self.find(g, "s2.b1.add").id]
        s3 = g.shapes[self.find(g, "s3.b1.add").id]
        self.assertEqual(s1, (15, 15, 16))
        self.assertEqual(s2, (8, 8, 32))  # ceiling division
        self.assertEqual(s3, (4, 4, 64))

    def test_stem_and_bottleneck_widths(self):
        g = build_architecture(self.svhn, MacroConfig(stages=1, repeats=1, initial_filters=16))
        self.assertEqual(g.shapes[self.find(g, "stem.relu").id], (32, 32, 16))
        g = build_architecture(self.svhn, MacroConfig(stages=1, repeats=1, initial_filters=64))
        self.assertEqual(g.shapes[self.find(g, "s1.b0.entry.relu").id][-1], 16)
        self.assertEqual(g.shapes[self.find(g, "s1.b0.combine").id], (32, 32, 64))

    def test_add_combine_keeps_branch_width(self):
        g = build_architecture(self.cifar10, MacroConfig(stages=1, repeats=1, initial_filters=64))
        self.assertEqual(g.shapes[self.find(g, "s1.b0.combine").id], (32, 32, 16))

    def test_unit_param_formulas(self):
        shp = (8, 8, 16)
        conv = LayerNode(1, "conv2d", "c", (0,), kh=3, kw=3, channels=16)
        self.assertEqual(node_param_count(conv, shp), 2304)
        col = LayerNode(1, "conv2d", "col", (0,), kh=3, kw=1, channels=16)
        row = LayerNode(2, "conv2d", "row", (1,), kh=1, kw=3, channels=16)
        self.assertEqual(node_param_count(col, shp) + node_param_count(row, shp), 1536)
        dw = LayerNode(1, "depthwise_conv", "dw", (0,), kh=3, kw=3)
        pw = LayerNode(2, "conv2d", "pw", (1,), kh=1, kw=1, channels=16)
        self.assertEqual(node_param_count(dw, shp) + node_param_count(pw, shp), 400)
        bn = LayerNode(1, "batch_norm", "bn", (0,), channels=16)
        self.assertEqual(node_param_count(bn, shp), 32)
        dense = LayerNode(1, "dense", "d", (0,), channels=10)
        self.assertEqual(node_param_count(dense, (64,)), 650)

    def test_unit_mac_formulas(self):
        conv = LayerNode(1, "conv2d", "c", (0,), kh=3, kw=3, channels=16)
        self.assertEqual(node_mac_count(conv, (32, 32, 16), (32, 32, 16)), 2359296)
        pw = LayerNode(1, "conv2d", "c", (0,), kh=1, kw=1, channels=16)
        self.assertEqual(node_mac_count(pw, (32, 32, 64), (32, 32, 16)), 1048576)
        gap = LayerNode(1, "global_avg_pool", "p", (0,))
        self.assertEqual(node_mac_count(gap, (8, 8, 64), (64,)), 0)

    def test_description_deterministic_and_totals(self):
        g = build_architecture(self.cifar10, self.macro64)
        text = emit_graph_description(g)
        self.assertEqual(text, emit_graph_description(build_architecture(self.cifar10, self.macro64)))
        self.assertIn("total params: %d\n" % count_params(g), text)
        self.assertIn("total macs: %d\n" % count_macs(g), text)

    def test_node_count_oracle(self):
        for blk in blockspace.sample_blocks(blockspace.SearchSpace(), 5, 20):
            for relu in (False, True):
                macro = MacroConfig(stages=3, repeats=3, initial_filters=8, post_add_relu=relu)
                g = build_architecture(blk, macro)
                self.assertEqual(len(g.nodes), expected_node_count(blk, macro))

    def test_description_injective(self):
        macro = MacroConfig(stages=2, repeats=1, initial_filters=8, input_shape=(8, 8, 3))
        seen = {}
        for blk in blockspace.sample_blocks(blockspace.SearchSpace(), 17, 60):
            text = emit_graph_description(build_architecture(blk, macro))
            key = format_config(blk)
            if text in seen:
                self.assertEqual(seen[text], key)
            seen[text] = key

    def test_calibrated_default_near_reported_size(self):
        g = build_architecture(self.cifar10, MacroConfig())
        self.assertGreater(g.param_count, 0.7 * 2.1e6)
        self.assertLess(g.param_count, 1.3 * 2.1e6)

    def test_macro_invariants(self):
        with self.assertRaises(ArchGraphError):
            MacroConfig(initial_filters=30)
        with self.assertRaises(ArchGraphError):
            MacroConfig(stages=4, input_shape=(4, 4, 3))
        with self.assertRaises(ArchGraphError):
            MacroConfig(num_classes=1)

    def test_residual_mismatch_names_nodes(self):
        nodes = (
            LayerNode(0, "input", "input"),
            LayerNode(1, "conv2d", "a", (0,), kh=1, kw=1, channels=8),
            LayerNode(2, "conv2d", "b", (0,), kh=1, kw=1, channels=4),
            LayerNode(3, "residual_add", "add", (1, 2)),
        )
        g = ArchGraph(nodes=nodes, input_shape=(4, 4, 3), num_classes=2)
        with self.assertRaises(ShapeMismatchError) as ctx:
            infer_shapes(g)
        msg = str(ctx.exception)
        self.assertIn("4x4x8", msg)
        self.assertIn("4x4x4", msg)

    def test_add_combine_mismatch(self):
        nodes = (
            LayerNode(0, "input", "input"),
            LayerNode(1, "conv2d", "a", (0,), kh=1, kw=1, channels=8),
            LayerNode(2, "conv2d", "b", (0,), kh=1, kw=1, stride=2, channels=8),
            LayerNode(3, "combine", "cat", (1, 2), combiner="add_det"),
        )
        g = ArchGraph(nodes=nodes, input_shape=(4, 4, 3), num_classes=2)
        with self.assertRaises(ShapeMismatchError):
            infer_shapes(g)


if __name__ == "__main__":
    unittest.main()
