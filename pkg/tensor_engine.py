# -*- coding: utf-8 -*-

"""
tensor_engine.py -- parameter storage, graph execution and checkpoints

a ParamStore plus a GraphExecutor is owned by exactly one trial,
eval-mode forward passes never touch the random stream or running stats
so an executor used only for prediction may be shared
"""

import json
import os
import shutil
import tempfile
import unittest

import numpy as np

import blockspace
import tensor_ops as ops
from archgraph import (
    ArchGraph,
    LayerNode,
    MacroConfig,
    ShapeMismatchError,
    build_architecture,
    count_params,
    description_hash,
    infer_shapes,
)
from nas_common import NasNumericException, NasRunException
from sync_files import write_sync_binary

CHECKPOINT_VERSION = 1
VERIFY_DTYPE = np.float64
TRAIN_DTYPE = np.float32


class ParamStore:
    def __init__(self, dtype=TRAIN_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.momentum = {}
        self.running = {}  # BN node name -> [mean, var]
        self.no_decay = set()

    def add(self, name, value, decay=True):
        value = np.asarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.momentum[name] = np.zeros_like(value)
        if not decay:
            self.no_decay.add(name)

    def add_running(self, name, channels):
        self.running[name] = [np.zeros(channels, dtype=self.dtype), np.ones(channels, dtype=self.dtype)]

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0)

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def check_mirrors(self):
        for name, p in self.params.items():
            if self.grads[name].shape != p.shape or self.momentum[name].shape != p.shape:
                raise NasRunException("gradient or momentum of %s does not mirror its shape %s" % (name, p.shape))
        for name, (_, var) in self.running.items():
            if np.any(var < 0):
                raise NasRunException("negative running variance in %s" % name)

    def snapshot_running(self):
        return {k: (m.copy(), v.copy()) for k, (m, v) in self.running.items()}

    def restore_running(self, snap):
        for k, (m, v) in snap.items():
            self.running[k][0][...] = m
            self.running[k][1][...] = v

    # fan-in scaled Gaussian (variance 2 / fan_in) for conv and dense,
    # gamma 1, beta 0, dense bias 0

    @staticmethod
    def for_graph(graph, rng, dtype=TRAIN_DTYPE):
        store = ParamStore(dtype)
        for node in graph.nodes:
            if not node.inputs:
                continue
            cin = graph.in_shape(node)[-1]
            if node.kind in ("stem_conv", "conv2d"):
                fan_in = node.kh * node.kw * cin
                shape = (node.kh, node.kw, cin, node.channels)
                store.add(node.name + ".w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
            elif node.kind == "depthwise_conv":
                fan_in = node.kh * node.kw
                shape = (node.kh, node.kw, cin)
                store.add(node.name + ".w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
            elif node.kind == "batch_norm":
                store.add(node.name + ".gamma", np.ones(node.channels))
                store.add(node.name + ".beta", np.zeros(node.channels))
                store.add_running(node.name, node.channels)
            elif node.kind == "dense":
                store.add(node.name + ".w", rng.normal(0.0, np.sqrt(2.0 / cin), size=(cin, node.channels)))
                store.add(node.name + ".b", np.zeros(node.channels), decay=False)
        return store


class GraphExecutor:
    def __init__(self, graph, params, rng=None):
        self.graph = graph
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.values = []
        self.caches = {}

    def forward(self, x, train=False):
        g = self.graph
        p = self.params.params
        x = np.asarray(x, dtype=self.params.dtype)
        if x.ndim != 4 or x.shape[1:] != tuple(g.input_shape):
            raise ShapeMismatchError("input batch has shape %s, graph expects (N, %s)" % (x.shape, g.input_shape))
        self.values = []
        self.caches = {}
        for node in g.nodes:
            ins = [self.values[i] for i in node.inputs]
            k = node.kind
            if k == "input":
                out = x
            elif k in ("stem_conv", "conv2d"):
                out, self.caches[node.id] = ops.conv2d_forward(ins[0], p[node.name + ".w"], node.stride)
            elif k == "depthwise_conv":
                out, self.caches[node.id] = ops.depthwise_conv_forward(ins[0], p[node.name + ".w"], node.stride)
            elif k == "batch_norm":
                rm, rv = self.params.running[node.name]
                out, self.caches[node.id] = ops.batch_norm_forward(
                    ins[0], p[node.name + ".gamma"], p[node.name + ".beta"], rm, rv, train
                )
            elif k == "relu":
                out, self.caches[node.id] = ops.relu_forward(ins[0])
            elif k == "combine":
                out, self.caches[node.id] = ops.combine_forward(ins, node.combiner, train, self.rng)
            elif k == "residual_add":
                if ins[0].shape != ins[1].shape:
                    raise ShapeMismatchError(
                        "residual add %s: shapes %s and %s" % (node.name, ins[0].shape, ins[1].shape)
                    )
                out = ins[0] + ins[1]
            elif k == "global_avg_pool":
                out, self.caches[node.id] = ops.global_avg_pool_forward(ins[0])
            elif k == "dense":
                out, self.caches[node.id] = ops.dense_forward(ins[0], p[node.name + ".w"], p[node.name + ".b"])
            elif k == "softmax":
                out = ops.softmax(ins[0])
            else:
                raise NasRunException("cannot execute node kind %s" % k)
            ops.check_finite("%s %s" % (k, node.name), out)
            if out.shape[1:] != tuple(g.shapes[node.id]):
                raise ShapeMismatchError(
                    "node %d (%s) produced %s, inferred %s" % (node.id, node.name, out.shape[1:], g.shapes[node.id])
                )
            self.values.append(out)
        return self.values[-1]

    def logits(self):
        return self.values[self.graph.logits_id]

    # gradients flow from the logits, the softmax node only serves prediction

    def backward(self, dlogits):
        g = self.graph
        p = self.params.params
        pg = self.params.grads
        upstream = {g.logits_id: dlogits}
        for node in reversed(g.nodes[: g.logits_id + 1]):
            d = upstream.pop(node.id, None)
            if d is None or node.kind == "input":
                continue
            cache = self.caches.get(node.id)
            k = node.kind
            if k in ("stem_conv", "conv2d"):
                dx, pg[node.name + ".w"][...] = ops.conv2d_backward(d, p[node.name + ".w"], cache)
                dins = [dx]
            elif k == "depthwise_conv":
                dx, pg[node.name + ".w"][...] = ops.depthwise_conv_backward(d, p[node.name + ".w"], cache)
                dins = [dx]
            elif k == "batch_norm":
                dx, pg[node.name + ".gamma"][...], pg[node.name + ".beta"][...] = ops.batch_norm_backward(d, cache)
                dins = [dx]
            elif k == "relu":
                dins = [ops.relu_backward(d, cache)]
            elif k == "combine":
                dins = ops.combine_backward(d, cache)
            elif k == "residual_add":
                dins = [d, d]
            elif k == "global_avg_pool":
                dins = [ops.global_avg_pool_backward(d, cache)]
            elif k == "dense":
                dx, pg[node.name + ".w"][...], pg[node.name + ".b"][...] = ops.dense_backward(
                    d, p[node.name + ".w"], cache
                )
                dins = [dx]
            else:
                raise NasRunException("cannot differentiate node kind %s" % k)
            for i, di in zip(node.inputs, dins):
                ops.check_finite("backward %s %s" % (k, node.name), di)
                if i in upstream:
                    upstream[i] = upstream[i] + di
                else:
                    upstream[i] = di

    # one training step worth of work: forward, loss, backward

    def loss_and_grads(self, x, labels, train=True):
        self.params.zero_grads()
        self.forward(x, train=train)
        loss, dlogits = ops.softmax_cross_entropy(self.logits(), labels)
        self.backward(dlogits.astype(self.params.dtype))
        return loss, self.logits()

    def predict(self, x, batch_size=256):
        out = []
        for start in range(0, len(x), batch_size):
            out.append(self.forward(x[start:start + batch_size], train=False))
        return np.concatenate(out, axis=0)


# compare every parameter gradient of the network loss with central
# finite differences, in 64-bit, with add_stc weights frozen by
# re-seeding the executor stream before each forward pass


def grad_check(graph, x, labels, seed=0, h=1e-6, entries_per_tensor=None, train=True):
    store = ParamStore.for_graph(graph, np.random.default_rng(seed), dtype=VERIFY_DTYPE)
    ex = GraphExecutor(graph, store)
    pick = np.random.default_rng(seed + 2)

    def run(with_grads):
        ex.rng = np.random.default_rng(seed + 1)
        snap = store.snapshot_running()
        try:
            if with_grads:
                return ex.loss_and_grads(x, labels, train=train)[0]
            ex.forward(x, train=train)
            return ops.softmax_cross_entropy(ex.logits(), labels)[0]
        finally:
            store.restore_running(snap)

    run(True)
    analytic = {name: g.copy() for name, g in store.grads.items()}
    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        if entries_per_tensor is None or entries_per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = pick.choice(flat.size, size=entries_per_tensor, replace=False)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            lp = run(False)
            flat[i] = orig - h
            lm = run(False)
            flat[i] = orig
            numeric[j] = (lp - lm) / (2 * h)
        worst = max(worst, ops.relative_error(analytic[name].reshape(-1)[idx], numeric))
    return worst


# checkpoint = .npz of named arrays plus a JSON header carrying
# the format version and the description hash of the emitting graph


def save_checkpoint(path, graph, store, meta=None, extra_arrays=None):
    header = dict(meta or {})
    header["version"] = CHECKPOINT_VERSION
    header["graph_hash"] = description_hash(graph)
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for name, p in store.params.items():
        arrays["param/" + name] = p
    for name, (m, v) in store.running.items():
        arrays["running_mean/" + name] = m
        arrays["running_var/" + name] = v
    for name, a in (extra_arrays or {}).items():
        arrays["extra/" + name] = np.asarray(a)
    write_sync_binary(path, lambda f: np.savez(f, **arrays))


def read_checkpoint_header(path):
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["header"]))


def load_checkpoint(path, graph, dtype=TRAIN_DTYPE):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise NasRunException("%s: checkpoint version %s, expected %d" % (path, header.get("version"), CHECKPOINT_VERSION))
        expect = description_hash(graph)
        if header.get("graph_hash") != expect:
            raise NasRunException(
                "%s: checkpoint was written for graph %s but this graph hashes to %s"
                % (path, header.get("graph_hash"), expect)
            )
        store = ParamStore.for_graph(graph, np.random.default_rng(0), dtype=dtype)
        for name in store.params:
            key = "param/" + name
            if key not in z.files or z[key].shape != store.params[name].shape:
                raise NasRunException("%s: parameter %s missing or misshapen" % (path, name))
            store.params[name][...] = z[key]
        for name, (m, v) in store.running.items():
            m[...] = z["running_mean/" + name]
            v[...] = z["running_var/" + name]
        extras = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    return store, header, extras


class TestTensorEngine(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="tensor_engine_")
        self.rng = np.random.default_rng(11)

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def small_graph(self, key="cifar10", filters=8, stages=2, repeats=1, shape=(8, 8, 3)):
        blk = blockspace.parse_config(blockspace.WINNING_BLOCKS[key])
        macro = MacroConfig(stages=stages, repeats=repeats, initial_filters=filters, input_shape=shape)
        return build_architecture(blk, macro)

    # executed shapes and allocated parameter elements against the graph's
    # own inference and counting, for 100 seeded blocks at full default size

    def test_default_macro_executes_as_inferred(self):
        space = blockspace.SearchSpace()
        macro = MacroConfig()
        for seed in range(100):
            blk = blockspace.sample_block(space, np.random.default_rng(seed))
            with self.subTest(seed=seed, block=blockspace.format_config(blk)):
                graph = build_architecture(blk, macro)
                store = ParamStore.for_graph(graph, self.rng)
                self.assertEqual(sum(p.size for p in store.params.values()), count_params(graph))
                store.check_mirrors()
                ex = GraphExecutor(graph, store)
                probs = ex.forward(self.rng.standard_normal((1,) + tuple(macro.input_shape)), train=False)
                inferred = infer_shapes(graph)
                self.assertEqual(len(ex.values), len(inferred))
                for node, v in zip(graph.nodes, ex.values):
                    self.assertEqual(v.shape, (1,) + tuple(inferred[node.id]), node.name)
                np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_small_forward_in_train_mode(self):
        for blk in blockspace.sample_blocks(blockspace.SearchSpace(), 3, 8):
            macro = MacroConfig(stages=2, repeats=1, initial_filters=8, input_shape=(6, 6, 3))
            graph = build_architecture(blk, macro)
            ex = GraphExecutor(graph, ParamStore.for_graph(graph, self.rng), np.random.default_rng(0))
            probs = ex.forward(self.rng.standard_normal((3, 6, 6, 3)), train=True)
            for node, v in zip(graph.nodes, ex.values):
                self.assertEqual(v.shape[1:], tuple(graph.shapes[node.id]))
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_eval_forward_pure(self):
        graph = self.small_graph("cifar100")
        store = ParamStore.for_graph(graph, self.rng, dtype=VERIFY_DTYPE)
        ex = GraphExecutor(graph, store)
        x = self.rng.standard_normal((4, 8, 8, 3))
        ex.forward(x, train=True)  # move running stats off their initial values
        a = ex.forward(x, train=False)
        b = ex.forward(x, train=False)
        np.testing.assert_array_equal(a, b)

    def test_nan_input_trips(self):
        graph = self.small_graph()
        ex = GraphExecutor(graph, ParamStore.for_graph(graph, self.rng))
        x = np.zeros((2, 8, 8, 3))
        x[0, 0, 0, 0] = np.nan
        with self.assertRaises(NasNumericException):
            ex.forward(x, train=False)

    def test_grad_check_single_dense(self):
        nodes = (
            LayerNode(0, "input", "input"),
            LayerNode(1, "global_avg_pool", "pool", (0,)),
            LayerNode(2, "dense", "dense", (1,), channels=3),
            LayerNode(3, "softmax", "softmax", (2,)),
        )
        graph = ArchGraph(nodes=nodes, input_shape=(2, 2, 4), num_classes=3, shapes=((2, 2, 4), (4,), (3,), (3,)))
        x = self.rng.standard_normal((5, 2, 2, 4))
        self.assertLess(grad_check(graph, x, self.rng.integers(0, 3, size=5), h=1e-5), 1e-8)

    def test_grad_check_one_block(self):
        graph = self.small_graph("cifar100", filters=8, stages=1, repeats=1)
        x = self.rng.standard_normal((4, 8, 8, 3))
        labels = self.rng.integers(0, 10, size=4)
        self.assertLess(grad_check(graph, x, labels, seed=5), 1e-5)

    def test_grad_check_stochastic_combiner(self):
        blk = blockspace.parse_config("conv(3)|sp_conv(3)|rc_conv(5)+add_stc")
        graph = build_architecture(blk, MacroConfig(stages=1, repeats=1, initial_filters=8, input_shape=(6, 6, 3)))
        x = self.rng.standard_normal((3, 6, 6, 3))
        self.assertLess(grad_check(graph, x, np.array([0, 1, 2]), seed=9), 1e-5)

    # every entry of every parameter tensor, across a stage transition

    def test_grad_check_full_network(self):
        graph = self.small_graph("cifar100", filters=8, stages=2, repeats=1)
        x = self.rng.standard_normal((4, 8, 8, 3))
        labels = self.rng.integers(0, 10, size=4)
        self.assertLess(grad_check(graph, x, labels, seed=3), 1e-4)

    def test_checkpoint_round_trip_and_hash(self):
        graph = self.small_graph()
        store = ParamStore.for_graph(graph, self.rng)
        store.running[graph.nodes[2].name][0][...] = 0.5
        path = os.path.join(self.dir, "ck.npz")
        save_checkpoint(path, graph, store, meta={"block": graph.block}, extra_arrays={"mean": np.ones((8, 8, 3))})
        loaded, header, extras = load_checkpoint(path, graph)
        self.assertEqual(header["block"], graph.block)
        for name, p in store.params.items():
            np.testing.assert_array_equal(loaded.params[name], p)
        np.testing.assert_array_equal(loaded.running[graph.nodes[2].name][0], 0.5)
        self.assertEqual(extras["mean"].shape, (8, 8, 3))
        other = self.small_graph("svhn")
        with self.assertRaises(NasRunException):
            load_checkpoint(path, other)


if __name__ == "__main__":
    unittest.main()
