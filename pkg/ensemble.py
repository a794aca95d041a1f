# -*- coding: utf-8 -*-

"""
ensemble.py -- top-k ensembles of searched architectures

members vote by averaging their class probabilities,
probabilities are formed in 64-bit from each member's logits
and summed in member order, so the result does not depend on
how members were scheduled
"""

import os
import shutil
import tempfile
import unittest
from dataclasses import dataclass

import numpy as np
import scipy.stats

import blockspace
import datasets
import random_search
import trainer
from archgraph import MacroConfig, build_architecture
from nas_common import NasResultException, start_log
from sync_files import write_json
from tensor_engine import read_checkpoint_header
from tensor_ops import softmax

ENSEMBLE_FILE = "ensemble.json"
ENSEMBLE_VERSION = 1


@dataclass(frozen=True)
class EnsembleMember:
    index: int
    block: str
    checkpoint: str  # relative to the run directory
    val_acc: float

    def to_dict(self):
        return {"index": self.index, "block": self.block, "checkpoint": self.checkpoint, "val_acc": self.val_acc}


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple
    run_dir: str
    manifest_hash: str = ""

    def __post_init__(self):
        if not self.members:
            raise NasResultException("an ensemble needs at least one member")

    def to_dict(self):
        return {
            "version": ENSEMBLE_VERSION,
            "manifest-hash": self.manifest_hash,
            "aggregation": "mean-softmax",
            "members": [m.to_dict() for m in self.members],
        }


def spec_from_records(records, k, run_dir, manifest_hash="", log=None):
    top = random_search.select_top_k(records, k, log=log)
    members = tuple(EnsembleMember(r.index, r.block, r.checkpoint, r.val_acc) for r in top)
    return EnsembleSpec(members, run_dir, manifest_hash)


class LoadedMember:
    def __init__(self, member, graph, executor, mean_image):
        self.member = member
        self.graph = graph
        self.executor = executor
        self.mean_image = mean_image

    @property
    def num_classes(self):
        return self.graph.num_classes

    # eval-mode class probabilities, batch by batch

    def probs(self, images, batch_size=256):
        out = []
        for start in range(0, len(images), batch_size):
            x = trainer.preprocess_and_augment(images[start:start + batch_size], self.mean_image, None)
            self.executor.forward(x, train=False)
            out.append(softmax(self.executor.logits().astype(np.float64)))
        return np.concatenate(out, axis=0)


# the checkpoint header names the block and macro it was trained with


def load_member(run_dir, member):
    path = os.path.join(run_dir, member.checkpoint)
    if not os.path.exists(path):
        raise NasResultException("ensemble member %d: checkpoint %s missing" % (member.index, path))
    header = read_checkpoint_header(path)
    graph = build_architecture(blockspace.parse_config(header["block"]), MacroConfig.from_dict(header["macro"]))
    ex, mean, _ = trainer.load_trained(graph, path)
    return LoadedMember(member, graph, ex, mean)


def load_members(spec):
    loaded = [load_member(spec.run_dir, m) for m in spec.members]
    check_compatible(loaded)
    return loaded


def check_compatible(loaded):
    first = loaded[0]
    for lm in loaded[1:]:
        if lm.num_classes != first.num_classes:
            raise NasResultException(
                "member %d predicts %d classes but member %d predicts %d"
                % (lm.member.index, lm.num_classes, first.member.index, first.num_classes)
            )
        if tuple(lm.graph.input_shape) != tuple(first.graph.input_shape):
            raise NasResultException(
                "member %d takes %s inputs but member %d takes %s"
                % (lm.member.index, lm.graph.input_shape, first.member.index, first.graph.input_shape)
            )


def ensemble_predict(loaded, images):
    check_compatible(loaded)
    total = None
    for lm in loaded:
        p = lm.probs(images)
        total = p if total is None else total + p
    return total / len(loaded)


# predictor maps an image batch to class probabilities


def evaluate(predictor, split):
    if len(split) == 0:
        raise NasResultException("cannot evaluate on an empty %s split" % split.split)
    probs = predictor(split.images)
    acc = float(np.mean(np.argmax(probs, axis=1) == split.labels))
    return acc, 100.0 * (1.0 - acc)


# best single model and the top-k ensemble on the test split,
# the only place the test split is ever read


def run_ensemble(run_dir, k, splits, log=None):
    if log is None:
        log = start_log("ensemble", log_to_stderr=True)
    manifest_hash = random_search.read_state(run_dir)["config_hash"]
    records = random_search.load_records(run_dir)
    spec = spec_from_records(records, k, run_dir, manifest_hash, log)
    loaded = load_members(spec)
    if tuple(loaded[0].graph.input_shape) != tuple(splits.image_shape):
        raise NasResultException(
            "members take %s inputs but the dataset has %s" % (loaded[0].graph.input_shape, splits.image_shape)
        )
    test = splits.test
    single_acc, single_err = evaluate(loaded[0].probs, test)
    ens_acc, ens_err = evaluate(lambda x: ensemble_predict(loaded, x), test)
    report = spec.to_dict()
    report["test"] = {
        "single": {"trial": spec.members[0].index, "accuracy": single_acc, "error-pct": single_err},
        "ensemble": {"members": len(loaded), "accuracy": ens_acc, "error-pct": ens_err},
    }
    write_json(os.path.join(run_dir, ENSEMBLE_FILE), report)
    log.info("ensemble of %d: test error %.2f%% (single best %.2f%%)" % (len(loaded), ens_err, single_err))
    return report


class TestEnsemble(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dir = tempfile.mkdtemp(prefix="ensemble_")
        prof = datasets.get_profile("synthetic", classes=3, image_size=8, samples_per_class=15, difficulty=0.05)
        cls.splits = datasets.load_dataset(prof, seed=0)
        cls.cfg = random_search.SearchConfig(
            trials=3,
            top_k=2,
            space=blockspace.SearchSpace(branch_count=2),
            macro=MacroConfig(stages=1, repeats=1, initial_filters=4, input_shape=(8, 8, 3), num_classes=3),
            train=trainer.TrainConfig(batch_size=8, max_epochs=3, patience=3),
            master_seed=5,
        )
        cls.log = start_log("ensemble-test")
        cls.records = random_search.run_search(cls.cfg, cls.splits, cls.dir, prof.to_dict(), log=cls.log)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir, ignore_errors=True)

    def spec(self, k):
        return spec_from_records(self.records, k, self.dir, log=self.log)

    def test_single_member_equals_member(self):
        loaded = load_members(self.spec(1))
        x = self.splits.val.images
        np.testing.assert_array_equal(ensemble_predict(loaded, x), loaded[0].probs(x))

    def test_identical_members(self):
        one = load_members(self.spec(1))
        x = self.splits.val.images
        three = one * 3
        np.testing.assert_allclose(ensemble_predict(three, x), one[0].probs(x), rtol=0, atol=1e-15)
        acc1, _ = evaluate(lambda b: ensemble_predict(one, b), self.splits.val)
        acc3, _ = evaluate(lambda b: ensemble_predict(three, b), self.splits.val)
        self.assertEqual(acc1, acc3)

    def test_rows_sum_to_one(self):
        loaded = load_members(self.spec(3))
        p = ensemble_predict(loaded, self.splits.val.images)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_class_count_mismatch(self):
        loaded = load_members(self.spec(2))
        other = LoadedMember(loaded[1].member, build_architecture(
            blockspace.parse_config(loaded[1].member.block),
            MacroConfig(stages=1, repeats=1, initial_filters=4, input_shape=(8, 8, 3), num_classes=5),
        ), None, None)
        with self.assertRaises(NasResultException):
            ensemble_predict([loaded[0], other], self.splits.val.images)

    def test_evaluate(self):
        split = self.splits.val
        onehot = np.eye(3)[split.labels]
        self.assertEqual(evaluate(lambda x: onehot, split), (1.0, 0.0))
        loaded = load_members(self.spec(1))
        self.assertEqual(evaluate(loaded[0].probs, split), evaluate(loaded[0].probs, split))
        empty = split.subset([], "val")
        with self.assertRaises(NasResultException):
            evaluate(lambda x: x, empty)

    def test_uniform_random_predictor_error(self):
        rng = np.random.default_rng(4)
        labels = np.repeat(np.arange(10), 100)
        split = datasets.LabeledImageSet(np.zeros((1000, 1, 1, 1), np.float32), labels, 10, "test")
        acc, err = evaluate(lambda x: rng.random((len(x), 10)), split)
        lo, hi = scipy.stats.binom.interval(0.999, 1000, 0.1)
        self.assertTrue(lo <= round(acc * 1000) <= hi)
        self.assertAlmostEqual(err, 100.0 * (1 - acc))

    def test_run_ensemble_reads_test_once(self):
        splits = datasets.load_dataset(datasets.get_profile("synthetic", classes=3, image_size=8,
                                                            samples_per_class=15, difficulty=0.05), seed=0)
        report = run_ensemble(self.dir, 2, splits, log=self.log)
        self.assertEqual(splits.test_reads, 1)
        self.assertEqual(len(report["members"]), 2)
        self.assertEqual(report["manifest-hash"], random_search.read_state(self.dir)["config_hash"])
        self.assertTrue(os.path.exists(os.path.join(self.dir, ENSEMBLE_FILE)))
        self.assertAlmostEqual(report["test"]["ensemble"]["error-pct"], 100.0 * (1 - report["test"]["ensemble"]["accuracy"]))


# ten trials on 4-class 16x16 synthetic data, then a top-3 ensemble


class TestDeskScaleSearch(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="desk_search_")
        self.log = start_log("desk-test")

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_search_then_top_3_ensemble(self):
        prof = datasets.get_profile("synthetic", classes=4, image_size=16, samples_per_class=100, difficulty=0.1)
        splits = datasets.load_dataset(prof, seed=0)
        cfg = random_search.SearchConfig(
            trials=10,
            top_k=3,
            macro=MacroConfig(stages=1, repeats=1, initial_filters=8, input_shape=(16, 16, 3), num_classes=4),
            train=trainer.TrainConfig(batch_size=16, max_epochs=30, patience=5, flip=False),
            master_seed=0,
            jobs=4,
        )
        records = random_search.run_search(cfg, splits, self.dir, prof.to_dict(), log=self.log)
        self.assertEqual(len(records), 10)
        self.assertGreaterEqual(max(r.val_acc for r in records if r.ok), 0.95)
        self.assertEqual(splits.test_reads, 0)
        report = run_ensemble(self.dir, 3, splits, log=self.log)
        single = report["test"]["single"]
        ens = report["test"]["ensemble"]
        self.assertEqual(ens["members"], 3)
        self.assertEqual(single["trial"], random_search.select_top_k(records, 1)[0].index)
        self.assertGreaterEqual(ens["accuracy"], single["accuracy"] - 0.01)


if __name__ == "__main__":
    unittest.main()
