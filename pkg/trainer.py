# -*- coding: utf-8 -*-

"""
trainer.py -- trains one architecture graph with momentum SGD,
step learning-rate decay and early stopping on validation accuracy

validation accuracy is measured in eval mode at the end of every epoch,
the checkpoint always holds the best-validation epoch,
the test split is never touched here
"""

import os
import shutil
import sys
import tempfile
import time
import unittest
from dataclasses import asdict, dataclass, field
from unittest import mock

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import blockspace
import datasets
from archgraph import MacroConfig, build_architecture
from nas_common import NasDataException, NasNumericException, NasParseException, start_log, stop_log
from sync_files import append_record, ensure_deleted, read_records
from tensor_engine import GraphExecutor, ParamStore, load_checkpoint, save_checkpoint
from tensor_ops import check_finite

CROP_PAD = 4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr_initial: float = 0.1
    lr_drop_every: int = 25
    lr_drop_factor: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.001
    max_epochs: int = 500
    patience: int = 50
    crop: bool = True
    flip: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 2:
            raise NasParseException("batch size must be >= 2 (batch norm), got %d" % self.batch_size)
        if self.lr_initial <= 0 or self.lr_drop_every <= 0:
            raise NasParseException("learning rate and drop interval must be positive")
        if not 0 < self.lr_drop_factor < 1:
            raise NasParseException("lr drop factor must lie in (0, 1), got %s" % self.lr_drop_factor)
        if not 0 <= self.momentum < 1:
            raise NasParseException("momentum must lie in [0, 1), got %s" % self.momentum)
        if self.weight_decay < 0:
            raise NasParseException("weight decay must be >= 0, got %s" % self.weight_decay)
        if self.max_epochs < 1:
            raise NasParseException("max epochs must be >= 1, got %d" % self.max_epochs)
        if not 1 <= self.patience <= self.max_epochs:
            raise NasParseException(
                "patience %d must lie in [1, max epochs %d]" % (self.patience, self.max_epochs)
            )
        if self.dtype not in ("float32", "float64"):
            raise NasParseException("dtype must be float32 or float64, got %s" % self.dtype)

    def to_dict(self):
        return {
            "batch-size": self.batch_size,
            "lr": self.lr_initial,
            "lr-drop-every": self.lr_drop_every,
            "lr-drop-factor": self.lr_drop_factor,
            "momentum": self.momentum,
            "weight-decay": self.weight_decay,
            "max-epochs": self.max_epochs,
            "patience": self.patience,
            "crop": self.crop,
            "flip": self.flip,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(d, **extra):
        keys = {
            "batch-size": "batch_size",
            "lr": "lr_initial",
            "lr-drop-every": "lr_drop_every",
            "lr-drop-factor": "lr_drop_factor",
            "momentum": "momentum",
            "weight-decay": "weight_decay",
            "max-epochs": "max_epochs",
            "patience": "patience",
            "crop": "crop",
            "flip": "flip",
            "dtype": "dtype",
        }
        kw = {keys[k]: v for k, v in d.items() if k in keys}
        kw.update(extra)
        return TrainConfig(**kw)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_val_acc: float = 0.0
    best_epoch: int = -1
    stop_reason: str = "max_epochs"  # max_epochs | early_stop | failed
    failure: str = None
    wall_time: float = 0.0
    checkpoint: str = None

    @property
    def ok(self):
        return self.stop_reason != "failed"

    # everything but wall time, so reruns give identical artifacts

    def summary(self):
        d = asdict(self)
        del d["wall_time"]
        del d["history"]
        d["epochs"] = len(self.history)
        return d


def lr_at(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0, got %d" % epoch)
    return cfg.lr_initial * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


# v <- mu * v + g + lambda * w ; w <- w - lr * v
# decay skips the parameters the store marks as no-decay (dense bias)


def sgd_momentum_step(store, lr, cfg):
    for name, w in store.params.items():
        v = store.momentum[name]
        v *= cfg.momentum
        v += store.grads[name]
        if cfg.weight_decay and name not in store.no_decay:
            v += cfg.weight_decay * w
        check_finite("sgd update of " + name, v)
        w -= lr * v


def hflip(images):
    return images[:, :, ::-1, :]


def random_crop(images, pad, rng):
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(padded, (h, w), axis=(1, 2))  # (n, 2p+1, 2p+1, C, h, w)
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    return win[np.arange(n), oy, ox].transpose(0, 2, 3, 1)


# mean subtraction always; crop and flip only in train mode
# and only when the config enables them


def preprocess_and_augment(images, mean_image, cfg, train=False, rng=None):
    if images.shape[1:] != mean_image.shape:
        raise NasDataException(
            "mean image has shape %s but images have shape %s" % (mean_image.shape, images.shape[1:])
        )
    x = images - mean_image
    if train and cfg.crop:
        x = random_crop(x, CROP_PAD, rng)
    if train and cfg.flip:
        flip = rng.random(len(x)) < 0.5
        x = np.where(flip[:, None, None, None], hflip(x), x)
    return np.ascontiguousarray(x)


def accuracy(probs, labels):
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def should_stop(epoch, best_epoch, patience):
    return epoch - best_epoch >= patience


def train_model(graph, splits, cfg, checkpoint_path=None, metrics_path=None, log=None, meta=None):
    if log is None:
        log = start_log("train")
    started = time.time()
    result = TrainResult(checkpoint=checkpoint_path)
    train = splits.train
    if len(train) < 2:
        raise NasDataException("need at least 2 training examples, got %d" % len(train))
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore.for_graph(graph, rng, dtype=np.dtype(cfg.dtype))
    ex = GraphExecutor(graph, store, rng=np.random.default_rng([cfg.seed, 1]))
    mean = datasets.compute_mean_image(train)
    val_x = preprocess_and_augment(splits.val.images, mean, cfg)
    if metrics_path:
        ensure_deleted(metrics_path)
    log.info("training %s: %d params, %d train / %d val" % (graph.block, graph.param_count, len(train), len(splits.val)))

    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train))
        loss_sum = 0.0
        correct = 0
        seen = 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue  # batch norm cannot train on a single example
                labels = train.labels[idx]
                xb = preprocess_and_augment(train.images[idx], mean, cfg, True, rng)
                loss, logits = ex.loss_and_grads(xb, labels, train=True)
                sgd_momentum_step(store, lr, cfg)
                loss_sum += loss * len(idx)
                correct += int(np.sum(np.argmax(logits, axis=1) == labels))
                seen += len(idx)
            val_acc = accuracy(ex.predict(val_x, cfg.batch_size), splits.val.labels)
        except NasNumericException as e:
            log.error("epoch %d diverged: %s" % (epoch, e))
            result.stop_reason = "failed"
            result.failure = str(e)
            break
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "val_acc": val_acc,
        }
        result.history.append(rec)
        if metrics_path:
            append_record(metrics_path, rec)
        log.debug("epoch %d lr %g loss %.4f train %.4f val %.4f" % (epoch, lr, rec["train_loss"], rec["train_acc"], val_acc))
        if val_acc > result.best_val_acc or result.best_epoch < 0:
            result.best_val_acc = val_acc
            result.best_epoch = epoch
            if checkpoint_path:
                header = dict(meta or {}, epoch=epoch, val_acc=val_acc)
                save_checkpoint(checkpoint_path, graph, store, meta=header, extra_arrays={"mean_image": mean})
        elif should_stop(epoch, result.best_epoch, cfg.patience):
            result.stop_reason = "early_stop"
            break

    result.wall_time = time.time() - started
    log.info(
        "finished after %d epochs (%s): best val acc %.4f at epoch %d, %.1f sec"
        % (len(result.history), result.stop_reason, result.best_val_acc, result.best_epoch, result.wall_time)
    )
    return result


# rebuild an eval-only executor plus its mean image from a checkpoint


def load_trained(graph, checkpoint_path):
    store, header, extras = load_checkpoint(checkpoint_path, graph)
    return GraphExecutor(graph, store), extras["mean_image"], header


class TestTrainer(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="trainer_")
        self.log = start_log("trainer-test")

    def tearDown(self):
        stop_log("trainer-test")
        shutil.rmtree(self.dir, ignore_errors=True)

    def tiny(self, classes=2, size=8, per_class=20, filters=4):
        prof = datasets.get_profile("synthetic", classes=classes, image_size=size, samples_per_class=per_class, difficulty=0.0)
        splits = datasets.load_dataset(prof, seed=0)
        blk = blockspace.parse_config("conv(3)|conv(1)+add_det")
        graph = build_architecture(blk, MacroConfig(stages=1, repeats=1, initial_filters=filters, input_shape=(size, size, 3), num_classes=classes))
        return graph, splits

    def test_lr_schedule(self):
        cfg = TrainConfig()
        self.assertAlmostEqual(lr_at(0, cfg), 0.1)
        self.assertAlmostEqual(lr_at(25, cfg), 0.05)
        self.assertAlmostEqual(lr_at(50, cfg), 0.025)
        self.assertAlmostEqual(lr_at(99, cfg), 0.0125)
        rates = [lr_at(e, cfg) for e in range(300)]
        self.assertTrue(all(a >= b for a, b in zip(rates, rates[1:])))

    def test_config_invariants(self):
        with self.assertRaises(NasParseException):
            TrainConfig(lr_drop_factor=1.0)
        with self.assertRaises(NasParseException):
            TrainConfig(max_epochs=10, patience=20)
        with self.assertRaises(NasParseException):
            TrainConfig(lr_initial=0.0)

    def store_of(self, w, g):
        store = ParamStore(np.float64)
        store.add("w", np.array([w]))
        store.grads["w"][...] = g
        return store

    def test_sgd_hand_arithmetic(self):
        store = self.store_of(1.0, 1.0)
        sgd_momentum_step(store, 0.1, TrainConfig(weight_decay=0.0))
        self.assertAlmostEqual(float(store.momentum["w"][0]), 1.0)
        self.assertAlmostEqual(float(store.params["w"][0]), 0.9)
        store = self.store_of(1.0, 1.0)
        sgd_momentum_step(store, 0.1, TrainConfig(weight_decay=0.001))
        self.assertAlmostEqual(float(store.momentum["w"][0]), 1.001)
        self.assertAlmostEqual(float(store.params["w"][0]), 0.8999)

    def test_sgd_plain_descent_and_zero_grads(self):
        store = self.store_of(2.0, 0.5)
        sgd_momentum_step(store, 0.2, TrainConfig(momentum=0.0, weight_decay=0.0))
        self.assertAlmostEqual(float(store.params["w"][0]), 1.9)
        store = self.store_of(2.0, 0.0)
        for _ in range(5):
            sgd_momentum_step(store, 0.1, TrainConfig(weight_decay=0.0))
        self.assertEqual(float(store.params["w"][0]), 2.0)

    def test_bias_not_decayed(self):
        store = ParamStore(np.float64)
        store.add("d.b", np.ones(2), decay=False)
        sgd_momentum_step(store, 0.1, TrainConfig(weight_decay=0.5))
        np.testing.assert_array_equal(store.params["d.b"], np.ones(2))

    def test_preprocess(self):
        train, _, _ = datasets.synth_dataset(2, 8, 20, 0.1, seed=0)
        mean = datasets.compute_mean_image(train)
        x = preprocess_and_augment(train.images, mean, TrainConfig())
        np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_array_equal(hflip(hflip(x)), x)
        rng = np.random.default_rng(0)
        aug = preprocess_and_augment(train.images, mean, TrainConfig(), True, rng)
        self.assertEqual(aug.shape, x.shape)
        with self.assertRaises(NasDataException):
            preprocess_and_augment(train.images, mean[:4], TrainConfig())

    def test_crop_without_shift_is_identity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5, 5, 2))
        np.testing.assert_array_equal(random_crop(x, 0, rng), x)

    def test_should_stop(self):
        self.assertFalse(should_stop(52, 3, 50))
        self.assertTrue(should_stop(53, 3, 50))

    def test_tiny_batch_loss_decreases(self):
        graph, splits = self.tiny()
        store = ParamStore.for_graph(graph, np.random.default_rng(3), dtype=np.float64)
        ex = GraphExecutor(graph, store, np.random.default_rng(4))
        cfg = TrainConfig(weight_decay=0.0, momentum=0.0)
        mean = datasets.compute_mean_image(splits.train)
        x = preprocess_and_augment(splits.train.images[:8], mean, cfg)
        y = splits.train.labels[:8]
        losses = []
        for _ in range(10):
            loss, _ = ex.loss_and_grads(x, y, train=True)
            losses.append(loss)
            sgd_momentum_step(store, 0.01, cfg)
        self.assertTrue(all(a > b for a, b in zip(losses, losses[1:])))

    def test_separable_data_reaches_full_train_accuracy(self):
        graph, splits = self.tiny()
        cfg = TrainConfig(batch_size=8, max_epochs=50, patience=50, crop=False, flip=False, seed=1)
        metrics = os.path.join(self.dir, "m.jsonl")
        result = train_model(graph, splits, cfg, metrics_path=metrics, log=self.log)
        self.assertTrue(any(h["train_acc"] == 1.0 for h in result.history))
        self.assertEqual(result.best_val_acc, max(h["val_acc"] for h in result.history))
        self.assertEqual(len(read_records(metrics)), len(result.history))
        self.assertEqual(splits.test_reads, 0)

    def test_noise_free_two_classes_full_val_accuracy(self):
        graph, splits = self.tiny(classes=2, per_class=30)
        cfg = TrainConfig(batch_size=8, max_epochs=20, patience=20, crop=False, flip=False, seed=4)
        result = train_model(graph, splits, cfg, log=self.log)
        self.assertEqual(result.best_val_acc, 1.0)

    def test_winning_blocks_train(self):
        prof = datasets.get_profile("synthetic", classes=4, image_size=16, samples_per_class=20)
        splits = datasets.load_dataset(prof, seed=0)
        macro = MacroConfig(stages=1, repeats=1, initial_filters=8, input_shape=(16, 16, 3), num_classes=4)
        cfg = TrainConfig(batch_size=16, max_epochs=2, patience=2, seed=6)
        for name, text in blockspace.WINNING_BLOCKS.items():
            with self.subTest(dataset=name):
                graph = build_architecture(blockspace.parse_config(text), macro)
                result = train_model(graph, splits, cfg, log=self.log)
                self.assertTrue(result.ok, result.failure)
                self.assertEqual(len(result.history), 2)
                self.assertTrue(all(np.isfinite(h["train_loss"]) for h in result.history))

    def test_deterministic_histories(self):
        graph, splits = self.tiny()
        cfg = TrainConfig(batch_size=8, max_epochs=3, patience=3, seed=5)
        a = train_model(graph, splits, cfg, log=self.log)
        b = train_model(graph, splits, cfg, log=self.log)
        self.assertEqual(a.history, b.history)

    def test_early_stop_after_patience(self):
        graph, splits = self.tiny()
        cfg = TrainConfig(batch_size=8, max_epochs=80, patience=3, crop=False, flip=False, seed=2)
        result = train_model(graph, splits, cfg, log=self.log)
        self.assertEqual(result.stop_reason, "early_stop")
        self.assertEqual(len(result.history), result.best_epoch + cfg.patience + 1)

    def test_checkpoint_holds_best_epoch(self):
        graph, splits = self.tiny()
        ck = os.path.join(self.dir, "best.npz")
        cfg = TrainConfig(batch_size=8, max_epochs=4, patience=4, seed=3)
        result = train_model(graph, splits, cfg, checkpoint_path=ck, log=self.log, meta={"trial": 0})
        ex, mean, header = load_trained(graph, ck)
        self.assertEqual(header["epoch"], result.best_epoch)
        self.assertEqual(header["trial"], 0)
        probs = ex.predict(preprocess_and_augment(splits.val.images, mean, cfg))
        self.assertAlmostEqual(accuracy(probs, splits.val.labels), result.best_val_acc, places=6)

    def test_divergence_marks_failure(self):
        graph, splits = self.tiny()
        cfg = TrainConfig(batch_size=8, max_epochs=3, patience=3)
        boom = NasNumericException("sgd update of stem.w")
        with mock.patch.object(sys.modules[__name__], "sgd_momentum_step", side_effect=boom):
            result = train_model(graph, splits, cfg, log=self.log)
        self.assertEqual(result.stop_reason, "failed")
        self.assertFalse(result.ok)
        self.assertIn("stem.w", result.failure)
        self.assertEqual(result.history, [])
        self.assertNotIn("wall_time", result.summary())


if __name__ == "__main__":
    unittest.main()
