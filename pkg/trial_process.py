# -*- coding: utf-8 -*-

"""
trial_process.py -- one search trial: build, train, summarize
plus the subprocess wrapper that runs a trial on another core
and hands its record back through a pipe
Licensed under the Apache License at http://www.apache.org/licenses/LICENSE-2.0
"""

import multiprocessing
import os
import shutil
import tempfile
import traceback
import unittest
from dataclasses import asdict, dataclass, replace
from multiprocessing.connection import wait

import blockspace
import datasets
import trainer
from archgraph import MacroConfig, build_architecture
from nas_common import NOTOK, OK, start_log, stop_log
from sync_files import ensure_dir_exists


@dataclass
class TrialRecord:
    index: int
    block: str
    canonical: str
    seed: int
    param_count: int = 0
    status: str = "ok"  # ok | failed
    val_acc: float = 0.0
    best_epoch: int = -1
    epochs: int = 0
    stop_reason: str = ""
    failure: str = None
    checkpoint: str = None  # relative to the run directory
    draw_attempts: int = 1

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return TrialRecord(**d)


def trial_name(index):
    return "trial_%03d" % index


class TrialInvocation:
    """
    everything a worker needs to run one trial,
    checkpoint, metrics and log file names derive from the trial index
    """

    def __init__(self, index, block, seed, macro, train_cfg, splits, run_dir,
                 draw_attempts=1, log_to_stderr=False, verbose=False):
        self.index = index
        self.block = block
        self.seed = seed
        self.macro = macro
        self.train_cfg = replace(train_cfg, seed=seed)
        self.splits = splits
        self.run_dir = run_dir
        self.draw_attempts = draw_attempts
        self.log_to_stderr = log_to_stderr
        self.verbose = verbose
        self.status = OK
        self.record = None

    def __str__(self):
        return "trial %d block %s seed %d" % (self.index, blockspace.format_config(self.block), self.seed)

    def checkpoint_rel(self):
        return os.path.join("checkpoints", trial_name(self.index) + ".npz")

    def metrics_fn(self):
        return os.path.join(self.run_dir, "metrics", trial_name(self.index) + ".jsonl")

    def log_fn(self):
        return os.path.join(self.run_dir, "logs", trial_name(self.index) + ".log")

    def new_record(self):
        return TrialRecord(
            index=self.index,
            block=blockspace.format_config(self.block),
            canonical=blockspace.format_config(blockspace.canonicalize(self.block)),
            seed=self.seed,
            draw_attempts=self.draw_attempts,
        )

    # never raises: any failure becomes a failed record with val_acc 0

    def do_trial(self):
        for d in ("checkpoints", "metrics", "logs"):
            ensure_dir_exists(os.path.join(self.run_dir, d))
        name = trial_name(self.index)
        log = start_log(name, self.log_fn(), self.log_to_stderr, self.verbose)
        rec = self.new_record()
        try:
            log.info("starting " + str(self))
            graph = build_architecture(self.block, self.macro)
            rec.param_count = graph.param_count
            result = trainer.train_model(
                graph,
                self.splits,
                self.train_cfg,
                checkpoint_path=os.path.join(self.run_dir, self.checkpoint_rel()),
                metrics_path=self.metrics_fn(),
                log=log,
                meta={"trial": self.index, "block": rec.block, "macro": self.macro.to_dict()},
            )
            rec.epochs = len(result.history)
            rec.best_epoch = result.best_epoch
            rec.stop_reason = result.stop_reason
            if result.ok:
                rec.val_acc = result.best_val_acc
                rec.checkpoint = self.checkpoint_rel()
            else:
                rec.status = "failed"
                rec.failure = result.failure
        except Exception as e:
            log.error("trial failed: %s\n%s" % (e, traceback.format_exc()))
            rec.status = "failed"
            rec.failure = "%s: %s" % (type(e).__name__, e)
            rec.stop_reason = "failed"
        if not rec.ok:
            rec.val_acc = 0.0
            self.status = NOTOK
        log.info("trial %d %s val_acc %.4f" % (self.index, rec.status, rec.val_acc))
        stop_log(name)
        self.record = rec
        return rec


# this class runs a TrialInvocation in its own process,
# so trials can use > 1 core despite the GIL


class TrialProcess(multiprocessing.Process):
    def __init__(self, invocation):
        multiprocessing.Process.__init__(self)
        (conn1, conn2) = multiprocessing.Pipe(False)
        self.receiver = conn1  # parent receives the finished record here
        self.sender = conn2  # child sends it here
        self.invoke = invocation

    # only the child writes: the parent drops its copy of the write end,
    # so a child that dies before sending shows up as EOF on the receiver

    def start(self):
        multiprocessing.Process.start(self)
        self.sender.close()

    def run(self):
        rec = None
        try:
            rec = self.invoke.do_trial()
        finally:
            # datasets stay behind, only the record travels back
            self.sender.send(rec.to_dict() if rec is not None else None)

    # record of a child that died without reporting

    def lost_record(self):
        rec = self.invoke.new_record()
        rec.status = "failed"
        rec.stop_reason = "failed"
        rec.failure = "worker process exited with code %s before reporting" % self.exitcode
        return rec


# a worker killed from outside (OOM killer, segfault) never reports


class DyingInvocation(TrialInvocation):
    def do_trial(self):
        os._exit(9)


class TestTrialProcess(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="trial_process_")
        prof = datasets.get_profile("synthetic", classes=2, image_size=8, samples_per_class=10)
        self.splits = datasets.load_dataset(prof, seed=0)
        self.macro = MacroConfig(stages=1, repeats=1, initial_filters=4, input_shape=(8, 8, 3), num_classes=2)
        self.cfg = trainer.TrainConfig(batch_size=4, max_epochs=2, patience=2)
        self.block = blockspace.parse_config("sp_conv(3)|conv(1)+add_stc")

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_in_process_trial(self):
        inv = TrialInvocation(0, self.block, 42, self.macro, self.cfg, self.splits, self.dir)
        rec = inv.do_trial()
        self.assertTrue(rec.ok)
        self.assertEqual(rec.epochs, 2)
        self.assertTrue(os.path.exists(os.path.join(self.dir, rec.checkpoint)))
        self.assertTrue(os.path.exists(inv.log_fn()))
        self.assertEqual(TrialRecord.from_dict(rec.to_dict()), rec)

    def test_bad_block_fails_softly(self):
        # no macro, so the graph cannot be built
        inv = TrialInvocation(1, self.block, 1, self.macro, self.cfg, self.splits, self.dir)
        inv.macro = None
        rec = inv.do_trial()
        self.assertFalse(rec.ok)
        self.assertEqual(rec.val_acc, 0.0)
        self.assertEqual(inv.status, NOTOK)

    def test_subprocess_returns_record(self):
        inv = TrialInvocation(2, self.block, 7, self.macro, self.cfg, self.splits, self.dir)
        t = TrialProcess(inv)
        t.start()
        got = t.receiver.recv()
        t.join()
        self.assertEqual(got["index"], 2)
        self.assertEqual(got["status"], "ok")
        local = TrialInvocation(2, self.block, 7, self.macro, self.cfg, self.splits, tempfile.mkdtemp(dir=self.dir))
        self.assertEqual(local.do_trial().val_acc, got["val_acc"])

    def test_dead_child_reads_as_lost(self):
        t = TrialProcess(DyingInvocation(3, self.block, 7, self.macro, self.cfg, self.splits, self.dir))
        t.start()
        self.assertEqual(wait([t.receiver], timeout=60), [t.receiver])
        with self.assertRaises(EOFError):
            t.receiver.recv()
        t.join()
        self.assertEqual(t.exitcode, 9)
        rec = t.lost_record()
        self.assertFalse(rec.ok)
        self.assertEqual(rec.index, 3)
        self.assertIn("code 9", rec.failure)


if __name__ == "__main__":
    unittest.main()
