# -*- coding: utf-8 -*-

"""
random_search.py -- random search over building blocks

every trial's block and training seed are fixed before any trial runs,
from (master seed, trial index) alone, so running trials in a different
order or on more cores changes nothing but wall time
only this (parent) process writes the trial log, one fsynced line per trial
"""

import csv
import io
import json
import os
import shutil
import tempfile
import unittest
from dataclasses import dataclass, field, replace
from multiprocessing.connection import wait
from unittest import mock

import numpy as np

import blockspace
import datasets
import trainer
import trial_process
from archgraph import MacroConfig
from blockspace import SearchSpace
from nas_common import NasParseException, NasResultException, NasRunException, canonical_json, derive_seed, start_log, text_hash
from sync_files import SyncFileException, append_record, ensure_dir_exists, read_records, write_json, write_sync_file
from trial_process import TrialInvocation, TrialProcess, TrialRecord

STATE_VERSION = 1
STATE_FILE = "search.json"
TRIALS_LOG = "trials.log"
CURVE_FILE = "curve.csv"


@dataclass(frozen=True)
class SearchConfig:
    trials: int = 50
    top_k: int = 10
    space: SearchSpace = field(default_factory=SearchSpace)
    macro: MacroConfig = field(default_factory=MacroConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    master_seed: int = 0
    jobs: int = 1
    distinct: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise NasParseException("need at least 1 trial, got %d" % self.trials)
        if self.top_k < 1:
            raise NasParseException("top-k must be >= 1, got %d" % self.top_k)
        if self.jobs < 1:
            raise NasParseException("jobs must be >= 1, got %d" % self.jobs)

    # parallelism is left out: it never changes what a search produces

    def identity(self, dataset=None):
        return {
            "version": STATE_VERSION,
            "trials": self.trials,
            "top-k": self.top_k,
            "seed": self.master_seed,
            "distinct": self.distinct,
            "space": self.space.to_dict(),
            "macro": self.macro.to_dict(),
            "train": self.train.to_dict(),
            "dataset": dataset or {},
        }

    def config_hash(self, dataset=None):
        return text_hash(canonical_json(self.identity(dataset)))


@dataclass(frozen=True)
class PlannedTrial:
    index: int
    block: blockspace.BlockConfig
    seed: int
    draw_attempts: int


def plan_trials(cfg):
    seen = set()
    plan = []
    for i in range(cfg.trials):
        seed = derive_seed(cfg.master_seed, i)
        rng = np.random.default_rng(seed)
        if cfg.distinct:
            block, attempts = blockspace.sample_distinct_block(cfg.space, rng, seen)
        else:
            block, attempts = blockspace.sample_block(cfg.space, rng), 1
        seen.add(blockspace.canonicalize(block))
        plan.append(PlannedTrial(i, block, seed, attempts))
    return plan


def read_trial_log(run_dir, plan):
    by_index = {}
    path = os.path.join(run_dir, TRIALS_LOG)
    for d in read_records(path):
        try:
            rec = TrialRecord.from_dict(d)
        except TypeError as e:
            raise SyncFileException("%s: record does not describe a trial: %s" % (path, e))
        if rec.index in by_index:
            raise SyncFileException("%s: trial %d recorded twice" % (path, rec.index))
        if not 0 <= rec.index < len(plan):
            raise SyncFileException("%s: trial index %d outside this search" % (path, rec.index))
        expect = blockspace.format_config(plan[rec.index].block)
        if rec.block != expect:
            raise NasRunException(
                "%s: trial %d ran block %s but this search plans %s" % (path, rec.index, rec.block, expect)
            )
        by_index[rec.index] = rec
    return by_index


def read_state(run_dir):
    state_path = os.path.join(run_dir, STATE_FILE)
    if not os.path.exists(state_path):
        raise NasRunException("%s: no search state, is this a search run directory?" % state_path)
    with open(state_path) as f:
        try:
            state = json.load(f)
        except ValueError as e:
            raise NasRunException("%s: unreadable search state: %s" % (state_path, e))
    if state.get("version") != STATE_VERSION:
        raise NasRunException("%s: state version %s, expected %d" % (state_path, state.get("version"), STATE_VERSION))
    return state


def check_state(run_dir, cfg, dataset, resume):
    state_path = os.path.join(run_dir, STATE_FILE)
    want = cfg.config_hash(dataset)
    if os.path.exists(state_path):
        state = read_state(run_dir)
        if state.get("config_hash") != want:
            raise NasRunException(
                "%s: search configuration changed since this run started (hash %s, now %s)"
                % (state_path, state.get("config_hash"), want)
            )
        if not resume:
            raise NasRunException("%s already holds a search, use --resume to continue it" % run_dir)
    else:
        if resume:
            raise NasRunException("nothing to resume: %s not found" % state_path)
        write_json(state_path, {"version": STATE_VERSION, "config_hash": want, "config": cfg.identity(dataset)})


def make_invocation(p, cfg, splits, run_dir, log_to_stderr, verbose):
    return TrialInvocation(
        p.index, p.block, p.seed, cfg.macro, cfg.train, splits, run_dir,
        draw_attempts=p.draw_attempts, log_to_stderr=log_to_stderr, verbose=verbose,
    )


def run_pending(pending, cfg, splits, run_dir, log, log_to_stderr=False, verbose=False):
    log_path = os.path.join(run_dir, TRIALS_LOG)
    done = []

    def record(rec):
        append_record(log_path, rec.to_dict())
        log.info("trial %d %s val_acc %.4f block %s" % (rec.index, rec.status, rec.val_acc, rec.block))
        done.append(rec)

    if cfg.jobs == 1:
        for p in pending:
            record(make_invocation(p, cfg, splits, run_dir, log_to_stderr, verbose).do_trial())
        return done

    # keep up to cfg.jobs worker processes busy
    queue = list(pending)
    running = {}
    while queue or running:
        while queue and len(running) < cfg.jobs:
            t = TrialProcess(make_invocation(queue.pop(0), cfg, splits, run_dir, log_to_stderr, verbose))
            t.start()
            running[t.receiver] = t
        for conn in wait(list(running)):
            t = running.pop(conn)
            try:
                d = conn.recv()
            except EOFError:
                d = None  # worker died before reporting
            t.join()
            record(TrialRecord.from_dict(d) if d is not None else t.lost_record())
    return done


def run_search(cfg, splits, run_dir, dataset=None, resume=False, log=None, log_to_stderr=False, verbose=False):
    if log is None:
        log = start_log("search", log_to_stderr=True, verbose=verbose)
    ensure_dir_exists(run_dir)
    check_state(run_dir, cfg, dataset, resume)
    plan = plan_trials(cfg)
    existing = read_trial_log(run_dir, plan)
    pending = [p for p in plan if p.index not in existing]
    log.info("%d of %d trials done, running %d with %d jobs" % (len(existing), cfg.trials, len(pending), cfg.jobs))
    for rec in run_pending(pending, cfg, splits, run_dir, log, log_to_stderr, verbose):
        existing[rec.index] = rec
    records = [existing[i] for i in range(cfg.trials)]
    write_curve_csv(os.path.join(run_dir, CURVE_FILE), best_score_curve(records))
    return records


def resume_search(run_dir, cfg, splits, dataset=None, log=None, log_to_stderr=False, verbose=False):
    return run_search(cfg, splits, run_dir, dataset, resume=True, log=log, log_to_stderr=log_to_stderr, verbose=verbose)


def load_records(run_dir):
    recs = [TrialRecord.from_dict(d) for d in read_records(os.path.join(run_dir, TRIALS_LOG))]
    if not recs:
        raise NasResultException("no trial records in %s" % run_dir)
    return sorted(recs, key=lambda r: r.index)


def best_score_curve(records):
    curve = []
    best = 0.0
    for r in sorted(records, key=lambda r: r.index):
        best = max(best, r.val_acc if r.ok else 0.0)
        curve.append((r.index, best))
    return curve


def curve_csv_text(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial_index", "best_val_acc"])
    for index, best in curve:
        w.writerow([index, "%.6f" % best])
    return buf.getvalue()


def write_curve_csv(path, curve):
    write_sync_file(path, curve_csv_text(curve))


# best validation accuracy first, ties go to the earlier trial


def select_top_k(records, k, log=None):
    if k < 1:
        raise NasParseException("top-k must be >= 1, got %d" % k)
    ok = [r for r in records if r.ok]
    if not ok:
        raise NasResultException("no successful trials to choose from")
    if k > len(ok):
        if log is None:
            log = start_log("search", log_to_stderr=True)
        log.warning("asked for top %d but only %d trials succeeded, using all of them" % (k, len(ok)))
        k = len(ok)
    return sorted(ok, key=lambda r: (-r.val_acc, r.index))[:k]


class TestRandomSearch(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="random_search_")
        prof = datasets.get_profile("synthetic", classes=2, image_size=8, samples_per_class=10, difficulty=0.05)
        self.dataset = prof.to_dict()
        self.splits = datasets.load_dataset(prof, seed=0)
        self.log = start_log("search-test")
        self.cfg = SearchConfig(
            trials=5,
            top_k=2,
            space=SearchSpace(branch_count=2),
            macro=MacroConfig(stages=1, repeats=1, initial_filters=4, input_shape=(8, 8, 3), num_classes=2),
            train=trainer.TrainConfig(batch_size=4, max_epochs=2, patience=2),
            master_seed=11,
        )

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def run_dir(self, name):
        return os.path.join(self.dir, name)

    def summaries(self, records):
        return [r.to_dict() for r in records]

    @staticmethod
    def fake_record(index, val_acc, status="ok"):
        return TrialRecord(index=index, block="conv(1)+add_det", canonical="conv(1)+add_det", seed=index,
                           status=status, val_acc=val_acc)

    def test_plan_pure_function_of_seed(self):
        a = plan_trials(self.cfg)
        b = plan_trials(replace(self.cfg, jobs=4))
        self.assertEqual(a, b)
        self.assertEqual(len({blockspace.canonicalize(p.block) for p in a}), 5)
        self.assertEqual(self.cfg.config_hash(), replace(self.cfg, jobs=3).config_hash())
        self.assertNotEqual(self.cfg.config_hash(), replace(self.cfg, trials=6).config_hash())

    def test_search_produces_one_record_per_trial(self):
        recs = run_search(self.cfg, self.splits, self.run_dir("a"), self.dataset, log=self.log)
        self.assertEqual([r.index for r in recs], list(range(5)))
        with open(os.path.join(self.run_dir("a"), CURVE_FILE)) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "trial_index,best_val_acc")
        self.assertEqual(len(lines), 6)
        self.assertEqual(self.summaries(load_records(self.run_dir("a"))), self.summaries(recs))

    def test_parallel_matches_serial(self):
        cfg = replace(self.cfg, trials=10)
        serial = run_search(cfg, self.splits, self.run_dir("s"), self.dataset, log=self.log)
        parallel = run_search(replace(cfg, jobs=4), self.splits, self.run_dir("p"), self.dataset, log=self.log)
        self.assertEqual(self.summaries(serial), self.summaries(parallel))
        curve = [b for _, b in best_score_curve(serial)]
        self.assertEqual(curve, [b for _, b in best_score_curve(parallel)])
        self.assertTrue(all(x <= y for x, y in zip(curve, curve[1:])))

    def test_dead_worker_recorded_as_failed(self):
        real = make_invocation

        def dies_on_trial_2(p, cfg, splits, run_dir, log_to_stderr, verbose):
            if p.index == 2:
                return trial_process.DyingInvocation(p.index, p.block, p.seed, cfg.macro, cfg.train, splits, run_dir)
            return real(p, cfg, splits, run_dir, log_to_stderr, verbose)

        d = self.run_dir("dead")
        with mock.patch(__name__ + ".make_invocation", side_effect=dies_on_trial_2):
            recs = run_search(replace(self.cfg, jobs=2), self.splits, d, self.dataset, log=self.log)
        self.assertEqual([r.index for r in recs], list(range(5)))
        self.assertFalse(recs[2].ok)
        self.assertEqual(recs[2].val_acc, 0.0)
        self.assertIn("code 9", recs[2].failure)
        self.assertTrue(all(r.ok for r in recs if r.index != 2))
        self.assertEqual(len(read_records(os.path.join(d, TRIALS_LOG))), 5)

    def test_failed_trial_kept_with_zero(self):
        real = trainer.train_model
        bad_seed = derive_seed(self.cfg.master_seed, 1)

        def flaky(graph, splits, cfg, **kw):
            if cfg.seed == bad_seed:
                raise RuntimeError("loss went to nan")
            return real(graph, splits, cfg, **kw)

        with mock.patch.object(trainer, "train_model", side_effect=flaky):
            recs = run_search(self.cfg, self.splits, self.run_dir("f"), self.dataset, log=self.log)
        self.assertEqual(len(recs), 5)
        self.assertEqual(recs[1].status, "failed")
        self.assertEqual(recs[1].val_acc, 0.0)
        self.assertIn("nan", recs[1].failure)

    def test_resume_after_interrupt(self):
        full = run_search(self.cfg, self.splits, self.run_dir("full"), self.dataset, log=self.log)
        part = self.run_dir("part")
        run_search(self.cfg, self.splits, part, self.dataset, log=self.log)
        log_path = os.path.join(part, TRIALS_LOG)
        with open(log_path) as f:
            lines = f.readlines()
        with open(log_path, "w") as f:
            f.writelines(lines[:2])
        resumed = resume_search(part, self.cfg, self.splits, self.dataset, log=self.log)
        self.assertEqual(self.summaries(resumed), self.summaries(full))

    def test_resume_completed_is_noop(self):
        d = self.run_dir("done")
        run_search(self.cfg, self.splits, d, self.dataset, log=self.log)
        with open(os.path.join(d, TRIALS_LOG)) as f:
            before = f.read()
        resume_search(d, self.cfg, self.splits, self.dataset, log=self.log)
        with open(os.path.join(d, TRIALS_LOG)) as f:
            self.assertEqual(f.read(), before)

    def test_resume_refuses_changed_config(self):
        d = self.run_dir("changed")
        run_search(replace(self.cfg, trials=2), self.splits, d, self.dataset, log=self.log)
        with self.assertRaises(NasRunException):
            resume_search(d, self.cfg, self.splits, self.dataset, log=self.log)
        with self.assertRaises(NasRunException):
            run_search(replace(self.cfg, trials=2), self.splits, d, self.dataset, log=self.log)
        with self.assertRaises(NasRunException):
            resume_search(self.run_dir("never"), self.cfg, self.splits, self.dataset, log=self.log)

    def test_corrupt_log_refused(self):
        d = self.run_dir("corrupt")
        run_search(replace(self.cfg, trials=1), self.splits, d, self.dataset, log=self.log)
        with open(os.path.join(d, TRIALS_LOG), "a") as f:
            f.write('{"index": 3')
        with self.assertRaises(SyncFileException):
            resume_search(d, replace(self.cfg, trials=1), self.splits, self.dataset, log=self.log)

    def test_best_score_curve(self):
        recs = [self.fake_record(0, 0.3), self.fake_record(1, 0.5), self.fake_record(2, 0.4)]
        self.assertEqual([b for _, b in best_score_curve(recs)], [0.3, 0.5, 0.5])
        rng = np.random.default_rng(0)
        recs = [self.fake_record(i, float(a)) for i, a in enumerate(rng.random(30))]
        curve = [b for _, b in best_score_curve(recs)]
        self.assertEqual(len(curve), 30)
        self.assertTrue(all(x <= y for x, y in zip(curve, curve[1:])))
        self.assertEqual(curve[-1], max(r.val_acc for r in recs))

    def test_select_top_k(self):
        recs = [self.fake_record(0, 0.9), self.fake_record(1, 0.7), self.fake_record(2, 0.9)]
        self.assertEqual([r.index for r in select_top_k(recs, 1)], [0])
        rng = np.random.default_rng(1)
        recs = [self.fake_record(i, float(a)) for i, a in enumerate(rng.random(50))]
        top = select_top_k(recs, 10)
        self.assertEqual(len(top), 10)
        self.assertTrue(all(a.val_acc >= b.val_acc for a, b in zip(top, top[1:])))
        with self.assertLogs("blocksearch.search-test", level="WARNING"):
            self.assertEqual(len(select_top_k(recs, 100, log=self.log)), 50)
        with self.assertRaises(NasResultException):
            select_top_k([self.fake_record(0, 0.0, "failed")], 1)


if __name__ == "__main__":
    unittest.main()
