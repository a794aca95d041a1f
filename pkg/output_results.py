# -*- coding: utf-8 -*-

import os
import shutil
import tempfile
import unittest
from io import StringIO
from unittest import mock

import random_search
import run_params
from nas_common import NasResultException
from sync_files import write_json

RESULTS_FILE = "results.json"
TRAIN_RESULTS_FILE = "train.json"


def print_params(prm_list):
    for (prm_name, prm_value) in prm_list:
        print("%40s : %s" % (prm_name, prm_value))


class search_stats:

    # start with zeroing because we'll add trials to it

    def __init__(self):
        self.trials = 0
        self.succeeded = 0
        self.failed = 0
        self.epochs = 0
        self.best = None

    def add_trial(self, rec):
        self.trials += 1
        self.epochs += rec.epochs
        if not rec.ok:
            self.failed += 1
            return
        self.succeeded += 1
        if self.best is None or rec.val_acc > self.best.val_acc:
            self.best = rec

    # insert values into dictionary

    def add_to_dict(self, target):
        target["trials"] = self.trials
        target["succeeded"] = self.succeeded
        target["failed"] = self.failed
        target["total-epochs"] = self.epochs
        if self.best is not None:
            target["best-trial"] = self.best.index
            target["best-block"] = self.best.block
            target["best-val-acc"] = self.best.val_acc
            target["best-param-count"] = self.best.param_count


def output_search_results(records, manifest):
    if len(records) < 1:
        raise NasResultException("no trial records, so no results")
    stats = search_stats()
    for rec in records:
        status = "ok" if rec.ok else "ERR: " + str(rec.failure)
        fmt = "trial = %d,val_acc = %.4f,epochs = %d,params = %d,block = %s,status = %s"
        print(fmt % (rec.index, rec.val_acc, rec.epochs, rec.param_count, rec.block, status))
        stats.add_trial(rec)

    curve = random_search.best_score_curve(records)
    rslt = {}
    stats.add_to_dict(rslt)
    rslt["curve"] = [{"trial": i, "best-val-acc": b} for i, b in curve]
    rslt["trial"] = {str(r.index): r.to_dict() for r in records}
    if stats.succeeded > 0:
        top = random_search.select_top_k(records, manifest.search.top_k)
        rslt["top-k"] = [r.index for r in top]

    print("total trials = %d" % stats.trials)
    print("succeeded = %d, failed = %d" % (stats.succeeded, stats.failed))
    print("total epochs = %d" % stats.epochs)
    if stats.best is not None:
        print("best trial = %d" % stats.best.index)
        print("best block = %s" % stats.best.block)
        print("best validation accuracy = %.4f" % stats.best.val_acc)
        print("best parameter count = %d" % stats.best.param_count)
    print("best-score curve ends at %.4f after %d trials" % (curve[-1][1], len(curve)))

    json_obj = {"params": manifest.to_dict(), "config-hash": manifest.config_hash(), "results": rslt}
    write_json(os.path.join(manifest.output_dir, RESULTS_FILE), json_obj)

    # wait until here so the results are on disk either way

    if stats.succeeded == 0:
        print("WARNING: every trial failed, see logs/ in %s" % manifest.output_dir)
    elif stats.failed > 0:
        print("WARNING: %d trials failed, they count as validation accuracy 0" % stats.failed)
    return json_obj


def output_train_results(manifest, block, graph, result, test_acc, test_err):
    print("block = %s" % block)
    print("parameters = %d" % graph.param_count)
    print("multiply-accumulates = %d" % graph.mac_count)
    print("epochs = %d, stopped by %s" % (len(result.history), result.stop_reason))
    print("best epoch = %d" % result.best_epoch)
    print("best validation accuracy = %.4f" % result.best_val_acc)
    if test_acc is not None:
        print("test accuracy = %.4f" % test_acc)
        print("test error rate = %.2f%%" % test_err)
    rslt = result.summary()
    rslt["block"] = str(block)
    rslt["param-count"] = graph.param_count
    rslt["test-accuracy"] = test_acc
    rslt["test-error-pct"] = test_err
    json_obj = {"params": manifest.to_dict(), "results": rslt}
    write_json(os.path.join(manifest.output_dir, TRAIN_RESULTS_FILE), json_obj)
    if not result.ok:
        print("WARNING: training failed: %s" % result.failure)
    return json_obj


class TestOutputResults(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="output_results_")
        self.manifest = run_params.RunManifest(output_dir=self.dir)

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_search_summary(self):
        recs = [random_search.TestRandomSearch.fake_record(i, v) for i, v in enumerate((0.5, 0.7, 0.6))]
        recs.append(random_search.TestRandomSearch.fake_record(3, 0.0, status="failed"))
        with mock.patch("sys.stdout", new=StringIO()) as out:
            j = output_search_results(recs, self.manifest)
        self.assertIn("best trial = 1", out.getvalue())
        self.assertIn("WARNING: 1 trials failed", out.getvalue())
        r = j["results"]
        self.assertEqual((r["trials"], r["succeeded"], r["failed"]), (4, 3, 1))
        self.assertEqual(r["top-k"], [1, 2, 0])
        self.assertEqual([c["best-val-acc"] for c in r["curve"]], [0.5, 0.7, 0.7, 0.7])
        self.assertTrue(os.path.exists(os.path.join(self.dir, RESULTS_FILE)))

    def test_all_failed(self):
        recs = [random_search.TestRandomSearch.fake_record(0, 0.0, status="failed")]
        with mock.patch("sys.stdout", new=StringIO()) as out:
            j = output_search_results(recs, self.manifest)
        self.assertNotIn("top-k", j["results"])
        self.assertIn("every trial failed", out.getvalue())

    def test_no_records(self):
        with self.assertRaises(NasResultException):
            output_search_results([], self.manifest)


if __name__ == "__main__":
    unittest.main()
