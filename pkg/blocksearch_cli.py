#!/usr/bin/env python3
# -*- coding: utf-8 -*-

# trials run in "multiprocessing" worker processes, not threads,
# so a search with --jobs N can keep N cores busy
# the heavy lifting is done in random_search, trainer and tensor_engine,
# this script parses CLI commands, runs one of them and prints results
#
# how to run:
#
# ./blocksearch_cli.py sample -n 5 --seed 7
# ./blocksearch_cli.py describe --config "conv(5)|sp_conv(1)|sp_conv(3)|rc_conv(3)+add_det"
# ./blocksearch_cli.py search --manifest my.yaml --output /var/tmp/run1 --jobs 4
# ./blocksearch_cli.py ensemble --run-dir /var/tmp/run1 --top-k 10
# ./blocksearch_cli.py analyze --run-dir /var/tmp/run1
#

"""
blocksearch_cli.py
CLI user interface for random search over CNN building blocks
exit status: 0 ok, 1 usage, 2 data, 3 runtime
"""

import os
import shutil
import sys
import tempfile
import traceback
import unittest
from io import StringIO
from unittest import mock

import numpy as np

import block_stats
import blockspace
import datasets
import ensemble
import output_results
import parse
import random_search
import trainer
from archgraph import build_architecture, emit_graph_description
from nas_common import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, NasParseException, NasRunException, exit_code_for, start_log
from sync_files import ensure_dir_exists, write_sync_file


def do_sample(args):
    if args.distinct:
        rng = np.random.default_rng(args.seed)
        seen = set()
        blocks = []
        for _ in range(args.count):
            block, _ = blockspace.sample_distinct_block(args.space, rng, seen)
            seen.add(blockspace.canonicalize(block))
            blocks.append(block)
    else:
        blocks = blockspace.sample_blocks(args.space, args.seed, args.count)
    for b in blocks:
        print(blockspace.format_config(b))
    return EXIT_OK


def do_describe(args):
    graph = build_architecture(args.config, args.macro)
    text = emit_graph_description(graph)
    print(text, end="")
    if args.out:
        write_sync_file(args.out, text)
    return EXIT_OK


def do_train(args):
    m = args.manifest_params
    output_results.print_params(m.human_readable())
    log = start_log("train", log_to_stderr=True, verbose=m.verbose)
    ensure_dir_exists(m.output_dir)
    splits = datasets.load_dataset(m.dataset, seed=m.search.master_seed, log=log)
    macro = m.search.macro
    graph = build_architecture(args.config, macro)
    ckpt = os.path.join(m.output_dir, "model.npz")
    result = trainer.train_model(
        graph,
        splits,
        m.search.train,
        checkpoint_path=ckpt,
        metrics_path=os.path.join(m.output_dir, "metrics.jsonl"),
        log=log,
        meta={"block": blockspace.format_config(args.config), "macro": macro.to_dict()},
    )
    test_acc = test_err = None
    if result.ok:
        member = ensemble.EnsembleMember(0, blockspace.format_config(args.config), "model.npz", result.best_val_acc)
        loaded = ensemble.load_member(m.output_dir, member)
        test_acc, test_err = ensemble.evaluate(loaded.probs, splits.test)
    output_results.output_train_results(m, blockspace.format_config(args.config), graph, result, test_acc, test_err)
    return EXIT_OK if result.ok else EXIT_RUNTIME


def do_search(args):
    m = args.manifest_params
    run_dir = m.output_dir
    if not args.resume and os.path.exists(os.path.join(run_dir, random_search.STATE_FILE)):
        raise NasRunException("%s already holds a search, use --resume to continue it" % run_dir)
    output_results.print_params(m.human_readable())
    log = start_log("search", log_to_stderr=True, verbose=m.verbose)
    ensure_dir_exists(run_dir)
    if not args.resume:
        m.write()
    splits = datasets.load_dataset(m.dataset, seed=m.search.master_seed, log=log)
    records = random_search.run_search(
        m.search,
        splits,
        run_dir,
        m.dataset_identity(),
        resume=args.resume,
        log=log,
        log_to_stderr=m.log_to_stderr,
        verbose=m.verbose,
    )
    output_results.output_search_results(records, m)
    return EXIT_OK


def do_ensemble(args):
    m = args.manifest_params
    log = start_log("ensemble", log_to_stderr=True, verbose=m.verbose)
    splits = datasets.load_dataset(m.dataset, seed=m.search.master_seed, log=log)
    report = ensemble.run_ensemble(m.output_dir, args.top_k, splits, log=log)
    single = report["test"]["single"]
    ens = report["test"]["ensemble"]
    print("members = %s" % ",".join(str(mem["index"]) for mem in report["members"]))
    print("single best (trial %d) test error = %.2f%%" % (single["trial"], single["error-pct"]))
    print("ensemble of %d test error = %.2f%%" % (ens["members"], ens["error-pct"]))
    return EXIT_OK


def do_analyze(args):
    m = args.manifest_params
    log = start_log("analyze", log_to_stderr=True, verbose=m.verbose)
    hist = block_stats.analyze_run(m.output_dir, args.top_k, log=log)
    for line in hist.report_lines():
        print(line)
    return EXIT_OK


COMMAND_HANDLERS = {
    "sample": do_sample,
    "describe": do_describe,
    "train": do_train,
    "search": do_search,
    "ensemble": do_ensemble,
    "analyze": do_analyze,
}


# main routine that does everything, returns the exit status


def main(argv=None):
    verbose = False
    try:
        args = parse.parse(argv)
        verbose = args.verbose
        return COMMAND_HANDLERS[args.command](args)
    except KeyboardInterrupt:
        print("ERROR: control-C signal seen (SIGINT)", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        if verbose:
            traceback.print_exc()
        msg = str(e).replace("\n", " ")
        if isinstance(e, NasParseException):
            msg += " (use --help option to get CLI syntax)"
        print("ERROR: " + msg, file=sys.stderr)
        return exit_code_for(e)


class TestCli(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="blocksearch_cli_")
        self.manifest = os.path.join(self.dir, "tiny.yaml")
        with open(self.manifest, "w") as f:
            f.write(
                "search:\n  trials: 3\n  top-k: 2\n  seed: 11\n"
                "space:\n  branches: 2\n"
                "macro:\n  stages: 1\n  repeats: 1\n  initial-filters: 4\n"
                "train:\n  batch-size: 8\n  max-epochs: 2\n  patience: 2\n"
                "dataset:\n  name: synthetic\n  classes: 3\n  image-size: 8\n  samples-per-class: 15\n"
            )

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def run_cli(self, argv):
        with mock.patch("sys.stdout", new=StringIO()) as out, mock.patch("sys.stderr", new=StringIO()) as err:
            rc = main(argv)
        return rc, out.getvalue(), err.getvalue()

    def test_sample_repeatable(self):
        rc1, out1, _ = self.run_cli(["sample", "-n", "2", "--seed", "7"])
        rc2, out2, _ = self.run_cli(["sample", "-n", "2", "--seed", "7"])
        self.assertEqual((rc1, rc2), (EXIT_OK, EXIT_OK))
        self.assertEqual(out1, out2)
        lines = out1.splitlines()
        self.assertEqual(len(lines), 2)
        for line in lines:
            blockspace.parse_config(line)

    def test_sample_distinct(self):
        rc, out, _ = self.run_cli(["sample", "-n", "9", "--space", "1:conv(1),conv(3),conv(5)", "--distinct", "y"])
        self.assertEqual(rc, EXIT_OK)
        self.assertEqual(len(set(out.splitlines())), 9)

    def test_describe_best_cifar10_block(self):
        out_fn = os.path.join(self.dir, "graph.txt")
        rc, out, _ = self.run_cli(
            ["describe", "--config", "conv(5)|sp_conv(1)|sp_conv(3)|rc_conv(3)+add_det", "--out", out_fn]
        )
        self.assertEqual(rc, EXIT_OK)
        self.assertIn("total params", out)
        with open(out_fn) as f:
            self.assertEqual(f.read().rstrip("\n"), out.rstrip("\n"))

    def test_usage_error(self):
        rc, out, err = self.run_cli(["describe", "--config", "conv(2)+add_det"])
        self.assertEqual(rc, EXIT_USAGE)
        self.assertEqual(len(err.strip().splitlines()), 1)
        self.assertTrue(err.startswith("ERROR: "))
        self.assertEqual(self.run_cli(["sample", "--frobnicate"])[0], EXIT_USAGE)

    def test_missing_dataset_is_data_error(self):
        rc, _, err = self.run_cli(["train", "--config", "conv(1)+concat", "--dataset", "cifar10",
                                   "--data-path", os.path.join(self.dir, "nowhere"), "--out", self.dir])
        self.assertEqual(rc, EXIT_DATA)
        self.assertIn("ERROR", err)

    def test_train(self):
        out_dir = os.path.join(self.dir, "train")
        rc, out, _ = self.run_cli(["train", "--config", "conv(3)|sp_conv(1)+add_stc", "--manifest", self.manifest,
                                   "--out", out_dir])
        self.assertEqual(rc, EXIT_OK)
        self.assertIn("test error rate", out)
        self.assertTrue(os.path.exists(os.path.join(out_dir, output_results.TRAIN_RESULTS_FILE)))

    def test_search_resume_ensemble_analyze(self):
        run = os.path.join(self.dir, "run")
        rc, out, _ = self.run_cli(["search", "--manifest", self.manifest, "--output", run])
        self.assertEqual(rc, EXIT_OK)
        for fn in ("manifest", random_search.STATE_FILE, random_search.TRIALS_LOG, random_search.CURVE_FILE,
                   output_results.RESULTS_FILE):
            self.assertTrue(os.path.exists(os.path.join(run, fn)), fn)
        with open(os.path.join(run, random_search.TRIALS_LOG)) as f:
            log_before = f.read()

        # a second start must not clobber the run, a resume finds nothing to do
        self.assertEqual(self.run_cli(["search", "--manifest", self.manifest, "--output", run])[0], EXIT_RUNTIME)
        self.assertEqual(self.run_cli(["search", "--resume", "--output", run, "--jobs", "2"])[0], EXIT_OK)
        with open(os.path.join(run, random_search.TRIALS_LOG)) as f:
            self.assertEqual(f.read(), log_before)

        rc, out, _ = self.run_cli(["ensemble", "--run-dir", run])
        self.assertEqual(rc, EXIT_OK)
        self.assertIn("ensemble of 2", out)
        self.assertTrue(os.path.exists(os.path.join(run, ensemble.ENSEMBLE_FILE)))

        rc, out, _ = self.run_cli(["analyze", "--run-dir", run, "--top-k", "1"])
        self.assertEqual(rc, EXIT_OK)
        self.assertIn("op:conv(1)", out)
        self.assertTrue(os.path.exists(os.path.join(run, block_stats.HISTOGRAM_FILE)))


if __name__ == "__main__":
    sys.exit(main())
