# -*- coding: utf-8 -*-

"""
parse.py -- parses CLI commands for blocksearch_cli.py
subcommands: sample, describe, train, search, ensemble, analyze
search, ensemble and analyze are driven by a YAML run manifest,
flags given on the command line override the manifest
"""

import argparse
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

import blockspace
import datasets
import run_params
import yaml_parser
from archgraph import MacroConfig
from nas_common import NasParseException, default_output_root
from parser_data_types import (
    block_config,
    boolean,
    dataset_name,
    dtype_name,
    macro_config,
    non_negative_integer,
    positive_integer,
    search_space,
)

# argparse exits on its own for bad flags, turn that into our usage error


class BlocksearchArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise NasParseException(message)


def add_common(p):
    add = p.add_argument
    add("--verbose", type=boolean, default=False, help="if true, log at DEBUG level")
    add("--log-to-stderr", type=boolean, default=False, help="if true, trial logs go to stderr, not log files")


def add_dataset(p):
    add = p.add_argument
    add("--dataset", type=dataset_name, default=None, help="dataset profile: %s" % ", ".join(sorted(datasets.PROFILES)))
    add("--data-path", default=None, help="directory (or file) holding the dataset")


def build_parser():
    parser = BlocksearchArgumentParser(prog="blocksearch", description="random search over CNN building blocks")
    sub = parser.add_subparsers(dest="command", parser_class=BlocksearchArgumentParser)
    sub.required = True

    p = sub.add_parser("sample", help="draw block configurations from the search space")
    add = p.add_argument
    add("--space", type=search_space, default=blockspace.SearchSpace(),
        help="branches[:ops[:combiners]], e.g. 4 or 2:conv(3),sp_conv(5):concat")
    add("--seed", type=non_negative_integer, default=0, help="random seed")
    add("-n", "--count", type=positive_integer, default=1, help="how many blocks to print")
    add("--distinct", type=boolean, default=False, help="if true, never repeat a block up to branch order")
    add_common(p)

    p = sub.add_parser("describe", help="build the network for a block and describe it")
    add = p.add_argument
    add("--config", type=block_config, required=True, help='block, e.g. "conv(5)|sp_conv(1)+add_det"')
    add("--macro", type=macro_config, default=MacroConfig(), help="stages,repeats,initial-filters")
    add("--dataset", type=dataset_name, default="cifar10", help="dataset profile giving input shape and classes")
    add("--post-add-relu", type=boolean, default=False, help="if true, apply ReLU after each residual add")
    add("--out", default=None, help="also write the description to this file")
    add_common(p)

    p = sub.add_parser("train", help="train one block's network and report validation and test accuracy")
    add = p.add_argument
    add("--config", type=block_config, required=True, help="block to train")
    add("--manifest", default=None, help="take macro, train and dataset parameters from this manifest")
    add_dataset(p)
    add("--macro", type=macro_config, default=None, help="stages,repeats,initial-filters")
    add("--seed", type=non_negative_integer, default=0, help="training seed")
    add("--max-epochs", type=positive_integer, default=None, help="epoch limit")
    add("--patience", type=positive_integer, default=None, help="early-stop patience in epochs")
    add("--batch-size", type=positive_integer, default=None, help="minibatch size")
    add("--dtype", type=dtype_name, default=None, help="float32 or float64")
    add("--out", default=None, help="output directory for checkpoint, metrics and train.json")
    add_common(p)

    p = sub.add_parser("search", help="run (or resume) a random search")
    add = p.add_argument
    add("--manifest", default=None, help="YAML run manifest")
    add("--output", default=None, help="run directory (default: manifest search.output)")
    add("--resume", type=boolean, nargs="?", const=True, default=False,
        help="continue the search in the run directory")
    add("--jobs", type=positive_integer, default=None, help="trials run in parallel")
    add_dataset(p)
    add_common(p)

    for name, what in (("ensemble", "test the top-k ensemble of a finished search"),
                       ("analyze", "component histogram of a finished search")):
        p = sub.add_parser(name, help=what)
        add = p.add_argument
        add("--run-dir", required=True, help="search run directory")
        add("--top-k", type=positive_integer, default=None, help="ensemble / top set size (default: manifest top-k)")
        add("--data-path", default=None, help="dataset location, if it moved since the search")
        add_common(p)
    return parser


# apply dataset flags on top of a manifest's profile


def override_dataset(manifest, args):
    prof = manifest.dataset
    if args.dataset and args.dataset != prof.name:
        prof = datasets.get_profile(args.dataset)
    if args.data_path:
        prof = replace(prof, path=os.path.abspath(args.data_path))
    if prof is not manifest.dataset:
        manifest.dataset = prof
        manifest.bind_dataset()


def train_manifest(args):
    if args.manifest:
        m = yaml_parser.parse_yaml(args.manifest, args.log_to_stderr, args.verbose)
    else:
        m = run_params.RunManifest(log_to_stderr=args.log_to_stderr, verbose=args.verbose)
    t = m.search.train
    kw = {"seed": args.seed}
    for flag, key in (("max_epochs", "max_epochs"), ("patience", "patience"), ("batch_size", "batch_size"), ("dtype", "dtype")):
        if getattr(args, flag) is not None:
            kw[key] = getattr(args, flag)
    if "max_epochs" in kw and "patience" not in kw:
        kw["patience"] = min(t.patience, kw["max_epochs"])
    search = replace(m.search, train=replace(t, **kw))
    if args.macro is not None:
        search = replace(search, macro=replace(args.macro, post_add_relu=m.search.macro.post_add_relu))
    m.search = search
    m.output_dir = os.path.abspath(args.out) if args.out else os.path.join(default_output_root(), "train")
    override_dataset(m, args)
    m.bind_dataset()
    return m


def search_manifest(args):
    if args.resume:
        if not args.output:
            raise NasParseException("--resume needs --output naming the run directory")
        path = args.manifest or os.path.join(args.output, run_params.MANIFEST_FILE)
    else:
        if not args.manifest:
            raise NasParseException("search needs --manifest")
        path = args.manifest
    m = yaml_parser.parse_yaml(path, args.log_to_stderr, args.verbose)
    if args.output:
        m.output_dir = os.path.abspath(args.output)
    if args.jobs is not None:
        m.search = replace(m.search, jobs=args.jobs)
    override_dataset(m, args)
    return m


def run_dir_manifest(args):
    path = os.path.join(args.run_dir, run_params.MANIFEST_FILE)
    if not os.path.exists(path):
        raise NasParseException("%s: no manifest, is this a search run directory?" % args.run_dir)
    m = yaml_parser.parse_yaml(path, args.log_to_stderr, args.verbose)
    m.output_dir = os.path.abspath(args.run_dir)
    if args.data_path:
        m.dataset = replace(m.dataset, path=os.path.abspath(args.data_path))
    if args.top_k is None:
        args.top_k = m.search.top_k
    return m


# parse command line
# return argparse namespace, with a "manifest_params" attribute
# holding the RunManifest for commands that take one


def parse(argv=None):
    args = build_parser().parse_args(argv)
    args.manifest_params = None
    if args.command == "describe":
        prof = datasets.get_profile(args.dataset)
        args.macro = replace(
            args.macro,
            input_shape=tuple(prof.input_shape),
            num_classes=prof.num_classes,
            post_add_relu=args.post_add_relu,
        )
    elif args.command == "train":
        args.manifest_params = train_manifest(args)
    elif args.command == "search":
        args.manifest_params = search_manifest(args)
    elif args.command in ("ensemble", "analyze"):
        args.manifest_params = run_dir_manifest(args)
    return args


class TestParse(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="parse_")
        self.manifest = os.path.join(self.dir, "m.yaml")
        with open(self.manifest, "w") as f:
            f.write("search:\n  trials: 4\n  top-k: 2\ndataset:\n  name: synthetic\n  image-size: 8\n")

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_sample(self):
        a = parse(["sample", "-n", "2", "--seed", "7", "--space", "2:conv(3),conv(5)"])
        self.assertEqual((a.count, a.seed), (2, 7))
        self.assertEqual(a.space.branch_count, 2)

    def test_describe_binds_dataset(self):
        a = parse(["describe", "--config", "conv(5)|sp_conv(1)|sp_conv(3)|rc_conv(3)+add", "--dataset", "fer2013"])
        self.assertEqual(a.config.combiner, "add_det")
        self.assertEqual(a.macro.input_shape, (48, 48, 1))
        self.assertEqual(a.macro.num_classes, 7)

    def test_train_overrides(self):
        a = parse(["train", "--config", "conv(3)+concat", "--dataset", "cifar100", "--max-epochs", "10",
                   "--macro", "2,1,16", "--out", self.dir])
        m = a.manifest_params
        self.assertEqual(m.dataset.name, "cifar100")
        self.assertEqual(m.search.macro.num_classes, 100)
        self.assertEqual(m.search.macro.initial_filters, 16)
        self.assertEqual((m.search.train.max_epochs, m.search.train.patience), (10, 10))

    def test_search_manifest_and_jobs(self):
        a = parse(["search", "--manifest", self.manifest, "--jobs", "3", "--output", self.dir])
        m = a.manifest_params
        self.assertEqual((m.search.trials, m.search.jobs), (4, 3))
        self.assertEqual(m.output_dir, self.dir)

    def test_resume_reads_run_dir_manifest(self):
        m = yaml_parser.parse_yaml(self.manifest)
        m.output_dir = self.dir
        m.write()
        a = parse(["search", "--resume", "--output", self.dir])
        self.assertTrue(a.resume)
        self.assertEqual(a.manifest_params.config_hash(), m.config_hash())

    def test_ensemble_default_top_k(self):
        m = yaml_parser.parse_yaml(self.manifest)
        m.output_dir = self.dir
        m.write()
        self.assertEqual(parse(["ensemble", "--run-dir", self.dir]).top_k, 2)
        self.assertEqual(parse(["analyze", "--run-dir", self.dir, "--top-k", "1"]).top_k, 1)

    def test_usage_errors(self):
        for argv in (
            [],
            ["frobnicate"],
            ["sample", "--count", "0"],
            ["describe", "--config", "conv(4)+concat"],
            ["describe"],
            ["search"],
            ["search", "--resume"],
            ["ensemble", "--run-dir", os.path.join(self.dir, "nothing")],
            ["sample", "--bogus"],
        ):
            with self.assertRaises(NasParseException):
                parse(argv)


if __name__ == "__main__":
    unittest.main()
