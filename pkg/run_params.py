# -*- coding: utf-8 -*-
# this class represents the entire set of run parameters
# the macro network's input shape and class count always come from the dataset,
# and the dataset profile can switch crop/flip augmentation off

import os
import shutil
import tempfile
import unittest
from dataclasses import replace

import yaml

import datasets
import random_search
from nas_common import default_output_root
from sync_files import ensure_dir_exists, write_sync_file

MANIFEST_VERSION = 1
MANIFEST_FILE = "manifest"

# convert boolean value into 'Y' or 'N'


def bool2YN(boolval):
    if boolval:
        return "Y"
    return "N"


class RunManifest:
    def __init__(self, search=None, dataset=None, output_dir=None, log_to_stderr=False, verbose=False):
        self.version = MANIFEST_VERSION
        self.search = search or random_search.SearchConfig()
        self.dataset = dataset or datasets.get_profile("cifar10")
        self.output_dir = output_dir or os.path.join(default_output_root(), "search")
        self.log_to_stderr = log_to_stderr
        self.verbose = verbose
        self.bind_dataset()

    def bind_dataset(self):
        prof = self.dataset
        macro = replace(self.search.macro, input_shape=tuple(prof.input_shape), num_classes=prof.num_classes)
        train = self.search.train
        train = replace(train, crop=train.crop and prof.crop, flip=train.flip and prof.flip)
        self.search = replace(self.search, macro=macro, train=train)

    def __str__(self):
        return "RunManifest: version=%d dataset=%s output=%s hash=%s" % (
            self.version,
            self.dataset.name,
            self.output_dir,
            self.config_hash(),
        )

    # display results of parse so user knows what default values are
    # most important parameters come first
    # returns a list of (name, value) pairs

    def human_readable(self):
        s = self.search
        m = s.macro
        t = s.train
        return [
            ("version", "%d" % self.version),
            ("output directory", self.output_dir),
            ("dataset", self.dataset.name),
            ("dataset path", str(self.dataset.path)),
            ("trials", "%d" % s.trials),
            ("top-k", "%d" % s.top_k),
            ("master seed", "%d" % s.master_seed),
            ("parallel jobs", "%d" % s.jobs),
            ("distinct blocks?", bool2YN(s.distinct)),
            ("branches per block", "%d" % s.space.branch_count),
            ("operations", ",".join(str(o) for o in s.space.allowed_ops)),
            ("combiners", ",".join(s.space.allowed_combiners)),
            ("stages", "%d" % m.stages),
            ("blocks per stage", "%d" % m.repeats),
            ("initial filters", "%d" % m.initial_filters),
            ("input shape", "x".join(str(d) for d in m.input_shape)),
            ("classes", "%d" % m.num_classes),
            ("relu after residual add?", bool2YN(m.post_add_relu)),
            ("batch size", "%d" % t.batch_size),
            ("initial learning rate", "%g" % t.lr_initial),
            ("lr drop every (epochs)", "%d" % t.lr_drop_every),
            ("lr drop factor", "%g" % t.lr_drop_factor),
            ("momentum", "%g" % t.momentum),
            ("weight decay", "%g" % t.weight_decay),
            ("max epochs", "%d" % t.max_epochs),
            ("early-stop patience", "%d" % t.patience),
            ("random crop?", bool2YN(t.crop)),
            ("horizontal flip?", bool2YN(t.flip)),
            ("dtype", t.dtype),
            ("verbose?", bool2YN(self.verbose)),
            ("log to stderr?", bool2YN(self.log_to_stderr)),
        ]

    # sections mirror the manifest file, keys are CLI flag names

    def to_dict(self):
        s = self.search
        macro = s.macro.to_dict()
        for derived in ("input-shape", "classes"):
            del macro[derived]
        return {
            "version": self.version,
            "search": {
                "trials": s.trials,
                "top-k": s.top_k,
                "seed": s.master_seed,
                "jobs": s.jobs,
                "distinct": s.distinct,
                "output": self.output_dir,
            },
            "space": s.space.to_dict(),
            "macro": macro,
            "train": s.train.to_dict(),
            "dataset": self.dataset.to_dict(),
        }

    # where the dataset lives is not part of what a search computes

    def dataset_identity(self):
        d = self.dataset.to_dict()
        del d["path"]
        return d

    def config_hash(self):
        return self.search.config_hash(self.dataset_identity())

    def write(self, path=None):
        path = path or os.path.join(self.output_dir, MANIFEST_FILE)
        ensure_dir_exists(os.path.dirname(path) or ".")
        write_sync_file(path, yaml.safe_dump(self.to_dict(), default_flow_style=False, sort_keys=False))
        return path


class TestRunParams(unittest.TestCase):
    def test_dataset_binds_macro(self):
        m = RunManifest(dataset=datasets.get_profile("fer2013"))
        self.assertEqual(m.search.macro.input_shape, (48, 48, 1))
        self.assertEqual(m.search.macro.num_classes, 7)

    def test_profile_disables_flip(self):
        m = RunManifest(dataset=datasets.get_profile("svhn"))
        self.assertFalse(m.search.train.flip)
        self.assertTrue(m.search.train.crop)

    def test_human_readable_pairs(self):
        m = RunManifest()
        prm = dict(m.human_readable())
        self.assertEqual(prm["trials"], "50")
        self.assertEqual(prm["initial filters"], "112")
        self.assertEqual(prm["distinct blocks?"], "Y")

    def test_hash_ignores_jobs_and_output(self):
        a = RunManifest(output_dir="/var/tmp/a")
        b = RunManifest(search=replace(random_search.SearchConfig(), jobs=4), output_dir="/var/tmp/b")
        self.assertEqual(a.config_hash(), b.config_hash())
        c = RunManifest(search=replace(random_search.SearchConfig(), master_seed=1))
        self.assertNotEqual(a.config_hash(), c.config_hash())
        moved = RunManifest(dataset=datasets.get_profile("cifar10", path="/somewhere/else"))
        self.assertEqual(a.config_hash(), moved.config_hash())

    def test_write_manifest(self):
        d = tempfile.mkdtemp(prefix="run_params_")
        try:
            m = RunManifest(output_dir=d)
            path = m.write()
            with open(path) as f:
                y = yaml.safe_load(f)
            self.assertEqual(y["version"], MANIFEST_VERSION)
            self.assertEqual(y["macro"]["initial-filters"], 112)
            self.assertNotIn("classes", y["macro"])
            self.assertEqual(y["dataset"]["name"], "cifar10")
        finally:
            shutil.rmtree(d, ignore_errors=True)


if __name__ == "__main__":
    unittest.main()
