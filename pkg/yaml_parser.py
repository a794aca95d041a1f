import os
import shutil
import tempfile
import unittest

import yaml

import datasets
import random_search
import run_params
import trainer
from archgraph import MacroConfig
from blockspace import SearchSpace
from nas_common import NasParseException
from parser_data_types import (
    TypeExc,
    boolean,
    combiner_list,
    dataset_name,
    dtype_name,
    non_negative_float,
    non_negative_integer,
    op_list,
    positive_float,
    positive_integer,
    probability,
)

# module to parse the YAML run manifest
# YAML parameter names are identical to CLI parameter names
#  except that the leading "--" is removed,
#  and they are grouped into sections:
#    search, space, macro, train, dataset
# returns a RunManifest built from defaults plus the YAML contents

SECTIONS = ("search", "space", "macro", "train", "dataset")


def parse_search(y, kw):
    for k, v in y.items():
        if k == "trials":
            kw["trials"] = positive_integer(v)
        elif k == "top-k":
            kw["top_k"] = positive_integer(v)
        elif k == "seed":
            kw["master_seed"] = non_negative_integer(v)
        elif k == "jobs":
            kw["jobs"] = positive_integer(v)
        elif k == "distinct":
            kw["distinct"] = boolean(v)
        elif k == "output":
            kw["output"] = os.path.abspath(str(v))
        else:
            raise NasParseException("search.%s: unrecognized input parameter name" % k)


def parse_space(y, kw):
    for k, v in y.items():
        if k == "branches":
            kw["branch_count"] = positive_integer(v)
        elif k == "ops":
            kw["allowed_ops"] = op_list(v)
        elif k == "combiners":
            kw["allowed_combiners"] = combiner_list(v)
        else:
            raise NasParseException("space.%s: unrecognized input parameter name" % k)


def parse_macro(y, kw):
    for k, v in y.items():
        if k == "stages":
            kw["stages"] = positive_integer(v)
        elif k == "repeats":
            kw["repeats"] = positive_integer(v)
        elif k == "initial-filters":
            kw["initial_filters"] = positive_integer(v)
        elif k == "post-add-relu":
            kw["post_add_relu"] = boolean(v)
        elif k == "input-shape" or k == "classes":
            raise NasParseException("macro.%s: taken from the dataset, not allowed in YAML input" % k)
        else:
            raise NasParseException("macro.%s: unrecognized input parameter name" % k)


def parse_train(y, kw):
    for k, v in y.items():
        if k == "batch-size":
            kw["batch_size"] = positive_integer(v)
        elif k == "lr":
            kw["lr_initial"] = positive_float(v)
        elif k == "lr-drop-every":
            kw["lr_drop_every"] = positive_integer(v)
        elif k == "lr-drop-factor":
            kw["lr_drop_factor"] = probability(v)
        elif k == "momentum":
            kw["momentum"] = probability(v)
        elif k == "weight-decay":
            kw["weight_decay"] = non_negative_float(v)
        elif k == "max-epochs":
            kw["max_epochs"] = positive_integer(v)
        elif k == "patience":
            kw["patience"] = positive_integer(v)
        elif k == "crop":
            kw["crop"] = boolean(v)
        elif k == "flip":
            kw["flip"] = boolean(v)
        elif k == "dtype":
            kw["dtype"] = dtype_name(v)
        else:
            raise NasParseException("train.%s: unrecognized input parameter name" % k)


def parse_dataset(y, kw):
    for k, v in y.items():
        if k == "name":
            kw["name"] = dataset_name(v)
        elif k == "path":
            kw["path"] = os.path.abspath(str(v)) if v is not None else None
        elif k == "val-size":
            kw["val_size"] = non_negative_integer(v)
        elif k == "crop":
            kw["crop"] = boolean(v)
        elif k == "flip":
            kw["flip"] = boolean(v)
        elif k == "classes":
            kw["classes"] = positive_integer(v)
        elif k == "image-size":
            kw["image_size"] = positive_integer(v)
        elif k == "samples-per-class":
            kw["samples_per_class"] = positive_integer(v)
        elif k == "difficulty":
            kw["difficulty"] = non_negative_float(v)
        else:
            raise NasParseException("dataset.%s: unrecognized input parameter name" % k)


SECTION_PARSERS = {
    "search": parse_search,
    "space": parse_space,
    "macro": parse_macro,
    "train": parse_train,
    "dataset": parse_dataset,
}


def load_yaml(input_yaml_file):
    try:
        with open(input_yaml_file, "r") as f:
            y = yaml.safe_load(f)
    except OSError as e:
        raise NasParseException("cannot read manifest %s: %s" % (input_yaml_file, e))
    except yaml.YAMLError as e:
        raise NasParseException("YAML parse error: %s" % e)
    if y is None:
        y = {}
    if type(y) is not dict:
        raise NasParseException("yaml.safe_load did not return dictionary - check input file format")
    return y


def parse_yaml(input_yaml_file, log_to_stderr=False, verbose=False):
    y = load_yaml(input_yaml_file)
    kw = {s: {} for s in SECTIONS}
    k = None
    try:
        for k, v in y.items():
            if k == "version":
                if v != run_params.MANIFEST_VERSION:
                    raise NasParseException(
                        "manifest version %s not supported, expected %d" % (v, run_params.MANIFEST_VERSION)
                    )
            elif k in SECTION_PARSERS:
                if v is None:
                    continue
                if type(v) is not dict:
                    raise NasParseException("%s: section must be a mapping" % k)
                SECTION_PARSERS[k](v, kw[k])
            else:
                raise NasParseException("%s: unrecognized manifest section" % k)
    except TypeExc as e:
        raise NasParseException('YAML parse error for key "%s" : %s' % (k, str(e)))
    return manifest_from_sections(kw, log_to_stderr, verbose)


def manifest_from_sections(kw, log_to_stderr=False, verbose=False):
    search = dict(kw["search"])
    output = search.pop("output", None)
    search["space"] = SearchSpace(**kw["space"])
    search["macro"] = MacroConfig(**kw["macro"])
    search["train"] = trainer.TrainConfig(**kw["train"])
    dset = dict(kw["dataset"])
    profile = datasets.get_profile(dset.pop("name", "cifar10"), **dset)
    return run_params.RunManifest(
        random_search.SearchConfig(**search), profile, output, log_to_stderr=log_to_stderr, verbose=verbose
    )


class TestYamlParse(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="yaml_parser_")
        self.fn = os.path.join(self.dir, "manifest")

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def write(self, text):
        with open(self.fn, "w") as f:
            f.write(text)

    def test_parse_empty(self):
        self.write("\n")
        m = parse_yaml(self.fn)
        self.assertEqual(m.search.trials, 50)
        self.assertEqual(m.dataset.name, "cifar10")

    def test_parse_sections(self):
        self.write(
            "search:\n  trials: 5\n  top-k: 2\n  seed: 9\n"
            "space:\n  branches: 2\n  ops: conv(3),sp_conv(5)\n  combiners: [concat]\n"
            "macro:\n  stages: 1\n  initial-filters: 8\n"
            "train:\n  max-epochs: 3\n  patience: 2\n  weight-decay: 0.0005\n"
            "dataset:\n  name: synthetic\n  classes: 3\n  image-size: 8\n"
        )
        m = parse_yaml(self.fn)
        self.assertEqual((m.search.trials, m.search.top_k, m.search.master_seed), (5, 2, 9))
        self.assertEqual(len(m.search.space.allowed_ops), 2)
        self.assertEqual(m.search.space.allowed_combiners, ("concat",))
        self.assertEqual(m.search.macro.input_shape, (8, 8, 3))
        self.assertEqual(m.search.macro.num_classes, 3)
        self.assertEqual(m.search.train.weight_decay, 0.0005)

    def test_round_trip_keeps_hash(self):
        self.write("search:\n  trials: 7\ndataset:\n  name: svhn\n  path: /var/tmp/svhn\n")
        m = parse_yaml(self.fn)
        m.output_dir = self.dir
        fn2 = m.write(os.path.join(self.dir, "manifest2"))
        m2 = parse_yaml(fn2)
        self.assertEqual(m.config_hash(), m2.config_hash())
        self.assertEqual(m2.output_dir, self.dir)

    def test_unknown_key(self):
        self.write("train:\n  warmup: 3\n")
        with self.assertRaises(NasParseException):
            parse_yaml(self.fn)
        self.write("bogus: 1\n")
        with self.assertRaises(NasParseException):
            parse_yaml(self.fn)

    def test_bad_values(self):
        for text in (
            "search:\n  trials: 0\n",
            "train:\n  crop: maybe\n",
            "space:\n  ops: conv(7)\n",
            "macro:\n  classes: 10\n",
            "dataset:\n  name: imagenet\n",
            "version: 99\n",
            "- a list\n",
            "search: [1, 2]\n",
        ):
            self.write(text)
            with self.assertRaises(NasParseException):
                parse_yaml(self.fn)


if __name__ == "__main__":
    unittest.main()
