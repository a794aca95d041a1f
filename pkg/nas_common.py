# -*- coding: utf-8 -*-

"""
nas_common.py -- constants, exceptions and logging shared by blocksearch modules
Licensed under the Apache License at http://www.apache.org/licenses/LICENSE-2.0
"""

import hashlib
import json
import logging
import os
import unittest
from os.path import join

OK = 0  # process return code for success
NOTOK = 1

# CLI exit codes

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

# default output root, environment variable wins,
# otherwise fall back the same way temporary files do

OUTPUT_ROOT_ENV = "BLOCKSEARCH_OUTPUT_ROOT"


def default_output_root():
    root = os.getenv(OUTPUT_ROOT_ENV)
    if root:
        return root
    tmp_dir = os.getenv("TMPDIR")
    if tmp_dir is None:  # windows case
        tmp_dir = os.getenv("TEMP")
    if tmp_dir is None:  # assume POSIX-like
        tmp_dir = "/var/tmp"
    return join(tmp_dir, "blocksearch")


# if we throw exceptions, do it with one of these
# so caller can specifically catch them


class NasParseException(Exception):
    pass


class NasDataException(Exception):
    pass


class NasRunException(Exception):
    pass


class NasResultException(Exception):
    pass


class NasNumericException(Exception):
    def __init__(self, opname, detail=""):
        self.opname = opname
        self.detail = detail

    def __str__(self):
        msg = "non-finite values produced by " + self.opname
        if self.detail:
            msg += " (" + self.detail + ")"
        return msg


# map an exception onto the CLI exit code for it


def exit_code_for(e):
    if isinstance(e, NasParseException):
        return EXIT_USAGE
    if isinstance(e, (NasDataException, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_RUNTIME


# we have to avoid getting the logger for a name more than once,
# or else we add a handler more than once to it
# and get duplicate log messages

loggers = {}


def start_log(name, log_path=None, log_to_stderr=False, verbose=False):
    try:
        log = loggers[name]
    except KeyError:
        log = logging.getLogger("blocksearch." + name)
        loggers[name] = log
        if log_to_stderr or log_path is None:
            h = logging.StreamHandler()
        else:
            h = logging.FileHandler(log_path)
        log_format = name + " %(asctime)s - %(levelname)s - %(message)s"
        h.setFormatter(logging.Formatter(log_format))
        log.addHandler(h)
        log.propagate = False
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    return log


# release a cached logger so its file handle is closed

def stop_log(name):
    log = loggers.pop(name, None)
    if log is None:
        return
    for h in list(log.handlers):
        h.close()
        log.removeHandler(h)


# canonical JSON text: same object always gives same bytes


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def text_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# per-trial seed is a pure function of (master seed, trial index)
# so execution order and parallelism cannot change it


def derive_seed(master_seed, index):
    digest = hashlib.sha256(("%d:%d" % (master_seed, index)).encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


class TestCommon(unittest.TestCase):
    def test_derive_seed_pure(self):
        self.assertEqual(derive_seed(7, 3), derive_seed(7, 3))
        self.assertNotEqual(derive_seed(7, 3), derive_seed(7, 4))
        self.assertNotEqual(derive_seed(7, 3), derive_seed(8, 3))
        self.assertGreaterEqual(derive_seed(1, 1), 0)

    def test_canonical_json_key_order(self):
        self.assertEqual(canonical_json({"b": 1, "a": 2}), canonical_json({"a": 2, "b": 1}))

    def test_exit_codes(self):
        self.assertEqual(exit_code_for(NasParseException("x")), EXIT_USAGE)
        self.assertEqual(exit_code_for(NasDataException("x")), EXIT_DATA)
        self.assertEqual(exit_code_for(NasRunException("x")), EXIT_RUNTIME)
        self.assertEqual(exit_code_for(NasNumericException("conv2d")), EXIT_RUNTIME)

    def test_logger_cached(self):
        a = start_log("common-test")
        b = start_log("common-test")
        self.assertIs(a, b)
        self.assertEqual(len(a.handlers), 1)
        stop_log("common-test")


if __name__ == "__main__":
    unittest.main()
