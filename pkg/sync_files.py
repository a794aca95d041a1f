# -*- coding: utf-8 -*-

"""
sync_files.py -- crash-safe writes for run directories
every whole file appears atomically (written aside, fsynced, then renamed),
every line-delimited log grows one complete fsynced record at a time
"""

import errno
import json
import os
import shutil
import tempfile
import unittest


class SyncFileException(Exception):
    pass


notyet = ".notyet"


def write_sync_file(fpath, contents):
    with open(fpath + notyet, "w") as sgf:
        sgf.write(contents)
        sgf.flush()
        os.fsync(sgf.fileno())  # file should close when you exit block
    os.rename(fpath + notyet, fpath)


# same as write_sync_file but caller streams binary content into file object


def write_sync_binary(fpath, writer):
    with open(fpath + notyet, "wb") as f:
        writer(f)
        f.flush()
        os.fsync(f.fileno())  # or else reader may not see data
    os.rename(fpath + notyet, fpath)


def write_json(fpath, obj):
    write_sync_file(fpath, json.dumps(obj, indent=4, sort_keys=True) + "\n")


# append one record as a single JSON line,
# a record is either completely in the file or not at all after fsync


def append_record(fpath, record):
    line = json.dumps(record, sort_keys=True) + "\n"
    with open(fpath, "a") as f:
        f.write(line)
        f.flush()
        os.fsync(f.fileno())


# read back a line-delimited log, refusing to guess about damaged content


def read_records(fpath):
    records = []
    if not os.path.exists(fpath):
        return records
    with open(fpath, "r") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise SyncFileException(
                    "%s line %d: incomplete record (no line terminator)" % (fpath, lineno)
                )
            try:
                records.append(json.loads(line))
            except ValueError as e:
                raise SyncFileException("%s line %d: corrupt record: %s" % (fpath, lineno, e))
    return records


# create directory if it's not already there


def ensure_dir_exists(dirpath):
    if not os.path.exists(dirpath):
        parent_path = os.path.dirname(dirpath)
        if parent_path == dirpath:
            raise SyncFileException(
                "ensure_dir_exists: "
                + "cannot obtain parent path "
                + "of non-existent path: "
                + dirpath
            )
        if parent_path:
            ensure_dir_exists(parent_path)
        try:
            os.mkdir(dirpath)
        except OSError as e:
            if e.errno != errno.EEXIST:  # another worker got there first
                raise e
    else:
        if not os.path.isdir(dirpath):
            raise SyncFileException("%s already exists and is not a directory!" % dirpath)


# avoid exception if file we wish to delete is not there


def ensure_deleted(fn):
    try:
        if os.path.lexists(fn):
            os.unlink(fn)
    except Exception as e:
        # could be race condition with another worker process
        # if was race condition, file will no longer be there
        if os.path.exists(fn):
            raise SyncFileException("exception while ensuring %s deleted: %s" % (fn, str(e)))


class TestSyncFiles(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="sync_files_")

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_write_sync_file_leaves_no_partial(self):
        fn = os.path.join(self.dir, "a.txt")
        write_sync_file(fn, "hi there")
        with open(fn) as f:
            self.assertEqual(f.read(), "hi there")
        self.assertFalse(os.path.exists(fn + notyet))

    def test_append_and_read_records(self):
        fn = os.path.join(self.dir, "trials.log")
        append_record(fn, {"index": 0, "val_acc": 0.5})
        append_record(fn, {"index": 1, "val_acc": 0.25})
        recs = read_records(fn)
        self.assertEqual([r["index"] for r in recs], [0, 1])

    def test_corrupt_record_rejected(self):
        fn = os.path.join(self.dir, "trials.log")
        with open(fn, "w") as f:
            f.write('{"index": 0}\n{"index": \n')
        with self.assertRaises(SyncFileException):
            read_records(fn)

    def test_truncated_record_rejected(self):
        fn = os.path.join(self.dir, "trials.log")
        with open(fn, "w") as f:
            f.write('{"index": 0}\n{"index": 1}')
        with self.assertRaises(SyncFileException):
            read_records(fn)

    def test_ensure_dir_exists_nested(self):
        d = os.path.join(self.dir, "x", "y", "z")
        ensure_dir_exists(d)
        ensure_dir_exists(d)
        self.assertTrue(os.path.isdir(d))

    def test_ensure_deleted_missing_ok(self):
        ensure_deleted(os.path.join(self.dir, "nope"))


if __name__ == "__main__":
    unittest.main()
