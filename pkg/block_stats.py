# -*- coding: utf-8 -*-

"""
block_stats.py -- reduce a search's blocks to component occurrence statistics

branch components are counted once per branch slot regardless of position,
combiners once per block.  For the top-k set the expected count of a bucket,
if the top-k had been picked at random, is count_all * |top| / |configs|.
Four families of buckets are reported:
    op        (kind, kernel) pairs, 9 buckets
    kind      conv / rc_conv / sp_conv
    kernel    1 / 3 / 5
    combiner  concat / add_det / add_stc
"""

import csv
import io
import os
import shutil
import tempfile
import unittest
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.stats

import blockspace
import random_search
from blockspace import CANONICAL_OPS, COMBINERS, KERNELS, OP_KINDS
from nas_common import NasResultException, canonical_json, start_log
from sync_files import write_sync_file

HISTOGRAM_FILE = "histogram.csv"
FAMILIES = ("op", "kind", "kernel", "combiner")
CSV_HEADER = ["component", "count_all", "count_top", "expected_top"]


@dataclass(frozen=True)
class Bucket:
    family: str
    component: str
    count_all: int
    count_top: int
    expected_top: float

    @property
    def label(self):
        return "%s:%s" % (self.family, self.component)


# every bucket of a family is present, even when its count is 0


def family_keys(family):
    if family == "op":
        return [str(op) for op in CANONICAL_OPS]
    if family == "kind":
        return list(OP_KINDS)
    if family == "kernel":
        return [str(k) for k in KERNELS]
    return list(COMBINERS)


def tally(configs):
    counts = {f: Counter() for f in FAMILIES}
    for c in configs:
        for b in c.branches:
            counts["op"][str(b)] += 1
            counts["kind"][b.kind] += 1
            counts["kernel"][str(b.kernel)] += 1
        counts["combiner"][c.combiner] += 1
    return counts


class ComponentHistogram:
    def __init__(self, buckets, config_count, top_count):
        self.buckets = buckets
        self.config_count = config_count
        self.top_count = top_count

    def family(self, name):
        return [b for b in self.buckets if b.family == name]

    def bucket(self, family, component):
        for b in self.buckets:
            if b.family == family and b.component == component:
                return b
        raise KeyError("%s:%s" % (family, component))

    def totals(self, family):
        fam = self.family(family)
        return (
            sum(b.count_all for b in fam),
            sum(b.count_top for b in fam),
            float(np.sum([b.expected_top for b in fam])),
        )

    # one-sided p-value that the top set holds at least count_top of this
    # bucket when its members are drawn at random from all configs

    def enrichment_pvalue(self, bucket):
        fam_all, fam_top, _ = self.totals(bucket.family)
        if fam_all == 0 or fam_top == 0:
            return 1.0
        return float(scipy.stats.hypergeom.sf(bucket.count_top - 1, fam_all, bucket.count_all, fam_top))

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for b in self.buckets:
            w.writerow([b.label, b.count_all, b.count_top, "%.4f" % b.expected_top])
        return buf.getvalue()

    def report_lines(self):
        lines = ["%d configs, %d in the top set" % (self.config_count, self.top_count)]
        lines.append("%-20s %8s %8s %10s %8s" % ("component", "all", "top", "expected", "p"))
        for b in self.buckets:
            lines.append(
                "%-20s %8d %8d %10.2f %8.3f"
                % (b.label, b.count_all, b.count_top, b.expected_top, self.enrichment_pvalue(b))
            )
        return lines


def check_subset(configs, top):
    have = Counter(configs)
    for c, n in Counter(top).items():
        if have[c] < n:
            raise NasResultException("top block %s is not among the searched blocks" % c)


def component_histogram(configs, top):
    configs = list(configs)
    top = list(top)
    if not configs:
        raise NasResultException("cannot build a component histogram from no blocks")
    check_subset(configs, top)
    all_counts = tally(configs)
    top_counts = tally(top)
    buckets = []
    for f in FAMILIES:
        for key in family_keys(f):
            n = all_counts[f][key]
            buckets.append(Bucket(f, key, n, top_counts[f][key], n * len(top) / len(configs)))
    return ComponentHistogram(buckets, len(configs), len(top))


# successful and failed trials are all "searched"; the top set comes from
# the same ranking the ensemble uses


def analyze_run(run_dir, k, log=None):
    if log is None:
        log = start_log("analyze", log_to_stderr=True)
    records = random_search.load_records(run_dir)
    top = random_search.select_top_k(records, k, log=log)
    hist = component_histogram(
        [blockspace.parse_config(r.block) for r in records],
        [blockspace.parse_config(r.block) for r in top],
    )
    write_sync_file(os.path.join(run_dir, HISTOGRAM_FILE), hist.csv_text())
    for line in hist.report_lines():
        log.info(line)
    return hist


class TestBlockStats(unittest.TestCase):
    def setUp(self):
        self.parse = blockspace.parse_config
        self.configs = [
            self.parse("conv(5)|sp_conv(1)+add_det"),
            self.parse("conv(5)|conv(3)+concat"),
            self.parse("rc_conv(1)|sp_conv(1)+add_det"),
        ]

    def test_hand_tally(self):
        h = component_histogram(self.configs, self.configs[:1])
        self.assertEqual(h.bucket("op", "conv(5)").count_all, 2)
        self.assertEqual(h.bucket("op", "sp_conv(1)").count_all, 2)
        self.assertEqual(h.bucket("op", "conv(3)").count_all, 1)
        self.assertEqual(h.bucket("op", "rc_conv(1)").count_all, 1)
        self.assertEqual(h.bucket("op", "sp_conv(5)").count_all, 0)
        self.assertEqual(h.bucket("kind", "conv").count_all, 3)
        self.assertEqual(h.bucket("kernel", "1").count_all, 3)
        self.assertEqual(h.bucket("kernel", "5").count_all, 2)
        self.assertEqual(h.bucket("combiner", "add_det").count_all, 2)
        self.assertEqual(h.bucket("combiner", "concat").count_all, 1)
        self.assertEqual(h.bucket("op", "conv(5)").count_top, 1)
        self.assertAlmostEqual(h.bucket("op", "conv(5)").expected_top, 2.0 / 3.0)

    def test_expected_count(self):
        a = self.parse("conv(3)+concat")
        b = self.parse("sp_conv(5)+concat")
        configs = [a] * 20 + [b] * 30
        top = [a] * 4 + [b] * 6
        h = component_histogram(configs, top)
        self.assertEqual(h.bucket("op", "conv(3)").count_all, 20)
        self.assertEqual(h.bucket("op", "conv(3)").expected_top, 4.0)

    def test_identical_configs(self):
        c = self.parse("conv(5)|conv(1)|sp_conv(3)|sp_conv(3)+add_det")
        h = component_histogram([c] * 50, [c] * 10)
        for b in h.buckets:
            self.assertEqual(b.count_top, b.count_all * 10 / 50)
            self.assertEqual(b.expected_top, b.count_top)

    def test_sum_invariants_random_sets(self):
        space = blockspace.SearchSpace()
        for seed in range(20):
            configs = blockspace.sample_blocks(space, seed, 50)
            top = configs[:10]
            h = component_histogram(configs, top)
            for f in ("op", "kind", "kernel"):
                all_n, top_n, exp = h.totals(f)
                self.assertEqual(all_n, 4 * 50)
                self.assertEqual(top_n, 4 * 10)
                self.assertAlmostEqual(exp, (10 / 50) * all_n)
            all_n, top_n, exp = h.totals("combiner")
            self.assertEqual((all_n, top_n), (50, 10))
            self.assertAlmostEqual(exp, 10.0)

    def test_bucket_counts(self):
        h = component_histogram(self.configs, [])
        self.assertEqual([len(h.family(f)) for f in FAMILIES], [9, 3, 3, 3])

    def test_errors(self):
        with self.assertRaises(NasResultException):
            component_histogram([], [])
        with self.assertRaises(NasResultException):
            component_histogram(self.configs, [self.parse("rc_conv(5)+add_stc")])
        with self.assertRaises(NasResultException):
            component_histogram(self.configs[:1], self.configs[:1] * 2)

    def test_csv(self):
        h = component_histogram(self.configs, self.configs[1:])
        rows = list(csv.reader(io.StringIO(h.csv_text())))
        self.assertEqual(rows[0], CSV_HEADER)
        self.assertEqual(len(rows), 1 + 18)
        self.assertEqual(rows[1][0], "op:conv(1)")
        self.assertIn(["combiner:concat", "1", "1", "0.6667"], rows)

    def test_enrichment_pvalue(self):
        a = self.parse("conv(3)+concat")
        b = self.parse("sp_conv(5)+concat")
        h = component_histogram([a] * 10 + [b] * 10, [a] * 5)
        self.assertLess(h.enrichment_pvalue(h.bucket("op", "conv(3)")), 0.05)
        self.assertEqual(h.enrichment_pvalue(h.bucket("op", "sp_conv(5)")), 1.0)

    def test_analyze_run(self):
        d = tempfile.mkdtemp(prefix="block_stats_")
        try:
            recs = [random_search.TestRandomSearch.fake_record(i, 0.1 * i) for i in range(5)]
            recs[2].status = "failed"
            with open(os.path.join(d, random_search.TRIALS_LOG), "w") as f:
                for r in recs:
                    f.write(canonical_json(r.to_dict()) + "\n")
            h = analyze_run(d, 2, log=start_log("block-stats-test"))
            self.assertEqual((h.config_count, h.top_count), (5, 2))
            self.assertTrue(os.path.exists(os.path.join(d, HISTOGRAM_FILE)))
        finally:
            shutil.rmtree(d, ignore_errors=True)


if __name__ == "__main__":
    unittest.main()
