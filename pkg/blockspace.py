# -*- coding: utf-8 -*-

"""
blockspace.py -- the building-block search space
a block is an ordered list of branch operations plus one combiner,
text form is branch specs joined by "|", then "+" and the combiner name:
    conv(5)|sp_conv(1)|sp_conv(3)|rc_conv(3)+add_det
"""

import itertools
import re
import unittest
from collections import Counter
from dataclasses import dataclass

import numpy as np

from nas_common import NasParseException

OP_KINDS = ("conv", "rc_conv", "sp_conv")
KERNELS = (1, 3, 5)
COMBINERS = ("concat", "add_det", "add_stc")
ADD_COMBINERS = ("add_det", "add_stc")

# published winning blocks write "add" for the deterministic sum

COMBINER_ALIASES = {"add": "add_det"}

DEFAULT_BRANCH_COUNT = 4
MAX_BRANCH_COUNT = 8

# resample a duplicate block at most this many times, then accept it

MAX_DISTINCT_ATTEMPTS = 100


class BlockConfigError(NasParseException):
    pass


@dataclass(frozen=True)
class BranchOp:
    kind: str
    kernel: int

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise BlockConfigError("unknown operation kind %s" % repr(self.kind))
        if isinstance(self.kernel, bool) or self.kernel not in KERNELS:
            raise BlockConfigError("kernel %s not allowed, must be one of 1, 3, 5" % self.kernel)

    # fixed total order on (kind, kernel) used by canonicalize()

    def sort_key(self):
        return (OP_KINDS.index(self.kind), self.kernel)

    def __str__(self):
        return "%s(%d)" % (self.kind, self.kernel)


# the 9 operations in canonical order

CANONICAL_OPS = tuple(BranchOp(kind, k) for kind in OP_KINDS for k in KERNELS)


@dataclass(frozen=True)
class BlockConfig:
    branches: tuple
    combiner: str

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not 1 <= len(self.branches) <= MAX_BRANCH_COUNT:
            raise BlockConfigError(
                "block needs 1 to %d branches, got %d" % (MAX_BRANCH_COUNT, len(self.branches))
            )
        for b in self.branches:
            if not isinstance(b, BranchOp):
                raise BlockConfigError("branch %s is not a BranchOp" % repr(b))
        if self.combiner not in COMBINERS:
            raise BlockConfigError("unknown combiner %s" % repr(self.combiner))

    @property
    def branch_count(self):
        return len(self.branches)

    def __str__(self):
        return format_config(self)


@dataclass(frozen=True)
class SearchSpace:
    branch_count: int = DEFAULT_BRANCH_COUNT
    allowed_ops: tuple = CANONICAL_OPS
    allowed_combiners: tuple = COMBINERS

    def __post_init__(self):
        if isinstance(self.branch_count, bool) or not 1 <= self.branch_count <= MAX_BRANCH_COUNT:
            raise BlockConfigError(
                "branch count must be in 1..%d, got %s" % (MAX_BRANCH_COUNT, self.branch_count)
            )
        ops = set(self.allowed_ops)
        combiners = set(self.allowed_combiners)
        if not ops:
            raise BlockConfigError("search space needs at least one operation")
        if not combiners:
            raise BlockConfigError("search space needs at least one combiner")
        for op in ops:
            if op not in CANONICAL_OPS:
                raise BlockConfigError("operation %s is not a canonical operation" % repr(op))
        for c in combiners:
            if c not in COMBINERS:
                raise BlockConfigError("unknown combiner %s" % repr(c))

        # keep canonical order so a seeded draw picks the same element
        # however the caller listed them

        object.__setattr__(
            self, "allowed_ops", tuple(op for op in CANONICAL_OPS if op in ops)
        )
        object.__setattr__(
            self, "allowed_combiners", tuple(c for c in COMBINERS if c in combiners)
        )

    def to_dict(self):
        return {
            "branches": self.branch_count,
            "ops": [str(op) for op in self.allowed_ops],
            "combiners": list(self.allowed_combiners),
        }

    @staticmethod
    def from_dict(d):
        return SearchSpace(
            branch_count=int(d.get("branches", DEFAULT_BRANCH_COUNT)),
            allowed_ops=tuple(parse_branch(t) for t in d.get("ops", [str(o) for o in CANONICAL_OPS])),
            allowed_combiners=tuple(parse_combiner(c) for c in d.get("combiners", COMBINERS)),
        )


def space_size(space):
    return len(space.allowed_ops) ** space.branch_count * len(space.allowed_combiners)


# every configuration of the space, in a fixed order (small spaces only)


def enumerate_space(space):
    for ops in itertools.product(space.allowed_ops, repeat=space.branch_count):
        for c in space.allowed_combiners:
            yield BlockConfig(ops, c)


# branches are drawn independently per slot, duplicates allowed


def sample_block(space, rng):
    op_idx = rng.integers(0, len(space.allowed_ops), size=space.branch_count)
    comb_idx = rng.integers(0, len(space.allowed_combiners))
    return BlockConfig(
        tuple(space.allowed_ops[i] for i in op_idx), space.allowed_combiners[comb_idx]
    )


def sample_blocks(space, seed, count):
    rng = np.random.default_rng(seed)
    return [sample_block(space, rng) for _ in range(count)]


# draw until the canonical form is new, give up after MAX_DISTINCT_ATTEMPTS
# returns the block and how many draws it took


def sample_distinct_block(space, rng, seen_canonical, max_attempts=MAX_DISTINCT_ATTEMPTS):
    block = sample_block(space, rng)
    attempts = 1
    while canonicalize(block) in seen_canonical and attempts < max_attempts:
        block = sample_block(space, rng)
        attempts += 1
    return block, attempts


# add-type combiners are symmetric in their inputs, so sort the branches;
# concat output layout depends on branch order, so leave it alone


def canonicalize(config):
    if config.combiner in ADD_COMBINERS:
        return BlockConfig(tuple(sorted(config.branches, key=BranchOp.sort_key)), config.combiner)
    return config


def format_config(config):
    return "|".join(str(b) for b in config.branches) + "+" + config.combiner


branch_regex = re.compile(r"^([a-z_]+)\((\d+)\)$")


def parse_branch(token):
    tok = token.strip()
    m = branch_regex.match(tok)
    if not m:
        raise BlockConfigError("cannot parse branch token %s, expected kind(k)" % repr(tok))
    kind, kernel = m.group(1), int(m.group(2))
    if kind not in OP_KINDS:
        raise BlockConfigError("unknown operation kind %s in token %s" % (repr(kind), repr(tok)))
    if kernel not in KERNELS:
        raise BlockConfigError("kernel %d not allowed in token %s" % (kernel, repr(tok)))
    return BranchOp(kind, kernel)


def parse_combiner(token):
    tok = token.strip()
    tok = COMBINER_ALIASES.get(tok, tok)
    if tok not in COMBINERS:
        raise BlockConfigError("unknown combiner %s" % repr(token.strip()))
    return tok


def parse_config(text):
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    s = text.strip()
    if "+" not in s:
        raise BlockConfigError("missing '+combiner' in block %s" % repr(s))
    branch_part, comb_part = s.rsplit("+", 1)
    combiner = parse_combiner(comb_part)
    if not branch_part.strip():
        raise BlockConfigError("empty branch list in block %s" % repr(s))
    tokens = branch_part.split("|")
    if len(tokens) > MAX_BRANCH_COUNT:
        raise BlockConfigError("too many branches (%d) in block %s" % (len(tokens), repr(s)))
    return BlockConfig(tuple(parse_branch(t) for t in tokens), combiner)


# best blocks of the published search, one per dataset

WINNING_BLOCKS = {
    "cifar10": "conv(5)|sp_conv(1)|sp_conv(3)|rc_conv(3)+add",
    "cifar100": "conv(5)|conv(1)|sp_conv(3)|sp_conv(3)+add",
    "svhn": "conv(1)|rc_conv(3)|conv(5)|rc_conv(1)+concat",
    "fer2013": "conv(5)|conv(3)|sp_conv(5)|rc_conv(1)+concat",
}


class TestBlockSpace(unittest.TestCase):
    def test_space_size_examples(self):
        self.assertEqual(space_size(SearchSpace()), 19683)
        self.assertEqual(space_size(SearchSpace(branch_count=1)), 27)
        small = SearchSpace(
            branch_count=2,
            allowed_ops=(BranchOp("conv", 1), BranchOp("conv", 3)),
            allowed_combiners=("add_det",),
        )
        self.assertEqual(space_size(small), 4)

    def test_space_size_matches_enumeration(self):
        spaces = [
            SearchSpace(branch_count=1),
            SearchSpace(branch_count=2),
            SearchSpace(branch_count=3, allowed_combiners=("concat", "add_stc")),
            SearchSpace(
                branch_count=4,
                allowed_ops=(BranchOp("sp_conv", 5), BranchOp("rc_conv", 1), BranchOp("conv", 3)),
            ),
        ]
        for sp in spaces:
            configs = list(enumerate_space(sp))
            self.assertEqual(len(configs), space_size(sp))
            self.assertEqual(len(set(configs)), space_size(sp))

    def test_invalid_space_rejected(self):
        with self.assertRaises(BlockConfigError):
            SearchSpace(branch_count=0)
        with self.assertRaises(BlockConfigError):
            SearchSpace(allowed_ops=())
        with self.assertRaises(BlockConfigError):
            SearchSpace(allowed_combiners=("mul",))

    def test_branch_op_rejects_bad_kernel(self):
        with self.assertRaises(BlockConfigError):
            BranchOp("conv", 7)
        with self.assertRaises(BlockConfigError):
            BranchOp("pool", 3)

    def test_sample_deterministic(self):
        a = sample_blocks(SearchSpace(), 42, 5)
        b = sample_blocks(SearchSpace(), 42, 5)
        self.assertEqual([format_config(c) for c in a], [format_config(c) for c in b])

    def test_sample_frequencies_binomial(self):
        space = SearchSpace()
        n = 10000
        rng = np.random.default_rng(12345)
        counts = [Counter() for _ in range(space.branch_count)]
        for _ in range(n):
            blk = sample_block(space, rng)
            for slot, op in enumerate(blk.branches):
                counts[slot][op] += 1
        p = 1.0 / 9
        sigma = np.sqrt(p * (1 - p) / n)
        # 36 cells are checked together: a fair sampler leaves about 0.1 of them
        # outside 3 sigma, so allow at most 2 there and none outside 4 sigma
        outside_3 = 0
        for slot in range(space.branch_count):
            for op in CANONICAL_OPS:
                dev = abs(counts[slot][op] / n - p)
                self.assertLess(dev, 4 * sigma, "%s slot %d" % (op, slot))
                outside_3 += dev >= 3 * sigma
        self.assertLessEqual(outside_3, 2)

    def test_samples_valid(self):
        space = SearchSpace(branch_count=3)
        for blk in sample_blocks(space, 1, 50):
            self.assertEqual(blk.branch_count, 3)
            self.assertIn(blk.combiner, COMBINERS)

    def test_canonicalize(self):
        c = parse_config("conv(3)|conv(1)+add_det")
        self.assertEqual(format_config(canonicalize(c)), "conv(1)|conv(3)+add_det")
        c = parse_config("conv(3)|conv(1)+concat")
        self.assertEqual(canonicalize(c), c)
        for blk in sample_blocks(SearchSpace(), 3, 100):
            once = canonicalize(blk)
            self.assertEqual(canonicalize(once), once)
            self.assertEqual(Counter(once.branches), Counter(blk.branches))
            self.assertEqual(once.combiner, blk.combiner)

    def test_parse_winning_blocks(self):
        c = parse_config("conv(5)|sp_conv(1)|sp_conv(3)|rc_conv(3)+add_det")
        self.assertEqual(
            c.branches,
            (BranchOp("conv", 5), BranchOp("sp_conv", 1), BranchOp("sp_conv", 3), BranchOp("rc_conv", 3)),
        )
        self.assertEqual(c.combiner, "add_det")
        c = parse_config("conv(1)|rc_conv(3)|conv(5)|rc_conv(1)+concat")
        self.assertEqual(c.combiner, "concat")
        for text in WINNING_BLOCKS.values():
            self.assertEqual(parse_config(text).branch_count, 4)

    def test_add_alias(self):
        self.assertEqual(parse_config("conv(1)+add").combiner, "add_det")

    def test_parse_errors_name_token(self):
        with self.assertRaises(BlockConfigError) as ctx:
            parse_config("conv(7)+add_det")
        self.assertIn("7", str(ctx.exception))
        with self.assertRaises(BlockConfigError) as ctx:
            parse_config("pool(3)+add_det")
        self.assertIn("pool", str(ctx.exception))
        with self.assertRaises(BlockConfigError) as ctx:
            parse_config("conv(3)+mul")
        self.assertIn("mul", str(ctx.exception))
        with self.assertRaises(BlockConfigError):
            parse_config("+concat")
        with self.assertRaises(BlockConfigError):
            parse_config("conv(3)")

    def test_round_trip_random(self):
        for blk in sample_blocks(SearchSpace(branch_count=5), 99, 200):
            self.assertEqual(parse_config(format_config(blk)), blk)

    def test_distinct_sampling_avoids_seen(self):
        space = SearchSpace(
            branch_count=1, allowed_ops=(BranchOp("conv", 1), BranchOp("conv", 3)),
            allowed_combiners=("add_det",),
        )
        rng = np.random.default_rng(0)
        seen = {canonicalize(parse_config("conv(1)+add_det"))}
        blk, attempts = sample_distinct_block(space, rng, seen)
        self.assertEqual(format_config(blk), "conv(3)+add_det")
        # exhausted space: duplicate accepted after the attempt limit
        seen.add(canonicalize(blk))
        blk, attempts = sample_distinct_block(space, rng, seen)
        self.assertEqual(attempts, MAX_DISTINCT_ATTEMPTS)

    def test_space_dict_round_trip(self):
        sp = SearchSpace(branch_count=3, allowed_ops=(BranchOp("sp_conv", 3),), allowed_combiners=("concat",))
        self.assertEqual(SearchSpace.from_dict(sp.to_dict()), sp)


if __name__ == "__main__":
    unittest.main()
