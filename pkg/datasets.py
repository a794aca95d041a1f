# -*- coding: utf-8 -*-

"""
datasets.py -- image-classification datasets, validation splits
and a deterministic synthetic dataset for desk-scale runs

images are (count, height, width, channels) float32 scaled to [0, 1],
labels are int64 in [0, num_classes)

on-disk formats understood:
  cifar10   data_batch_1..5.bin, test_batch.bin:
            records of 1 label byte + 3072 pixel bytes (R plane, G, B, row-major 32x32)
  cifar100  train.bin, test.bin: 1 coarse + 1 fine label byte + 3072 pixel bytes,
            fine labels are used
  svhn      train_32x32.mat, test_32x32.mat: X is 32x32x3xN uint8,
            y is Nx1 with labels 1..10 where 10 stands for digit 0
  fer2013   fer2013.csv with columns emotion,pixels,Usage,
            Training / PublicTest / PrivateTest become train / val / test
  idx       train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-*:
            big-endian magic 0x00000803 (images) / 0x00000801 (labels) then dims
"""

import csv
import math
import os
import shutil
import tempfile
import unittest
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.io
from scipy.spatial.distance import pdist

from nas_common import NasDataException

SPLITS = ("train", "val", "test")

CIFAR_PIXELS = 32 * 32 * 3
CIFAR10_TRAIN_FILES = ["data_batch_%d.bin" % i for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS_PER_FILE = 10000

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# synthetic images sit around mid-gray
TINT_AMPLITUDE = 0.2
STRIPE_AMPLITUDE = 0.2
PIXEL_NOISE = 0.1


@dataclass(frozen=True, eq=False)
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    # position of each example in the set it was loaded or split from
    indices: np.ndarray = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise NasDataException("unknown split %s" % self.split)
        if self.images.ndim != 4:
            raise NasDataException("%s images must be 4-dimensional, got shape %s" % (self.split, self.images.shape))
        if len(self.images) != len(self.labels):
            raise NasDataException(
                "%s split has %d images but %d labels" % (self.split, len(self.images), len(self.labels))
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise NasDataException(
                "%s split labels span [%d, %d], outside [0, %d)"
                % (self.split, self.labels.min(), self.labels.max(), self.num_classes)
            )
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.labels)))
        for a in (self.images, self.labels, self.indices):
            a.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageSet(
            self.images[idx], self.labels[idx], self.num_classes, split, self.indices[idx]
        )


class DataSplits:
    """
    train / val / test bundle; every read of the test split is counted
    so a caller can prove that training and model selection never saw it
    """

    def __init__(self, train, val, test):
        for s, name in ((train, "train"), (val, "val"), (test, "test")):
            if s.split != name:
                raise NasDataException("expected a %s split, got %s" % (name, s.split))
        if len(val) == 0:
            raise NasDataException("validation split is empty")
        if not (train.image_shape == val.image_shape == test.image_shape):
            raise NasDataException(
                "split image shapes differ: %s / %s / %s" % (train.image_shape, val.image_shape, test.image_shape)
            )
        if not (train.num_classes == val.num_classes == test.num_classes):
            raise NasDataException("split class counts differ")
        self.train = train
        self.val = val
        self._test = test
        self.test_reads = 0

    @property
    def test(self):
        self.test_reads += 1
        return self._test

    @property
    def num_classes(self):
        return self.train.num_classes

    @property
    def image_shape(self):
        return self.train.image_shape


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    input_shape: tuple
    num_classes: int
    val_size: int = 5000
    crop: bool = True
    flip: bool = True
    path: str = None
    # synthetic only
    samples_per_class: int = 100
    difficulty: float = 0.2

    def to_dict(self):
        d = {
            "name": self.name,
            "val-size": self.val_size,
            "crop": self.crop,
            "flip": self.flip,
            "path": self.path,
        }
        if self.name == "synthetic":
            d["classes"] = self.num_classes
            d["image-size"] = self.input_shape[0]
            d["samples-per-class"] = self.samples_per_class
            d["difficulty"] = self.difficulty
        return d


PROFILES = {
    "cifar10": DatasetProfile("cifar10", (32, 32, 3), 10),
    "cifar100": DatasetProfile("cifar100", (32, 32, 3), 100),
    "svhn": DatasetProfile("svhn", (32, 32, 3), 10, flip=False),
    "fer2013": DatasetProfile("fer2013", (48, 48, 1), 7, val_size=0),
    "mnist": DatasetProfile("mnist", (28, 28, 1), 10, flip=False),
    # stripe orientation is class-keyed, a mirror image would change it
    "synthetic": DatasetProfile("synthetic", (16, 16, 3), 4, val_size=0, flip=False),
}


def get_profile(name, **overrides):
    try:
        prof = PROFILES[name]
    except KeyError:
        raise NasDataException("unknown dataset %s, choose from %s" % (name, ", ".join(sorted(PROFILES))))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if name == "synthetic":
        classes = overrides.pop("classes", prof.num_classes)
        size = overrides.pop("image_size", prof.input_shape[0])
        prof = replace(prof, num_classes=classes, input_shape=(size, size, 3))
    else:
        overrides.pop("classes", None)
        overrides.pop("image_size", None)
    return replace(prof, **overrides)


# CIFAR binary batches


def read_cifar_records(fpath, label_bytes=1, label_index=0, num_classes=10, expected_records=None):
    rec = label_bytes + CIFAR_PIXELS
    if not os.path.exists(fpath):
        raise NasDataException("missing dataset file %s" % fpath)
    raw = np.fromfile(fpath, dtype=np.uint8)
    if expected_records is not None and raw.size != expected_records * rec:
        raise NasDataException(
            "%s: expected %d bytes (%d records), found %d" % (fpath, expected_records * rec, expected_records, raw.size)
        )
    if raw.size == 0 or raw.size % rec != 0:
        raise NasDataException("%s: length %d is not a whole number of %d-byte records" % (fpath, raw.size, rec))
    recs = raw.reshape(-1, rec)
    labels = recs[:, label_index].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise NasDataException(
            "%s: label %d >= %d at byte offset %d" % (fpath, labels[bad[0]], num_classes, bad[0] * rec + label_index)
        )
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return (images.astype(np.float32) / 255.0), labels


def load_cifar10(path, records_per_file=CIFAR_RECORDS_PER_FILE):
    parts = [
        read_cifar_records(os.path.join(path, fn), expected_records=records_per_file)
        for fn in CIFAR10_TRAIN_FILES
    ]
    train = LabeledImageSet(
        np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10, "train"
    )
    images, labels = read_cifar_records(os.path.join(path, CIFAR10_TEST_FILE), expected_records=records_per_file)
    return train, LabeledImageSet(images, labels, 10, "test")


def load_cifar100(path, train_records=50000, test_records=10000):
    sets = []
    for fn, n, split in (("train.bin", train_records, "train"), ("test.bin", test_records, "test")):
        images, labels = read_cifar_records(
            os.path.join(path, fn), label_bytes=2, label_index=1, num_classes=100, expected_records=n
        )
        sets.append(LabeledImageSet(images, labels, 100, split))
    return tuple(sets)


def load_svhn(path):
    sets = []
    for fn, split in (("train_32x32.mat", "train"), ("test_32x32.mat", "test")):
        fpath = os.path.join(path, fn)
        if not os.path.exists(fpath):
            raise NasDataException("missing dataset file %s" % fpath)
        try:
            mat = scipy.io.loadmat(fpath)
            x, y = mat["X"], mat["y"]
        except (KeyError, ValueError) as e:
            raise NasDataException("%s: not an SVHN matrix file: %s" % (fpath, e))
        if x.ndim != 4 or x.shape[:3] != (32, 32, 3) or x.shape[3] != y.size:
            raise NasDataException("%s: X has shape %s, y has %d labels" % (fpath, x.shape, y.size))
        labels = y.reshape(-1).astype(np.int64)
        labels[labels == 10] = 0
        images = x.transpose(3, 0, 1, 2).astype(np.float32) / 255.0
        sets.append(LabeledImageSet(images, labels, 10, split))
    return tuple(sets)


FER_USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}


def load_fer2013(path):
    fpath = os.path.join(path, "fer2013.csv")
    if not os.path.exists(fpath):
        raise NasDataException("missing dataset file %s" % fpath)
    images = {s: [] for s in SPLITS}
    labels = {s: [] for s in SPLITS}
    with open(fpath, newline="") as f:
        for lineno, row in enumerate(csv.DictReader(f), start=2):
            try:
                split = FER_USAGE[row["Usage"].strip()]
                pix = np.array(row["pixels"].split(), dtype=np.uint8)
                label = int(row["emotion"])
            except (KeyError, ValueError, AttributeError) as e:
                raise NasDataException("%s line %d: bad record: %s" % (fpath, lineno, e))
            if pix.size != 48 * 48:
                raise NasDataException("%s line %d: %d pixels, expected 2304" % (fpath, lineno, pix.size))
            images[split].append(pix.reshape(48, 48, 1))
            labels[split].append(label)
    out = []
    for s in SPLITS:
        if not images[s]:
            raise NasDataException("%s: no %s records" % (fpath, s))
        out.append(
            LabeledImageSet(
                np.stack(images[s]).astype(np.float32) / 255.0, np.array(labels[s], dtype=np.int64), 7, s
            )
        )
    return tuple(out)


# idx files as used by MNIST-like datasets


def read_idx(fpath, expect_magic):
    if not os.path.exists(fpath):
        raise NasDataException("missing dataset file %s" % fpath)
    with open(fpath, "rb") as f:
        data = f.read()
    ndim = 3 if expect_magic == IDX_IMAGES_MAGIC else 1
    header_len = 4 * (1 + ndim)
    if len(data) < header_len:
        raise NasDataException("%s: %d bytes is shorter than the idx header" % (fpath, len(data)))
    header = np.frombuffer(data, dtype=">u4", count=1 + ndim)
    if header[0] != expect_magic:
        raise NasDataException("%s: magic 0x%08x, expected 0x%08x" % (fpath, header[0], expect_magic))
    dims = tuple(int(d) for d in header[1:])
    expected = header_len + int(np.prod(dims))
    if len(data) != expected:
        raise NasDataException("%s: expected %d bytes, found %d" % (fpath, expected, len(data)))
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx_pair(images_path, labels_path, split, num_classes=10):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise NasDataException("%s has %d images but %s has %d labels" % (images_path, len(images), labels_path, len(labels)))
    return LabeledImageSet(images[..., None].astype(np.float32) / 255.0, labels, num_classes, split)


def load_idx(path, num_classes=10):
    return (
        load_idx_pair(
            os.path.join(path, "train-images-idx3-ubyte"), os.path.join(path, "train-labels-idx1-ubyte"), "train", num_classes
        ),
        load_idx_pair(
            os.path.join(path, "t10k-images-idx3-ubyte"), os.path.join(path, "t10k-labels-idx1-ubyte"), "test", num_classes
        ),
    )


# seeded shuffle, first val_size go to validation,
# both parts keep their original relative order


def split_validation(train, val_size, seed):
    if val_size <= 0:
        raise NasDataException("validation split must be non-empty, got val_size %d" % val_size)
    if val_size >= len(train):
        raise NasDataException("val_size %d leaves no training examples out of %d" % (val_size, len(train)))
    perm = np.random.default_rng(seed).permutation(len(train))
    return train.subset(np.sort(perm[val_size:]), "train"), train.subset(np.sort(perm[:val_size]), "val")


# each class has a tint and a stripe orientation, every image a random stripe phase;
# difficulty is the spread of the per-image nuisance (tint shift, orientation wobble,
# pixel noise) in units of the gap between neighbouring classes, so either cue alone
# confuses two neighbouring classes with probability about Phi(-1 / (2 * difficulty))


def class_tints(num_classes, channels):
    c = np.arange(num_classes)[:, None]
    k = np.arange(channels)[None, :]
    return TINT_AMPLITUDE * np.cos(2.0 * math.pi * c / num_classes + 2.0 * math.pi * k / max(channels, 3))


def synth_dataset(num_classes=4, image_size=16, samples_per_class=100, difficulty=0.2, seed=0, channels=3,
                  split_ratios=(0.6, 0.2)):
    if difficulty < 0:
        raise NasDataException("difficulty must be >= 0, got %g" % difficulty)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    n_train = int(round(split_ratios[0] * samples_per_class))
    n_val = int(round(split_ratios[1] * samples_per_class))
    if n_train < 1 or n_val < 1 or n_train + n_val >= samples_per_class:
        raise NasDataException(
            "%d samples per class cannot fill train/val/test at ratios %s" % (samples_per_class, split_ratios)
        )
    tints = class_tints(num_classes, channels)
    tint_gap = float(pdist(tints).min()) if num_classes > 1 else 0.0
    angle_gap = math.pi / num_classes
    freq = 2.0 * math.pi * 3.0 / image_size
    parts = {s: ([], []) for s in SPLITS}
    for c in range(num_classes):
        n = samples_per_class
        theta = math.pi * c / num_classes + difficulty * angle_gap * rng.standard_normal(n)
        phase = rng.uniform(0.0, 2.0 * math.pi, size=n)
        proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
        stripes = STRIPE_AMPLITUDE * np.sin(freq * proj + phase[:, None, None])
        tint = tints[c][None, :] + difficulty * tint_gap * rng.standard_normal((n, channels))
        imgs = 0.5 + stripes[..., None] + tint[:, None, None, :]
        imgs = imgs + difficulty * PIXEL_NOISE * rng.standard_normal(imgs.shape)
        imgs = np.clip(imgs, 0.0, 1.0).astype(np.float32)
        bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, samples_per_class)}
        for s, (lo, hi) in bounds.items():
            parts[s][0].append(imgs[lo:hi])
            parts[s][1].append(np.full(hi - lo, c, dtype=np.int64))
    out = []
    for i, s in enumerate(SPLITS):
        images = np.concatenate(parts[s][0])
        labels = np.concatenate(parts[s][1])
        order = rng.permutation(len(labels))
        out.append(LabeledImageSet(images[order], labels[order], num_classes, s, order + i * num_classes * samples_per_class))
    return tuple(out)


def load_dataset(profile, seed=0, log=None):
    name = profile.name
    if name == "synthetic":
        h, _, c = profile.input_shape
        train, val, test = synth_dataset(
            profile.num_classes, h, profile.samples_per_class, profile.difficulty, seed, c
        )
    else:
        if not profile.path:
            raise NasDataException("dataset %s needs a path" % name)
        if name == "fer2013":
            train, val, test = load_fer2013(profile.path)
        else:
            loader = {"cifar10": load_cifar10, "cifar100": load_cifar100, "svhn": load_svhn, "mnist": load_idx}[name]
            full, test = loader(profile.path)
            train, val = split_validation(full, profile.val_size, seed)
    if train.image_shape != tuple(profile.input_shape):
        raise NasDataException(
            "dataset %s has images of shape %s, profile expects %s" % (name, train.image_shape, profile.input_shape)
        )
    if log:
        log.info("loaded %s: %d train, %d val, %d test, shape %s" % (name, len(train), len(val), len(test), train.image_shape))
    return DataSplits(train, val, test)


# per-pixel mean, only ever computed from the training split


def compute_mean_image(train):
    if train.split != "train":
        raise NasDataException("mean image must come from the train split, got %s" % train.split)
    return train.images.mean(axis=0, dtype=np.float64).astype(np.float32)


class TestDatasets(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix="datasets_")

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def write_cifar(self, fn, labels, fill=None, label_bytes=1):
        rng = np.random.default_rng(len(labels))
        recs = []
        for lab in labels:
            head = bytes(lab) if isinstance(lab, tuple) else bytes([lab])
            pix = bytes([fill] * CIFAR_PIXELS) if fill is not None else rng.integers(0, 256, CIFAR_PIXELS, dtype=np.uint8).tobytes()
            recs.append(head + pix)
        fpath = os.path.join(self.dir, fn)
        with open(fpath, "wb") as f:
            f.write(b"".join(recs))
        return fpath

    def test_cifar_one_record(self):
        fpath = self.write_cifar("one.bin", [3], fill=255)
        images, labels = read_cifar_records(fpath)
        self.assertEqual(labels.tolist(), [3])
        self.assertEqual(images.shape, (1, 32, 32, 3))
        self.assertTrue(np.all(images == 1.0))

    def test_cifar_channel_planar_layout(self):
        fpath = os.path.join(self.dir, "planar.bin")
        pix = np.zeros((3, 32, 32), dtype=np.uint8)
        pix[0, 0, 1] = 255  # red plane, row 0, column 1
        with open(fpath, "wb") as f:
            f.write(bytes([1]) + pix.tobytes())
        images, _ = read_cifar_records(fpath)
        self.assertEqual(images[0, 0, 1, 0], 1.0)
        self.assertEqual(images[0, 0, 1, 1], 0.0)
        self.assertEqual(images[0, 1, 0, 0], 0.0)

    def test_cifar_truncated(self):
        fpath = self.write_cifar("short.bin", [1, 2])
        with open(fpath, "r+b") as f:
            f.truncate(2 * 3073 - 10)
        with self.assertRaises(NasDataException) as ctx:
            read_cifar_records(fpath, expected_records=2)
        self.assertIn("expected 6146 bytes", str(ctx.exception))
        self.assertIn("found 6136", str(ctx.exception))

    def test_cifar_bad_label_offset(self):
        fpath = self.write_cifar("bad.bin", [1, 12])
        with self.assertRaises(NasDataException) as ctx:
            read_cifar_records(fpath)
        self.assertIn("offset 3073", str(ctx.exception))

    def test_load_cifar10_small_files(self):
        for fn in CIFAR10_TRAIN_FILES + [CIFAR10_TEST_FILE]:
            self.write_cifar(fn, [0, 9])
        train, test = load_cifar10(self.dir, records_per_file=2)
        self.assertEqual((len(train), len(test)), (10, 2))
        self.assertTrue(0.0 <= train.images.min() and train.images.max() <= 1.0)

    def test_load_cifar100_fine_labels(self):
        for fn in ("train.bin", "test.bin"):
            self.write_cifar(fn, [(3, 77), (19, 5)])
        train, test = load_cifar100(self.dir, train_records=2, test_records=2)
        self.assertEqual(train.labels.tolist(), [77, 5])
        self.assertEqual(test.num_classes, 100)

    def test_load_svhn(self):
        x = np.full((32, 32, 3, 3), 51, dtype=np.uint8)
        y = np.array([[10], [1], [9]], dtype=np.uint8)
        for fn in ("train_32x32.mat", "test_32x32.mat"):
            scipy.io.savemat(os.path.join(self.dir, fn), {"X": x, "y": y})
        train, test = load_svhn(self.dir)
        self.assertEqual(train.labels.tolist(), [0, 1, 9])
        self.assertEqual(train.images.shape, (3, 32, 32, 3))
        self.assertAlmostEqual(float(test.images[0, 0, 0, 0]), 0.2, places=6)

    def test_load_fer2013(self):
        pix = " ".join(["128"] * 2304)
        with open(os.path.join(self.dir, "fer2013.csv"), "w") as f:
            f.write("emotion,pixels,Usage\n")
            f.write("3,%s,Training\n" % pix)
            f.write("6,%s,Training\n" % pix)
            f.write("0,%s,PublicTest\n" % pix)
            f.write("2,%s,PrivateTest\n" % pix)
        train, val, test = load_fer2013(self.dir)
        self.assertEqual((len(train), len(val), len(test)), (2, 1, 1))
        self.assertEqual(train.image_shape, (48, 48, 1))
        self.assertEqual(train.labels.tolist(), [3, 6])

    def test_load_idx(self):
        for prefix, n in (("train", 3), ("t10k", 2)):
            header = np.array([IDX_IMAGES_MAGIC, n, 28, 28], dtype=">u4").tobytes()
            with open(os.path.join(self.dir, "%s-images-idx3-ubyte" % prefix), "wb") as f:
                f.write(header + np.zeros(n * 28 * 28, dtype=np.uint8).tobytes())
            header = np.array([IDX_LABELS_MAGIC, n], dtype=">u4").tobytes()
            with open(os.path.join(self.dir, "%s-labels-idx1-ubyte" % prefix), "wb") as f:
                f.write(header + np.arange(n, dtype=np.uint8).tobytes())
        train, test = load_idx(self.dir)
        self.assertEqual(train.image_shape, (28, 28, 1))
        self.assertEqual(test.labels.tolist(), [0, 1])

    def test_idx_bad_magic(self):
        fpath = os.path.join(self.dir, "bad-idx")
        with open(fpath, "wb") as f:
            f.write(np.array([IDX_LABELS_MAGIC, 1], dtype=">u4").tobytes() + b"\x00")
        with self.assertRaises(NasDataException):
            read_idx(fpath, IDX_IMAGES_MAGIC)

    def test_split_validation(self):
        full = LabeledImageSet(np.zeros((50, 2, 2, 1), np.float32), np.arange(50) % 10, 10, "train")
        tr, val = split_validation(full, 5, seed=3)
        self.assertEqual((len(tr), len(val)), (45, 5))
        self.assertEqual(set(tr.indices) & set(val.indices), set())
        self.assertEqual(set(tr.indices) | set(val.indices), set(range(50)))
        tr2, val2 = split_validation(full, 5, seed=3)
        np.testing.assert_array_equal(val.indices, val2.indices)
        with self.assertRaises(NasDataException):
            split_validation(full, 0, seed=3)
        with self.assertRaises(NasDataException):
            split_validation(full, 50, seed=3)

    def test_label_range_enforced(self):
        with self.assertRaises(NasDataException):
            LabeledImageSet(np.zeros((2, 1, 1, 1)), np.array([0, 4]), 4, "train")

    def test_synthetic_balanced_and_deterministic(self):
        a = synth_dataset(4, 16, 100, 0.1, seed=7)
        b = synth_dataset(4, 16, 100, 0.1, seed=7)
        self.assertEqual(sum(len(s) for s in a), 400)
        labels = np.concatenate([s.labels for s in a])
        self.assertEqual(np.bincount(labels).tolist(), [100] * 4)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.images, t.images)
            np.testing.assert_array_equal(s.labels, t.labels)
        idx = np.concatenate([s.indices for s in a])
        self.assertEqual(len(set(idx.tolist())), 400)
        for s in a:
            self.assertTrue(0.0 <= s.images.min() and s.images.max() <= 1.0)

    # classify test images by their mean color alone: exact at difficulty 0,
    # near exact at a low difficulty, far from it once the tint shift spans the class gap

    def test_difficulty_controls_overlap(self):
        tints = class_tints(4, 3)

        def tint_accuracy(difficulty):
            _, _, test = synth_dataset(4, 16, 200, difficulty, seed=5)
            colors = test.images.mean(axis=(1, 2), dtype=np.float64)
            return float(np.mean(np.argmax(colors @ tints.T, axis=1) == test.labels))

        self.assertEqual(tint_accuracy(0.0), 1.0)
        self.assertGreater(tint_accuracy(0.2), 0.9)
        self.assertLess(tint_accuracy(1.0), 0.8)
        with self.assertRaises(NasDataException):
            synth_dataset(2, 8, 20, -0.1)

    def test_synthetic_profile_splits(self):
        splits = load_dataset(get_profile("synthetic", classes=2, image_size=8, samples_per_class=20), seed=1)
        self.assertEqual(splits.image_shape, (8, 8, 3))
        self.assertEqual(splits.num_classes, 2)
        self.assertEqual(splits.test_reads, 0)
        _ = splits.test
        self.assertEqual(splits.test_reads, 1)

    def test_profiles(self):
        self.assertFalse(get_profile("svhn").flip)
        self.assertFalse(get_profile("mnist").flip)
        self.assertFalse(get_profile("synthetic").flip)
        self.assertTrue(get_profile("cifar10").flip)
        self.assertEqual(get_profile("cifar10").val_size, 5000)
        with self.assertRaises(NasDataException):
            get_profile("imagenet")

    def test_mean_image_train_only(self):
        train, val, _ = synth_dataset(2, 8, 20, 0.0, seed=0)
        mean = compute_mean_image(train)
        self.assertEqual(mean.shape, (8, 8, 3))
        with self.assertRaises(NasDataException):
            compute_mean_image(val)


if __name__ == "__main__":
    unittest.main()
