"""Dataset ingestion and synthetic toy benchmarks.

On-disk bundle format: one directory holding ``manifest.json`` plus flat
little-endian arrays, one file per array (``<name>.f32`` for float32,
``<name>.i32`` for int32, row-major). The format round-trips bit-exactly
and needs no archive library.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import torch

from .core import (DatasetBundle, RngStream, ValidationError, require_valid,
                   seeded_rng, validate_bundle)

# semantic prototype widths of the named benchmarks under the proposed split
BENCHMARK_PROTO_DIMS = {"awa2": 85, "sun": 102, "cub": 1024}

_DTYPES = {"f32": np.float32, "i32": np.int32}
_ARRAY_NAMES = ("features", "labels", "prototypes", "seen_classes",
                "unseen_classes", "train_seen", "test_seen", "test_unseen")

TOY_TRAIN_FRACTION = 0.8


class LoadError(ValidationError):
    """A bundle directory that cannot be read back into a valid bundle."""


@dataclass
class BundleManifest:
    """Names, sizes, and dtypes of the arrays in one bundle directory."""

    dataset: str
    d_v: int
    d_a: int
    n_classes: int
    arrays: dict[str, dict]          # name -> {file, count, dtype}
    split_sizes: dict[str, int]
    class_names: list[str] | None = None

    def to_dict(self) -> dict:
        doc = {"dataset": self.dataset, "d_v": self.d_v, "d_a": self.d_a,
               "n_classes": self.n_classes, "arrays": self.arrays,
               "split_sizes": self.split_sizes}
        if self.class_names is not None:
            doc["class_names"] = self.class_names
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "BundleManifest":
        missing = [k for k in ("dataset", "d_v", "d_a", "n_classes",
                               "arrays", "split_sizes") if k not in doc]
        if missing:
            raise LoadError(f"manifest.json missing keys: {missing}")
        return BundleManifest(dataset=doc["dataset"], d_v=int(doc["d_v"]),
                              d_a=int(doc["d_a"]), n_classes=int(doc["n_classes"]),
                              arrays=doc["arrays"], split_sizes=doc["split_sizes"],
                              class_names=doc.get("class_names"))


def _read_array(dirpath: str, name: str, entry: dict) -> np.ndarray:
    fname = entry["file"]
    count = int(entry["count"])
    dtype_name = entry["dtype"]
    if dtype_name not in _DTYPES:
        raise LoadError(f"array {name}: unsupported dtype {dtype_name!r}")
    dtype = _DTYPES[dtype_name]
    path = os.path.join(dirpath, fname)
    if not os.path.isfile(path):
        raise LoadError(f"array {name}: missing file {fname}")
    expected_bytes = count * np.dtype(dtype).itemsize
    actual_bytes = os.path.getsize(path)
    if actual_bytes != expected_bytes:
        raise LoadError(
            f"array {name}: file {fname} holds {actual_bytes} bytes, "
            f"manifest declares {count} elements ({expected_bytes} bytes)")
    data = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    return data.astype(dtype, copy=False)


def load_bundle(dirpath: str) -> DatasetBundle:
    """Read a bundle directory; every failure names the offending file."""
    manifest_path = os.path.join(dirpath, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise LoadError(f"missing file manifest.json in {dirpath}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = BundleManifest.from_dict(json.load(fh))
        except json.JSONDecodeError as e:
            raise LoadError(f"manifest.json is not valid JSON: {e}") from e

    key = manifest.dataset.lower()
    if key in BENCHMARK_PROTO_DIMS and manifest.d_a != BENCHMARK_PROTO_DIMS[key]:
        raise LoadError(
            f"dataset {manifest.dataset!r} requires d_a = "
            f"{BENCHMARK_PROTO_DIMS[key]}, manifest declares {manifest.d_a}")

    missing = [n for n in _ARRAY_NAMES if n not in manifest.arrays]
    if missing:
        raise LoadError(f"manifest.json lacks array entries: {missing}")

    raw = {name: _read_array(dirpath, name, manifest.arrays[name])
           for name in _ARRAY_NAMES}

    n_samples = raw["labels"].size
    if raw["features"].size != n_samples * manifest.d_v:
        raise LoadError(
            f"array features: {manifest.arrays['features']['file']} holds "
            f"{raw['features'].size} elements, expected {n_samples} x {manifest.d_v}")
    if raw["prototypes"].size != manifest.n_classes * manifest.d_a:
        raise LoadError(
            f"array prototypes: {manifest.arrays['prototypes']['file']} holds "
            f"{raw['prototypes'].size} elements, expected "
            f"{manifest.n_classes} x {manifest.d_a}")
    for split in ("train_seen", "test_seen", "test_unseen"):
        declared = int(manifest.split_sizes.get(split, -1))
        if raw[split].size != declared:
            raise LoadError(
                f"array {split}: {manifest.arrays[split]['file']} holds "
                f"{raw[split].size} indices, manifest declares {declared}")

    bundle = DatasetBundle(
        name=manifest.dataset,
        features=raw["features"].reshape(n_samples, manifest.d_v),
        labels=raw["labels"].astype(np.int64),
        prototypes=raw["prototypes"].reshape(manifest.n_classes, manifest.d_a),
        seen_classes=raw["seen_classes"].astype(np.int64),
        unseen_classes=raw["unseen_classes"].astype(np.int64),
        train_seen=raw["train_seen"].astype(np.int64),
        test_seen=raw["test_seen"].astype(np.int64),
        test_unseen=raw["test_unseen"].astype(np.int64),
        class_names=manifest.class_names,
    )
    violations = validate_bundle(bundle)
    if violations:
        raise LoadError(f"bundle in {dirpath} violates invariants: "
                        + "; ".join(str(v) for v in violations))
    return bundle


def save_bundle(bundle: DatasetBundle, dirpath: str, force: bool = False) -> None:
    """Inverse writer for :func:`load_bundle`; bit-exact round trip."""
    require_valid(bundle)
    if os.path.isdir(dirpath) and os.listdir(dirpath) and not force:
        raise ValidationError(f"target directory {dirpath} is not empty (use force)")
    os.makedirs(dirpath, exist_ok=True)

    payload = {
        "features": bundle.features.astype(np.float32, copy=False).ravel(),
        "labels": bundle.labels.astype(np.int32),
        "prototypes": bundle.prototypes.astype(np.float32, copy=False).ravel(),
        "seen_classes": bundle.seen_classes.astype(np.int32),
        "unseen_classes": bundle.unseen_classes.astype(np.int32),
        "train_seen": bundle.train_seen.astype(np.int32),
        "test_seen": bundle.test_seen.astype(np.int32),
        "test_unseen": bundle.test_unseen.astype(np.int32),
    }
    arrays = {}
    for name, arr in payload.items():
        suffix = "f32" if arr.dtype == np.float32 else "i32"
        fname = f"{name}.{suffix}"
        arr.astype(arr.dtype.newbyteorder("<")).tofile(os.path.join(dirpath, fname))
        arrays[name] = {"file": fname, "count": int(arr.size), "dtype": suffix}

    manifest = BundleManifest(
        dataset=bundle.name, d_v=bundle.d_v, d_a=bundle.d_a,
        n_classes=bundle.n_classes, arrays=arrays,
        split_sizes={"train_seen": int(bundle.train_seen.size),
                     "test_seen": int(bundle.test_seen.size),
                     "test_unseen": int(bundle.test_unseen.size)},
        class_names=bundle.class_names)
    with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# toy data with known ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToySpec:
    """Synthetic benchmark: class attributes drive features linearly."""

    n_seen: int = 8
    n_unseen: int = 4
    d_v: int = 32
    d_a: int = 8
    samples_per_class: int = 50
    sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_seen < 2 or self.n_unseen < 2:
            raise ValidationError("toy spec needs >= 2 seen and >= 2 unseen classes")
        if self.sigma < 0:
            raise ValidationError("toy noise scale must be >= 0")
        if min(self.d_v, self.d_a, self.samples_per_class) < 1:
            raise ValidationError("toy dims and samples_per_class must be >= 1")


@dataclass(frozen=True)
class ToyTruth:
    """Generating parameters of a toy bundle, for oracle checks."""

    attributes: np.ndarray  # [n_classes, d_a], uniform [0, 1]
    feature_map: np.ndarray  # [d_a, d_v], standard normal entries


def toy_truth(spec: ToySpec) -> ToyTruth:
    """Regenerate the attribute table and linear map for a given spec."""
    spec.validate()
    root = seeded_rng(spec.seed).derive("toy")
    n_classes = spec.n_seen + spec.n_unseen
    attrs = root.derive("attributes").generator.random((n_classes, spec.d_a))
    fmap = root.derive("map").generator.standard_normal((spec.d_a, spec.d_v))
    return ToyTruth(attributes=attrs.astype(np.float32),
                    feature_map=fmap.astype(np.float32))


def make_toy(spec: ToySpec) -> DatasetBundle:
    """Toy bundle: features x = a_c M + sigma * eps, proposed-split layout.

    Seen classes get the low ids; each seen class contributes the first 80%
    of its rows to train_seen and the rest to test_seen. All unseen-class
    rows land in test_unseen.
    """
    truth = toy_truth(spec)
    root = seeded_rng(spec.seed).derive("toy")
    n_classes = spec.n_seen + spec.n_unseen
    m = spec.samples_per_class
    noise = root.derive("noise").generator.standard_normal(
        (n_classes * m, spec.d_v)).astype(np.float32)

    labels = np.repeat(np.arange(n_classes, dtype=np.int64), m)
    clean = truth.attributes[labels] @ truth.feature_map
    features = (clean + np.float32(spec.sigma) * noise).astype(np.float32)

    seen = np.arange(spec.n_seen, dtype=np.int64)
    unseen = np.arange(spec.n_seen, n_classes, dtype=np.int64)
    n_train = max(1, int(round(TOY_TRAIN_FRACTION * m)))
    train_seen, test_seen = [], []
    for c in seen:
        rows = np.arange(c * m, (c + 1) * m, dtype=np.int64)
        train_seen.append(rows[:n_train])
        test_seen.append(rows[n_train:])
    test_unseen = np.arange(spec.n_seen * m, n_classes * m, dtype=np.int64)

    bundle = DatasetBundle(
        name="toy",
        features=features,
        labels=labels,
        prototypes=truth.attributes,
        seen_classes=seen,
        unseen_classes=unseen,
        train_seen=np.concatenate(train_seen),
        test_seen=np.concatenate(test_seen),
        test_unseen=test_unseen,
        class_names=[f"toy_{c:02d}" for c in range(n_classes)],
    )
    require_valid(bundle)
    return bundle


def normalize_features(bundle: DatasetBundle) -> DatasetBundle:
    """Optional min-max rescale of features to [0, 1] per dimension.

    Scaling parameters come from train_seen only, so test data never leaks
    into them. Off by default everywhere; features are otherwise used
    exactly as loaded.
    """
    train = bundle.features[bundle.train_seen]
    lo = train.min(axis=0)
    span = train.max(axis=0) - lo
    span[span == 0] = 1.0
    feats = ((bundle.features - lo) / span).astype(np.float32)
    return DatasetBundle(
        name=bundle.name, features=feats, labels=bundle.labels,
        prototypes=bundle.prototypes, seen_classes=bundle.seen_classes,
        unseen_classes=bundle.unseen_classes, train_seen=bundle.train_seen,
        test_seen=bundle.test_seen, test_unseen=bundle.test_unseen,
        class_names=bundle.class_names)


# ---------------------------------------------------------------------------
# batch streaming
# ---------------------------------------------------------------------------

def batches(bundle: DatasetBundle, batch_size: int, rng: RngStream
            ) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """One shuffled epoch over train_seen; short final batch dropped.

    Yields (features, labels, prototypes-of-labels) with prototype rows
    taken from the predefined table by label.
    """
    idx = bundle.train_seen
    if idx.size == 0:
        raise ValidationError("train_seen split is empty")
    if batch_size > idx.size:
        raise ValidationError(
            f"batch_size {batch_size} exceeds train_seen size {idx.size}")
    order = idx[rng.permutation(idx.size)]
    for start in range(0, idx.size - batch_size + 1, batch_size):
        rows = order[start:start + batch_size]
        labels = bundle.labels[rows]
        yield (torch.from_numpy(bundle.features[rows]),
               torch.from_numpy(labels),
               torch.from_numpy(bundle.prototypes[labels]))
