"""Domain types, experiment configuration, and deterministic randomness.

Everything stochastic in the package draws from :class:`RngStream` handles
derived from a single integer seed, so a full pipeline run is reproducible
bit for bit. Dataset bundles and configs are validated here; training code
assumes validated inputs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np
import torch


class ValidationError(ValueError):
    """Raised when user-supplied values violate a documented precondition."""


PRIOR_FORMS = ("learned", "none", "random", "external")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def harmonic_mean(u: float, s: float) -> float:
    """Harmonic mean 2US/(U+S) of two rates in [0, 1].

    Returns 0.0 for the degenerate U + S = 0 case so that collapsed
    classifiers still produce a report.
    """
    if not (0.0 <= u <= 1.0) or not (0.0 <= s <= 1.0):
        raise ValidationError(f"rates must lie in [0, 1], got U={u}, S={s}")
    if u + s == 0.0:
        return 0.0
    return 2.0 * u * s / (u + s)


# ---------------------------------------------------------------------------
# dataset bundle
# ---------------------------------------------------------------------------

@dataclass
class DatasetBundle:
    """Visual features, labels, class split, and semantic prototypes.

    Labels are dense integers in [0, n_classes); ``prototypes[c]`` is the
    predefined semantic prototype of class ``c``. The three split index
    arrays partition samples into seen-class train/test and unseen-class
    test sets.
    """

    name: str
    features: np.ndarray        # [n_samples, d_v] float32
    labels: np.ndarray          # [n_samples] int64
    prototypes: np.ndarray      # [n_classes, d_a] float32
    seen_classes: np.ndarray    # sorted class ids
    unseen_classes: np.ndarray  # sorted class ids
    train_seen: np.ndarray      # sample indices
    test_seen: np.ndarray
    test_unseen: np.ndarray
    class_names: list[str] | None = None

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def d_v(self) -> int:
        return int(self.features.shape[1])

    @property
    def d_a(self) -> int:
        return int(self.prototypes.shape[1])

    def class_name(self, c: int) -> str:
        if self.class_names is not None:
            return self.class_names[c]
        return f"class_{c:03d}"


@dataclass(frozen=True)
class Violation:
    """One failed bundle invariant with the offending indices."""

    invariant: str
    detail: str
    indices: tuple[int, ...] = ()

    def __str__(self) -> str:
        suffix = f" (indices {list(self.indices)})" if self.indices else ""
        return f"{self.invariant}: {self.detail}{suffix}"


def _as_set(a: np.ndarray) -> set[int]:
    return set(int(v) for v in np.asarray(a).ravel())


def validate_bundle(bundle: DatasetBundle) -> list[Violation]:
    """Check every DatasetBundle invariant; returns violations as data."""
    out: list[Violation] = []

    if bundle.features.ndim != 2 or bundle.prototypes.ndim != 2:
        out.append(Violation("shape", "features and prototypes must be 2-D"))
        return out
    if bundle.labels.shape[0] != bundle.features.shape[0]:
        out.append(Violation(
            "shape",
            f"{bundle.labels.shape[0]} labels for {bundle.features.shape[0]} feature rows"))
        return out

    n = bundle.n_samples
    n_classes = bundle.n_classes
    seen = _as_set(bundle.seen_classes)
    unseen = _as_set(bundle.unseen_classes)

    overlap = sorted(seen & unseen)
    if overlap:
        out.append(Violation("disjointness",
                             "classes appear in both seen and unseen sets",
                             tuple(overlap)))

    bad_labels = sorted(_as_set(bundle.labels) - (seen | unseen))
    if bad_labels:
        out.append(Violation("coverage",
                             "label values outside seen ∪ unseen",
                             tuple(bad_labels)))
    out_of_range = sorted(v for v in _as_set(bundle.labels) if v < 0 or v >= n_classes)
    if out_of_range:
        out.append(Violation("label-range",
                             f"labels outside [0, {n_classes})",
                             tuple(out_of_range)))

    splits = {"train_seen": bundle.train_seen,
              "test_seen": bundle.test_seen,
              "test_unseen": bundle.test_unseen}
    for name, idx in splits.items():
        bad = sorted(int(i) for i in np.asarray(idx).ravel() if i < 0 or i >= n)
        if bad:
            out.append(Violation("index-range",
                                 f"{name} holds sample indices outside [0, {n})",
                                 tuple(bad)))
    in_range = {name: np.asarray([i for i in np.asarray(idx).ravel()
                                  if 0 <= i < n], dtype=np.int64)
                for name, idx in splits.items()}

    for name, allowed in (("train_seen", seen), ("test_seen", seen),
                          ("test_unseen", unseen)):
        idx = in_range[name]
        if idx.size == 0:
            continue
        mask = ~np.isin(bundle.labels[idx], sorted(allowed))
        if mask.any():
            out.append(Violation(
                "split-membership",
                f"{name} contains samples whose class is not in its class set",
                tuple(int(i) for i in idx[mask])))

    names = list(splits)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            common = np.intersect1d(in_range[names[i]], in_range[names[j]])
            if common.size:
                out.append(Violation(
                    "split-disjointness",
                    f"{names[i]} and {names[j]} share sample indices",
                    tuple(int(v) for v in common)))

    nonfinite_rows = sorted(_as_set(np.where(~np.isfinite(bundle.prototypes))[0]))
    if nonfinite_rows:
        out.append(Violation("prototype-finite",
                             "prototype rows contain non-finite values",
                             tuple(nonfinite_rows)))
    else:
        norms = np.linalg.norm(bundle.prototypes, axis=1)
        zero_rows = sorted(int(i) for i in np.where(norms == 0.0)[0])
        if zero_rows:
            out.append(Violation("prototype-norm",
                                 "prototype rows with zero norm",
                                 tuple(zero_rows)))

    return out


def require_valid(bundle: DatasetBundle) -> None:
    """Raise unless the bundle passes every invariant."""
    violations = validate_bundle(bundle)
    if violations:
        msg = "; ".join(str(v) for v in violations)
        raise ValidationError(f"invalid dataset bundle: {msg}")


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Flat experiment configuration; maps 1:1 onto the JSON config file."""

    # dimensions
    d_v: int = 768
    d_a: int = 85
    d_l: int = 1024
    d_z: int = 85
    # loss weights
    lambda_con: float = 1.5
    lambda_kl: float = 1.0
    lambda_sc: float = 0.1
    lambda_gp: float = 10.0
    lambda_cls: float = 0.01
    # prior-noise composition and contrastive temperature
    alpha: float = 0.9
    tau: float = 0.15
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # schedule
    batch_size: int = 64
    epochs: int = 100
    stage1_epochs: int = 30
    critic_steps: int = 5
    n_syn: int = 400
    seed: int = 0
    n_seeds: int = 3
    # ablation switches
    use_vdkl: bool = True
    use_vosu: bool = True
    use_enhancement: bool = True
    use_lcon: bool = True
    use_lsc: bool = True
    prior_form: str = "learned"
    prior_file: str | None = None

    def replace(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_config(config: ExperimentConfig) -> list[str]:
    """Collect every config violation; empty list means valid."""
    errs: list[str] = []
    for name in ("d_v", "d_a", "d_l", "d_z"):
        v = getattr(config, name)
        low = 0 if name == "d_l" else 1  # d_l = 0 disables enhancement
        if not isinstance(v, int) or v < low:
            errs.append(f"{name} must be an integer >= {low}, got {v!r}")
    for name in ("lambda_con", "lambda_kl", "lambda_sc", "lambda_gp", "lambda_cls"):
        v = getattr(config, name)
        if v < 0:
            errs.append(f"{name} must be >= 0, got {v!r}")
    if not (0.0 <= config.alpha <= 1.0):
        errs.append(f"alpha must lie in [0, 1], got {config.alpha!r}")
    if config.tau <= 0:
        errs.append(f"tau must be > 0, got {config.tau!r}")
    if config.lr <= 0:
        errs.append(f"lr must be > 0, got {config.lr!r}")
    for name in ("beta1", "beta2"):
        v = getattr(config, name)
        if not (0.0 <= v < 1.0):
            errs.append(f"{name} must lie in [0, 1), got {v!r}")
    if config.batch_size < 1:
        errs.append(f"batch_size must be >= 1, got {config.batch_size!r}")
    for name in ("epochs", "stage1_epochs"):
        if getattr(config, name) < 0:
            errs.append(f"{name} must be >= 0, got {getattr(config, name)!r}")
    if config.critic_steps < 1:
        errs.append(f"critic_steps must be >= 1, got {config.critic_steps!r}")
    if config.n_syn < 1:
        errs.append(f"n_syn must be >= 1, got {config.n_syn!r}")
    if config.n_seeds < 1:
        errs.append(f"n_seeds must be >= 1, got {config.n_seeds!r}")
    if config.prior_form not in PRIOR_FORMS:
        errs.append(f"prior_form must be one of {PRIOR_FORMS}, got {config.prior_form!r}")
    if config.prior_form == "external" and not config.prior_file:
        errs.append("prior_form 'external' requires prior_file")
    if not config.use_vdkl:
        if config.lambda_con > 0:
            errs.append("lambda_con > 0 requires use_vdkl")
        if config.lambda_kl > 0:
            errs.append("lambda_kl > 0 requires use_vdkl")
        if config.use_lcon:
            errs.append("use_lcon requires use_vdkl")
        if config.use_enhancement:
            errs.append("use_enhancement requires use_vdkl")
    if not config.use_vosu:
        if config.lambda_sc > 0:
            errs.append("lambda_sc > 0 requires use_vosu")
        if config.use_lsc:
            errs.append("use_lsc requires use_vosu")
    return errs


def require_valid_config(config: ExperimentConfig) -> None:
    errs = validate_config(config)
    if errs:
        raise ValidationError("invalid config: " + "; ".join(errs))


_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a parsed JSON document, rejecting unknown keys."""
    unknown = sorted(set(doc) - _CONFIG_FIELDS)
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    config = ExperimentConfig(**doc)
    require_valid_config(config)
    return config


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must be a JSON object")
    return config_from_dict(doc)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def canonical_config_json(config: ExperimentConfig) -> str:
    """Sorted-key, no-whitespace JSON form used for hashing."""
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config_json(config).encode("utf-8")).hexdigest()


def toy_config(**overrides) -> ExperimentConfig:
    """Desk-scale defaults matched to the 8-seen/4-unseen toy dataset."""
    base = dict(
        d_v=32, d_a=8, d_l=16, d_z=8,
        lambda_con=1.5, lambda_kl=1.0, lambda_sc=5.0,
        lambda_gp=10.0, lambda_cls=1.0,
        lr=1e-3, batch_size=64, epochs=600, stage1_epochs=30,
        n_syn=100, seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-class accuracies plus CZSL/GZSL aggregates for one run."""

    acc: float                  # CZSL: per-class top-1 over unseen classes
    u: float                    # GZSL unseen-class accuracy
    s: float                    # GZSL seen-class accuracy
    h: float                    # harmonic mean of u and s
    per_class: dict[str, float]
    config_hash: str
    seed: int
    warnings: list[str] = field(default_factory=list)
    wall_clock: float = 0.0     # informational; excluded from serialization

    def to_json(self) -> str:
        doc = {
            "acc": self.acc, "u": self.u, "s": self.s, "h": self.h,
            "per_class": dict(sorted(self.per_class.items())),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "warnings": list(self.warnings),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        doc = json.loads(text)
        return EvalReport(acc=doc["acc"], u=doc["u"], s=doc["s"], h=doc["h"],
                          per_class=doc["per_class"],
                          config_hash=doc["config_hash"], seed=doc["seed"],
                          warnings=list(doc.get("warnings", [])))


# ---------------------------------------------------------------------------
# deterministic randomness
# ---------------------------------------------------------------------------

def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A deterministic PCG64 stream with named, independent sub-streams.

    A stream is identified by its entropy path (seed plus derivation names),
    so the same seed and the same derivation sequence reproduce the exact
    byte stream on every run. Streams are not thread-safe; derive one
    sub-stream per worker instead of sharing.
    """

    def __init__(self, entropy: tuple[int, ...]):
        self._entropy = entropy
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(list(entropy))))

    @property
    def entropy(self) -> tuple[int, ...]:
        return self._entropy

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy generator, for numpy-native draws."""
        return self._gen

    def derive(self, name: str) -> "RngStream":
        """Independent child stream; same name always gives the same stream."""
        return RngStream(self._entropy + (_name_key(name),))

    # draws return torch tensors because all downstream math is torch
    def normal(self, *shape: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        arr = self._gen.standard_normal(shape, dtype=np.float64)
        return torch.from_numpy(arr).to(dtype)

    def uniform(self, *shape: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        arr = self._gen.random(shape, dtype=np.float64)
        return torch.from_numpy(arr).to(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, options: np.ndarray) -> int:
        return int(options[self._gen.integers(0, len(options))])

    def state_dict(self) -> dict:
        return {"entropy": list(self._entropy),
                "state": self._gen.bit_generator.state}

    @staticmethod
    def from_state(doc: dict) -> "RngStream":
        stream = RngStream(tuple(doc["entropy"]))
        stream._gen.bit_generator.state = doc["state"]
        return stream


def seeded_rng(seed: int) -> RngStream:
    """Root random-stream handle for one experiment."""
    return RngStream((int(seed),))
