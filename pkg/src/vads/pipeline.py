"""Post-training pipeline: synthesize, enhance, classify, evaluate.

Unseen-class features are synthesized from Gaussian codes only (no unseen
sample is ever read), optionally enhanced by concatenating the encoder's
deterministic latent features, and fed to single-layer softmax classifiers
whose per-class top-1 accuracies yield the CZSL and GZSL metrics.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np
import torch

from .core import (DatasetBundle, EvalReport, ExperimentConfig, RngStream,
                   ValidationError, config_hash, harmonic_mean, seeded_rng)
from .cwgan import DynamicPrototype, GanState, generate
from .nn import MlpSpec, ParamSet, fit_softmax, forward
from .vdkl import VdklState, prior_noise
from .vosu import VosuState


@dataclass
class SynthSet:
    """Synthesized unseen-class features with provenance."""

    features: torch.Tensor   # [n_unseen * n_syn, d_v]
    labels: np.ndarray       # global class ids
    provenance: dict

    @property
    def n_per_class(self) -> int:
        return int(self.provenance["n_syn"])


def params_hash(paramsets: dict[str, ParamSet]) -> str:
    """Order-independent digest of named parameter groups."""
    h = hashlib.sha256()
    for group in sorted(paramsets):
        for name in sorted(paramsets[group]):
            h.update(group.encode())
            h.update(name.encode())
            h.update(paramsets[group][name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def synthesize(gan: GanState, vdkl: VdklState | None, vosu: VosuState | None,
               prototypes, unseen_classes, n_syn: int,
               rng: RngStream, config: ExperimentConfig) -> SynthSet:
    """Draw n_syn synthetic feature rows per unseen class.

    Each class uses its own derived stream, so synthesis is reproducible
    and classes could be generated in parallel. Real features never enter:
    only prototypes and learned parameters do.
    """
    if n_syn < 1:
        raise ValidationError(f"n_syn must be >= 1, got {n_syn}")
    if gan.gen_steps == 0:
        raise ValidationError("generator is untrained; run training first")
    proto_t = prototypes if torch.is_tensor(prototypes) \
        else torch.from_numpy(np.ascontiguousarray(prototypes, dtype=np.float32))
    unseen = np.sort(np.asarray(unseen_classes, dtype=np.int64))

    feats: list[torch.Tensor] = []
    with torch.no_grad():
        if config.use_vosu:
            table = forward(vosu.sum_spec, vosu.sum_map, proto_t)
        else:
            table = proto_t
        for c in unseen:
            stream = rng.derive(f"class{int(c)}")
            if config.use_vdkl:
                codes = stream.normal(n_syn, config.d_z)
                z_prime = prior_noise(vdkl, codes, stream, mode="synth")
            else:
                z_prime = stream.normal(n_syn, config.d_a)
            a_rows = table[int(c)].unsqueeze(0).expand(n_syn, -1)
            feats.append(generate(gan, DynamicPrototype(z_prime, a_rows)))

    groups = {"G": gan.gen}
    if config.use_vdkl:
        groups.update({"VE": vdkl.ve, "DKL": vdkl.dkl, "P": {"p": vdkl.p}})
    if config.use_vosu:
        groups["SUM"] = vosu.sum_map
    return SynthSet(
        features=torch.cat(feats, dim=0),
        labels=np.repeat(unseen, n_syn),
        provenance={"params_hash": params_hash(groups), "n_syn": int(n_syn)})


def enhance(vdkl: VdklState | None, x: torch.Tensor) -> torch.Tensor:
    """Concatenate deterministic encoder latents onto feature rows.

    Passing None (or a zero-width latent head) returns the features
    unchanged, which is the enhancement-disabled path.
    """
    if vdkl is None or vdkl.arch.d_l == 0:
        return x
    with torch.no_grad():
        h = torch.nn.functional.leaky_relu(
            x @ vdkl.ve["trunk.w"] + vdkl.ve["trunk.b"], 0.2)
        l = h @ vdkl.ve["l.w"] + vdkl.ve["l.b"]
    return torch.cat([x, l], dim=1)


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

@dataclass
class SoftmaxClassifier:
    """Single-layer softmax over a fixed global class list."""

    spec: MlpSpec
    params: ParamSet
    classes: np.ndarray   # sorted global ids, one logit column each

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return forward(self.spec, self.params, x)

    def predict(self, x: torch.Tensor) -> np.ndarray:
        idx = self.logits(x).argmax(dim=1).numpy()
        return self.classes[idx]


def _local_ids(labels: np.ndarray, classes: np.ndarray) -> torch.Tensor:
    pos = np.searchsorted(classes, labels)
    bad = (pos >= len(classes)) | (classes[np.minimum(pos, len(classes) - 1)] != labels)
    if bad.any():
        raise ValidationError(
            f"labels {sorted(set(labels[bad].tolist()))} are outside the "
            f"classifier's class list")
    return torch.from_numpy(pos.astype(np.int64))


def train_czsl(synth_features: torch.Tensor, synth_labels: np.ndarray,
               unseen_classes, config: ExperimentConfig,
               rng: RngStream) -> SoftmaxClassifier:
    """Unseen-class classifier trained purely on (enhanced) synthetic rows."""
    classes = np.sort(np.asarray(unseen_classes, dtype=np.int64))
    if synth_features.shape[0] == 0:
        raise ValidationError("empty synthetic set")
    if len(np.unique(synth_labels)) < 2:
        raise ValidationError("need at least two classes to fit a classifier")
    y = _local_ids(np.asarray(synth_labels), classes)
    spec, params = fit_softmax(synth_features, y, n_classes=len(classes),
                               rng=rng, beta1=config.beta1, beta2=config.beta2,
                               batch_size=config.batch_size)
    return SoftmaxClassifier(spec=spec, params=params, classes=classes)


def train_gzsl(real_features: torch.Tensor, real_labels: np.ndarray,
               synth_features: torch.Tensor, synth_labels: np.ndarray,
               all_classes, config: ExperimentConfig,
               rng: RngStream) -> SoftmaxClassifier:
    """All-class classifier on real seen rows plus synthetic unseen rows."""
    classes = np.sort(np.asarray(all_classes, dtype=np.int64))
    labels = np.concatenate([np.asarray(real_labels), np.asarray(synth_labels)])
    present = set(labels.tolist())
    missing = [int(c) for c in classes if int(c) not in present]
    if missing:
        raise ValidationError(
            f"classes with no training rows: {missing}; synthesize features "
            f"for every unseen class first")
    x = torch.cat([real_features, synth_features], dim=0)
    y = _local_ids(labels, classes)
    spec, params = fit_softmax(x, y, n_classes=len(classes), rng=rng,
                               beta1=config.beta1, beta2=config.beta2,
                               batch_size=config.batch_size)
    return SoftmaxClassifier(spec=spec, params=params, classes=classes)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def per_class_accuracy(preds: np.ndarray, labels: np.ndarray,
                       classes: np.ndarray) -> tuple[dict[int, float], list[int]]:
    """Top-1 accuracy per class; classes without samples are reported back."""
    accs: dict[int, float] = {}
    empty: list[int] = []
    for c in classes:
        mask = labels == c
        if not mask.any():
            empty.append(int(c))
            continue
        accs[int(c)] = float((preds[mask] == c).mean())
    return accs, empty


def evaluate(czsl_clf: SoftmaxClassifier, gzsl_clf: SoftmaxClassifier,
             bundle: DatasetBundle, vdkl: VdklState | None,
             config: ExperimentConfig) -> EvalReport:
    """Per-class top-1 metrics on the test splits.

    ``vdkl`` must be the same enhancement state (or None) used when the
    classifiers were trained, so feature widths line up.
    """
    warnings: list[str] = []
    per_class: dict[str, float] = {}

    x_unseen = enhance(vdkl, torch.from_numpy(bundle.features[bundle.test_unseen]))
    y_unseen = bundle.labels[bundle.test_unseen]
    x_seen = enhance(vdkl, torch.from_numpy(bundle.features[bundle.test_seen]))
    y_seen = bundle.labels[bundle.test_seen]

    def mean_over(accs: dict[int, float], empty: list[int], tag: str) -> float:
        for c in empty:
            warnings.append(f"{tag}: class {bundle.class_name(c)} has no "
                            f"test samples; excluded from the average")
        if not accs:
            return 0.0
        return float(np.mean(list(accs.values())))

    czsl_accs, czsl_empty = per_class_accuracy(
        czsl_clf.predict(x_unseen), y_unseen, bundle.unseen_classes)
    acc = mean_over(czsl_accs, czsl_empty, "czsl")
    per_class.update({f"czsl/{bundle.class_name(c)}": v
                      for c, v in czsl_accs.items()})

    gzsl_unseen_accs, gu_empty = per_class_accuracy(
        gzsl_clf.predict(x_unseen), y_unseen, bundle.unseen_classes)
    u = mean_over(gzsl_unseen_accs, gu_empty, "gzsl-unseen")
    gzsl_seen_accs, gs_empty = per_class_accuracy(
        gzsl_clf.predict(x_seen), y_seen, bundle.seen_classes)
    s = mean_over(gzsl_seen_accs, gs_empty, "gzsl-seen")
    per_class.update({f"gzsl/{bundle.class_name(c)}": v
                      for c, v in {**gzsl_unseen_accs, **gzsl_seen_accs}.items()})

    return EvalReport(acc=acc, u=u, s=s, h=harmonic_mean(u, s),
                      per_class=per_class, config_hash=config_hash(config),
                      seed=config.seed, warnings=warnings)


def run_zsl_eval(gan: GanState, vdkl: VdklState | None, vosu: VosuState | None,
                 bundle: DatasetBundle, config: ExperimentConfig,
                 n_syn: int | None = None) -> tuple[EvalReport, SynthSet]:
    """Synthesize, enhance, train both classifiers, and evaluate."""
    t0 = time.perf_counter()
    n_syn = config.n_syn if n_syn is None else n_syn
    root = seeded_rng(config.seed)
    synth = synthesize(gan, vdkl, vosu, bundle.prototypes,
                       bundle.unseen_classes, n_syn, root.derive("synth"),
                       config)

    enh_state = vdkl if (config.use_vdkl and config.use_enhancement
                         and config.d_l > 0) else None
    synth_x = enhance(enh_state, synth.features)
    real_x = enhance(enh_state,
                     torch.from_numpy(bundle.features[bundle.train_seen]))
    real_y = bundle.labels[bundle.train_seen]

    czsl_clf = train_czsl(synth_x, synth.labels, bundle.unseen_classes,
                          config, root.derive("cls.czsl"))
    all_classes = np.concatenate([bundle.seen_classes, bundle.unseen_classes])
    gzsl_clf = train_gzsl(real_x, real_y, synth_x, synth.labels,
                          all_classes, config, root.derive("cls.gzsl"))

    report = evaluate(czsl_clf, gzsl_clf, bundle, enh_state, config)
    report.wall_clock = time.perf_counter() - t0
    return report, synth
