"""Experiment orchestration CLI.

Subcommands: toygen, train, eval, ablate, priorforms, plotdata. Every run
writes a run_manifest.json listing its artifacts; output directories are
guarded by a lockfile while being written. Exit codes: 0 success,
2 validation error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np
import torch

from . import nn, pipeline
from .core import (EvalReport, ExperimentConfig, RngStream, ValidationError,
                   config_hash, load_config, save_config, seeded_rng,
                   toy_config, validate_config)
from .cwgan import GanState, DynamicPrototype, generate, init_gan, train
from .data import LoadError, ToySpec, load_bundle, make_toy, save_bundle
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import enhance, run_zsl_eval, synthesize
from .vdkl import VdklState, init_vdkl, prior_noise
from .vosu import VosuState, init_vosu, run_stage1, update_prototypes

N_SYN_DEFAULTS = {"awa2": 5600, "sun": 100, "cub": 400}

ABLATION_ROWS: dict[str, dict] = {
    "full": {},
    "wo_vdkl_vosu": dict(use_vdkl=False, use_vosu=False, use_enhancement=False,
                         use_lcon=False, use_lsc=False,
                         lambda_con=0.0, lambda_kl=0.0, lambda_sc=0.0),
    "wo_vdkl": dict(use_vdkl=False, use_enhancement=False, use_lcon=False,
                    lambda_con=0.0, lambda_kl=0.0),
    "wo_vosu": dict(use_vosu=False, use_lsc=False, lambda_sc=0.0),
    "wo_enhancement": dict(use_enhancement=False),
    "wo_lcon": dict(use_lcon=False),
    "wo_lsc": dict(use_lsc=False),
}
ABLATION_ORDER = ("wo_vdkl_vosu", "wo_vdkl", "wo_vosu", "wo_enhancement",
                  "wo_lcon", "wo_lsc", "full")


# ---------------------------------------------------------------------------
# orchestration used by commands and the acceptance suite
# ---------------------------------------------------------------------------

def build_states(config: ExperimentConfig, bundle,
                 external_prior: np.ndarray | None = None
                 ) -> tuple[GanState, VdklState | None, VosuState | None]:
    """Initialize all trainable state from the config seed."""
    root = seeded_rng(config.seed)
    if config.prior_form == "external" and external_prior is None:
        external_prior = read_prior_vector(config.prior_file, config.d_a)
    vdkl = init_vdkl(config, root, external_prior) if config.use_vdkl else None
    vosu = init_vosu(config, root) if config.use_vosu else None
    gan = init_gan(config, bundle, root)
    return gan, vdkl, vosu


def run_training(config: ExperimentConfig, bundle,
                 log_path: str | None = None,
                 external_prior: np.ndarray | None = None):
    """Stage-1 pretraining (when enabled) followed by GAN training."""
    gan, vdkl, vosu = build_states(config, bundle, external_prior)
    stage1_curve: list[float] = []
    if config.use_vosu:
        stage1_curve = run_stage1(vosu, bundle, config,
                                  seeded_rng(config.seed).derive("stage1"))
    rows = train(gan, vdkl, vosu, bundle, config, log_path=log_path)
    return gan, vdkl, vosu, rows, stage1_curve


def run_full(config: ExperimentConfig, bundle, n_syn: int | None = None
             ) -> EvalReport:
    """Train from scratch and evaluate; one row of a comparison table."""
    gan, vdkl, vosu, _rows, _curve = run_training(config, bundle)
    report, _synth = run_zsl_eval(gan, vdkl, vosu, bundle, config, n_syn=n_syn)
    return report


def suite_seeds(config: ExperimentConfig) -> list[int]:
    return [config.seed + i for i in range(config.n_seeds)]


def run_ablation_suite(config: ExperimentConfig, bundle,
                       rows: tuple[str, ...] = ABLATION_ORDER,
                       seeds: list[int] | None = None) -> list[dict]:
    """Mean Acc/H per ablation row over the configured seeds."""
    seeds = suite_seeds(config) if seeds is None else seeds
    out = []
    for row in rows:
        reports = [run_full(config.replace(seed=s, **ABLATION_ROWS[row]), bundle)
                   for s in seeds]
        out.append({"row": row,
                    "acc": float(np.mean([r.acc for r in reports])),
                    "h": float(np.mean([r.h for r in reports])),
                    "per_seed_h": [r.h for r in reports],
                    "per_seed_acc": [r.acc for r in reports]})
    return out


def run_priorform_suite(config: ExperimentConfig, bundle,
                        prior_file: str | None = None,
                        forms: tuple[str, ...] = ("learned", "none", "random",
                                                  "external"),
                        seeds: list[int] | None = None) -> list[dict]:
    """Mean metrics per prior form over the configured seeds."""
    seeds = suite_seeds(config) if seeds is None else seeds
    external_vec = None
    if "external" in forms:
        if not prior_file:
            raise ValidationError(
                "prior form 'external' needs a vector file (--prior-file)")
        external_vec = read_prior_vector(prior_file, config.d_a)
    out = []
    for form in forms:
        cfg = config.replace(prior_form=form,
                             prior_file=prior_file if form == "external" else None)
        reports = []
        for s in seeds:
            gan, vdkl, vosu, _r, _c = run_training(
                cfg.replace(seed=s), bundle, external_prior=external_vec)
            rep, _ = run_zsl_eval(gan, vdkl, vosu, bundle, cfg.replace(seed=s))
            reports.append(rep)
        out.append({"form": form,
                    "acc": float(np.mean([r.acc for r in reports])),
                    "u": float(np.mean([r.u for r in reports])),
                    "s": float(np.mean([r.s for r in reports])),
                    "h": float(np.mean([r.h for r in reports]))})
    return out


def read_prior_vector(path: str | None, d_a: int) -> np.ndarray:
    if not path:
        raise ValidationError("external prior requested but no vector file given")
    if not os.path.isfile(path):
        raise ValidationError(f"prior vector file not found: {path}")
    vec = np.fromfile(path, dtype=np.dtype(np.float32).newbyteorder("<"))
    if vec.size != d_a:
        raise ValidationError(
            f"prior vector file {path} holds {vec.size} floats, expected {d_a}")
    return vec.astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint plumbing for whole experiments
# ---------------------------------------------------------------------------

def save_states(gan: GanState, vdkl: VdklState | None, vosu: VosuState | None,
                config: ExperimentConfig, dirpath: str,
                rng_state: dict | None = None) -> None:
    groups: dict[str, nn.ParamSet] = {"G": gan.gen, "D": gan.critic}
    if gan.cls is not None:
        groups["CLS"] = gan.cls
    if vdkl is not None:
        groups["VE"] = vdkl.ve
        groups["DKL"] = vdkl.dkl
        p_group: nn.ParamSet = {"p": vdkl.p}
        if vdkl.fixed_prior is not None:
            p_group["fixed_prior"] = vdkl.fixed_prior
        groups["P"] = p_group
    if vosu is not None:
        groups["VSP"] = vosu.vsp
        groups["SUM"] = vosu.sum_map
    extra = {"gen_steps": gan.gen_steps,
             "critic_updates": gan.critic_updates,
             "stage1_done": bool(vosu.stage1_done) if vosu else False}
    save_checkpoint(groups, dirpath, config_hash=config_hash(config),
                    rng_state=rng_state, extra=extra)


def load_states(dirpath: str, config: ExperimentConfig, bundle
                ) -> tuple[GanState, VdklState | None, VosuState | None]:
    """Rebuild experiment state from a checkpoint; shapes come from config."""
    groups, manifest = load_checkpoint(dirpath, expected_config_hash=config_hash(config))
    root = seeded_rng(config.seed)
    gan = init_gan(config, bundle, root, pretrain_cls=False)
    gan.gen = groups["G"]
    gan.critic = groups["D"]
    if "CLS" in groups:
        gan.cls_spec = nn.mlp((config.d_v, len(bundle.seen_classes)))
        gan.cls = groups["CLS"]
    extra = manifest.get("extra", {})
    gan.gen_steps = int(extra.get("gen_steps", 0))
    gan.critic_updates = int(extra.get("critic_updates", 0))

    vdkl = None
    if config.use_vdkl:
        if "VE" not in groups:
            raise CheckpointError("checkpoint lacks encoder parameters "
                                  "but config sets use_vdkl")
        vdkl = init_vdkl(config, root,
                         external_prior=np.zeros(config.d_a, dtype=np.float32)
                         if config.prior_form == "external" else None)
        vdkl.ve = groups["VE"]
        vdkl.dkl = groups["DKL"]
        vdkl.p = groups["P"]["p"]
        if config.prior_form == "random":
            vdkl.fixed_prior = groups["P"]["fixed_prior"]

    vosu = None
    if config.use_vosu:
        if "VSP" not in groups:
            raise CheckpointError("checkpoint lacks updation parameters "
                                  "but config sets use_vosu")
        vosu = init_vosu(config, root)
        vosu.vsp = groups["VSP"]
        vosu.sum_map = groups["SUM"]
        vosu.stage1_done = bool(extra.get("stage1_done", False))
        update_prototypes(vosu, bundle.prototypes)
    return gan, vdkl, vosu


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def run_lock(out_dir: str):
    """Exclusive lockfile for the duration of a run's writes."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"run directory {out_dir} is locked by another run "
                           f"(remove {lock_path} if stale)")
    try:
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock_path)


def write_manifest(out_dir: str, subcommand: str, config: ExperimentConfig | None,
                   artifacts: list[str], started: float) -> str:
    doc = {"subcommand": subcommand,
           "config": config.to_dict() if config else None,
           "config_hash": config_hash(config) if config else None,
           "artifacts": sorted(os.path.relpath(a, out_dir) for a in artifacts),
           "started_at": started,
           "finished_at": time.time()}
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def metrics_table(rows: list[tuple[str, dict]]) -> str:
    """Aligned text table whose numbers come straight from the reports."""
    cols = ["acc", "u", "s", "h"]
    width = max([len(name) for name, _ in rows] + [10])
    lines = [" ".join([f"{'':<{width}}"] + [f"{c.upper():>8}" for c in cols])]
    for name, vals in rows:
        cells = [f"{vals[c]:>8.4f}" if vals.get(c) is not None else f"{'-':>8}"
                 for c in cols]
        lines.append(" ".join([f"{name:<{width}}"] + cells))
    return "\n".join(lines)


def _load_effective_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_toygen(args) -> int:
    spec = ToySpec(n_seen=args.seen, n_unseen=args.unseen, d_v=args.dv,
                   d_a=args.da, samples_per_class=args.per_class,
                   sigma=args.sigma, seed=args.seed if args.seed is not None else 0)
    bundle = make_toy(spec)
    save_bundle(bundle, args.out, force=args.force)
    print(f"wrote toy bundle ({bundle.n_samples} samples, "
          f"{len(bundle.seen_classes)} seen / {len(bundle.unseen_classes)} "
          f"unseen classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    config = _load_effective_config(args)
    bundle = load_bundle(args.data)
    if bundle.d_v != config.d_v or bundle.d_a != config.d_a:
        raise ValidationError(
            f"bundle dims (d_v={bundle.d_v}, d_a={bundle.d_a}) do not match "
            f"config (d_v={config.d_v}, d_a={config.d_a})")
    with run_lock(args.out):
        log_path = os.path.join(args.out, "train_log.tsv")
        gan, vdkl, vosu, rows, stage1_curve = run_training(
            config, bundle, log_path=log_path)
        ckpt_dir = os.path.join(args.out, "checkpoint")
        save_states(gan, vdkl, vosu, config, ckpt_dir,
                    rng_state=seeded_rng(config.seed).state_dict())
        config_path = os.path.join(args.out, "config_used.json")
        save_config(config, config_path)
        artifacts = [log_path, ckpt_dir, config_path]
        if stage1_curve:
            s1_path = os.path.join(args.out, "stage1_curve.csv")
            write_csv(s1_path, ["step", "loss"],
                      [[i, v] for i, v in enumerate(stage1_curve)])
            artifacts.append(s1_path)
        write_manifest(args.out, "train", config, artifacts, started)
    print(f"trained {gan.gen_steps} generator steps "
          f"({gan.critic_updates} critic updates); checkpoint at {ckpt_dir}")
    return 0


def resolve_n_syn(dataset: str, config: ExperimentConfig,
                  flag: int | None) -> int:
    if flag is not None:
        return flag
    return N_SYN_DEFAULTS.get(dataset.lower(), config.n_syn)


def cmd_eval(args) -> int:
    started = time.time()
    config = _load_effective_config(args)
    bundle = load_bundle(args.data)
    gan, vdkl, vosu = load_states(args.checkpoint, config, bundle)
    n_syn = resolve_n_syn(bundle.name, config, args.n_syn)
    with run_lock(args.out):
        report, synth = run_zsl_eval(gan, vdkl, vosu, bundle, config, n_syn=n_syn)
        report_path = os.path.join(args.out, "eval_report.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        write_manifest(args.out, "eval", config, [report_path], started)
    print(f"synthesized {synth.features.shape[0]} rows "
          f"({n_syn} per unseen class)")
    print(metrics_table([("result", {"acc": report.acc, "u": report.u,
                                     "s": report.s, "h": report.h})]))
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    config = _load_effective_config(args)
    bundle = load_bundle(args.data)
    with run_lock(args.out):
        results = run_ablation_suite(config, bundle)
        csv_path = os.path.join(args.out, "ablation.csv")
        write_csv(csv_path, ["configuration", "mean_acc", "mean_h"],
                  [[r["row"], r["acc"], r["h"]] for r in results])
        json_path = os.path.join(args.out, "ablation.json")
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
            fh.write("\n")
        write_manifest(args.out, "ablate", config, [csv_path, json_path], started)
    print(metrics_table([(r["row"], {"acc": r["acc"], "h": r["h"]})
                         for r in results]))
    return 0


def cmd_priorforms(args) -> int:
    started = time.time()
    config = _load_effective_config(args)
    bundle = load_bundle(args.data)
    with run_lock(args.out):
        results = run_priorform_suite(config, bundle, prior_file=args.prior_file)
        csv_path = os.path.join(args.out, "priorforms.csv")
        write_csv(csv_path, ["form", "acc", "u", "s", "h"],
                  [[r["form"], r["acc"], r["u"], r["s"], r["h"]] for r in results])
        write_manifest(args.out, "priorforms", config, [csv_path], started)
    print(metrics_table([(r["form"], r) for r in results]))
    return 0


def _sample_rows(rng: RngStream, pool: np.ndarray, k: int) -> np.ndarray:
    k = min(k, pool.size)
    return pool[rng.permutation(pool.size)[:k]]


def cmd_plotdata(args) -> int:
    started = time.time()
    config = _load_effective_config(args)
    bundle = load_bundle(args.data)
    if args.kind in ("tsne", "heatmap") and not args.checkpoint:
        raise ValidationError(f"plot kind {args.kind!r} needs --checkpoint")
    artifacts: list[str] = []
    with run_lock(args.out):
        if args.kind == "heatmap":
            gan, vdkl, vosu = load_states(args.checkpoint, config, bundle)
            if vosu is None:
                raise ValidationError("heatmap export needs the updation module")
            rng = seeded_rng(config.seed).derive("plot.heatmap")
            classes = np.sort(rng.permutation(bundle.n_classes)[:args.classes])
            names = [bundle.class_name(int(c)) for c in classes]
            pre = bundle.prototypes[classes]
            upd = update_prototypes(vosu, bundle.prototypes).detach().numpy()[classes]
            for tag, mat in (("predefined", pre), ("updated", upd)):
                normed = mat / np.linalg.norm(mat, axis=1, keepdims=True)
                sim = normed @ normed.T
                path = os.path.join(args.out, f"heatmap_{tag}.csv")
                write_csv(path, ["class"] + names,
                          [[names[i]] + [repr(float(v)) for v in sim[i]]
                           for i in range(len(names))])
                artifacts.append(path)
        elif args.kind == "tsne":
            gan, vdkl, vosu = load_states(args.checkpoint, config, bundle)
            rng = seeded_rng(config.seed).derive("plot.tsne")
            seen = _sample_rows(rng.derive("seen_classes"),
                                bundle.seen_classes, args.classes)
            unseen = _sample_rows(rng.derive("unseen_classes"),
                                  bundle.unseen_classes, args.classes)
            rows: list[tuple[str, int, np.ndarray]] = []
            proto_t = torch.from_numpy(bundle.prototypes)
            for c in np.concatenate([seen, unseen]):
                pool = bundle.test_seen if c in seen else bundle.test_unseen
                pool = pool[bundle.labels[pool] == c]
                picked = _sample_rows(rng.derive(f"real{c}"), pool, args.samples)
                for i in picked:
                    rows.append(("real", int(c), bundle.features[i]))
                n = min(args.samples, pool.size) or args.samples
                noise_rng = rng.derive(f"static{c}")
                cond = DynamicPrototype(
                    noise_rng.normal(n, config.d_a),
                    proto_t[int(c)].unsqueeze(0).expand(n, -1))
                for row in generate(gan, cond).numpy():
                    rows.append(("synth_static", int(c), row))
                dyn_rng = rng.derive(f"dynamic{c}")
                synth = synthesize(gan, vdkl, vosu, bundle.prototypes,
                                   np.array([c]), n, dyn_rng, config)
                for row in synth.features.numpy():
                    rows.append(("synth_dynamic", int(c), row))
            feats = np.stack([r[2] for r in rows])
            if args.project:
                from sklearn.manifold import TSNE
                perplexity = min(30.0, max(2.0, (len(rows) - 1) / 3))
                coords = TSNE(n_components=2, random_state=config.seed,
                              perplexity=perplexity, init="pca").fit_transform(feats)
                header = ["source", "class", "x", "y"]
                data_rows = [[rows[i][0], rows[i][1],
                              repr(float(coords[i, 0])), repr(float(coords[i, 1]))]
                             for i in range(len(rows))]
            else:
                header = ["source", "class"] + [f"f{j}" for j in range(feats.shape[1])]
                data_rows = [[rows[i][0], rows[i][1]]
                             + [repr(float(v)) for v in feats[i]]
                             for i in range(len(rows))]
            path = os.path.join(args.out, "tsne.csv")
            write_csv(path, header, data_rows)
            artifacts.append(path)
        elif args.kind == "sweep":
            if not args.param or not args.values:
                raise ValidationError("sweep needs --param and --values")
            if args.param not in ExperimentConfig().to_dict():
                raise ValidationError(f"unknown hyperparameter {args.param!r}")
            values = [float(v) for v in args.values.split(",")]
            sweep_rows = []
            for v in values:
                cfg = config.replace(**{args.param: v})
                report = run_full(cfg, bundle)
                sweep_rows.append([v, report.acc, report.u, report.s, report.h])
            path = os.path.join(args.out, "sweep.csv")
            write_csv(path, [args.param, "acc", "u", "s", "h"], sweep_rows)
            artifacts.append(path)
        else:
            raise ValidationError(f"unknown plot kind {args.kind!r}")
        write_manifest(args.out, f"plotdata:{args.kind}", config, artifacts, started)
    for a in artifacts:
        print(f"wrote {a}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vads",
        description="Generative zero-shot learning with dynamic semantic "
                    "prototype conditions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", help="generate a synthetic toy bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seen", type=int, default=8)
    p.add_argument("--unseen", type=int, default=4)
    p.add_argument("--dv", type=int, default=32)
    p.add_argument("--da", type=int, default=8)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("train", help="stage-1 pretraining plus GAN training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="synthesize, train classifiers, evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-syn", type=int, default=None,
                   help="rows per unseen class (default: per-dataset)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the seven-row ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("priorforms", help="compare prior-knowledge forms")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prior-file", default=None,
                   help="raw float32 vector for the external form")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_priorforms)

    p = sub.add_parser("plotdata", help="export plot data as CSV")
    p.add_argument("--kind", required=True, choices=("tsne", "heatmap", "sweep"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--project", action="store_true",
                   help="emit 2-D coordinates instead of raw features")
    p.add_argument("--param", default=None)
    p.add_argument("--values", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
