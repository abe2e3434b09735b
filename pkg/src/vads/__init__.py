"""Generative zero-shot learning with dynamic semantic prototype conditions."""

from .core import (DatasetBundle, EvalReport, ExperimentConfig, RngStream,
                   ValidationError, Violation, config_hash, harmonic_mean,
                   load_config, seeded_rng, toy_config, validate_bundle,
                   validate_config)
from .data import (BundleManifest, LoadError, ToySpec, batches, load_bundle,
                   make_toy, save_bundle, toy_truth)
from .nn import (AdamState, CheckpointError, MlpSpec, ParamSet, adam_step,
                 forward, gradients, init_adam, init_mlp, load_checkpoint,
                 mlp, save_checkpoint)
from .vdkl import VdklState, contrastive_loss, encode, kl_loss, prior_noise
from .vosu import VosuState, predict_semantic, run_stage1, stage1_loss, \
    stage2_consistency, update_prototypes
from .cwgan import DynamicPrototype, GanState, critic_loss, generate, \
    generator_loss, init_gan, train
from .pipeline import (SoftmaxClassifier, SynthSet, enhance, evaluate,
                       run_zsl_eval, synthesize, train_czsl, train_gzsl)
from .vdkl import init_vdkl
from .vosu import init_vosu

__version__ = "0.1.0"
