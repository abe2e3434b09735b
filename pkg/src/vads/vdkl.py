"""Domain visual knowledge: variational encoder, local bias, global prior.

The visual encoder maps features to a latent feature ``l`` (aligned across
classes by a contrastive loss) and a latent code ``z`` (pulled toward a
standard normal by a KL loss). A small knowledge network turns ``z`` into a
local bias ``b`` which, together with a learnable global prior vector ``p``,
is blended with fresh Gaussian noise into the visual prior noise ``Z'``:

    Z' = alpha * (b + p) + (1 - alpha) * noise(0, 1)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import ExperimentConfig, RngStream, ValidationError
from .nn import MlpSpec, ParamSet, forward, init_mlp, mlp

LOGVAR_CLAMP = 10.0  # keeps exp(logvar) finite in float32


@dataclass(frozen=True)
class VeArch:
    """Shared-trunk encoder: one hidden layer, three linear heads."""

    d_v: int
    d_trunk: int
    d_l: int
    d_z: int


@dataclass
class EncodedBatch:
    l: torch.Tensor        # [n, d_l] latent features
    mu: torch.Tensor       # [n, d_z]
    logvar: torch.Tensor   # [n, d_z], clamped
    z: torch.Tensor        # [n, d_z] reparameterized sample

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)


@dataclass
class VdklState:
    arch: VeArch
    dkl_spec: MlpSpec
    ve: ParamSet
    dkl: ParamSet
    p: torch.Tensor                     # [d_a] global prior vector
    tau: float
    alpha: float
    prior_form: str = "learned"
    fixed_prior: torch.Tensor | None = None  # used when prior_form == "random"

    @property
    def d_a(self) -> int:
        return int(self.p.shape[0])

    def trainable(self) -> ParamSet:
        out = {f"VE.{k}": v for k, v in self.ve.items()}
        out.update({f"DKL.{k}": v for k, v in self.dkl.items()})
        out["P.p"] = self.p
        return out

    def load_trainable(self, merged: ParamSet) -> None:
        for k, v in merged.items():
            group, name = k.split(".", 1)
            if group == "VE":
                self.ve[name] = v
            elif group == "DKL":
                self.dkl[name] = v
            elif group == "P":
                self.p = v


def trunk_width(d_v: int) -> int:
    """Benchmark-scale default, proportional when features are narrow."""
    return 2048 if d_v >= 256 else max(16, 4 * d_v)


def init_vdkl(config: ExperimentConfig, rng: RngStream,
              external_prior: np.ndarray | None = None,
              dtype: torch.dtype = torch.float32) -> VdklState:
    """Fresh encoder/knowledge-network parameters and prior vector."""
    arch = VeArch(d_v=config.d_v, d_trunk=trunk_width(config.d_v),
                  d_l=config.d_l, d_z=config.d_z)
    ve_rng = rng.derive("init.VE")
    ve: ParamSet = {}
    heads = [("trunk", arch.d_v, arch.d_trunk),
             ("l", arch.d_trunk, max(arch.d_l, 1)),
             ("mu", arch.d_trunk, arch.d_z),
             ("logvar", arch.d_trunk, arch.d_z)]
    for name, d_in, d_out in heads:
        ve[f"{name}.w"] = ve_rng.normal(d_in, d_out, dtype=dtype) * 0.02
        ve[f"{name}.b"] = torch.zeros(d_out, dtype=dtype)

    dkl_spec = mlp((config.d_z, config.d_a, config.d_a))
    dkl = init_mlp(dkl_spec, rng.derive("init.DKL"), dtype=dtype)

    if config.prior_form == "external":
        if external_prior is None:
            raise ValidationError("prior_form 'external' needs a prior vector")
        vec = np.asarray(external_prior, dtype=np.float64).ravel()
        if vec.size != config.d_a:
            raise ValidationError(
                f"external prior has {vec.size} entries, expected d_a = {config.d_a}")
        p = torch.from_numpy(vec).to(dtype)
    else:
        p = rng.derive("init.P").normal(config.d_a, dtype=dtype) * 0.02

    fixed_prior = None
    if config.prior_form == "random":
        fixed_prior = rng.derive("init.fixed_prior").normal(config.d_a, dtype=dtype)

    return VdklState(arch=arch, dkl_spec=dkl_spec, ve=ve, dkl=dkl, p=p,
                     tau=config.tau, alpha=config.alpha,
                     prior_form=config.prior_form, fixed_prior=fixed_prior)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def encode_with(arch: VeArch, ve: ParamSet, x: torch.Tensor,
                eps: torch.Tensor) -> EncodedBatch:
    """Reparameterized encoding with externally supplied standard normals."""
    if x.dim() != 2 or x.shape[1] != arch.d_v:
        raise ValidationError(f"feature width {tuple(x.shape)} != d_v {arch.d_v}")
    h = torch.nn.functional.leaky_relu(x @ ve["trunk.w"] + ve["trunk.b"], 0.2)
    l = h @ ve["l.w"] + ve["l.b"]
    mu = h @ ve["mu.w"] + ve["mu.b"]
    logvar = torch.clamp(h @ ve["logvar.w"] + ve["logvar.b"],
                         -LOGVAR_CLAMP, LOGVAR_CLAMP)
    z = mu + torch.exp(0.5 * logvar) * eps
    return EncodedBatch(l=l, mu=mu, logvar=logvar, z=z)


def encode(state: VdklState, x: torch.Tensor, rng: RngStream) -> EncodedBatch:
    eps = rng.normal(x.shape[0], state.arch.d_z, dtype=x.dtype)
    return encode_with(state.arch, state.ve, x, eps)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def select_positives(labels: torch.Tensor, rng: RngStream | None = None) -> torch.Tensor:
    """Pick one same-label partner per anchor; -1 where none exists.

    With an rng the partner is uniform over candidates, otherwise the first
    other occurrence in batch order is used.
    """
    labels = labels.long()
    n = labels.shape[0]
    pos = torch.full((n,), -1, dtype=torch.long)
    for i in range(n):
        candidates = torch.nonzero((labels == labels[i]), as_tuple=False).ravel()
        candidates = candidates[candidates != i]
        if candidates.numel() == 0:
            continue
        if rng is None:
            pos[i] = candidates[0]
        else:
            pick = int(rng.integers(0, candidates.numel(), 1)[0])
            pos[i] = candidates[pick]
    return pos


def contrastive_loss(l: torch.Tensor, labels: torch.Tensor, tau: float,
                     pos_index: torch.Tensor | None = None,
                     rng: RngStream | None = None) -> torch.Tensor:
    """Mean InfoNCE over anchors with an in-batch positive.

    Rows of ``l`` are L2-normalized before scoring, so tau scales cosine
    similarities. The denominator holds the chosen positive plus every
    different-label sample in the batch; anchors without a positive are
    skipped.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    labels = labels.long()
    if pos_index is None:
        pos_index = select_positives(labels, rng)
    valid = pos_index >= 0
    if not bool(valid.any()):
        raise ValidationError(
            "no positive pair in batch; sample class-balanced batches so "
            "every anchor has a same-label partner")

    norm = torch.linalg.vector_norm(l, dim=1, keepdim=True).clamp_min(1e-12)
    ln = l / norm
    sims = (ln @ ln.T) / tau

    n = labels.shape[0]
    diff = labels.view(-1, 1) != labels.view(1, -1)
    allowed = diff.clone()
    anchor_rows = torch.nonzero(valid, as_tuple=False).ravel()
    allowed[anchor_rows, pos_index[anchor_rows]] = True

    neg_inf = torch.tensor(float("-inf"), dtype=sims.dtype)
    masked = torch.where(allowed, sims, neg_inf)
    lse = torch.logsumexp(masked[anchor_rows], dim=1)
    pos_sim = sims[anchor_rows, pos_index[anchor_rows]]
    return (lse - pos_sim).mean()


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Batch-mean KL divergence to a standard normal, in closed form."""
    if mu.shape != logvar.shape:
        raise ValidationError("mu and logvar must have identical shapes")
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise ValidationError("kl_loss inputs must be finite")
    per_sample = 0.5 * (mu * mu + torch.exp(logvar) - logvar - 1.0).sum(dim=1)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# prior noise
# ---------------------------------------------------------------------------

def prior_noise_with(state: VdklState, z_source: torch.Tensor,
                     eps: torch.Tensor,
                     dkl: ParamSet | None = None,
                     p: torch.Tensor | None = None) -> torch.Tensor:
    """Blend domain knowledge with externally supplied Gaussian noise.

    ``dkl``/``p`` default to the state's parameters; passing leaf copies
    keeps the composition differentiable for the caller.
    """
    if state.prior_form == "none":
        return eps
    dkl = state.dkl if dkl is None else dkl
    p = state.p if p is None else p
    if state.prior_form == "random":
        base = state.fixed_prior.to(eps.dtype).expand_as(eps)
    else:
        b = forward(state.dkl_spec, dkl, z_source)
        base = b + p
    return state.alpha * base + (1.0 - state.alpha) * eps


def prior_noise(state: VdklState, z_source: torch.Tensor, rng: RngStream,
                mode: str = "train") -> torch.Tensor:
    """Visual prior noise for a batch of latent codes.

    In train mode the codes come from encoding real seen-class features; in
    synth mode the caller supplies fresh standard-normal codes so knowledge
    learned on seen classes transfers without touching unseen samples. Noise
    is resampled on every call.
    """
    if mode not in ("train", "synth"):
        raise ValidationError(f"mode must be 'train' or 'synth', got {mode!r}")
    if z_source.dim() != 2 or z_source.shape[1] != state.arch.d_z:
        raise ValidationError(
            f"z width {tuple(z_source.shape)} != d_z {state.arch.d_z}")
    eps = rng.normal(z_source.shape[0], state.d_a, dtype=z_source.dtype)
    return prior_noise_with(state, z_source, eps)


def vdkl_losses(state: VdklState, x: torch.Tensor, labels: torch.Tensor,
                rng: RngStream) -> dict:
    """Single encode pass reused by both encoder losses."""
    enc = encode(state, x, rng)
    pos = select_positives(labels, rng)
    return {
        "l_con": contrastive_loss(enc.l, labels, state.tau, pos_index=pos),
        "l_kl": kl_loss(enc.mu, enc.logvar),
        "encoded": enc,
    }
