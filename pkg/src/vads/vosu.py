"""Semantic prototype updation driven by visual features.

Stage 1 jointly trains a visual-to-semantic prediction network and the
prototype-updation map with a cross-entropy whose normalizer spans all
classes (seen and unseen), so updated prototypes absorb visual structure.
Stage 2 keeps the prediction network frozen and lets the updation map keep
refining the prototype table alongside the generator, regularized by a
semantic consistency penalty.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import (DatasetBundle, ExperimentConfig, RngStream, ValidationError,
                   require_valid, require_valid_config)
from .data import batches
from .nn import (MlpSpec, ParamSet, adam_step, forward, identity_mlp, init_adam,
                 init_mlp, mlp)


def vsp_hidden(d_v: int) -> int:
    return 1024 if d_v >= 256 else max(16, 4 * d_v)


@dataclass
class VosuState:
    vsp_spec: MlpSpec
    sum_spec: MlpSpec
    vsp: ParamSet
    sum_map: ParamSet
    proto_cache: torch.Tensor | None = None   # detached updated table
    stage1_done: bool = False
    stage1_curve: list[float] = field(default_factory=list)

    def trainable_sum(self) -> ParamSet:
        return {f"SUM.{k}": v for k, v in self.sum_map.items()}

    def load_trainable(self, merged: ParamSet) -> None:
        for k, v in merged.items():
            group, name = k.split(".", 1)
            if group == "SUM":
                self.sum_map[name] = v
            elif group == "VSP":
                self.vsp[name] = v


def init_vosu(config: ExperimentConfig, rng: RngStream,
              dtype: torch.dtype = torch.float32) -> VosuState:
    """Prediction net gets small-normal init; the updation map starts as the
    identity so updated prototypes begin exactly at the predefined table."""
    vsp_spec = mlp((config.d_v, vsp_hidden(config.d_v), config.d_a))
    sum_spec = mlp((config.d_a, config.d_a))
    return VosuState(
        vsp_spec=vsp_spec, sum_spec=sum_spec,
        vsp=init_mlp(vsp_spec, rng.derive("init.VSP"), dtype=dtype),
        sum_map=identity_mlp(sum_spec, dtype=dtype))


def _as_tensor(a, dtype=torch.float32) -> torch.Tensor:
    if torch.is_tensor(a):
        return a
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def predict_semantic(state: VosuState, x: torch.Tensor) -> torch.Tensor:
    """Predictive semantic vectors, one row per sample."""
    return forward(state.vsp_spec, state.vsp, x)


def update_prototypes(state: VosuState, prototypes) -> torch.Tensor:
    """Row-wise updation of the prototype table; caches a detached copy.

    The returned tensor carries gradients to the updation map so callers can
    train through it; the cache is data.
    """
    table = _as_tensor(prototypes)
    updated = forward(state.sum_spec, state.sum_map, table)
    state.proto_cache = updated.detach()
    return updated


def stage1_loss(state: VosuState, x: torch.Tensor, labels: torch.Tensor,
                prototypes) -> torch.Tensor:
    """Cross-entropy of x against the updated table over all classes."""
    table = _as_tensor(prototypes)
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= table.shape[0]):
        raise ValidationError(
            f"labels outside [0, {table.shape[0]}) cannot index the prototype table")
    updated = update_prototypes(state, table)
    logits = predict_semantic(state, x) @ updated.T
    return F.cross_entropy(logits, labels)


def stage2_consistency(state: VosuState) -> torch.Tensor:
    """Mean L1 drift of the cached updated table under one more updation."""
    if state.proto_cache is None:
        raise ValidationError(
            "prototype cache is stale; call update_prototypes first")
    table = state.proto_cache
    return (forward(state.sum_spec, state.sum_map, table) - table) \
        .abs().sum(dim=1).mean()


def run_stage1(state: VosuState, bundle: DatasetBundle,
               config: ExperimentConfig, rng: RngStream) -> list[float]:
    """Joint pretraining of prediction net and updation map on train_seen.

    Returns the per-step loss curve; the state is trained in place and its
    prototype cache is left at the final updated table.
    """
    require_valid_config(config)
    require_valid(bundle)
    params = {f"VSP.{k}": v for k, v in state.vsp.items()}
    params.update(state.trainable_sum())
    opt = init_adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)

    curve: list[float] = []
    data_rng = rng.derive("stage1.data")
    for _ in range(config.stage1_epochs):
        for x, y, _a in batches(bundle, config.batch_size, data_rng):
            leaves = {k: v.detach().clone().requires_grad_(True)
                      for k, v in params.items()}
            view = VosuState(
                vsp_spec=state.vsp_spec, sum_spec=state.sum_spec,
                vsp={k.split(".", 1)[1]: v for k, v in leaves.items()
                     if k.startswith("VSP.")},
                sum_map={k.split(".", 1)[1]: v for k, v in leaves.items()
                         if k.startswith("SUM.")})
            loss = stage1_loss(view, x, y, bundle.prototypes)
            grads = torch.autograd.grad(loss, list(leaves.values()))
            gdict = {k: g.detach() for k, g in zip(leaves, grads)}
            params, opt = adam_step(opt, params, gdict)
            curve.append(float(loss.detach()))
    state.load_trainable(params)
    update_prototypes(state, bundle.prototypes)
    state.stage1_done = True
    state.stage1_curve = curve
    return curve
