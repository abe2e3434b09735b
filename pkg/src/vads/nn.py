"""Small MLP machinery shared by every network in the toolkit.

Parameters live in plain name->tensor dicts so that optimizer state,
checkpoints, and gradient checks all operate on the same flat structure.
Differentiation is delegated to torch.autograd, which supports the
second-order case needed by the gradient penalty; analytic gradients are
cross-checked against finite differences in the test suite.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .core import RngStream, ValidationError

ParamSet = dict[str, torch.Tensor]

INIT_SCALE = 0.02

_ACTIVATIONS = {
    "lrelu": lambda t: F.leaky_relu(t, 0.2),
    "relu": F.relu,
    "sigmoid": torch.sigmoid,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) and one activation name per layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValidationError("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ValidationError(f"widths must be positive, got {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValidationError(
                f"{len(self.widths) - 1} layers need {len(self.widths) - 1} "
                f"activations, got {len(self.activations)}")
        unknown = [a for a in self.activations if a not in _ACTIVATIONS]
        if unknown:
            raise ValidationError(f"unknown activations {unknown}; "
                                  f"choose from {sorted(_ACTIVATIONS)}")

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def mlp(widths: tuple[int, ...] | list[int], hidden: str = "lrelu",
        out: str = "identity") -> MlpSpec:
    widths = tuple(widths)
    acts = tuple([hidden] * (len(widths) - 2) + [out])
    return MlpSpec(widths=widths, activations=acts)


def init_mlp(spec: MlpSpec, rng: RngStream,
             dtype: torch.dtype = torch.float32,
             scale: float = INIT_SCALE) -> ParamSet:
    """Weights ~ N(0, scale^2), biases 0 (GAN-standard small normal)."""
    params: ParamSet = {}
    for i in range(spec.n_layers):
        d_in, d_out = spec.widths[i], spec.widths[i + 1]
        params[f"w{i}"] = rng.normal(d_in, d_out, dtype=dtype) * scale
        params[f"b{i}"] = torch.zeros(d_out, dtype=dtype)
    return params


def identity_mlp(spec: MlpSpec, dtype: torch.dtype = torch.float32) -> ParamSet:
    """Square single-layer identity map; used as the prototype-updater init."""
    if spec.n_layers != 1 or spec.d_in != spec.d_out:
        raise ValidationError("identity init needs one square layer")
    return {"w0": torch.eye(spec.d_in, dtype=dtype),
            "b0": torch.zeros(spec.d_out, dtype=dtype)}


def forward(spec: MlpSpec, params: ParamSet, x: torch.Tensor) -> torch.Tensor:
    """Affine + activation chain; deterministic, batch-row equivariant."""
    if x.dim() != 2 or x.shape[1] != spec.d_in:
        raise ValidationError(
            f"input width {tuple(x.shape)} does not match layer width {spec.d_in}")
    h = x
    for i, act in enumerate(spec.activations):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        h = _ACTIVATIONS[act](h)
    return h


def gradients(loss_fn, params: ParamSet, *args, **kwargs) -> ParamSet:
    """Exact gradients of a scalar loss with respect to every entry of params.

    loss_fn receives a fresh leaf copy of params followed by *args/**kwargs
    and must return a scalar tensor built from torch operations (anything
    autograd can trace, including an inner gradient for penalty terms).
    Parameters the loss never touches get zero gradients.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves, *args, **kwargs)
    if not torch.is_tensor(loss) or loss.dim() != 0:
        raise ValidationError("loss_fn must return a scalar tensor")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return {k: (g.detach() if g is not None else torch.zeros_like(v))
            for (k, v), g in zip(leaves.items(), grads)}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: ParamSet
    v: ParamSet


def init_adam(params: ParamSet, lr: float, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = lambda: {k: torch.zeros_like(p) for k, p in params.items()}
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=zeros(), v=zeros())


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet
              ) -> tuple[ParamSet, AdamState]:
    """One bias-corrected update; returns fresh params and state."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValidationError("params, grads, and optimizer state must share names")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params: ParamSet = {}
    new_m: ParamSet = {}
    new_v: ParamSet = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {tuple(g.shape)} does not "
                                  f"match parameter {k} {tuple(p.shape)}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = p - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


def fit_softmax(x: torch.Tensor, y: torch.Tensor, n_classes: int,
                rng: RngStream, lr: float = 1e-3, beta1: float = 0.5,
                beta2: float = 0.999, epochs: int = 25,
                batch_size: int = 128) -> tuple[MlpSpec, ParamSet]:
    """Adam-trained single-layer softmax classifier on local class ids."""
    if x.dim() != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError("features and labels must pair up row-wise")
    n = x.shape[0]
    spec = mlp((int(x.shape[1]), n_classes))
    params = init_mlp(spec, rng.derive("init"))
    opt = init_adam(params, lr=lr, beta1=beta1, beta2=beta2)
    shuffle = rng.derive("shuffle")
    bs = min(batch_size, n)
    y = y.long()
    for _ in range(epochs):
        order = torch.from_numpy(shuffle.permutation(n))
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            if rows.numel() == 0:
                continue
            xb, yb = x[rows], y[rows]
            leaves = {k: v.detach().clone().requires_grad_(True)
                      for k, v in params.items()}
            loss = F.cross_entropy(forward(spec, leaves, xb), yb)
            grads = torch.autograd.grad(loss, list(leaves.values()))
            gdict = {k: g.detach() for k, g in zip(leaves, grads)}
            params, opt = adam_step(opt, params, gdict)
    return spec, params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(RuntimeError):
    """Unreadable or truncated checkpoint."""


_TORCH_DTYPES = {"f32": torch.float32, "f64": torch.float64}
_NP_DTYPES = {"f32": np.float32, "f64": np.float64}


def save_checkpoint(paramsets: dict[str, ParamSet], dirpath: str,
                    config_hash: str = "", rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write named parameter groups as raw little-endian arrays + manifest."""
    os.makedirs(dirpath, exist_ok=True)
    entries = {}
    for group, params in paramsets.items():
        for name, tensor in params.items():
            arr = tensor.detach().cpu().numpy()
            suffix = "f64" if arr.dtype == np.float64 else "f32"
            arr = arr.astype(_NP_DTYPES[suffix], copy=False)
            fname = f"{group}__{name}.{suffix}"
            arr.astype(arr.dtype.newbyteorder("<")).tofile(
                os.path.join(dirpath, fname))
            entries[f"{group}/{name}"] = {"file": fname,
                                          "shape": list(arr.shape),
                                          "dtype": suffix}
    manifest = {"arrays": entries, "config_hash": config_hash,
                "rng_state": rng_state, "extra": extra or {}}
    with open(os.path.join(dirpath, "checkpoint.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(dirpath: str, expected_config_hash: str | None = None
                    ) -> tuple[dict[str, ParamSet], dict]:
    """Read a checkpoint directory back; bit-exact with save_checkpoint.

    A config-hash mismatch only warns (the caller may be loading a
    checkpoint into a tweaked config on purpose); corruption raises.
    """
    manifest_path = os.path.join(dirpath, "checkpoint.json")
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"missing checkpoint.json in {dirpath}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e

    if expected_config_hash is not None and manifest.get("config_hash") \
            and manifest["config_hash"] != expected_config_hash:
        warnings.warn(
            f"checkpoint config hash {manifest['config_hash'][:12]} does not "
            f"match expected {expected_config_hash[:12]}; loading anyway",
            stacklevel=2)

    paramsets: dict[str, ParamSet] = {}
    for key, entry in manifest["arrays"].items():
        group, name = key.split("/", 1)
        path = os.path.join(dirpath, entry["file"])
        if not os.path.isfile(path):
            raise CheckpointError(f"checkpoint array file missing: {entry['file']}")
        dtype = _NP_DTYPES[entry["dtype"]]
        expected = int(np.prod(entry["shape"])) * np.dtype(dtype).itemsize
        if os.path.getsize(path) != expected:
            raise CheckpointError(
                f"corrupt checkpoint: {entry['file']} holds "
                f"{os.path.getsize(path)} bytes, expected {expected}")
        arr = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
        arr = arr.astype(dtype, copy=False).reshape(entry["shape"])
        paramsets.setdefault(group, {})[name] = torch.from_numpy(arr.copy())
    return paramsets, manifest
