"""Conditional WGAN-GP feature generator and the combined training loop.

The generator is conditioned on the dynamic semantic prototype: visual
prior noise concatenated with the updated class prototype. Per generator
step the critic takes several update steps first; the generator update also
trains the encoder, knowledge network, global prior, and prototype-updation
map under one summed objective:

    total = adversarial + cls_weight * CE(frozen seen classifier)
          + lambda_con * contrastive + lambda_kl * KL + lambda_sc * consistency

With the knowledge and updation modules disabled the loop reduces exactly
to a CLSWGAN-style baseline conditioned on Gaussian noise plus the
predefined prototype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import (DatasetBundle, ExperimentConfig, RngStream, ValidationError,
                   require_valid, require_valid_config, seeded_rng)
from .data import batches
from .nn import (MlpSpec, ParamSet, adam_step, fit_softmax, forward, init_adam,
                 init_mlp, mlp)
from .vdkl import VdklState, encode_with, prior_noise_with, select_positives, \
    contrastive_loss, kl_loss
from .vosu import VosuState, stage2_consistency, update_prototypes


def gan_hidden(d_v: int) -> int:
    return 4096 if d_v >= 256 else max(16, 4 * d_v)


@dataclass
class DynamicPrototype:
    """Generator condition: prior noise rows next to updated prototype rows."""

    z_prime: torch.Tensor   # [n, d_a]
    a_dot: torch.Tensor     # [n, d_a]

    def cond(self) -> torch.Tensor:
        if self.z_prime.shape != self.a_dot.shape:
            raise ValidationError(
                f"prior noise {tuple(self.z_prime.shape)} and prototype rows "
                f"{tuple(self.a_dot.shape)} must match")
        return torch.cat([self.z_prime, self.a_dot], dim=1)


@dataclass
class GanState:
    gen_spec: MlpSpec
    critic_spec: MlpSpec
    gen: ParamSet
    critic: ParamSet
    cls_spec: MlpSpec | None            # frozen seen-class regularizer
    cls: ParamSet | None
    seen_pos: torch.Tensor              # global label -> seen position, -1 elsewhere
    gen_steps: int = 0
    critic_updates: int = 0

    def trainable_gen(self) -> ParamSet:
        return {f"G.{k}": v for k, v in self.gen.items()}

    def load_gen(self, merged: ParamSet) -> None:
        for k, v in merged.items():
            group, name = k.split(".", 1)
            if group == "G":
                self.gen[name] = v


def _seen_position_map(seen_classes: np.ndarray, n_classes: int) -> torch.Tensor:
    pos = torch.full((n_classes,), -1, dtype=torch.long)
    for i, c in enumerate(np.sort(seen_classes)):
        pos[int(c)] = i
    return pos


def init_gan(config: ExperimentConfig, bundle: DatasetBundle, rng: RngStream,
             pretrain_cls: bool = True,
             dtype: torch.dtype = torch.float32) -> GanState:
    """Generator/critic parameters plus the frozen seen-class classifier.

    The generator's output activation follows the data: relu when training
    features are non-negative (the usual case for extracted visual
    features), identity otherwise so signed features stay reachable.
    """
    hidden = gan_hidden(config.d_v)
    nonneg = bool(bundle.features[bundle.train_seen].min() >= 0)
    gen_spec = mlp((2 * config.d_a, hidden, config.d_v),
                   out="relu" if nonneg else "identity")
    critic_spec = mlp((config.d_v + config.d_a, hidden, 1))
    gen = init_mlp(gen_spec, rng.derive("init.G"), dtype=dtype)
    critic = init_mlp(critic_spec, rng.derive("init.D"), dtype=dtype)

    seen_pos = _seen_position_map(bundle.seen_classes, bundle.n_classes)
    cls_spec = None
    cls = None
    if pretrain_cls and config.lambda_cls > 0:
        x = torch.from_numpy(bundle.features[bundle.train_seen])
        y = seen_pos[torch.from_numpy(bundle.labels[bundle.train_seen])]
        cls_spec, cls = fit_softmax(
            x, y, n_classes=len(bundle.seen_classes), rng=rng.derive("cls_pre"),
            beta1=config.beta1, beta2=config.beta2,
            batch_size=config.batch_size)
    return GanState(gen_spec=gen_spec, critic_spec=critic_spec, gen=gen,
                    critic=critic, cls_spec=cls_spec, cls=cls,
                    seen_pos=seen_pos)


def generate(gan: GanState, cond: DynamicPrototype) -> torch.Tensor:
    """Synthetic feature rows for a batch of conditions; deterministic."""
    return forward(gan.gen_spec, gan.gen, cond.cond())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def critic_loss_with(critic_spec: MlpSpec, critic: ParamSet,
                     x_real: torch.Tensor, x_fake: torch.Tensor,
                     cond_a: torch.Tensor, u: torch.Tensor,
                     lambda_gp: float) -> torch.Tensor:
    """Wasserstein critic objective with gradient penalty on interpolates."""
    if x_real.shape != x_fake.shape:
        raise ValidationError("real and fake batches must have equal shapes")
    d_real = forward(critic_spec, critic, torch.cat([x_real, cond_a], dim=1))
    d_fake = forward(critic_spec, critic, torch.cat([x_fake, cond_a], dim=1))
    loss = d_fake.mean() - d_real.mean()
    if lambda_gp > 0:
        x_tilde = (u * x_real + (1.0 - u) * x_fake).detach().requires_grad_(True)
        d_interp = forward(critic_spec, critic,
                           torch.cat([x_tilde, cond_a], dim=1))
        grad = torch.autograd.grad(d_interp.sum(), x_tilde, create_graph=True)[0]
        penalty = ((grad.norm(2, dim=1) - 1.0) ** 2).mean()
        loss = loss + lambda_gp * penalty
    return loss


def critic_loss(gan: GanState, x_real: torch.Tensor, x_fake: torch.Tensor,
                cond_a: torch.Tensor, rng: RngStream,
                lambda_gp: float = 10.0) -> torch.Tensor:
    u = rng.uniform(x_real.shape[0], 1, dtype=x_real.dtype)
    return critic_loss_with(gan.critic_spec, gan.critic, x_real, x_fake,
                            cond_a, u, lambda_gp)


@dataclass
class GenDraws:
    """Randomness for one loss evaluation, drawn once so losses stay pure."""

    enc_eps: torch.Tensor | None = None     # [n, d_z] reparameterization noise
    prior_eps: torch.Tensor | None = None   # [n, d_a] prior-composition noise
    cond_noise: torch.Tensor | None = None  # [n, d_a] plain condition noise
    pos_index: torch.Tensor | None = None   # [n] contrastive positives


def draw_randomness(config: ExperimentConfig, n: int, rng: RngStream,
                    labels: torch.Tensor | None = None,
                    with_positives: bool = False,
                    dtype: torch.dtype = torch.float32) -> GenDraws:
    """Fixed draw order so identical seeds give identical training runs."""
    draws = GenDraws()
    if config.use_vdkl:
        draws.enc_eps = rng.normal(n, config.d_z, dtype=dtype)
        draws.prior_eps = rng.normal(n, config.d_a, dtype=dtype)
    else:
        draws.cond_noise = rng.normal(n, config.d_a, dtype=dtype)
    if with_positives and labels is not None:
        draws.pos_index = select_positives(labels, rng)
    return draws


def _split(merged: ParamSet) -> dict[str, ParamSet]:
    groups: dict[str, ParamSet] = {}
    for k, v in merged.items():
        g, name = k.split(".", 1)
        groups.setdefault(g, {})[name] = v
    return groups


def collect_trainables(gan: GanState, vdkl: VdklState | None,
                       vosu: VosuState | None,
                       config: ExperimentConfig) -> ParamSet:
    merged = gan.trainable_gen()
    if config.use_vdkl:
        merged.update(vdkl.trainable())
    if config.use_vosu:
        merged.update(vosu.trainable_sum())
    return merged


def generator_loss_with(trainables: ParamSet, gan: GanState,
                        vdkl: VdklState | None, vosu: VosuState | None,
                        x: torch.Tensor, y: torch.Tensor, a: torch.Tensor,
                        prototypes: torch.Tensor,
                        config: ExperimentConfig, draws: GenDraws
                        ) -> tuple[torch.Tensor, dict, torch.Tensor | None]:
    """Total objective on explicit leaf parameters and frozen randomness.

    Returns (total, per-term tensors, refreshed prototype table or None).
    Critic and frozen-classifier parameters enter as constants only.
    """
    groups = _split(trainables)
    gen_params = groups.get("G", gan.gen)
    zero = torch.zeros((), dtype=x.dtype)

    l_con = zero
    l_kl = zero
    if config.use_vdkl:
        ve = groups.get("VE", vdkl.ve)
        dkl = groups.get("DKL", vdkl.dkl)
        p = groups.get("P", {"p": vdkl.p})["p"]
        enc = encode_with(vdkl.arch, ve, x, draws.enc_eps)
        z_prime = prior_noise_with(vdkl, enc.z, draws.prior_eps, dkl=dkl, p=p)
        if config.use_lcon and config.lambda_con > 0:
            l_con = contrastive_loss(enc.l, y, vdkl.tau,
                                     pos_index=draws.pos_index)
        l_kl = kl_loss(enc.mu, enc.logvar)
    else:
        z_prime = draws.cond_noise

    l_sc = zero
    new_table = None
    if config.use_vosu:
        sum_map = groups.get("SUM", vosu.sum_map)
        table = forward(vosu.sum_spec, sum_map, prototypes)
        a_rows = table[y.long()]
        new_table = table.detach()
        if config.use_lsc and config.lambda_sc > 0:
            drift = forward(vosu.sum_spec, sum_map, new_table) - new_table
            l_sc = drift.abs().sum(dim=1).mean()
    else:
        a_rows = a

    fake = forward(gan.gen_spec, gen_params,
                   DynamicPrototype(z_prime, a_rows).cond())
    adv = -forward(gan.critic_spec, gan.critic,
                   torch.cat([fake, a_rows], dim=1)).mean()

    l_cls = zero
    if gan.cls is not None and config.lambda_cls > 0:
        y_local = gan.seen_pos[y.long()]
        if bool((y_local < 0).any()):
            raise ValidationError("generator batches must hold seen-class labels")
        l_cls = F.cross_entropy(forward(gan.cls_spec, gan.cls, fake), y_local)

    lam_con = config.lambda_con if (config.use_vdkl and config.use_lcon) else 0.0
    lam_kl = config.lambda_kl if config.use_vdkl else 0.0
    lam_sc = config.lambda_sc if (config.use_vosu and config.use_lsc) else 0.0
    total = adv + config.lambda_cls * l_cls \
        + lam_con * l_con + lam_kl * l_kl + lam_sc * l_sc
    comps = {"l_g_adv": adv, "l_cls": l_cls, "l_con": l_con,
             "l_kl": l_kl, "l_sc": l_sc, "l_total": total}
    return total, comps, new_table


def generator_loss(gan: GanState, vdkl: VdklState | None,
                   vosu: VosuState | None,
                   batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
                   prototypes, config: ExperimentConfig,
                   rng: RngStream) -> dict:
    """Assembled objective on the current parameters; refreshes the
    prototype cache as a side effect. Returns per-term floats plus the
    total as a tensor."""
    x, y, a = batch
    proto_t = prototypes if torch.is_tensor(prototypes) \
        else torch.from_numpy(np.ascontiguousarray(prototypes)).to(x.dtype)
    draws = draw_randomness(config, x.shape[0], rng, labels=y,
                            with_positives=config.use_vdkl and config.use_lcon
                            and config.lambda_con > 0, dtype=x.dtype)
    trainables = collect_trainables(gan, vdkl, vosu, config)
    total, comps, new_table = generator_loss_with(
        trainables, gan, vdkl, vosu, x, y, a, proto_t, config, draws)
    if new_table is not None:
        vosu.proto_cache = new_table
    out = {k: float(v.detach()) for k, v in comps.items()}
    out["l_total_tensor"] = total
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _update(params: ParamSet, build_loss, opt) -> tuple[ParamSet, object, object]:
    """One Adam step: fresh leaves, autograd, write-back."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    out = build_loss(leaves)
    total = out[0] if isinstance(out, tuple) else out
    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    gdict = {k: (g.detach() if g is not None else torch.zeros_like(v))
             for (k, v), g in zip(leaves.items(), grads)}
    new_params, opt = adam_step(opt, params, gdict)
    return new_params, opt, out


def train(gan: GanState, vdkl: VdklState | None, vosu: VosuState | None,
          bundle: DatasetBundle, config: ExperimentConfig,
          log_path: str | None = None) -> list[dict]:
    """Alternating critic/generator optimization over train_seen.

    Every critic update consumes one batch; after ``critic_steps`` of them
    the same batch drives one generator-side update (generator, encoder,
    knowledge net, prior vector, and updation map together). Returns one
    log row per generator step.
    """
    require_valid_config(config)
    require_valid(bundle)
    if config.use_vdkl and vdkl is None:
        raise ValidationError("use_vdkl requires an initialized knowledge module")
    if config.use_vosu:
        if vosu is None:
            raise ValidationError("use_vosu requires an initialized updation module")
        if not vosu.stage1_done:
            raise ValidationError("run stage-1 prototype pretraining before GAN training")

    root = seeded_rng(config.seed)
    data_rng = root.derive("gan.data")
    noise_rng = root.derive("gan.noise")
    proto_t = torch.from_numpy(bundle.prototypes)

    critic_opt = init_adam(gan.critic, lr=config.lr, beta1=config.beta1,
                           beta2=config.beta2)
    gen_params = collect_trainables(gan, vdkl, vosu, config)
    gen_opt = init_adam(gen_params, lr=config.lr, beta1=config.beta1,
                        beta2=config.beta2)

    def write_back(merged: ParamSet) -> None:
        gan.load_gen(merged)
        if config.use_vdkl:
            vdkl.load_trainable({k: v for k, v in merged.items()
                                 if k.split(".", 1)[0] in ("VE", "DKL", "P")})
        if config.use_vosu:
            vosu.load_trainable({k: v for k, v in merged.items()
                                 if k.startswith("SUM.")})

    rows: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write("step\tl_d\tl_g_adv\tl_cls\tl_con\tl_kl\tl_sc\tl_total\n")
    try:
        pending_d: list[float] = []
        since_gen = 0
        for _epoch in range(config.epochs):
            for x, y, a in batches(bundle, config.batch_size, data_rng):
                # critic update: generator side is constant data here
                draws = draw_randomness(config, x.shape[0], noise_rng, dtype=x.dtype)
                with torch.no_grad():
                    if config.use_vosu:
                        cond_rows = forward(vosu.sum_spec, vosu.sum_map,
                                            proto_t)[y.long()]
                    else:
                        cond_rows = a
                    if config.use_vdkl:
                        enc = encode_with(vdkl.arch, vdkl.ve, x, draws.enc_eps)
                        z_prime = prior_noise_with(vdkl, enc.z, draws.prior_eps)
                    else:
                        z_prime = draws.cond_noise
                    fake = forward(gan.gen_spec, gan.gen,
                                   DynamicPrototype(z_prime, cond_rows).cond())
                u = noise_rng.uniform(x.shape[0], 1, dtype=x.dtype)
                gan.critic, critic_opt, d_loss = _update(
                    gan.critic,
                    lambda leaves: critic_loss_with(
                        gan.critic_spec, leaves, x, fake, cond_rows, u,
                        config.lambda_gp),
                    critic_opt)
                gan.critic_updates += 1
                pending_d.append(float(d_loss.detach()))
                since_gen += 1
                if since_gen < config.critic_steps:
                    continue

                # generator-side update on the same batch
                since_gen = 0
                gdraws = draw_randomness(
                    config, x.shape[0], noise_rng, labels=y,
                    with_positives=config.use_vdkl and config.use_lcon
                    and config.lambda_con > 0, dtype=x.dtype)
                gen_params, gen_opt, out = _update(
                    gen_params,
                    lambda leaves: generator_loss_with(
                        leaves, gan, vdkl, vosu, x, y, a, proto_t, config,
                        gdraws),
                    gen_opt)
                write_back(gen_params)
                _total, comps, new_table = out
                if config.use_vosu and new_table is not None:
                    vosu.proto_cache = new_table
                gan.gen_steps += 1
                row = {"step": gan.gen_steps,
                       "l_d": sum(pending_d) / len(pending_d)}
                row.update({k: float(v.detach()) for k, v in comps.items()})
                pending_d = []
                rows.append(row)
                if log_fh:
                    log_fh.write(
                        "\t".join([str(row["step"])] + [
                            repr(row[k]) for k in ("l_d", "l_g_adv", "l_cls",
                                                   "l_con", "l_kl", "l_sc",
                                                   "l_total")]) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return rows
