"""Pairing, patient-level splits, the adversarial training loop, transfer."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .net import (
    Checkpoint,
    build_discriminator,
    build_generator,
    config_fingerprint,
    forward_discriminator,
    forward_generator,
    GeneratorSpec,
    load_state,
    save_checkpoint,
)
from .objective import LossWeights, l1_loss, log_losses, lsgan_d_loss, lsgan_g_loss, total_loss, tumor_focus_loss
from .prep import AugmentParams, MaskPipelineParams, random_bias_field, random_flip
from .volgrid import CHANNELS, PAIRING_WINDOW_DAYS, CasePair, Tracer

__all__ = [
    "NumericalError",
    "PairingPolicy",
    "TrainConfig",
    "TrainResult",
    "case_tensors",
    "lr_schedule",
    "predict",
    "pretrain_finetune",
    "select_pairs",
    "split_dataset",
    "train",
    "transfer_weights",
]

ADAM_BETAS = (0.5, 0.999)


class NumericalError(RuntimeError):
    """A loss or parameter became NaN/Inf during training."""


@dataclasses.dataclass(frozen=True)
class PairingPolicy:
    max_days: int = 30

    def __post_init__(self):
        if self.max_days <= 0:
            raise ValueError("max_days must be > 0")

    @classmethod
    def for_tracer(cls, tracer) -> "PairingPolicy":
        return cls(PAIRING_WINDOW_DAYS[Tracer(tracer)])


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training protocol.

    ``iters_per_epoch`` defaults to one pass over the training set.
    """

    epochs_fixed: int = 50
    epochs_decay: int = 20
    lr0: float = 1e-4
    batch_size: int = 1
    weights: LossWeights = LossWeights()
    augment: AugmentParams = AugmentParams()
    mask_params: MaskPipelineParams = MaskPipelineParams()
    test_fraction: float = 0.10
    seed: int = 0
    channels: tuple = CHANNELS
    iters_per_epoch: Optional[int] = None
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.epochs_fixed < 0 or self.epochs_decay < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        if not self.channels or any(c not in CHANNELS for c in self.channels) or len(set(self.channels)) != len(self.channels):
            raise ValueError(f"channels must be a non-empty subset of {CHANNELS}")
        if self.batch_size < 1 or self.lr0 <= 0 or self.threads < 1:
            raise ValueError("batch_size, lr0 and threads must be positive")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be >= 1")

    @property
    def n_epochs(self) -> int:
        return self.epochs_fixed + self.epochs_decay

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d


def select_pairs(cases, policy: PairingPolicy) -> list:
    """Cases whose MRI and PET dates are at most ``policy.max_days`` apart."""
    return [c for c in cases if c.date_gap_days <= policy.max_days]


def split_dataset(cases, test_fraction: float = 0.10, seed: int = 0) -> tuple:
    """Patient-level split; whole patients go to test until the fraction is met."""
    cases = list(cases)
    patients = sorted({c.patient_id for c in cases})
    if len(patients) < 2:
        raise ValueError("a split needs at least 2 distinct patients")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    order = [patients[i] for i in np.random.default_rng(seed).permutation(len(patients))]
    per_patient = {p: sum(c.patient_id == p for c in cases) for p in patients}
    target = test_fraction * len(cases)
    test_ids, n_test = set(), 0
    for p in order[:-1]:
        if n_test >= target:
            break
        test_ids.add(p)
        n_test += per_patient[p]
    train = [c for c in cases if c.patient_id not in test_ids]
    test = [c for c in cases if c.patient_id in test_ids]
    return train, test


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` then linear decay reaching ``lr0 / epochs_decay`` at the end."""
    if not 0 <= epoch < cfg.n_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.n_epochs})")
    if epoch < cfg.epochs_fixed:
        return cfg.lr0
    return cfg.lr0 * (cfg.n_epochs - epoch) / cfg.epochs_decay


def case_tensors(c: CasePair, channels=CHANNELS, dtype=torch.float32) -> tuple:
    """Brain-masked ``(x, y, brain, tumor)`` tensors for one case."""
    brain = np.asarray(c.brain_mask.data)
    x = np.stack([np.where(brain, c.channel(ch).data, 0.0) for ch in channels])
    y = np.where(brain, c.pet.data, 0.0)[None]
    return (
        torch.as_tensor(x, dtype=dtype),
        torch.as_tensor(y, dtype=dtype),
        torch.as_tensor(np.array(brain)),
        torch.as_tensor(np.array(c.tumor_mask.data)),
    )


def _augment(c: CasePair, rng: np.random.Generator, params: AugmentParams) -> CasePair:
    c = random_flip(c, rng, params.flip_prob)
    mri = tuple(m.with_data(np.clip(random_bias_field(m, rng, params).data, 0.0, 1.0)) for m in c.mri)
    return dataclasses.replace(c, mri=mri)


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list


def _fingerprint(cfg: TrainConfig, spec: GeneratorSpec) -> str:
    return config_fingerprint({"train": cfg.to_dict(), "generator": spec.to_dict()})


def _finite(module: torch.nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in module.parameters())


def _dump(out_dir, x, y, it, losses) -> str:
    path = Path(out_dir or ".") / f"nonfinite_batch_iter{it}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, x=x.detach().numpy(), y=y.detach().numpy(), **{k: float(torch.as_tensor(v).detach()) for k, v in losses.items()})
    return str(path)


def train(
    dataset,
    cfg: TrainConfig,
    init: Optional[Checkpoint] = None,
    spec: Optional[GeneratorSpec] = None,
    out_dir: Union[str, os.PathLike, None] = None,
    log_stream=None,
) -> TrainResult:
    """Alternate one discriminator and one generator Adam step per iteration.

    The discriminator steps first; the generator's adversarial term is then
    evaluated with the updated discriminator.
    The generator's prediction is multiplied by the brain mask before every
    loss, matching the masked inputs and targets.  When ``out_dir`` is
    given, a checkpoint is written there after every epoch together with
    ``loss_log.jsonl``.  Zero epochs return ``init`` untouched.
    """
    cases = list(dataset)
    if not cases:
        raise ValueError("training set is empty")
    if spec is None:
        spec = init.generator_spec if init is not None else GeneratorSpec(in_channels=len(cfg.channels), volume_shape=cases[0].pet.shape)
    if spec.in_channels != len(cfg.channels):
        raise ValueError(f"generator expects {spec.in_channels} channels but config selects {len(cfg.channels)}")
    shapes = {c.pet.shape for c in cases}
    if shapes != {spec.volume_shape}:
        raise ValueError(f"case grids {sorted(shapes)} do not match generator volume_shape {spec.volume_shape}")
    fingerprint = _fingerprint(cfg, spec)

    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    g = build_generator(spec, rng=cfg.seed)
    d = build_discriminator(len(cfg.channels) + 1, ndim=3, rng=cfg.seed + 1)
    if init is not None:
        load_state(g, init.generator_state)
        if init.discriminator_state:
            load_state(d, init.discriminator_state)
    if cfg.n_epochs == 0:
        ckpt = init if init is not None else Checkpoint.from_modules(g, d, epoch=0, fingerprint=fingerprint)
        return TrainResult(ckpt, [])

    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr0, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr0, betas=ADAM_BETAS)
    rng = np.random.default_rng(cfg.seed)
    n_iter = cfg.iters_per_epoch or math.ceil(len(cases) / cfg.batch_size)
    log, it = [], 0
    out = Path(out_dir) if out_dir is not None else None
    own_stream = None
    if log_stream is None:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            own_stream = log_stream = open(out / "loss_log.jsonl", "w")
        else:
            log_stream = io.StringIO()
    w = cfg.weights
    ckpt = None
    try:
        order = []
        for epoch in range(cfg.n_epochs):
            lr = lr_schedule(epoch, cfg)
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            for _ in range(n_iter):
                batch = []
                for _ in range(cfg.batch_size):
                    if not order:
                        order = list(rng.permutation(len(cases)))
                    batch.append(_augment(cases[order.pop(0)], rng, cfg.augment))
                tens = [case_tensors(c, cfg.channels) for c in batch]
                x = torch.stack([t[0] for t in tens])
                y = torch.stack([t[1] for t in tens])
                brain = torch.stack([t[2] for t in tens])[:, None]
                tumors = [t[3] for t in tens]

                fake = forward_generator(g, x) * brain
                d_real, _ = forward_discriminator(d, x, y)
                d_fake, _ = forward_discriminator(d, x, fake.detach())
                loss_d = lsgan_d_loss(d_real, d_fake)
                if not torch.isfinite(loss_d):
                    path = _dump(out, x, y, it, {"gan_d": loss_d})
                    raise NumericalError(f"non-finite loss ['gan_d'] at iteration {it} (epoch {epoch}); batch saved to {path}")
                opt_d.zero_grad(set_to_none=True)
                loss_d.backward()
                opt_d.step()

                loss_g_adv = lsgan_g_loss(forward_discriminator(d, x, fake)[0]) if w.lambda1 else fake.sum() * 0.0
                loss_l1 = l1_loss(fake, y, brain)
                if w.lambda3:
                    loss_focus = torch.stack(
                        [tumor_focus_loss(fake[b, 0], y[b, 0], tumors[b].numpy(), cfg.mask_params, "train_soft") for b in range(len(batch))]
                    ).mean()
                else:
                    loss_focus = fake.sum() * 0.0
                loss_total = total_loss({"gan": loss_g_adv, "l1": loss_l1, "focus": loss_focus}, w)
                losses = {"gan_g": loss_g_adv, "gan_d": loss_d, "l1": loss_l1, "focus": loss_focus, "total": loss_total}
                bad = [k for k, v in losses.items() if not torch.isfinite(v)]
                if bad:
                    path = _dump(out, x, y, it, losses)
                    raise NumericalError(f"non-finite loss {bad} at iteration {it} (epoch {epoch}); batch saved to {path}")
                opt_g.zero_grad(set_to_none=True)
                loss_total.backward()
                opt_g.step()
                if not (_finite(g) and _finite(d)):
                    path = _dump(out, x, y, it, losses)
                    raise NumericalError(f"non-finite parameters after iteration {it} (epoch {epoch}); batch saved to {path}")
                rec = log_losses(log_stream, it, loss_g_adv, loss_d, loss_l1, loss_focus, loss_total, lr)
                rec["epoch"] = epoch
                log.append(rec)
                it += 1
            ckpt = Checkpoint.from_modules(g, d, {"g": (opt_g, g), "d": (opt_d, d)}, epoch=epoch + 1, fingerprint=fingerprint)
            if out is not None:
                save_checkpoint(ckpt, out / "checkpoints" / f"epoch_{epoch + 1:03d}")
    finally:
        if own_stream is not None:
            own_stream.close()
    return TrainResult(ckpt, log)


def predict(ckpt_or_generator, case: CasePair, channels=None) -> np.ndarray:
    """Brain-masked PET prediction for one case as a float64 array."""
    g = ckpt_or_generator.generator() if isinstance(ckpt_or_generator, Checkpoint) else ckpt_or_generator
    if channels is None:
        channels = CHANNELS if g.spec.in_channels == 4 else CHANNELS[: g.spec.in_channels]
    x, _, brain, _ = case_tensors(case, channels)
    g.eval()
    with torch.no_grad():
        y = forward_generator(g, x[None])[0, 0]
    return np.where(brain.numpy(), y.numpy().astype(np.float64), 0.0)


# --------------------------------------------------------------------------
# transfer


STEM_PREFIXES = {"generator": ("stem.",), "discriminator": ("net.0.",)}


def transfer_weights(ckpt: Checkpoint, spec: GeneratorSpec, disc_in_channels: int, seed: int = 0) -> Checkpoint:
    """Initial checkpoint for ``spec`` carrying over every transferable array.

    Stem parameters whose shapes differ (different input channel count) are
    freshly initialized together with the rest of their stem; any other
    shape difference is an error.
    """
    g_new = build_generator(spec, rng=seed)
    d_new = build_discriminator(disc_in_channels, rng=seed + 1)
    out = {}
    for kind, new_state, old_state in (
        ("generator", g_new.state_dict(), ckpt.generator_state),
        ("discriminator", d_new.state_dict(), ckpt.discriminator_state),
    ):
        prefixes = STEM_PREFIXES[kind]
        if not old_state:
            out[kind] = {k: v.numpy().copy() for k, v in new_state.items()}
            continue
        if set(new_state) != set(old_state):
            raise ValueError(f"{kind} layer lists differ between phases")
        stem_changed = any(
            tuple(old_state[k].shape) != tuple(v.shape) for k, v in new_state.items() if k.startswith(prefixes)
        )
        arrays = {}
        for k, v in new_state.items():
            is_stem = k.startswith(prefixes)
            if is_stem and stem_changed:
                arrays[k] = v.numpy().copy()
            elif tuple(old_state[k].shape) != tuple(v.shape):
                raise ValueError(f"{kind} parameter {k} changes shape {old_state[k].shape} -> {tuple(v.shape)} outside the stem")
            else:
                arrays[k] = np.array(old_state[k], copy=True)
        out[kind] = arrays
    return Checkpoint(
        generator_spec=spec,
        generator_state=out["generator"],
        discriminator_spec=d_new.spec,
        discriminator_state=out["discriminator"],
        epoch=0,
        fingerprint=ckpt.fingerprint,
    )


def pretrain_finetune(
    fdg_dataset,
    fmiso_dataset,
    cfg_pre: TrainConfig,
    cfg_fine: TrainConfig,
    spec: Optional[GeneratorSpec] = None,
    out_dir: Union[str, os.PathLike, None] = None,
) -> TrainResult:
    """Train on FDG-like cases (no focus term), then fine-tune on FMISO-like."""
    fmiso = list(fmiso_dataset)
    base = spec or GeneratorSpec(volume_shape=fmiso[0].pet.shape)
    pre_spec = dataclasses.replace(base, in_channels=len(cfg_pre.channels))
    fine_spec = dataclasses.replace(base, in_channels=len(cfg_fine.channels))
    cfg_pre = dataclasses.replace(cfg_pre, weights=dataclasses.replace(cfg_pre.weights, lambda3=0.0))
    root = Path(out_dir) if out_dir is not None else None
    pre = train(fdg_dataset, cfg_pre, spec=pre_spec, out_dir=root / "pretrain" if root else None)
    init = transfer_weights(pre.checkpoint, fine_spec, len(cfg_fine.channels) + 1, cfg_fine.seed)
    fine = train(fmiso, cfg_fine, init=init, spec=fine_spec, out_dir=root / "finetune" if root else None)
    if root is not None:
        (root / "phases.json").write_text(json.dumps({"pretrain_log_len": len(pre.log), "finetune_log_len": len(fine.log)}) + "\n")
    return TrainResult(fine.checkpoint, pre.log + fine.log)
