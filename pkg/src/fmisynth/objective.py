"""Adversarial, reconstruction and tumor-focus losses.

All functions take torch tensors and return 0-d tensors so they can be
differentiated; ``mask`` arguments may be boolean tensors or
:class:`~fmisynth.volgrid.BinaryMask` objects.
"""

from __future__ import annotations

import dataclasses
import json
from typing import IO, Optional

import numpy as np
import torch

from .prep import DegenerateInputError, MaskPipelineParams, contrast_image, dilate, otsu_threshold, soft_mask_tensor
from .volgrid import BinaryMask, Volume

__all__ = [
    "FOCUS_DILATION",
    "LossWeights",
    "focus_threshold",
    "l1_loss",
    "log_losses",
    "mask_disagreement",
    "lsgan_d_loss",
    "lsgan_g_loss",
    "total_loss",
    "tumor_focus_loss",
]

FOCUS_DILATION = 3


@dataclasses.dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 100.0
    lambda3: float = 100.0

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


def _t(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, (Volume, BinaryMask)):
        x = x.data
    t = x if isinstance(x, torch.Tensor) else torch.tensor(np.asarray(x))
    if like is not None and t.dtype != torch.bool:
        t = t.to(like.dtype)
    return t


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    if d_real.shape != d_fake.shape:
        raise ValueError(f"logit grids differ: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    return 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake**2).mean()


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((d_fake - 1) ** 2).mean()


def _bool_mask(mask, shape) -> torch.Tensor:
    m = _t(mask)
    m = m.to(torch.bool) if m.dtype != torch.bool else m
    if m.shape != shape:
        m = m.expand(shape) if m.ndim <= len(shape) else m
    if m.shape != shape:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match {tuple(shape)}")
    return m


def l1_loss(pred: torch.Tensor, target: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean absolute error over the voxels selected by ``mask`` (all if None)."""
    pred, target = _t(pred), _t(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    if mask is None:
        return diff.mean()
    m = _bool_mask(mask, pred.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("L1 mask is empty")
    return diff[m].sum() / n


def focus_threshold(true_pet, params: MaskPipelineParams) -> float:
    """Otsu threshold of the true PET's smoothed, contrasted image."""
    v = true_pet if isinstance(true_pet, Volume) else Volume(np.asarray(_t(true_pet).detach().cpu(), dtype=np.float64))
    g, degenerate = contrast_image(v, params)
    if degenerate:
        raise DegenerateInputError("tumor focus on a constant PET volume")
    return otsu_threshold(g)


def _hard_mask(v: torch.Tensor, params: MaskPipelineParams, threshold: float) -> torch.Tensor:
    g, _ = contrast_image(Volume(v.detach().cpu().numpy().astype(np.float64)), params)
    return torch.as_tensor(g.data >= threshold)


def mask_disagreement(pred_mask: torch.Tensor, true_mask: torch.Tensor, region) -> torch.Tensor:
    """Mean ``|pred_mask - true_mask|`` over the voxels of ``region``."""
    region = _bool_mask(region, pred_mask.shape)
    n = int(region.sum())
    if n == 0:
        raise ValueError("focus region is empty")
    return (pred_mask - _t(true_mask, pred_mask)).abs()[region].sum() / n


def tumor_focus_loss(
    pred_pet: torch.Tensor,
    true_pet: torch.Tensor,
    tumor_mask,
    params: MaskPipelineParams = MaskPipelineParams(),
    mode: str = "train_soft",
    dilation: int = FOCUS_DILATION,
) -> torch.Tensor:
    """Mean disagreement of PET masks over the dilated tumor region.

    ``pred_pet`` / ``true_pet`` are single 3D volumes.  ``eval_hard``
    compares the two binary Otsu masks; ``train_soft`` replaces the
    predicted mask by its logistic surrogate at the true PET's Otsu
    threshold so the loss has a gradient.  An empty tumor mask gives 0.
    """
    if mode not in ("train_soft", "eval_hard"):
        raise ValueError(f"unknown focus mode {mode!r}")
    pred = _t(pred_pet)
    true = _t(true_pet, pred)
    if pred.shape != true.shape or pred.ndim != 3:
        raise ValueError(f"focus loss needs two equal 3D volumes, got {tuple(pred.shape)} and {tuple(true.shape)}")
    tm = tumor_mask if isinstance(tumor_mask, BinaryMask) else BinaryMask(np.asarray(_t(tumor_mask).cpu(), dtype=bool))
    if tm.shape != tuple(pred.shape):
        raise ValueError("tumor mask does not match the PET grid")
    if not tm.data.any():
        return pred.sum() * 0.0
    region = torch.as_tensor(np.array(dilate(tm, dilation).data))
    thr = focus_threshold(true, params)
    true_mask = _hard_mask(true, params, thr).to(pred.dtype)
    if mode == "eval_hard":
        pred_thr = focus_threshold(pred, params)
        pred_mask = _hard_mask(pred, params, pred_thr).to(pred.dtype)
    else:
        pred_mask = soft_mask_tensor(pred, params, thr)
    return mask_disagreement(pred_mask, true_mask, region)


def total_loss(components: dict, w: LossWeights = LossWeights()):
    """``lambda1 * gan + lambda2 * l1 + lambda3 * focus``.

    A zero weight drops its term entirely, so a non-finite component with
    zero weight does not poison the sum.
    """
    out = 0.0
    for key, lam in (("gan", w.lambda1), ("l1", w.lambda2), ("focus", w.lambda3)):
        if lam != 0:
            out = out + lam * components[key]
    return out


def log_losses(stream: IO[str], it: int, gan_g, gan_d, l1, focus, total, lr) -> dict:
    """Append one JSON line of loss components to ``stream``."""
    rec = {"iter": int(it)}
    for k, v in (("gan_g", gan_g), ("gan_d", gan_d), ("l1", l1), ("focus", focus), ("total", total), ("lr", lr)):
        rec[k] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    stream.write(json.dumps(rec) + "\n")
    stream.flush()
    return rec
