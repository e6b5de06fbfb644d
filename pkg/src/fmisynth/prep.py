"""Preprocessing operators and training-time augmentations.

The PET masking pipeline is ``Otsu(contrast(smooth(p)))``: a separable
Gaussian blur, a power-law contrast on min-max rescaled intensities, and an
Otsu threshold.  :func:`soft_mask_tensor` is its differentiable counterpart
used inside the tumor-focus loss.
"""

from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np
import torch
from scipy import ndimage

from .volgrid import BinaryMask, CasePair, DynamicSeries, Volume

__all__ = [
    "AugmentParams",
    "DegenerateInputError",
    "MaskPipelineParams",
    "average_frames",
    "bias_field",
    "contrast_image",
    "dilate",
    "gamma_contrast",
    "gaussian_kernel",
    "gaussian_smooth",
    "normalize_intensity",
    "otsu_threshold",
    "pet_mask",
    "random_bias_field",
    "random_flip",
    "soft_mask_tensor",
    "soft_pet_mask",
]

#: Grid axis treated as left-right for flips.
LR_AXIS = 0


class DegenerateInputError(ValueError):
    """Raised when an operator needs intensity variation and finds none."""


@dataclasses.dataclass(frozen=True)
class MaskPipelineParams:
    sigma: float = 1.0
    gamma: float = 1.0
    soft_tau: float = 0.05

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.soft_tau <= 0:
            raise ValueError("soft_tau must be > 0")


@dataclasses.dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    bias_prob: float = 0.5
    bias_degree: int = 3
    bias_coeff_range: float = 0.3

    def __post_init__(self):
        for name in ("flip_prob", "bias_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.bias_degree < 0:
            raise ValueError("bias_degree must be >= 0")
        if self.bias_coeff_range < 0:
            raise ValueError("bias_coeff_range must be >= 0")


# --------------------------------------------------------------------------
# smoothing


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps with radius ``ceil(3 sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.ones(1)
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_array(a: np.ndarray, sigma: float) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if sigma == 0:
        return out.copy()
    k = gaussian_kernel(sigma)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return out


def gaussian_smooth(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian blur with half-sample symmetric ("reflect") borders."""
    return v.with_data(_smooth_array(v.data, sigma))


def _reflect_index(n: int, r: int) -> np.ndarray:
    # scipy "reflect": (d c b a | a b c d | d c b a)
    i = np.arange(-r, n + r) % (2 * n)
    return np.where(i >= n, 2 * n - 1 - i, i)


def _smooth_tensor(t: torch.Tensor, sigma: float) -> torch.Tensor:
    """Same blur as :func:`gaussian_smooth` on the last three axes of ``t``."""
    if sigma == 0:
        return t
    k = torch.as_tensor(gaussian_kernel(sigma), dtype=t.dtype, device=t.device)
    r = (k.numel() - 1) // 2
    lead = t.shape[:-3]
    x = t.reshape((-1, 1) + tuple(t.shape[-3:]))
    for axis in range(3):
        dim = 2 + axis
        idx = torch.as_tensor(_reflect_index(x.shape[dim], r), device=t.device)
        x = x.index_select(dim, idx)
        shape = [1, 1, 1, 1, 1]
        shape[dim] = k.numel()
        x = torch.nn.functional.conv3d(x, k.view(shape))
    return x.reshape(lead + tuple(t.shape[-3:]))


# --------------------------------------------------------------------------
# contrast + Otsu


def _minmax(a: np.ndarray):
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a, dtype=np.float64), True
    return (a - lo) / (hi - lo), False


def gamma_contrast(v: Volume, gamma: float, return_flag: bool = False):
    """Min-max rescale onto [0, 1] then raise to ``gamma``.

    A constant input maps to all zeros; pass ``return_flag=True`` to also get
    a boolean telling whether that happened.
    """
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    scaled, degenerate = _minmax(np.asarray(v.data))
    out = v.with_data(scaled if gamma == 1 else scaled**gamma)
    return (out, degenerate) if return_flag else out


def otsu_threshold(v, bins: int = 256) -> float:
    """Threshold maximizing between-class variance of a ``bins``-bin histogram.

    Candidate thresholds are the interior bin edges; voxels ``>=`` the
    returned value form the upper class.  Ties go to the lowest edge.
    """
    x = np.asarray(getattr(v, "data", v), dtype=np.float64).ravel()
    lo, hi = x.min(), x.max()
    if hi <= lo:
        raise DegenerateInputError("Otsu threshold of a constant image")
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts = counts.astype(np.float64)
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centers)[:-1]
    n, s = counts.sum(), float(np.dot(counts, centers))
    w1 = n - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - (s - s0) / w1) ** 2
    between[(w0 == 0) | (w1 == 0)] = 0.0
    return float(edges[int(np.argmax(between)) + 1])


def contrast_image(p: Volume, params: MaskPipelineParams) -> tuple:
    """Return ``(contrast(smooth(p)), degenerate_flag)``."""
    return gamma_contrast(gaussian_smooth(p, params.sigma), params.gamma, return_flag=True)


def pet_mask(p: Volume, params: MaskPipelineParams = MaskPipelineParams()) -> BinaryMask:
    """Binary PET support mask: Otsu threshold of the smoothed, contrasted PET."""
    g, degenerate = contrast_image(p, params)
    if degenerate:
        raise DegenerateInputError("PET mask of a constant volume")
    t = otsu_threshold(g)
    return BinaryMask(g.data >= t, p.spacing, p.affine)


def soft_mask_tensor(t: torch.Tensor, params: MaskPipelineParams, threshold) -> torch.Tensor:
    """Differentiable PET mask of the last three axes of ``t``.

    ``threshold`` is treated as a constant; min-max rescaling is done per
    leading index (per volume).
    """
    if params.soft_tau <= 0:
        raise ValueError("soft_tau must be > 0")
    g = _smooth_tensor(t, params.sigma)
    lo = g.amin(dim=(-3, -2, -1), keepdim=True)
    span = g.amax(dim=(-3, -2, -1), keepdim=True) - lo
    span = torch.where(span > 0, span, torch.ones_like(span))
    g = (g - lo) / span
    if params.gamma != 1:
        g = g.clamp_min(0) ** params.gamma
    thr = torch.as_tensor(threshold, dtype=t.dtype, device=t.device).detach()
    return torch.sigmoid((g - thr) / params.soft_tau)


def soft_pet_mask(p: Volume, params: MaskPipelineParams, threshold: float) -> Volume:
    """Logistic surrogate of :func:`pet_mask` at a fixed threshold."""
    t = torch.tensor(np.asarray(p.data), dtype=torch.float64)
    with torch.no_grad():
        out = soft_mask_tensor(t, params, threshold)
    return p.with_data(out.numpy())


# --------------------------------------------------------------------------
# PET frames and normalization


def average_frames(s: DynamicSeries, t0: float, t1: float) -> Volume:
    """Unweighted mean of frames whose mid-time lies in ``[t0, t1]`` minutes."""
    if not t0 < t1:
        raise ValueError("frame window needs t0 < t1")
    picked = [f for f, t in zip(s.frames, s.frame_mid_times) if t0 <= t <= t1]
    if not picked:
        raise ValueError(f"no frame mid-time falls in [{t0}, {t1}] min")
    return picked[0].with_data(np.mean([f.data for f in picked], axis=0))


def normalize_intensity(v: Volume, mask: BinaryMask, percentile: float = 99.5) -> Volume:
    """Clip at the within-mask percentile, min-max scale the mask to [0, 1].

    The percentile is taken with ``method="higher"`` (an actual sample value)
    so that normalizing twice is a no-op.  Voxels outside the mask become 0.
    """
    m = np.asarray(mask.data)
    if not m.any():
        raise ValueError("normalization mask is empty")
    inside = v.data[m]
    top = float(np.percentile(inside, percentile, method="higher"))
    lo = float(inside.min())
    if top <= lo:
        raise DegenerateInputError("constant intensities inside the mask")
    out = (np.minimum(v.data, top) - lo) / (top - lo)
    out[~m] = 0.0
    return v.with_data(out)


# --------------------------------------------------------------------------
# augmentation


def _flip(g):
    return g.with_data(np.flip(g.data, axis=LR_AXIS))


def random_flip(c: CasePair, rng: np.random.Generator, p: float = 0.5) -> CasePair:
    """With probability ``p`` mirror every member of the case left-right."""
    if rng.random() >= p:
        return c
    return dataclasses.replace(
        c,
        mri=tuple(_flip(m) for m in c.mri),
        pet=_flip(c.pet),
        brain_mask=_flip(c.brain_mask),
        tumor_mask=_flip(c.tumor_mask),
    )


def _monomials(degree: int):
    return [e for d in range(degree + 1) for e in itertools.product(range(d + 1), repeat=3) if sum(e) == d]


def bias_field(shape, coefficients, degree: int = 3) -> np.ndarray:
    """``exp(P)`` for a trivariate polynomial over coordinates in [-1, 1]^3.

    ``coefficients`` follow the order of total-degree-ascending monomials
    (20 of them for degree 3); the first one is the constant term.
    """
    terms = _monomials(degree)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(terms),):
        raise ValueError(f"degree {degree} needs {len(terms)} coefficients")
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(tuple(shape))
    for c, (i, j, k) in zip(coefficients, terms):
        if c != 0:
            poly += c * x**i * y**j * z**k
    return np.exp(poly)


def random_bias_field(v: Volume, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> Volume:
    """With probability ``bias_prob`` multiply by a random smooth bias field."""
    if rng.random() >= params.bias_prob:
        return v
    n = len(_monomials(params.bias_degree))
    r = params.bias_coeff_range
    coeffs = rng.uniform(-r, r, size=n)
    return v.with_data(v.data * bias_field(v.shape, coeffs, params.bias_degree))


def dilate(m: BinaryMask, iterations: int = 3) -> BinaryMask:
    """Iterated dilation with the full 3x3x3 structuring element."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0 or not m.data.any():
        return m.with_data(m.data)
    out = ndimage.binary_dilation(m.data, structure=np.ones((3, 3, 3), bool), iterations=iterations)
    return m.with_data(out)
