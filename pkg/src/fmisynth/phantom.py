"""Seeded synthetic MRI + PET brain phantoms with optional tumors.

A phantom brain is an ellipsoid spanning about 80% of the grid with white
matter, a gray-matter cortex, an outer CSF layer and a central ventricle.
A tumor is a sphere with a necrotic core and an enhancing rim wrapped in
edema.  FMISO-like PET lights up a hypoxic shell between the core and the
edema; FDG-like PET is hot in gray matter.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
from typing import Optional

import numpy as np

from .volgrid import PAIRING_WINDOW_DAYS, BinaryMask, CasePair, Tracer, Volume

__all__ = ["INTENSITY", "PET_INTENSITY", "PhantomSpec", "generate_case", "generate_dataset"]

# Noise-free tissue intensities per MRI channel (t1, t1gd, t2, flair).
INTENSITY = {
    "wm": (0.70, 0.72, 0.35, 0.40),
    "gm": (0.55, 0.57, 0.50, 0.55),
    "csf": (0.15, 0.15, 0.90, 0.10),
    "edema": (0.45, 0.47, 0.80, 0.85),
    "rim": (0.50, 0.95, 0.60, 0.70),
    "core": (0.25, 0.30, 0.75, 0.60),
}

PET_INTENSITY = {
    Tracer.FMISO_like: {"wm": 0.20, "gm": 0.28, "csf": 0.05, "edema": 0.50, "rim": 1.00, "core": 0.10, "hypoxic": 1.00},
    Tracer.FDG_like: {"wm": 0.35, "gm": 0.80, "csf": 0.05, "edema": 0.30, "rim": 0.90, "core": 0.10, "hypoxic": 0.90},
}

_ORDER = ("wm", "gm", "csf", "edema", "rim", "core")
_EPOCH = _dt.date(2008, 1, 1)


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    """Phantom generation parameters.

    ``radius_range`` is in voxels; ``None`` picks 30-50% of the smallest
    brain semi-axis.  ``anatomy_seed`` (default: ``seed``) drives geometry,
    ``seed`` drives noise and dates, so two specs that differ only in
    ``seed`` share one anatomy.
    """

    shape: tuple = (32, 32, 16)
    tracer: Tracer = Tracer.FMISO_like
    noise_std: float = 0.02
    tumor: bool = True
    radius_range: Optional[tuple] = None
    seed: int = 0
    anatomy_seed: Optional[int] = None
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "tracer", Tracer(self.tracer))
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"phantom shape must be >= 8 per axis, got {self.shape}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.radius_range is not None:
            lo, hi = self.radius_range
            if not 0 < lo <= hi:
                raise ValueError("radius_range must satisfy 0 < lo <= hi")
            if hi >= 0.4 * min(self.shape):
                raise ValueError("tumor radius does not fit inside the brain")

    @property
    def semi_axes(self) -> np.ndarray:
        return 0.4 * np.asarray(self.shape, dtype=np.float64)


def _labels(spec: PhantomSpec, rng: np.random.Generator):
    shape = spec.shape
    center = (np.asarray(shape) - 1) / 2.0 + rng.uniform(-0.5, 0.5, 3)
    axes = spec.semi_axes * rng.uniform(0.97, 1.03, 3)
    grid = np.indices(shape, dtype=np.float64)
    rel = (grid - center[:, None, None, None]) / axes[:, None, None, None]
    r = np.sqrt((rel**2).sum(axis=0))

    labels = np.full(shape, "", dtype=object)
    brain = r <= 1.0
    labels[brain & (r <= 0.75)] = "wm"
    labels[brain & (r > 0.75)] = "gm"
    labels[brain & (r > 0.96)] = "csf"
    labels[np.sqrt(((rel / np.array([0.12, 0.18, 0.2])[:, None, None, None]) ** 2).sum(axis=0)) <= 1.0] = "csf"

    tumor = np.zeros(shape, bool)
    hypoxic = np.zeros(shape, bool)
    if spec.tumor:
        small = float(axes.min())
        lo, hi = spec.radius_range or (0.3 * small, 0.5 * small)
        radius = rng.uniform(lo, hi)
        for _ in range(1000):
            ang = rng.uniform(0, 2 * np.pi)
            off = rng.uniform(0.25, 0.55)
            tc_rel = np.array([off * np.cos(ang), off * np.sin(ang), rng.uniform(-0.1, 0.1)])
            tc = center + tc_rel * axes
            d = np.sqrt(((grid - tc[:, None, None, None]) ** 2).sum(axis=0))
            sphere = d <= radius
            if sphere.sum() and np.all(brain[sphere]) and np.all(r[d <= radius + 1.0] <= 0.97):
                break
        else:
            raise ValueError("tumor does not fit inside the brain for this spec")
        edema_width = max(3.0, 0.5 * radius)
        labels[brain & (d > radius) & (d <= radius + edema_width)] = "edema"
        labels[sphere] = "rim"
        labels[d < 0.45 * radius] = "core"
        tumor = sphere
        hypoxic = brain & (d >= 0.45 * radius) & (d <= radius + 1.0)
    return labels, brain, tumor, hypoxic


def generate_case(spec: PhantomSpec, patient_id: Optional[str] = None, case_id: Optional[str] = None, visit: int = 0) -> CasePair:
    """Deterministic phantom case for ``spec``."""
    anatomy = np.random.default_rng(spec.seed if spec.anatomy_seed is None else spec.anatomy_seed)
    noise = np.random.default_rng([spec.seed, 1])
    labels, brain, tumor, hypoxic = _labels(spec, anatomy)

    aff = np.diag(tuple(spec.spacing) + (1.0,))
    mri = []
    for ch in range(4):
        img = np.zeros(spec.shape)
        for tissue in _ORDER:
            img[labels == tissue] = INTENSITY[tissue][ch]
        mri.append(img)
    pet_table = PET_INTENSITY[spec.tracer]
    pet = np.zeros(spec.shape)
    for tissue in _ORDER:
        pet[labels == tissue] = pet_table[tissue]
    pet[hypoxic] = pet_table["hypoxic"]

    if spec.noise_std > 0:
        for img in mri + [pet]:
            img[brain] += noise.normal(0.0, spec.noise_std, int(brain.sum()))
            np.clip(img, 0.0, 1.0, out=img)

    pid = patient_id or f"P{spec.anatomy_seed if spec.anatomy_seed is not None else spec.seed:06d}"
    max_days = PAIRING_WINDOW_DAYS[spec.tracer]
    mri_date = _EPOCH + _dt.timedelta(days=int(noise.integers(0, 3000)) + 400 * visit)
    gap = int(noise.integers(0, max_days + 1)) * (1 if noise.random() < 0.5 else -1)
    return CasePair(
        mri=tuple(Volume(m, spec.spacing, aff) for m in mri),
        pet=Volume(pet, spec.spacing, aff),
        brain_mask=BinaryMask(brain, spec.spacing, aff),
        tumor_mask=BinaryMask(tumor, spec.spacing, aff),
        patient_id=pid,
        mri_date=mri_date,
        pet_date=mri_date + _dt.timedelta(days=gap),
        tracer=spec.tracer,
        case_id=case_id or f"{pid}-v{visit}",
    )


def generate_dataset(n: int, base_seed: int = 0, template: PhantomSpec = PhantomSpec(), duplicate_fraction: float = 0.0) -> list:
    """``n`` phantom cases with seeds ``base_seed + index``.

    ``duplicate_fraction`` is the fraction of patients contributing a second
    case; such a case reuses the patient's anatomy with fresh noise.  With
    ``n=51`` and ``duplicate_fraction=4/47`` there are 47 patients.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    n_dup = int(round(duplicate_fraction * n / (1.0 + duplicate_fraction)))
    n_dup = min(n_dup, n // 2)
    n_patients = n - n_dup
    stride = max(1, n_patients // max(n_dup, 1))
    cases = []
    for i in range(n):
        if i < n_patients:
            p, visit = i, 0
        else:
            p, visit = (i - n_patients) * stride, 1
        spec = dataclasses.replace(template, seed=base_seed + i, anatomy_seed=base_seed + p)
        pid = f"P{base_seed:04d}-{p:03d}"
        cases.append(generate_case(spec, patient_id=pid, case_id=f"{pid}-v{visit}", visit=visit))
    return cases
