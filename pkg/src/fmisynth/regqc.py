"""Registration quality control and a built-in rigid NMI registration."""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .prep import DegenerateInputError, MaskPipelineParams, gaussian_smooth, pet_mask
from .volgrid import BinaryMask, Geometry, Volume, resample

__all__ = [
    "QcResult",
    "QcThresholds",
    "RegistrationResult",
    "RigidTransform",
    "apply_rigid",
    "dice",
    "nmi",
    "qc_gate",
    "rigid_register",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _wrap(a: float) -> float:
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """Rotations (rad, applied x then y then z) and translations (mm).

    The transform maps a fixed-image world point ``x`` to the moving-image
    point ``R (x - c) + c + t`` where ``c`` is the fixed grid centre.
    """

    rotations: tuple = (0.0, 0.0, 0.0)
    translations: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(_wrap(float(r)) for r in self.rotations)
        tr = tuple(float(t) for t in self.translations)
        if len(rot) != 3 or len(tr) != 3 or not all(map(math.isfinite, rot + tr)):
            raise ValueError("rigid transform needs 3 finite rotations and translations")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", tr)

    @classmethod
    def from_vector(cls, p) -> "RigidTransform":
        return cls(tuple(p[:3]), tuple(p[3:]))

    def as_vector(self) -> np.ndarray:
        return np.array(self.rotations + self.translations)

    def rotation_matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotations
        cx, sx, cy, sy, cz, sz = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry), math.cos(rz), math.sin(rz)
        mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return mz @ my @ mx

    def matrix(self, center) -> np.ndarray:
        """4x4 world-to-world matrix about ``center``."""
        r = self.rotation_matrix()
        c = np.asarray(center, dtype=np.float64)
        out = np.eye(4)
        out[:3, :3] = r
        out[:3, 3] = c + np.asarray(self.translations) - r @ c
        return out


def _grid_center(g: Geometry) -> np.ndarray:
    mid = (np.asarray(g.shape, dtype=np.float64) - 1.0) / 2.0
    return np.asarray(g.affine)[:3, :3] @ mid + np.asarray(g.affine)[:3, 3]


def apply_rigid(moving, transform: RigidTransform, target: Geometry, center=None):
    """Resample ``moving`` onto ``target`` through ``transform``."""
    c = _grid_center(target) if center is None else center
    warped_affine = transform.matrix(c) @ np.asarray(target.affine)
    mode = "nearest" if isinstance(moving, BinaryMask) else "trilinear"
    out = resample(moving, Geometry(target.shape, target.spacing, warped_affine), mode)
    return type(out)(out.data, target.spacing, target.affine)


# --------------------------------------------------------------------------
# metrics


def _bin(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        raise DegenerateInputError("NMI of an image that is constant inside the mask")
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy(counts: np.ndarray) -> float:
    c = np.sort(counts[counts > 0]).astype(np.float64)
    p = c / c.sum()
    return float(-np.sum(p * np.log(p)))


def _nmi_values(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    ia, ib = _bin(a, bins), _bin(b, bins)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins)
    ha = _entropy(np.bincount(ia, minlength=bins))
    hb = _entropy(np.bincount(ib, minlength=bins))
    hab = _entropy(joint)
    return (ha + hb) / hab if hab > 0 else 2.0


def nmi(a: Volume, b: Volume, mask: BinaryMask, bins: int = 64) -> float:
    """Normalized mutual information ``(H(A) + H(B)) / H(A, B)`` inside ``mask``.

    Each image is min-max binned independently over the masked voxels.
    """
    m = np.asarray(mask.data)
    if not m.any():
        raise ValueError("NMI mask is empty")
    if a.shape != b.shape or a.shape != mask.shape:
        raise ValueError("NMI inputs must share one grid")
    return _nmi_values(a.data[m], b.data[m], bins)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice overlap ``2|A n B| / (|A| + |B|)``; 1.0 when both are empty."""
    if a.shape != b.shape:
        raise ValueError("Dice inputs must share one grid")
    na, nb = int(a.data.sum()), int(b.data.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a.data & b.data)) / (na + nb)


# --------------------------------------------------------------------------
# rigid registration


@dataclasses.dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    trace: tuple  # one tuple of accepted NMI values per resolution level
    levels: tuple  # (factor, final NMI) per level


def _downsample(v, factor: int):
    if factor == 1:
        return v
    shape = tuple(max(1, -(-n // factor)) for n in v.shape)
    aff = np.asarray(v.affine) @ np.diag([factor] * 3 + [1.0])
    aff[:3, 3] = np.asarray(v.affine)[:3, :3] @ np.full(3, (factor - 1) / 2.0) + np.asarray(v.affine)[:3, 3]
    g = Geometry(shape, tuple(s * factor for s in v.spacing), aff)
    if isinstance(v, BinaryMask):
        return resample(v, g, "nearest")
    return resample(gaussian_smooth(v, factor / 2.0), g, "trilinear")


def _golden_max(f, a: float, b: float, tol: float):
    c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def rigid_register(
    moving: Volume,
    fixed: Volume,
    mask: BinaryMask,
    bins: int = 64,
    factors=(4, 2, 1),
    max_sweeps: int = 50,
    min_gain: float = 1e-4,
    rotation_range: float = 0.08,
    translation_range: float = 2.0,
    return_result: bool = False,
):
    """Rigid transform maximizing NMI between the warped moving and fixed.

    Coarse-to-fine coordinate descent over the six parameters, each updated
    by a golden-section search on ``[p - h, p + h]``.  The bracket half-width
    ``h`` scales with the downsampling factor (``rotation_range`` rad and
    ``translation_range`` times the largest spacing, per unit factor).  A
    step is only kept if it increases NMI, so the recorded trace never
    decreases.
    """
    for img in (moving, fixed):
        if np.ptp(img.data) == 0:
            raise DegenerateInputError("cannot register a constant image")
    center = _grid_center(fixed.geometry)
    p = np.zeros(6)
    trace, levels = [], []
    for f in factors:
        fx, mv, mk = _downsample(fixed, f), _downsample(moving, f), _downsample(mask, f)
        sel = np.asarray(mk.data)
        if not sel.any():
            continue
        fvals = fx.data[sel]

        def score(q):
            warped = apply_rigid(mv, RigidTransform.from_vector(q), fx.geometry, center)
            vals = warped.data[sel]
            if np.ptp(vals) == 0:
                return 0.0
            return _nmi_values(vals, fvals, bins)

        best = score(p)
        level_trace = [best]
        half = np.array([rotation_range * f] * 3 + [translation_range * f * max(fixed.spacing)] * 3)
        for _ in range(max_sweeps):
            start = best
            for i in range(6):
                def line(x, i=i):
                    q = p.copy()
                    q[i] = x
                    return score(q)

                x, fxv = _golden_max(line, p[i] - half[i], p[i] + half[i], half[i] * 1e-2)
                if fxv > best:
                    p[i], best = x, fxv
                    level_trace.append(best)
            if best - start < min_gain:
                break
        trace.append(tuple(level_trace))
        levels.append((f, best))
    t = RigidTransform.from_vector(p)
    if return_result:
        return RegistrationResult(t, tuple(trace), tuple(levels))
    return t


# --------------------------------------------------------------------------
# QC gate


@dataclasses.dataclass(frozen=True)
class QcThresholds:
    min_nmi: float = 1.10
    min_dice: float = 0.85

    def __post_init__(self):
        if self.min_nmi < 1:
            raise ValueError("min_nmi must be >= 1")
        if not 0 <= self.min_dice <= 1:
            raise ValueError("min_dice must be in [0, 1]")


@dataclasses.dataclass(frozen=True)
class QcResult:
    accept: bool
    nmi: float
    dice: float

    @property
    def decision(self) -> str:
        return "accept" if self.accept else "reject"

    def to_json(self, case: str) -> str:
        return json.dumps({"case": case, "nmi": self.nmi, "dice": self.dice, "decision": self.decision})


def decide(nmi_value: float, dice_value: float, thresholds: QcThresholds) -> bool:
    return nmi_value >= thresholds.min_nmi and dice_value >= thresholds.min_dice


def qc_gate(
    a: Volume,
    b: Volume,
    brain_mask: BinaryMask,
    thresholds: QcThresholds = QcThresholds(),
    mask_params: MaskPipelineParams = MaskPipelineParams(),
) -> QcResult:
    """Accept a registered pair unless NMI or Otsu-mask Dice falls below threshold."""
    n = nmi(a, b, brain_mask)
    d = dice(pet_mask(a, mask_params), pet_mask(b, mask_params))
    return QcResult(decide(n, d, thresholds), n, d)
