"""Command-line entry point: ``fmisynth {phantom,prep,qc,train,predict,eval}``.

Every command accepts ``--config cfg.json`` and writes the fully
materialized configuration to ``resolved_config.json`` in its output
location.  Exit codes: 0 success, 1 usage or configuration error, 2 data
error, 3 QC reject, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluation, net, phantom, prep, regqc, train, volgrid
from .objective import LossWeights

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_QC, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class QcReject(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "phantom": {
        "shape": [32, 32, 16],
        "tracer": "FMISO_like",
        "noise_std": 0.02,
        "tumor": True,
        "radius_range": None,
        "spacing": [1.0, 1.0, 1.0],
        "duplicate_fraction": 0.0,
    },
    "mask": dataclasses.asdict(prep.MaskPipelineParams()),
    "augment": dataclasses.asdict(prep.AugmentParams()),
    "qc": {"min_nmi": 1.10, "min_dice": 0.85, "register": False},
    "generator": {
        "in_channels": None,
        "base_width": 16,
        "n_down": 2,
        "n_art": 2,
        "embed_dim": None,
        "n_heads": 4,
        "mlp_ratio": 4.0,
        "out_channels": 1,
        "volume_shape": None,
        "transformer": True,
        "norm": "instance",
    },
    "weights": dataclasses.asdict(LossWeights()),
    "train": {
        "epochs_fixed": 50,
        "epochs_decay": 20,
        "lr0": 1e-4,
        "batch_size": 1,
        "test_fraction": 0.10,
        "seed": 0,
        "channels": list(volgrid.CHANNELS),
        "iters_per_epoch": None,
        "threads": 1,
    },
    "pairing": {"max_days": None},
    "frames": {"t0": None, "t1": None},
    "prep": {"reference": "t2", "target_shape": None, "percentile": 99.5, "register": False, "qc": True},
    "paths": {"data": None, "out": None, "init": None},
}


def _check_type(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {where!r} has the wrong type ({type(value).__name__})")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Resolved configuration document; every section fully materialized."""

    sections: dict

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "RunConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        out = copy.deepcopy(DEFAULTS)
        for section, values in raw.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config key {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key!r}")
                _check_type(section, key, value, DEFAULTS[section][key])
                out[section][key] = value
        cfg = cls(out)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def __getitem__(self, section):
        return self.sections[section]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        p = d / "resolved_config.json"
        p.write_text(json.dumps(self.sections, indent=2, sort_keys=True) + "\n")
        return p

    # domain objects ------------------------------------------------------

    def phantom_spec(self, seed: int = 0) -> phantom.PhantomSpec:
        s = self["phantom"]
        rr = tuple(s["radius_range"]) if s["radius_range"] is not None else None
        return phantom.PhantomSpec(
            shape=tuple(s["shape"]), tracer=s["tracer"], noise_std=s["noise_std"], tumor=s["tumor"],
            radius_range=rr, seed=seed, spacing=tuple(s["spacing"]),
        )

    def mask_params(self) -> prep.MaskPipelineParams:
        return prep.MaskPipelineParams(**self["mask"])

    def augment_params(self) -> prep.AugmentParams:
        return prep.AugmentParams(**self["augment"])

    def qc_thresholds(self) -> regqc.QcThresholds:
        return regqc.QcThresholds(self["qc"]["min_nmi"], self["qc"]["min_dice"])

    def train_config(self) -> train.TrainConfig:
        t = dict(self["train"])
        t["channels"] = tuple(t["channels"])
        return train.TrainConfig(weights=LossWeights(**self["weights"]), augment=self.augment_params(), mask_params=self.mask_params(), **t)

    def generator_spec(self, volume_shape=None) -> net.GeneratorSpec:
        g = dict(self["generator"])
        g["in_channels"] = g["in_channels"] or len(self["train"]["channels"])
        shape = g["volume_shape"] or volume_shape
        if shape is None:
            raise ConfigError("generator.volume_shape is unknown (set it or provide data)")
        g["volume_shape"] = tuple(shape)
        try:
            return net.GeneratorSpec(**g)
        except ValueError as e:
            raise ConfigError(f"generator: {e}") from e

    def pairing_policy(self, tracer) -> train.PairingPolicy:
        m = self["pairing"]["max_days"]
        return train.PairingPolicy(m) if m is not None else train.PairingPolicy.for_tracer(tracer)

    def validate(self):
        try:
            self.phantom_spec()
            self.mask_params()
            self.augment_params()
            self.qc_thresholds()
            self.train_config()
            if self["pairing"]["max_days"] is not None:
                train.PairingPolicy(self["pairing"]["max_days"])
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        g = self["generator"]
        if g["in_channels"] is not None and g["in_channels"] != len(self["train"]["channels"]):
            raise ConfigError(
                f"generator.in_channels={g['in_channels']} does not match the {len(self['train']['channels'])} selected channels"
            )
        if g["volume_shape"] is not None:
            self.generator_spec()
        if self["prep"]["reference"] not in volgrid.CHANNELS:
            raise ConfigError(f"prep.reference must be one of {volgrid.CHANNELS}")
        ts = self["prep"]["target_shape"]
        if ts is not None and (len(ts) != 3 or min(ts) < 1):
            raise ConfigError("prep.target_shape must be three positive integers")
        if not 0 < self["prep"]["percentile"] <= 100:
            raise ConfigError("prep.percentile must be in (0, 100]")
        t0, t1 = self["frames"]["t0"], self["frames"]["t1"]
        if (t0 is None) != (t1 is None) or (t0 is not None and not t0 < t1):
            raise ConfigError("frames.t0 and frames.t1 must both be set with t0 < t1")


# --------------------------------------------------------------------------
# commands


def _case_dirs(root: Path) -> list:
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"{root}: no case directories (with meta.json) found")
    return dirs


def cmd_phantom(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    template = cfg.phantom_spec()
    cases = phantom.generate_dataset(args.count, args.seed, template, cfg["phantom"]["duplicate_fraction"])
    for c in cases:
        volgrid.write_case(c, out / c.case_id)
    cfg.write(out)
    print(json.dumps({"cases": [c.case_id for c in cases], "out": str(out)}))
    return EXIT_OK


def _target_geometry(ref: volgrid.Volume, shape) -> volgrid.Geometry:
    f = np.asarray(ref.shape, dtype=np.float64) / np.asarray(shape, dtype=np.float64)
    step = np.eye(4)
    step[:3, :3] = np.diag(f)
    step[:3, 3] = (f - 1.0) / 2.0
    aff = np.asarray(ref.affine) @ step
    spacing = tuple(float(s) for s in np.asarray(ref.spacing) * f)
    return volgrid.Geometry(tuple(int(s) for s in shape), spacing, aff)


def _read_raw_pet(d: Path, cfg: RunConfig) -> volgrid.Volume:
    if (d / "pet.nii").is_file():
        return volgrid.read_volume(d / "pet.nii")
    if (d / "pet_dynamic.nii").is_file():
        t0, t1 = cfg["frames"]["t0"], cfg["frames"]["t1"]
        if t0 is None:
            raise ConfigError("dynamic PET found but frames.t0 / frames.t1 are not configured")
        return prep.average_frames(volgrid.read_series(d / "pet_dynamic.nii"), t0, t1)
    raise DataError(f"{d}: neither pet.nii nor pet_dynamic.nii present")


def register_case(d: Path, cfg: RunConfig) -> volgrid.CasePair:
    """Resample every image onto the reference protocol (optionally registering)."""
    p = cfg["prep"]
    meta = volgrid.read_meta(d)
    ref = volgrid.read_volume(d / f"{p['reference']}.nii")
    if p["target_shape"] is not None:
        ref = volgrid.resample(ref, _target_geometry(ref, p["target_shape"]))
    geo = ref.geometry
    brain = volgrid.resample(volgrid.read_mask(d / "brain_mask.nii"), geo, "nearest")
    if not brain.data.any():
        raise DataError(f"{d}: brain mask is empty on the reference grid")
    tumor_path = d / "tumor_mask.nii"
    if tumor_path.is_file():
        tumor = volgrid.resample(volgrid.read_mask(tumor_path), geo, "nearest") & brain
    else:
        tumor = brain.with_data(np.zeros(geo.shape, bool))

    def onto_ref(v):
        v = volgrid.resample(v, geo)
        if p["register"]:
            v = regqc.apply_rigid(v, regqc.rigid_register(v, ref, brain), geo)
        return v

    mri = tuple(ref if n == p["reference"] else onto_ref(volgrid.read_volume(d / f"{n}.nii")) for n in volgrid.CHANNELS)
    return volgrid.CasePair(
        mri=mri, pet=onto_ref(_read_raw_pet(d, cfg)), brain_mask=brain, tumor_mask=tumor, patient_id=meta["patient_id"],
        mri_date=meta["mri_date"], pet_date=meta["pet_date"], tracer=meta["tracer"], case_id=meta.get("case_id", ""),
    )


def normalize_case(c: volgrid.CasePair, percentile: float) -> volgrid.CasePair:
    """Percentile-clipped min-max scaling of every image inside the brain mask."""
    norm = lambda v: prep.normalize_intensity(v, c.brain_mask, percentile)  # noqa: E731
    return dataclasses.replace(c, mri=tuple(norm(m) for m in c.mri), pet=norm(c.pet))


def cmd_prep(args, cfg: RunConfig) -> int:
    """Register onto the reference, gate on QC, then normalize and mask.

    The QC gate runs on the registered intensities: after normalization the
    darkest tissue and the masked background share the value 0, which
    breaks the Otsu masks that feed the Dice score.
    """
    c = register_case(Path(args.case), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    result = None
    if cfg["prep"]["qc"]:
        result, _ = qc_case(c, cfg, register=False)
        (out / "qc.json").write_text(result.to_json(c.case_id) + "\n")
        if not result.accept:
            raise QcReject(f"case {c.case_id} rejected (nmi={result.nmi:.4f}, dice={result.dice:.4f}); not written")
    c = normalize_case(c, cfg["prep"]["percentile"])
    volgrid.write_case(c, out)
    print(json.dumps({"case": c.case_id, "out": str(out), "shape": list(c.pet.shape), "qc": result.decision if result else None}))
    return EXIT_OK


def qc_case(c: volgrid.CasePair, cfg: RunConfig, register: bool) -> tuple:
    """Gate every MRI channel and the PET against T2; the worst pair decides."""
    ref = c.channel("t2")
    th, mp = cfg.qc_thresholds(), cfg.mask_params()
    pairs = {}
    for name, v in [(n, c.channel(n)) for n in volgrid.CHANNELS if n != "t2"] + [("pet", c.pet)]:
        if register:
            v = regqc.apply_rigid(v, regqc.rigid_register(v, ref, c.brain_mask), ref.geometry)
        pairs[name] = regqc.qc_gate(v, ref, c.brain_mask, th, mp)
    worst = regqc.QcResult(
        all(r.accept for r in pairs.values()),
        min(r.nmi for r in pairs.values()),
        min(r.dice for r in pairs.values()),
    )
    return worst, pairs


def cmd_qc(args, cfg: RunConfig) -> int:
    """Gate a registered, not yet normalized case directory."""
    c = volgrid.read_case(args.case)
    result, pairs = qc_case(c, cfg, args.register or cfg["qc"]["register"])
    line = result.to_json(c.case_id)
    print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "qc.json").write_text(line + "\n")
        detail = {k: {"nmi": r.nmi, "dice": r.dice, "decision": r.decision} for k, r in pairs.items()}
        (out / "qc_pairs.json").write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
        cfg.write(out)
    if not result.accept:
        raise QcReject(f"case {c.case_id} rejected (nmi={result.nmi:.4f}, dice={result.dice:.4f})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = Path(args.data or cfg["paths"]["data"] or "")
    out = Path(args.out or cfg["paths"]["out"] or "")
    if not str(data) or not str(out):
        raise ConfigError("train needs --data and --out")
    cases = [volgrid.read_case(d) for d in _case_dirs(data)]
    tcfg = cfg.train_config()
    kept = []
    for tracer in sorted({c.tracer for c in cases}):
        kept += train.select_pairs([c for c in cases if c.tracer == tracer], cfg.pairing_policy(tracer))
    if len(kept) == 0:
        raise DataError("no case passes the pairing window")
    try:
        tr, te = train.split_dataset(kept, tcfg.test_fraction, tcfg.seed)
    except ValueError as e:
        raise DataError(str(e)) from e
    out.mkdir(parents=True, exist_ok=True)
    split = {
        "seed": tcfg.seed,
        "train_patients": sorted({c.patient_id for c in tr}),
        "test_patients": sorted({c.patient_id for c in te}),
        "train_cases": sorted(c.case_id for c in tr),
        "test_cases": sorted(c.case_id for c in te),
        "dropped_by_pairing": sorted(c.case_id for c in cases if c not in kept),
    }
    (out / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")
    spec = cfg.generator_spec(tr[0].pet.shape)
    init_path = args.init or cfg["paths"]["init"]
    init = None
    if init_path:
        init = net.load_checkpoint(init_path)
        if init.generator_spec != spec:
            init = train.transfer_weights(init, spec, len(tcfg.channels) + 1, tcfg.seed)
    cfg.write(out)
    result = train.train(tr, tcfg, init=init, spec=spec, out_dir=out)
    final = out / "checkpoint"
    if final.exists():
        shutil.rmtree(final)
    net.save_checkpoint(result.checkpoint, final)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"checkpoint": str(final), "iterations": len(result.log), "last": last}))
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = net.load_checkpoint(args.ckpt)
    channels = tuple(cfg["train"]["channels"])
    if len(channels) != ckpt.generator_spec.in_channels:
        raise ConfigError(f"checkpoint expects {ckpt.generator_spec.in_channels} channels, config selects {len(channels)}")
    c = volgrid.read_case(args.case)
    if c.pet.shape != ckpt.generator_spec.volume_shape:
        raise DataError(f"case grid {c.pet.shape} does not match the network grid {ckpt.generator_spec.volume_shape}")
    pred = train.predict(ckpt, c, channels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    volgrid.write_volume(c.pet.with_data(pred), out)
    cfg.write(out.parent)
    print(json.dumps({"case": c.case_id, "pred": str(out)}))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    if not (len(args.pred) == len(args.truth) == len(args.masks)):
        raise ConfigError("--pred, --truth and --masks need the same number of entries")
    rows = []
    for p, t, m in zip(args.pred, args.truth, args.masks):
        md = Path(m)
        pred, truth = volgrid.read_volume(p), volgrid.read_volume(t)
        brain = volgrid.read_mask(md / "brain_mask.nii")
        tp = md / "tumor_mask.nii"
        tumor = volgrid.read_mask(tp) if tp.is_file() else brain.with_data(np.zeros(brain.shape, bool))
        case_id = volgrid.read_meta(md).get("case_id", md.name) if (md / "meta.json").is_file() else md.name
        rows += evaluation.evaluate_case(pred, truth, brain, tumor, case_id)
    report = evaluation.aggregate_and_emit(rows, args.tag, args.out)
    cfg.write(args.out)
    print(json.dumps(report.aggregates, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fmisynth", description="MRI-to-hypoxia-PET synthesis workflow on NIfTI case directories.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        return p

    p = add("phantom", "write synthetic MRI/PET case directories")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("prep", "resample, frame-average, normalize and mask one case")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)

    p = add("qc", "registration quality gate for one case")
    p.add_argument("--case", required=True)
    p.add_argument("--register", action="store_true", help="rigidly register each image onto T2 first")
    p.add_argument("--out", help="directory for qc.json")

    p = add("train", "train a generator on a directory of cases")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--init", help="checkpoint directory to start from")

    p = add("predict", "predict PET for one case")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", "PSNR/SSIM over brain and tumor box")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--masks", nargs="+", required=True, help="case directories holding brain_mask.nii / tumor_mask.nii")
    p.add_argument("--tag", default="model")
    p.add_argument("--out", default=".")
    return ap


COMMANDS = {
    "phantom": cmd_phantom,
    "prep": cmd_prep,
    "qc": cmd_qc,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except QcReject as e:
        print(f"qc: {e}", file=sys.stderr)
        return EXIT_QC
    except train.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, volgrid.NiftiError, net.CheckpointError, net.ShapeMismatchError, prep.DegenerateInputError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
