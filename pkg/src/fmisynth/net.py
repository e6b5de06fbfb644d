"""Volumetric residual-transformer generator, patch discriminator, checkpoints.

The generator is the encoder / aggregated residual-transformer bottleneck /
decoder layout of ResViT, lifted to 3D: every planar ``k x k`` convolution
becomes a ``k x k x k`` one, normalization and activations act over the
extra axis unchanged.  The same classes build the planar network when the
spec's ``volume_shape`` has two entries, which is what
:func:`inflate_2d_weights` starts from.

Convolutions use reflect padding.  Transposed convolutions pad their input
by one replicated voxel and crop the output back, so a field that is
constant along an axis stays constant there.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import warnings
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "Discriminator",
    "DiscriminatorSpec",
    "Generator",
    "GeneratorSpec",
    "ShapeMismatchError",
    "build_discriminator",
    "build_generator",
    "config_fingerprint",
    "count_parameters",
    "expected_parameter_count",
    "forward_discriminator",
    "forward_generator",
    "generator_output_shape",
    "inflate_2d_weights",
    "load_checkpoint",
    "load_state",
    "receptive_radius",
    "restore_adam",
    "save_checkpoint",
]

CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 4
    base_width: int = 16
    n_down: int = 2
    n_art: int = 2
    embed_dim: Optional[int] = None
    n_heads: int = 4
    mlp_ratio: float = 4.0
    out_channels: int = 1
    volume_shape: tuple = (32, 32, 16)
    transformer: bool = True
    norm: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", self.bottleneck_channels)
        if len(self.volume_shape) not in (2, 3):
            raise ValueError("volume_shape must have 2 or 3 entries")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        f = 2**self.n_down
        if any(s % f for s in self.volume_shape):
            raise ValueError(f"spatial dims {self.volume_shape} are not divisible by 2^n_down = {f}")
        if self.norm not in ("instance", "none"):
            raise ValueError("norm must be 'instance' or 'none'")
        if min(self.in_channels, self.base_width, self.out_channels) < 1 or self.n_down < 0 or self.n_art < 0:
            raise ValueError("invalid generator widths or depths")

    @classmethod
    def paper_scale(cls, in_channels: int = 4) -> "GeneratorSpec":
        """Reference-size network for 256 x 256 x 128 volumes."""
        return cls(in_channels=in_channels, base_width=64, n_down=2, n_art=9, volume_shape=(256, 256, 128))

    @property
    def ndim(self) -> int:
        return len(self.volume_shape)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_width * 2**self.n_down

    @property
    def bottleneck_shape(self) -> tuple:
        return tuple(s // 2**self.n_down for s in self.volume_shape)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.bottleneck_shape))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d


@dataclasses.dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 5
    layers: int = 3
    base_width: int = 16
    ndim: int = 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _conv(ndim):
    return nn.Conv3d if ndim == 3 else nn.Conv2d


def _norm(kind, ndim, ch):
    if kind == "none":
        return nn.Identity()
    return (nn.InstanceNorm3d if ndim == 3 else nn.InstanceNorm2d)(ch, affine=True)


class PaddedConvTranspose(nn.Module):
    """Stride-2 transposed 3-tap convolution with replicate-padded borders."""

    def __init__(self, ndim, cin, cout):
        super().__init__()
        self.ndim = ndim
        cls = nn.ConvTranspose3d if ndim == 3 else nn.ConvTranspose2d
        self.conv = cls(cin, cout, 3, stride=2, padding=1, output_padding=1)

    def forward(self, x):
        x = nn.functional.pad(x, (1, 1) * self.ndim, mode="replicate")
        y = self.conv(x)
        crop = (slice(None), slice(None)) + (slice(2, -2),) * self.ndim
        return y[crop]


class ARTBlock(nn.Module):
    """Residual conv block followed by an optional token transformer."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        ch, nd, e = spec.bottleneck_channels, spec.ndim, spec.embed_dim
        conv = _conv(nd)
        self.conv = nn.Sequential(
            conv(ch, ch, 3, padding=1, padding_mode="reflect"),
            _norm(spec.norm, nd, ch),
            nn.ReLU(),
            conv(ch, ch, 3, padding=1, padding_mode="reflect"),
            _norm(spec.norm, nd, ch),
        )
        self.use_transformer = spec.transformer
        if spec.transformer:
            hidden = int(round(e * spec.mlp_ratio))
            self.to_tokens = nn.Linear(ch, e)
            self.pos = nn.Parameter(torch.zeros(1, spec.n_tokens, e))
            self.norm1 = nn.LayerNorm(e)
            self.attn = nn.MultiheadAttention(e, spec.n_heads, batch_first=True)
            self.norm2 = nn.LayerNorm(e)
            self.mlp = nn.Sequential(nn.Linear(e, hidden), nn.GELU(), nn.Linear(hidden, e))
            self.from_tokens = nn.Linear(e, ch)

    def forward(self, x):
        h = x + self.conv(x)
        if not self.use_transformer:
            return h
        b, c = h.shape[:2]
        spatial = h.shape[2:]
        z = self.to_tokens(h.flatten(2).transpose(1, 2)) + self.pos
        q = self.norm1(z)
        z = z + self.attn(q, q, q, need_weights=False)[0]
        z = z + self.mlp(self.norm2(z))
        return h + self.from_tokens(z).transpose(1, 2).reshape(b, c, *spatial)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        nd, w, conv = spec.ndim, spec.base_width, _conv(spec.ndim)
        self.stem = nn.Sequential(
            conv(spec.in_channels, w, 7, padding=3, padding_mode="reflect"), _norm(spec.norm, nd, w), nn.ReLU()
        )
        down = []
        for i in range(spec.n_down):
            c = w * 2**i
            down += [conv(c, 2 * c, 3, stride=2, padding=1, padding_mode="reflect"), _norm(spec.norm, nd, 2 * c), nn.ReLU()]
        self.down = nn.Sequential(*down)
        self.bottleneck = nn.Sequential(*[ARTBlock(spec) for _ in range(spec.n_art)])
        up = []
        for i in reversed(range(spec.n_down)):
            c = w * 2**i
            up += [PaddedConvTranspose(nd, 2 * c, c), _norm(spec.norm, nd, c), nn.ReLU()]
        self.up = nn.Sequential(*up)
        self.head = conv(w, spec.out_channels, 7, padding=3, padding_mode="reflect")

    def forward(self, x):
        x = self.up(self.bottleneck(self.down(self.stem(x))))
        return torch.sigmoid(self.head(x))


class Discriminator(nn.Module):
    """Conditional patch discriminator over ``cat(mri, pet)``."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        conv = _conv(spec.ndim)
        layers = [conv(spec.in_channels, spec.base_width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = spec.base_width
        for _ in range(1, spec.layers):
            layers += [conv(c, 2 * c, 4, stride=2, padding=1), _norm("instance", spec.ndim, 2 * c), nn.LeakyReLU(0.2)]
            c *= 2
        layers.append(conv(c, 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    @property
    def stride(self) -> int:
        return 2**self.spec.layers

    def forward(self, x):
        return self.net(x)


def _init(module: nn.Module, gen: Optional[torch.Generator]):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.InstanceNorm2d, nn.InstanceNorm3d, nn.LayerNorm)):
            if getattr(m, "weight", None) is not None:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.MultiheadAttention):
            with torch.no_grad():
                m.in_proj_weight.normal_(0.0, INIT_STD, generator=gen)
                m.in_proj_bias.zero_()
        elif isinstance(m, ARTBlock) and m.use_transformer:
            with torch.no_grad():
                m.pos.normal_(0.0, INIT_STD, generator=gen)


def _rng(seed_or_gen):
    if isinstance(seed_or_gen, torch.Generator):
        return seed_or_gen
    g = torch.Generator()
    g.manual_seed(int(seed_or_gen or 0))
    return g


def build_generator(spec: GeneratorSpec, rng=0, dtype=torch.float32, device=None) -> Generator:
    """Fresh generator; weights ~ N(0, 0.02), norm scales 1, biases 0.

    ``device="meta"`` builds a storage-free network for shape checks.
    """
    g = Generator(spec).to(dtype=dtype, device=device)
    if device is None or torch.device(device).type != "meta":
        _init(g, _rng(rng))
    return g


def build_discriminator(in_channels: int = 5, layers: int = 3, base_width: int = 16, ndim: int = 3, rng=0, dtype=torch.float32) -> Discriminator:
    d = Discriminator(DiscriminatorSpec(in_channels, layers, base_width, ndim)).to(dtype=dtype)
    _init(d, _rng(rng))
    return d


def forward_generator(g: Generator, x: torch.Tensor) -> torch.Tensor:
    """``(B, C, *volume_shape) -> (B, 1, *volume_shape)`` prediction in [0, 1]."""
    spec = g.spec
    if x.ndim != spec.ndim + 2 or x.shape[1] != spec.in_channels or tuple(x.shape[2:]) != spec.volume_shape:
        raise ShapeMismatchError(
            f"generator expects (B, {spec.in_channels}, {', '.join(map(str, spec.volume_shape))}), got {tuple(x.shape)}"
        )
    return g(x)


def forward_discriminator(d: Discriminator, x: torch.Tensor, y: torch.Tensor):
    """Patch logits for the pair ``(x, y)`` and their per-sample mean."""
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeMismatchError(f"incompatible pair shapes {tuple(x.shape)} and {tuple(y.shape)}")
    xy = torch.cat([x, y], dim=1)
    if xy.shape[1] != d.spec.in_channels:
        raise ShapeMismatchError(f"discriminator expects {d.spec.in_channels} channels, got {xy.shape[1]}")
    grid = d(xy)
    return grid, grid.flatten(1).mean(dim=1)


def generator_output_shape(spec: GeneratorSpec, batch: int = 1) -> tuple:
    """Output shape by layer arithmetic, without building the network."""
    shape = list(spec.volume_shape)
    for _ in range(spec.n_down):
        shape = [(s + 2 - 3) // 2 + 1 for s in shape]
    for _ in range(spec.n_down):
        shape = [2 * (s + 2) - 4 for s in shape]
    return (batch, spec.out_channels, *shape)


def count_parameters(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


def expected_parameter_count(spec: GeneratorSpec) -> int:
    """Closed-form parameter count of :class:`Generator` for ``spec``."""
    nd, w = spec.ndim, spec.base_width
    norm = 2 if spec.norm == "instance" else 0

    def conv(cin, cout, k):
        return cin * cout * k**nd + cout

    total = conv(spec.in_channels, w, 7) + norm * w
    for i in range(spec.n_down):
        c = w * 2**i
        total += conv(c, 2 * c, 3) + norm * 2 * c  # down
        total += conv(2 * c, c, 3) + norm * c  # up
    ch, e = spec.bottleneck_channels, spec.embed_dim
    hidden = int(round(e * spec.mlp_ratio))
    art = 2 * (conv(ch, ch, 3) + norm * ch)
    if spec.transformer:
        art += (ch * e + e) + spec.n_tokens * e + 2 * e  # tokens, positions, norm1
        art += 3 * e * e + 3 * e + e * e + e  # attention
        art += 2 * e + (e * hidden + hidden) + (hidden * e + e)  # norm2, mlp
        art += e * ch + ch
    total += spec.n_art * art
    total += conv(w, spec.out_channels, 7)
    return total


# --------------------------------------------------------------------------
# 2D -> 3D weight inflation


def inflate_2d_weights(planar, spec: GeneratorSpec) -> Generator:
    """3D generator whose weights are lifted from a planar network.

    Convolution kernels are copied ``k`` times along the new (last) axis
    and divided by ``k``.  Transposed-convolution taps are divided by the
    number of taps sharing their output phase, so each phase sums to the
    planar weight.  Positional embeddings are repeated along the new axis;
    all other parameters are copied.  The result reproduces the planar
    output on inputs that are constant along the new axis.
    """
    if isinstance(planar, Checkpoint):
        state = planar.generator_state
    elif isinstance(planar, nn.Module):
        state = {k: v.detach().cpu().numpy() for k, v in planar.state_dict().items()}
    else:
        state = dict(planar)
    if spec.ndim != 3:
        raise ValueError("inflation target must be a 3D spec")
    g = build_generator(spec)
    target = g.state_dict()
    if set(state) != set(target):
        missing = sorted(set(target) ^ set(state))
        raise ShapeMismatchError(f"incompatible layer lists; differing keys: {missing[:5]}")
    transposed = {f"{n}.weight" for n, m in g.named_modules() if isinstance(m, nn.ConvTranspose3d)}
    depth = spec.bottleneck_shape[-1]
    out = {}
    for name, t3 in target.items():
        w2 = torch.as_tensor(np.asarray(state[name]), dtype=t3.dtype)
        if name.endswith(".pos"):
            n, e = w2.shape[1], w2.shape[2]
            if n * depth != t3.shape[1]:
                raise ShapeMismatchError(f"{name}: {n} planar tokens do not lift to {t3.shape[1]}")
            out[name] = w2.reshape(1, n, 1, e).expand(1, n, depth, e).reshape(t3.shape).clone()
        elif w2.ndim == t3.ndim - 1 and t3.ndim == 5:
            k = t3.shape[-1]
            if tuple(w2.shape) != tuple(t3.shape[:-1]):
                raise ShapeMismatchError(f"{name}: planar {tuple(w2.shape)} vs volumetric {tuple(t3.shape)}")
            if name in transposed:
                phase = torch.tensor([sum(1 for j2 in range(k) if (j2 - j) % 2 == 0) for j in range(k)], dtype=t3.dtype)
            else:
                phase = torch.full((k,), float(k), dtype=t3.dtype)
            out[name] = w2.unsqueeze(-1).expand(*w2.shape, k) / phase
        else:
            if tuple(w2.shape) != tuple(t3.shape):
                raise ShapeMismatchError(f"{name}: planar {tuple(w2.shape)} vs volumetric {tuple(t3.shape)}")
            out[name] = w2.clone()
    g.load_state_dict(out)
    return g


# --------------------------------------------------------------------------
# checkpoints


def config_fingerprint(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _to_numpy(state: dict) -> dict:
    return {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in state.items()}


def load_state(module: nn.Module, arrays: dict) -> nn.Module:
    """Copy named arrays into ``module``; every name and shape must match."""
    own = module.state_dict()
    if set(own) != set(arrays):
        diff = sorted(set(own) ^ set(arrays))
        raise ShapeMismatchError(f"parameter names differ: {diff[:5]}")
    new = {}
    for k, t in own.items():
        a = np.asarray(arrays[k])
        if tuple(a.shape) != tuple(t.shape):
            raise ShapeMismatchError(f"{k}: checkpoint shape {a.shape} vs network {tuple(t.shape)}")
        new[k] = torch.as_tensor(a, dtype=t.dtype).clone()
    module.load_state_dict(new)
    return module


@dataclasses.dataclass
class Checkpoint:
    """Parameter snapshot of a generator / discriminator pair.

    ``optimizer_state`` maps ``"g"``/``"d"`` to ``{"step": int, "moments":
    {param_name: (exp_avg, exp_avg_sq)}}`` for an Adam optimizer.
    """

    generator_spec: GeneratorSpec
    generator_state: dict
    discriminator_spec: Optional[DiscriminatorSpec] = None
    discriminator_state: dict = dataclasses.field(default_factory=dict)
    optimizer_state: dict = dataclasses.field(default_factory=dict)
    epoch: int = 0
    fingerprint: str = ""

    @classmethod
    def from_modules(cls, g: Generator, d: Optional[Discriminator] = None, optimizers=None, epoch=0, fingerprint=""):
        opt_state = {}
        for key, (opt, mod) in (optimizers or {}).items():
            opt_state[key] = _adam_state(opt, mod)
        return cls(
            generator_spec=g.spec,
            generator_state=_to_numpy(g.state_dict()),
            discriminator_spec=d.spec if d is not None else None,
            discriminator_state=_to_numpy(d.state_dict()) if d is not None else {},
            optimizer_state=opt_state,
            epoch=epoch,
            fingerprint=fingerprint,
        )

    def generator(self, dtype=torch.float32) -> Generator:
        return load_state(build_generator(self.generator_spec, dtype=dtype), self.generator_state)

    def discriminator(self, dtype=torch.float32) -> Discriminator:
        if self.discriminator_spec is None:
            raise CheckpointError("checkpoint holds no discriminator")
        s = self.discriminator_spec
        d = build_discriminator(s.in_channels, s.layers, s.base_width, s.ndim, dtype=dtype)
        return load_state(d, self.discriminator_state)


def _adam_state(opt: torch.optim.Optimizer, module: nn.Module) -> dict:
    names = {id(p): n for n, p in module.named_parameters()}
    step, moments = 0, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            step = int(st["step"])
            moments[names[id(p)]] = (
                st["exp_avg"].detach().cpu().numpy().astype(np.float32, copy=True),
                st["exp_avg_sq"].detach().cpu().numpy().astype(np.float32, copy=True),
            )
    return {"step": step, "moments": moments}


def restore_adam(opt: torch.optim.Optimizer, module: nn.Module, state: dict) -> None:
    """Load moments saved by :class:`Checkpoint` into a fresh Adam optimizer."""
    if not state or not state.get("moments"):
        return
    params = dict(module.named_parameters())
    for name, (m1, m2) in state["moments"].items():
        p = params[name]
        opt.state[p] = {
            "step": torch.tensor(float(state["step"])),
            "exp_avg": torch.as_tensor(m1, dtype=p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(m2, dtype=p.dtype).clone(),
        }


def _safe(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def save_checkpoint(ckpt: Checkpoint, path: Union[str, os.PathLike]) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per array."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}

    def put(key, a):
        a = np.asarray(a, dtype="<f4")
        fname = _safe(key)
        (root / fname).write_bytes(a.tobytes(order="C"))
        arrays[key] = {"file": fname, "shape": list(a.shape)}

    for k, a in ckpt.generator_state.items():
        put(f"generator/{k}", a)
    for k, a in ckpt.discriminator_state.items():
        put(f"discriminator/{k}", a)
    steps = {}
    for opt_key, st in ckpt.optimizer_state.items():
        steps[opt_key] = st.get("step", 0)
        for name, (m1, m2) in st.get("moments", {}).items():
            put(f"optim_{opt_key}/{name}/exp_avg", m1)
            put(f"optim_{opt_key}/{name}/exp_avg_sq", m2)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float32",
        "byteorder": "little",
        "epoch": ckpt.epoch,
        "fingerprint": ckpt.fingerprint,
        "generator_spec": ckpt.generator_spec.to_dict(),
        "discriminator_spec": ckpt.discriminator_spec.to_dict() if ckpt.discriminator_spec else None,
        "optimizer_steps": steps,
        "arrays": arrays,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_checkpoint(path: Union[str, os.PathLike], expected_fingerprint: Optional[str] = None) -> Checkpoint:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{root}: unreadable manifest ({e})") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{root}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    if expected_fingerprint is not None and manifest.get("fingerprint") != expected_fingerprint:
        warnings.warn(f"{root}: checkpoint fingerprint does not match the current configuration", stacklevel=2)
    gen, disc, optim = {}, {}, {}
    for key, info in manifest["arrays"].items():
        shape = tuple(info["shape"])
        f = root / info["file"]
        try:
            raw = f.read_bytes()
        except OSError as e:
            raise CheckpointError(f"{f}: missing array file") from e
        n = int(np.prod(shape)) if shape else 1
        if len(raw) != 4 * n:
            raise CheckpointError(f"{f}: corrupt array file ({len(raw)} bytes, expected {4 * n})")
        a = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        head, _, rest = key.partition("/")
        if head == "generator":
            gen[rest] = a
        elif head == "discriminator":
            disc[rest] = a
        elif head.startswith("optim_"):
            name, _, which = rest.rpartition("/")
            slot = optim.setdefault(head[len("optim_"):], {"moments": {}})["moments"].setdefault(name, [None, None])
            slot[0 if which == "exp_avg" else 1] = a
        else:
            raise CheckpointError(f"{root}: unknown array group {head!r}")
    for k, st in optim.items():
        st["step"] = manifest.get("optimizer_steps", {}).get(k, 0)
        st["moments"] = {n: tuple(v) for n, v in st["moments"].items()}
    gspec = dict(manifest["generator_spec"])
    gspec["volume_shape"] = tuple(gspec["volume_shape"])
    dspec = manifest.get("discriminator_spec")
    return Checkpoint(
        generator_spec=GeneratorSpec(**gspec),
        generator_state=gen,
        discriminator_spec=DiscriminatorSpec(**dspec) if dspec else None,
        discriminator_state=disc,
        optimizer_state=optim,
        epoch=int(manifest["epoch"]),
        fingerprint=manifest.get("fingerprint", ""),
    )


def receptive_radius(spec: GeneratorSpec) -> int:
    """Upper bound (input voxels) on how far an input change can reach.

    Only meaningful without normalization or the transformer sub-block,
    both of which mix information globally.
    """
    r, s = 3, 1
    for _ in range(spec.n_down):
        r += 1 * s
        s *= 2
    r += spec.n_art * 2 * 1 * s
    for _ in range(spec.n_down):
        r += 2 * s  # 3-tap kernel at coarse level plus one replicated border voxel
        s //= 2
    return r + 3
