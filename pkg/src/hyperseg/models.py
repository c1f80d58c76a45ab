"""Segmentation architectures and patch-embed inflation.

Three models cover the spectral/spatial spectrum:

* ``spectral1d`` - 1x1 convolutions only, each pixel classified from its own spectrum.
* ``encdec2d`` - VGG-style encoder (3x3 convs + max-pool) and a transposed-conv decoder.
* ``unet`` - ``encdec2d`` plus channel-concatenation skips between matching stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tensor

ARCHS = ("spectral1d", "encdec2d", "unet")
DEFAULT_WIDTHS = {"spectral1d": (32, 16, 32), "encdec2d": (16, 32, 64), "unet": (16, 32, 64)}

# Labels used in the Table-style CSV report.
BACKBONE_LABEL = "VGG-style"
DECODER_LABEL = {"spectral1d": "spectral only", "encdec2d": "Encoder-decoder", "unet": "U-Net"}

CHECKPOINT_MAGIC = b"HYPERSEG-CHECKPOINT 1\n"


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    in_channels: int
    num_classes: int
    widths: tuple[int, ...] = ()
    depth: int = 3

    def __post_init__(self):
        arch = self.arch.lower()
        if arch not in ARCHS:
            raise ModelConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        object.__setattr__(self, "arch", arch)
        widths = tuple(int(w) for w in self.widths) or DEFAULT_WIDTHS[arch]
        object.__setattr__(self, "widths", widths)
        if self.in_channels < 1:
            raise ModelConfigError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ModelConfigError("num_classes must be >= 2")
        if any(w < 1 for w in widths):
            raise ModelConfigError(f"widths must be positive, got {widths}")
        if arch == "spectral1d":
            object.__setattr__(self, "depth", 0)
        elif self.depth < 1 or len(widths) != self.depth:
            raise ModelConfigError(
                f"{arch} needs one width per pool stage: depth={self.depth}, widths={widths}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], int(d["in_channels"]), int(d["num_classes"]),
                   tuple(d.get("widths", ())), int(d.get("depth", 3)))


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    def parameters(self, group: str | None = None) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.params.items() if group is None or self.groups[k] == group]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def __call__(self, x) -> Tensor:
        return forward(self, x)


class _Builder:
    def __init__(self, model: Model, rng: np.random.Generator, dtype):
        self.model, self.rng, self.dtype = model, rng, dtype

    def add(self, name: str, shape: tuple[int, ...], fan_in: int, group: str) -> None:
        bound = np.sqrt(1.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.model.params[name] = Tensor(data, requires_grad=True, name=name)
        self.model.groups[name] = group

    def conv(self, name, cin, cout, k, group):
        self.add(f"{name}.weight", (cout, cin, k, k), cin * k * k, group)
        self.add(f"{name}.bias", (cout,), cin * k * k, group)

    def conv1x1(self, name, cin, cout, group):
        self.add(f"{name}.weight", (cout, cin), cin, group)
        self.add(f"{name}.bias", (cout,), cin, group)

    def up(self, name, cin, cout, group):
        self.add(f"{name}.weight", (cin, cout, 2, 2), cin * 4, group)
        self.add(f"{name}.bias", (cout,), cin * 4, group)


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Create a freshly initialised model (uniform in +-sqrt(1/fan_in))."""
    model = Model(spec)
    b = _Builder(model, np.random.default_rng(seed), dtype)
    if spec.arch == "spectral1d":
        # Layers up to the narrowest width form the encoder.
        narrow = int(np.argmin(spec.widths))
        cin = spec.in_channels
        for i, w in enumerate(spec.widths):
            b.conv1x1(f"layer{i}", cin, w, "encoder" if i <= narrow else "decoder")
            cin = w
        b.conv1x1("head", cin, spec.num_classes, "decoder")
        return model

    cin = spec.in_channels
    for i, w in enumerate(spec.widths):
        b.conv(f"enc{i}.conv0", cin, w, 3, "encoder")
        b.conv(f"enc{i}.conv1", w, w, 3, "encoder")
        cin = w
    skip = spec.arch == "unet"
    for i in reversed(range(spec.depth)):
        w = spec.widths[i]
        b.up(f"dec{i}.up", cin, w, "decoder")
        b.conv(f"dec{i}.conv0", 2 * w if skip else w, w, 3, "decoder")
        b.conv(f"dec{i}.conv1", w, w, 3, "decoder")
        cin = w
    b.conv1x1("head", cin, spec.num_classes, "decoder")
    return model


def forward(model: Model, x) -> Tensor:
    """Logits ``[N, num_classes, H, W]`` for input ``[N, in_channels, H, W]``."""
    spec, p = model.spec, model.params
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=p["head.weight"].dtype))
    if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ModelConfigError(
            f"expected input [N, {spec.in_channels}, H, W], got {x.shape}"
        )
    if spec.arch == "spectral1d":
        for i in range(len(spec.widths)):
            x = nc.relu(nc.conv1x1(x, p[f"layer{i}.weight"], p[f"layer{i}.bias"]))
        return nc.conv1x1(x, p["head.weight"], p["head.bias"])

    multiple = 2 ** spec.depth
    h, w = x.shape[2:]
    if h % multiple or w % multiple:
        raise ModelConfigError(
            f"{spec.arch} with depth {spec.depth} needs height and width divisible by {multiple}, got {h}x{w}"
        )

    def block(t, name):
        t = nc.relu(nc.conv2d(t, p[f"{name}.conv0.weight"], p[f"{name}.conv0.bias"], padding="same"))
        return nc.relu(nc.conv2d(t, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding="same"))

    skips = []
    for i in range(spec.depth):
        x = block(x, f"enc{i}")
        skips.append(x)
        x = nc.maxpool2d(x, 2, 2)
    for i in reversed(range(spec.depth)):
        x = nc.relu(nc.conv_transpose2d(x, p[f"dec{i}.up.weight"], p[f"dec{i}.up.bias"], stride=2))
        if spec.arch == "unet":
            x = nc.concat_channels(x, skips[i])
        x = block(x, f"dec{i}")
    return nc.conv1x1(x, p["head.weight"], p["head.bias"])


def predict(model: Model, cube_values: np.ndarray) -> np.ndarray:
    """Class map ``[H, W]`` for a single ``[H, W, K]`` cube array."""
    x = np.ascontiguousarray(np.transpose(cube_values, (2, 0, 1))[None], dtype=model.params["head.weight"].dtype)
    with nc.no_grad():
        logits = forward(model, Tensor(x))
    return logits.data[0].argmax(axis=0).astype(np.uint8)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    """Write the spec header followed by float32 little-endian weights in declaration order."""
    header = {
        "spec": model.spec.to_dict(),
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a hyperseg checkpoint")
    head_end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(raw[len(CHECKPOINT_MAGIC):head_end])
    payload = memoryview(raw)[head_end + 1:]
    model = Model(ModelSpec.from_dict(header["spec"]))
    reference = build(model.spec, 0, dtype)
    offset = 0
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset * 4).reshape(shape)
        model.params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        model.groups[name] = reference.groups[name]
        offset += n
    if offset * 4 != len(payload):
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header describes {offset * 4}")
    return model, header["metadata"]


# -- patch-embed inflation -----------------------------------------------------


@dataclass
class PatchEmbedWeights:
    weight: np.ndarray  # [embed_dim, channels, p, p]
    bias: np.ndarray  # [embed_dim]
    patch: int

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4 or self.weight.shape[2:] != (self.patch, self.patch):
            raise ValueError(f"weight must be [embed_dim, channels, {self.patch}, {self.patch}]")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias must have one entry per embedding dimension")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("patch-embed weights must be finite")

    @property
    def channels(self) -> int:
        return self.weight.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            np.savez(f, weight=self.weight, bias=self.bias, patch=np.int64(self.patch))

    @classmethod
    def load(cls, path) -> "PatchEmbedWeights":
        with np.load(path) as z:
            return cls(z["weight"], z["bias"], int(z["patch"]))


def inflate_patch_embed(rgb: PatchEmbedWeights, target_channels: int) -> PatchEmbedWeights:
    """Build a ``target_channels`` embedding by cycling through the RGB filters.

    Channel ``j`` receives an exact copy of RGB channel ``j % 3``; bias and
    scale are left untouched.
    """
    if rgb.channels != 3:
        raise ValueError(f"source embedding must have 3 input channels, got {rgb.channels}")
    if target_channels < 1:
        raise ValueError("target_channels must be >= 1")
    source = np.arange(target_channels) % 3
    return PatchEmbedWeights(rgb.weight[:, source].copy(), rgb.bias.copy(), rgb.patch)


def patch_embed(x: np.ndarray, weights: PatchEmbedWeights) -> np.ndarray:
    """Apply the embedding to ``x [N, C, H, W]``: non-overlapping patches, linear projection."""
    out = nc.conv2d(Tensor(x), Tensor(weights.weight), Tensor(weights.bias), stride=weights.patch)
    return out.data
