"""Builders for U-Net, SCU-Net, Late Fusion and DU-Net graphs.

All convolutions are 3x3 "same" + ReLU except the 1x1 heads. Spatial sizes
therefore only change at pooling/upsampling, and skip connections are
concatenated without cropping.

Graph inputs are named ``image`` (N, C, H, W) and ``sc`` (N, P*C, H/2**J,
W/2**J); the output is ``prob`` (N, 1, H, W). A few interior nodes carry
names so callers can inspect or override them: ``img_bottleneck``,
``sc_enc_out``, ``img_dec_out`` and ``sc_dec_out``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph, ShapeError
from .scattering import ScatteringConfig, count_paths

KINDS = ("unet", "scunet", "latefusion", "dunet")
SC_KINDS = ("scunet", "latefusion", "dunet")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``sc_pools`` is the number of average-pooling stages in the scattering
    encoder (one after every second conv layer). The scattering maps enter
    at ``H / 2**J``, so ``J + sc_pools`` must equal ``depth`` for the two
    encoders to meet at the bottleneck; the default (0) pairs ``depth == J``.
    """

    kind: str = "dunet"
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 3
    sc_channels: int = 0
    input_size: tuple[int, int] = (256, 256)
    sc_pools: int = 0
    zero_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))

    @property
    def uses_sc(self) -> bool:
        return self.kind in SC_KINDS

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.depth

    @property
    def sc_size(self) -> tuple[int, int]:
        """Spatial size the scattering input must have."""
        k = 2 ** (self.depth - self.sc_pools)
        return self.input_size[0] // k, self.input_size[1] // k

    def validate(self) -> None:
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            problems.append("depth, base_channels and in_channels must be >= 1")
        k = 2 ** self.depth
        if any(s % k for s in self.input_size):
            problems.append(f"input size {self.input_size} not divisible by 2**depth = {k}")
        if self.uses_sc:
            if self.sc_channels < 1:
                problems.append(f"{self.kind} needs sc_channels >= 1")
            if not 0 <= self.sc_pools < self.depth:
                problems.append(f"sc_pools must be in [0, depth), got {self.sc_pools}")
        if problems:
            raise ShapeError("invalid ModelSpec: " + "; ".join(problems))

    def check_scattering(self, cfg: ScatteringConfig) -> None:
        """The scattering configuration must produce what the SC encoder expects."""
        if not self.uses_sc:
            return
        if cfg.J + self.sc_pools != self.depth:
            raise ShapeError(
                f"bottleneck spatial mismatch: J={cfg.J} + sc_pools={self.sc_pools} != depth={self.depth}")
        expected = count_paths(cfg) * self.in_channels
        if self.sc_channels != expected:
            raise ShapeError(f"sc_channels={self.sc_channels} but scattering yields {expected}")
        if tuple(cfg.input_size) != self.input_size:
            raise ShapeError(f"scattering input {cfg.input_size} != model input {self.input_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


def for_scattering(kind: str, cfg: ScatteringConfig, base_channels: int = 16,
                   in_channels: int = 3, sc_pools: int = 0, zero_head: bool = True) -> ModelSpec:
    """ModelSpec whose depth and SC width match a scattering configuration."""
    sc = count_paths(cfg) * in_channels if kind in SC_KINDS else 0
    return ModelSpec(kind=kind, depth=cfg.J + sc_pools, base_channels=base_channels,
                     in_channels=in_channels, sc_channels=sc, input_size=cfg.input_size,
                     sc_pools=sc_pools, zero_head=zero_head)


# ---------------------------------------------------------------------------
# building blocks

def _conv(g: Graph, x, cin, cout, name, k=3, relu=True, out_name=None, init="he_uniform"):
    w = g.param(f"{name}.w", (cout, cin, k, k), init=init, fan_in=cin * k * k)
    b = g.param(f"{name}.b", (cout,), init="zeros")
    y = g.conv2d(x, w, b, name=None if relu else out_name)
    return g.relu(y, name=out_name) if relu else y


def _conv_pair(g, x, cin, cout, name, out_name=None):
    x = _conv(g, x, cin, cout, f"{name}.conv1")
    return _conv(g, x, cout, cout, f"{name}.conv2", out_name=out_name)


def _up(g, x, cin, cout, name):
    w = g.param(f"{name}.w", (cin, cout, 2, 2), fan_in=cin)
    b = g.param(f"{name}.b", (cout,), init="zeros")
    return g.upsample2x(x, w, b)


def _image_encoder(g, spec: ModelSpec):
    x = g.input("image")
    skips = []
    cin = spec.in_channels
    for lvl in range(spec.depth):
        c = spec.base_channels * 2 ** lvl
        x = _conv_pair(g, x, cin, c, f"enc{lvl}")
        skips.append((x, c))
        x = g.pool2d(x, "max")
        cin = c
    x = _conv_pair(g, x, cin, spec.bottleneck_channels, "bottleneck", out_name="img_bottleneck")
    return x, skips


def _sc_encoder(g, spec: ModelSpec):
    """Conv+ReLU pairs; average pooling after every pair but the last."""
    x = g.input("sc")
    out = spec.bottleneck_channels
    cin = spec.sc_channels
    for blk in range(spec.sc_pools + 1):
        last = blk == spec.sc_pools
        first_width = spec.base_channels if blk == 0 else out
        x = _conv(g, x, cin, first_width, f"sc_enc{blk}.conv1")
        x = _conv(g, x, first_width, out, f"sc_enc{blk}.conv2",
                  out_name="sc_enc_out" if last else None)
        if not last:
            x = g.pool2d(x, "avg")
        cin = out
    return x


def _decoder(g, x, cin, skips, spec: ModelSpec, prefix="dec", out_name=None):
    """``depth`` upsampling stages; concatenates the matching skip when given."""
    for i, lvl in enumerate(reversed(range(spec.depth))):
        c = spec.base_channels * 2 ** lvl
        x = _up(g, x, cin, c, f"{prefix}{lvl}.up")
        if skips is not None:
            x = g.concat_channels(x, skips[lvl][0])
            x = _conv(g, x, 2 * c, c, f"{prefix}{lvl}.conv1")
        else:
            x = _conv(g, x, c, c, f"{prefix}{lvl}.conv1")
        x = _conv(g, x, c, c, f"{prefix}{lvl}.conv2",
                  out_name=out_name if lvl == 0 else None)
        cin = c
    return x


def _head(g, x, cin, name="head"):
    init = "zeros" if g.meta["spec"].zero_head else "he_uniform"
    logits = _conv(g, x, cin, 1, name, k=1, relu=False, out_name="logits", init=init)
    g.set_output("prob", g.sigmoid(logits, name="prob"))


def _new_graph(spec: ModelSpec, expected_kind: str, seed: int, dtype) -> Graph:
    spec.validate()
    if spec.kind != expected_kind:
        raise ValueError(f"builder for {expected_kind!r} got spec.kind={spec.kind!r}")
    g = Graph(dtype=dtype, seed=seed)
    g.meta["spec"] = spec
    return g


def build_unet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    g = _new_graph(spec, "unet", seed, dtype)
    x, skips = _image_encoder(g, spec)
    x = _decoder(g, x, spec.bottleneck_channels, skips, spec)
    _head(g, x, spec.base_channels)
    return g


def build_scunet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    g = _new_graph(spec, "scunet", seed, dtype)
    x = _sc_encoder(g, spec)
    x = _decoder(g, x, spec.bottleneck_channels, None, spec, prefix="sc_dec")
    _head(g, x, spec.base_channels)
    return g


def build_latefusion(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    g = _new_graph(spec, "latefusion", seed, dtype)
    x, skips = _image_encoder(g, spec)
    img = _decoder(g, x, spec.bottleneck_channels, skips, spec, out_name="img_dec_out")
    s = _sc_encoder(g, spec)
    sc = _decoder(g, s, spec.bottleneck_channels, None, spec, prefix="sc_dec", out_name="sc_dec_out")
    fused = g.concat_channels(img, sc, name="fusion")
    _head(g, fused, 2 * spec.base_channels, name="fuse")
    return g


def build_dunet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    g = _new_graph(spec, "dunet", seed, dtype)
    x, skips = _image_encoder(g, spec)
    s = _sc_encoder(g, spec)
    both = g.concat_channels(x, s, name="joint_bottleneck")
    x = _decoder(g, both, 2 * spec.bottleneck_channels, skips, spec)
    _head(g, x, spec.base_channels)
    return g


BUILDERS = {
    "unet": build_unet,
    "scunet": build_scunet,
    "latefusion": build_latefusion,
    "dunet": build_dunet,
}


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    spec.validate()
    g = BUILDERS[spec.kind](spec, seed=seed, dtype=dtype)
    g.validate()
    return g


def model_feeds(g: Graph, image=None, sc=None) -> dict:
    """Feed dict for a model graph; raises if a required input is missing."""
    feeds = {}
    if "image" in g.inputs:
        if image is None:
            raise ValueError("this model needs an image input")
        feeds["image"] = image
    if "sc" in g.inputs:
        if sc is None:
            raise ValueError("this model needs scattering coefficients (sc) as input")
        feeds["sc"] = sc
    return feeds
