"""Dual-path UNet with edge-image encoder and fusion blocks in place of skips."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops
from .blocks import (
    FUSION_VARIANTS,
    Conv2d,
    FusionBlock,
    Module,
    UpConv,
    make_conv_block,
    ConvBlock,
)
from .errors import ConfigError, DimensionError
from .tensor import Tensor, no_grad


@dataclass
class ModelConfig:
    base_width: int = 16
    levels: int = 4
    bottleneck_layers: int = 2
    fusion_variant: str = "double"
    conv_variant: str = "msconv"
    edge_path: bool = True
    senet_reduction: int = 16
    input_size: int = 64

    def validate(self) -> "ModelConfig":
        problems = []
        if self.levels < 1:
            problems.append(f"levels must be >= 1 (got {self.levels})")
        if self.bottleneck_layers < 1:
            problems.append(f"bottleneck_layers must be >= 1 (got {self.bottleneck_layers})")
        if self.input_size < 1 or self.input_size % (2 ** self.levels):
            problems.append(f"input_size {self.input_size} must be divisible by 2**levels = {2 ** self.levels}")
        if self.fusion_variant not in FUSION_VARIANTS:
            problems.append(f"fusion_variant must be one of {FUSION_VARIANTS} (got {self.fusion_variant!r})")
        if self.conv_variant not in ("msconv", "plain3x3"):
            problems.append(f"conv_variant must be 'msconv' or 'plain3x3' (got {self.conv_variant!r})")
        if self.conv_variant == "msconv" and (self.base_width < 4 or self.base_width % 4):
            problems.append(f"base_width must be a multiple of 4 and >= 4 with msconv (got {self.base_width})")
        if self.base_width < 1:
            problems.append(f"base_width must be >= 1 (got {self.base_width})")
        if self.senet_reduction < 1:
            problems.append(f"senet_reduction must be >= 1 (got {self.senet_reduction})")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))
        return self

    def widths(self) -> list:
        return [self.base_width * 2 ** i for i in range(self.levels)]

    def to_text(self) -> str:
        """key=value lines in field order; the checkpoint config echo."""
        return "\n".join(f"{k}={_fmt(v)}" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            values[key] = parse_value(raw, getattr(cls, key))
        return cls(**values).validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return str(v)


def parse_value(raw: str, default):
    """Coerce ``raw`` to the type of ``default`` (bool accepts on/off/true/false/1/0)."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}: {exc}") from None
    return raw


class CdseUnet(Module):
    """Sample and edge encoders fused per level, bottleneck, decoder with fusion skips."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = config.widths()
        red = config.senet_reduction
        conv = config.conv_variant

        self.enc_sample = []
        self.enc_edge = []
        self.enc_fuse = []
        cin = 1
        for w in widths:
            self.enc_sample.append(make_conv_block(conv, cin, w, rng, dtype))
            if config.edge_path:
                self.enc_edge.append(make_conv_block(conv, cin, w, rng, dtype))
                self.enc_fuse.append(FusionBlock(w, config.fusion_variant, rng, red, dtype))
            cin = w
        self.bottleneck = []
        width = 2 * widths[-1]
        for _ in range(config.bottleneck_layers):
            self.bottleneck.append(make_conv_block(conv, cin, width, rng, dtype))
            cin = width
        self.up = []
        self.skip_fuse = []
        self.dec = []
        for w in reversed(widths):
            self.up.append(UpConv(cin, w, rng, dtype))
            self.skip_fuse.append(FusionBlock(w, config.fusion_variant, rng, red, dtype))
            self.dec.append(ConvBlock(w, w, rng, dtype))
            cin = w
        self.head = Conv2d(widths[0], 1, 1, rng, dtype)
        for name, p in self.named_parameters():
            p.name = name

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def encode(self, image: Tensor, edge: Tensor | None = None) -> dict:
        """Run the encoder and bottleneck, returning every intermediate map."""
        cfg = self.config
        size = cfg.input_size
        if image.ndim != 4 or image.shape[1:] != (1, size, size):
            raise DimensionError(f"image must be (N, 1, {size}, {size}), got {image.shape}")
        if cfg.edge_path and (edge is None or edge.shape != image.shape):
            raise DimensionError(f"edge must match image shape {image.shape}, got {None if edge is None else edge.shape}")
        trace = {"sample": [], "edge": [], "fused": []}
        s_in, e_in = image, edge
        for level in range(cfg.levels):
            s = self.enc_sample[level](s_in)
            trace["sample"].append(s)
            if cfg.edge_path:
                e = self.enc_edge[level](e_in)
                fused = self.enc_fuse[level](s, e)
                trace["edge"].append(e)
                e_in = ops.maxpool2d(e)
            else:
                fused = s
            trace["fused"].append(fused)
            s_in = ops.maxpool2d(fused)
        x = s_in
        for block in self.bottleneck:
            x = block(x)
        trace["bottleneck"] = x
        return trace

    def forward(self, image: Tensor, edge: Tensor | None = None) -> Tensor:
        trace = self.encode(image, edge)
        x = trace["bottleneck"]
        for i, skip in enumerate(reversed(trace["fused"])):
            up = self.up[i](x)
            x = self.dec[i](self.skip_fuse[i](skip, up))
        return ops.sigmoid(self.head(x))

    __call__ = forward

    def predict(self, image: Tensor, edge: Tensor | None = None, threshold: float = 0.5) -> np.ndarray:
        """Binary mask (N, 1, H, W) from eval-mode probabilities."""
        was_training = self.training
        self.set_training(False)
        try:
            with no_grad():
                probs = self.forward(image, edge).data
        finally:
            self.set_training(was_training)
        return binarize(probs, threshold)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return (probs > threshold).astype(np.uint8)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> CdseUnet:
    return CdseUnet(config, seed, dtype)
