"""U-shaped segmentation network: DW-separable encoder/decoder, gated skips, transformer bottleneck."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dagseg.gates import DualAttentionGate, GateMode, SelfAttentionVariant
from dagseg.nn import Conv2d, ConvBlock, Module, bilinear_resize, maxpool2
from dagseg.tensor import Tensor, as_tensor, concatenate
from dagseg.transformer import TransformerBlock, TransformerConfig

CLASS_NAMES = ("background", "tumor", "inflammation", "cystite")


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (256, 256)
    in_channels: int = 3
    num_classes: int = 4
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    num_heads: int = 4
    head_dim: int = 0  # 0 -> bottleneck width
    mlp_ratio: float = 1.0
    gate_variant: SelfAttentionVariant = SelfAttentionVariant.WEIGHTLESS
    gate_mode: GateMode = GateMode.DUAL
    token_budget: int = 1024
    use_dag: bool = True
    use_transformer: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.gate_variant = SelfAttentionVariant(self.gate_variant)
        self.gate_mode = GateMode(self.gate_mode)
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two stages")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")
        div = 2 ** (len(self.stage_channels) - 1)
        h, w = self.input_size
        if h % div or w % div:
            raise ValueError(f"input size {self.input_size} not divisible by {div}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def transformer(self) -> TransformerConfig:
        return TransformerConfig(
            embed_dim=self.stage_channels[-1],
            num_heads=self.num_heads,
            head_dim=self.head_dim or None,
            mlp_ratio=self.mlp_ratio,
        )


class EncoderStage(Module):
    def __init__(self, in_ch, out_ch, downsample: bool, kernel_size, rng):
        self.downsample = downsample
        self.block1 = ConvBlock(in_ch, out_ch, rng, kernel_size)
        self.block2 = ConvBlock(out_ch, out_ch, rng, kernel_size)

    def forward(self, x):
        if self.downsample:
            x = maxpool2(x)
        return self.block2(self.block1(x))


class DecoderStage(Module):
    """Upsample, project to the skip width, concatenate with the (gated) skip, fuse."""

    def __init__(self, in_ch, skip_ch, kernel_size, rng):
        self.up = ConvBlock(in_ch, skip_ch, rng, kernel_size)
        self.fuse = ConvBlock(2 * skip_ch, skip_ch, rng, kernel_size)

    def forward(self, d, skip):
        up = self.up(bilinear_resize(d, skip.shape[1:3]))
        return self.fuse(concatenate([skip, up], axis=-1))


class SegNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.stage_channels
        k = config.kernel_size

        self.encoder = []
        prev = config.in_channels
        for i, c in enumerate(ch):
            self.encoder.append(EncoderStage(prev, c, i > 0, k, rng))
            prev = c

        self.transformer = TransformerBlock(config.transformer, rng) if config.use_transformer else None

        levels = len(ch) - 1
        self.gates = []
        if config.use_dag:
            for i in range(levels):
                self.gates.append(
                    DualAttentionGate(
                        ch[i], ch[i + 1], config.gate_variant, config.gate_mode,
                        config.token_budget, k, rng,
                    )
                )
        # decoder[i] produces level i features from level i+1
        self.decoder = [DecoderStage(ch[i + 1], ch[i], k, rng) for i in range(levels)]
        self.head = Conv2d(ch[0], config.num_classes, 1, rng)

    def forward(self, images):
        x = as_tensor(images)
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (h, w, self.config.in_channels):
            raise ValueError(
                f"expected images of shape (N, {h}, {w}, {self.config.in_channels}), got {x.shape}"
            )
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        d = skips.pop()
        if self.transformer is not None:
            d = self.transformer(d)
        for level in reversed(range(len(self.decoder))):
            skip = skips[level]
            if self.gates:
                skip = self.gates[level](skip, d)
            d = self.decoder[level](d, skip)
        return self.head(d)


def build(config: ModelConfig | None = None, seed: int = 0) -> SegNet:
    return SegNet(config or ModelConfig(), seed)


def forward(model: SegNet, images, training: bool = False) -> Tensor:
    model.train(training)
    return model(images)


def predict_masks(model: SegNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax class masks for float images ``(N, H, W, C)`` in eval mode."""
    from dagseg.tensor import no_grad

    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start : start + batch_size])
            out.append(logits.data.argmax(axis=-1).astype(np.uint8))
    return np.concatenate(out, axis=0)
