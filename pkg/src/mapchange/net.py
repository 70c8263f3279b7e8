"""Triplet network: shared image encoder, map encoder, temporal difference,
temporal-symmetric transformer, map fusion, and the two U-Net style decoders."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvNormReLU, LayerNorm, Linear, Module, initialize
from .tensor import Tensor


class DiffOp(str, Enum):
    SUB = "Sub"
    ADD = "Add"
    ABSDIFF = "AbsDiff"
    CONCAT = "Concat"


class FusionOp(str, Enum):
    CAT = "Cat"
    ADD = "Add"
    TSTADD = "TstAdd"


SYMMETRIC_DIFF_OPS = (DiffOp.ADD, DiffOp.ABSDIFF)


@dataclass
class ModelConfig:
    num_classes: int = 5
    base_channels: int = 16
    encoder_stages: int = 3
    diff_op: DiffOp = DiffOp.ABSDIFF
    fusion_op: FusionOp = FusionOp.CAT
    tst_heads: int = 2
    tst_dim: int = 0  # 0: same width as the encoder output
    seed: int = 0

    def __post_init__(self):
        self.diff_op = DiffOp(self.diff_op)
        self.fusion_op = FusionOp(self.fusion_op)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1 or self.encoder_stages < 1:
            raise ValueError("base_channels and encoder_stages must be positive")
        if self.tst_heads < 1 or self.tst_width % self.tst_heads:
            raise ValueError(f"tst_dim {self.tst_width} not divisible by tst_heads {self.tst_heads}")

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**s for s in range(self.encoder_stages)]

    @property
    def encoder_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def downsample(self) -> int:
        return 2 ** (self.encoder_stages - 1)

    @property
    def tst_width(self) -> int:
        return self.tst_dim or self.encoder_channels


@dataclass
class TripletOutput:
    s1_logits: Tensor
    s2_logits: Tensor
    change_logits: Tensor


class Encoder(Module):
    """Conv stages; every stage after the first halves resolution with a stride-2 conv."""

    def __init__(self, name: str, in_channels: int, stage_channels: list[int]):
        self.stages = []
        prev = in_channels
        for s, c in enumerate(stage_channels):
            self.stages.append(
                [
                    ConvNormReLU(f"{name}.stage{s}.0", prev, c, stride=1 if s == 0 else 2),
                    ConvNormReLU(f"{name}.stage{s}.1", c, c),
                ]
            )
            prev = c
        self._modules_flat = [m for stage in self.stages for m in stage]

    def _children(self):
        yield from self._modules_flat

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for first, second in self.stages:
            x = second(first(x))
            feats.append(x)
        return feats


class Decoder(Module):
    """Nearest x2 upsampling + conv, with a skip concatenated at each resolution."""

    def __init__(self, name: str, in_channels: int, skip_channels: list[int], stage_channels: list[int], out_channels: int):
        self.blocks = []
        prev = in_channels
        for s in reversed(range(len(stage_channels) - 1)):
            c = stage_channels[s]
            self.blocks.append(
                [
                    ConvNormReLU(f"{name}.up{s}.0", prev + skip_channels[s], c),
                    ConvNormReLU(f"{name}.up{s}.1", c, c),
                ]
            )
            prev = c
        self.head = Conv2d(f"{name}.head", prev, out_channels, k=1, init="lecun")
        self._modules_flat = [m for block in self.blocks for m in block] + [self.head]

    def _children(self):
        yield from self._modules_flat

    def __call__(self, x: Tensor, skips: list[Tensor]) -> Tensor:
        for level, (first, second) in zip(reversed(range(len(skips) - 1)), self.blocks):
            x = T.channel_concat([T.upsample_nearest_x2(x), skips[level]])
            x = second(first(x))
        return self.head(x)


class TemporalSymmetricTransformer(Module):
    """One pre-norm transformer encoder block over the per-pixel tokens of a feature map."""

    def __init__(self, name: str, channels: int, dim: int, heads: int, mlp_ratio: int = 2):
        if dim % heads:
            raise ValueError(f"tst dim {dim} not divisible by {heads} heads")
        self.channels = channels
        self.dim = dim
        self.heads = heads
        self.proj_in = Linear(f"{name}.proj_in", channels, dim) if dim != channels else None
        self.proj_out = Linear(f"{name}.proj_out", dim, channels) if dim != channels else None
        self.norm1 = LayerNorm(f"{name}.norm1", dim)
        self.q = Linear(f"{name}.q", dim, dim)
        self.k = Linear(f"{name}.k", dim, dim)
        self.v = Linear(f"{name}.v", dim, dim)
        self.out = Linear(f"{name}.out", dim, dim)
        self.norm2 = LayerNorm(f"{name}.norm2", dim)
        self.mlp1 = Linear(f"{name}.mlp1", dim, mlp_ratio * dim, init="kaiming")
        self.mlp2 = Linear(f"{name}.mlp2", mlp_ratio * dim, dim)

    def _split_heads(self, x: Tensor, n: int, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, t, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def tokens(self, tok: Tensor) -> Tensor:
        """Apply the block to a (N, tokens, channels) sequence."""
        n, t, c = tok.shape
        if c != self.channels:
            raise ValueError(f"tst expects {self.channels} channels, got {c}")
        x = self.proj_in(tok) if self.proj_in else tok
        a = self.norm1(x)
        q, k, v = (self._split_heads(f(a), n, t) for f in (self.q, self.k, self.v))
        att = T.reshape(T.transpose(T.attention(q, k, v), (0, 2, 1, 3)), (n, t, self.dim))
        x = T.add(x, self.out(att))
        x = T.add(x, self.mlp2(T.relu(self.mlp1(self.norm2(x)))))
        return self.proj_out(x) if self.proj_out else x

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tok = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))
        out = self.tokens(tok)
        return T.transpose(T.reshape(out, (n, h, w, c)), (0, 3, 1, 2))


def _symmetric_skip(a: Tensor, b: Tensor) -> Tensor:
    # order-free combination of both temporal branches, so swapping T1/T2 is exact
    return T.channel_concat([T.add(a, b), T.absolute(T.sub(a, b))])


class TripletNetwork(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        chans = config.stage_channels
        ce = config.encoder_channels
        k = config.num_classes
        self.image_encoder = Encoder("image_encoder", 3, chans)
        self.map_encoder = Encoder("map_encoder", k, chans)
        self.diff_proj = Conv2d("diff_proj", 2 * ce, ce, k=1, init="lecun") if config.diff_op == DiffOp.CONCAT else None
        self.tst = TemporalSymmetricTransformer("tst", ce, config.tst_width, config.tst_heads)
        self.fusion_proj = None
        self.fusion_tst = None
        if config.fusion_op in (FusionOp.ADD, FusionOp.TSTADD):
            self.fusion_proj = Conv2d("fusion.proj", ce, ce, k=1, init="lecun")
        if config.fusion_op == FusionOp.TSTADD:
            self.fusion_tst = TemporalSymmetricTransformer("fusion.tst", ce, config.tst_width, config.tst_heads)
        fused = 2 * ce if config.fusion_op == FusionOp.CAT else ce
        self.semantic_decoder = Decoder("semantic_decoder", ce, chans, chans, k)
        self.change_decoder = Decoder("change_decoder", fused, [2 * c for c in chans], chans, 1)
        initialize(self, config.seed)

    # -- encoders

    def _check_image(self, x: Tensor, channels: int, what: str) -> None:
        d = self.config.downsample
        if x.ndim != 4 or x.shape[1] != channels:
            raise ValueError(f"{what}: expected (N, {channels}, H, W), got {x.shape}")
        if x.shape[2] % d or x.shape[3] % d:
            raise ValueError(f"{what}: spatial size {x.shape[2:]} not divisible by {d}")

    def image_features(self, image: Tensor) -> list[Tensor]:
        self._check_image(image, 3, "encode_image")
        return self.image_encoder(image)

    def map_features(self, map_onehot: Tensor) -> list[Tensor]:
        self._check_image(map_onehot, self.config.num_classes, "encode_map")
        m = map_onehot.data
        if not (np.all((m == 0) | (m == 1)) and np.all(m.sum(axis=1) == 1)):
            raise ValueError("encode_map: input is not one-hot at every pixel")
        return self.map_encoder(map_onehot)

    def encode_image(self, image: Tensor) -> Tensor:
        return self.image_features(image)[-1]

    def encode_map(self, map_onehot: Tensor) -> Tensor:
        return self.map_features(map_onehot)[-1]

    # -- change branch

    def temporal_diff(self, e1: Tensor, e2: Tensor) -> Tensor:
        if e1.shape != e2.shape:
            raise ValueError(f"temporal_diff: shape mismatch {e1.shape} vs {e2.shape}")
        op = self.config.diff_op
        if op == DiffOp.SUB:
            return T.sub(e1, e2)
        if op == DiffOp.ADD:
            return T.add(e1, e2)
        if op == DiffOp.ABSDIFF:
            return T.absolute(T.sub(e1, e2))
        return self.diff_proj(T.channel_concat([e1, e2]))

    def fuse(self, c_tst: Tensor, e_map: Tensor) -> Tensor:
        if c_tst.shape[0] != e_map.shape[0] or c_tst.shape[2:] != e_map.shape[2:]:
            raise ValueError(f"fuse: spatial mismatch {c_tst.shape} vs {e_map.shape}")
        op = self.config.fusion_op
        if op == FusionOp.CAT:
            return T.channel_concat([c_tst, e_map])
        added = T.add(c_tst, self.fusion_proj(e_map))
        return added if op == FusionOp.ADD else self.fusion_tst(added)

    def forward(self, image_t1: Tensor, image_t2: Tensor, map_onehot: Tensor) -> TripletOutput:
        if not (image_t1.shape == image_t2.shape and image_t1.shape[2:] == map_onehot.shape[2:]):
            raise ValueError(
                f"forward: inputs not aligned {image_t1.shape}, {image_t2.shape}, {map_onehot.shape}"
            )
        f1 = self.image_features(image_t1)
        f2 = self.image_features(image_t2)
        fm = self.map_features(map_onehot)
        s1 = self.semantic_decoder(f1[-1], f1)
        s2 = self.semantic_decoder(f2[-1], f2)
        c_fused = self.fuse(self.tst(self.temporal_diff(f1[-1], f2[-1])), fm[-1])
        skips = [_symmetric_skip(a, b) for a, b in zip(f1, f2)]
        change = self.change_decoder(c_fused, skips)
        return TripletOutput(s1, s2, change)

    __call__ = forward


class SegmentationNetwork(Module):
    """Single-temporal classifier for the post-classification comparison baseline."""

    def __init__(self, config: ModelConfig):
        self.config = config
        chans = config.stage_channels
        self.image_encoder = Encoder("image_encoder", 3, chans)
        self.semantic_decoder = Decoder("semantic_decoder", config.encoder_channels, chans, chans, config.num_classes)
        initialize(self, config.seed)

    def __call__(self, image: Tensor) -> Tensor:
        d = self.config.downsample
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2] % d or image.shape[3] % d:
            raise ValueError(f"segmentation input must be (N, 3, H, W) with H, W divisible by {d}, got {image.shape}")
        feats = self.image_encoder(image)
        return self.semantic_decoder(feats[-1], feats)
