"""End-to-end segmentation network.

Two single-modality encoder pyramids (strided conv + scan blocks), per-scale
cross-modal fusion with modality 1 as the query stream, gated slice memory
producing per-scale memory banks, and a dual-path decoder: a coarse mask
path from the fused finest scale, and a refinement path that at the coarsest
scale concatenates (main, bank) and at finer scales (main, bank, upsampled)
before a conv, followed by multi-scale context units (parallel dilated
convolutions). The head combines both logit maps into final probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import CrossModalFusion, HilbertMambaBlock
from .errors import DimensionError, NumericError, ParameterError
from .memory import MemoryStack
from .nn import Layer, bind_parameter_names
from .optim import Adam
from .tensor import Parameter, Tensor


@dataclass
class SegConfig:
    modalities: int = 2
    channels: tuple = (8, 16, 24, 32)
    d_state: int = 16
    scheme: str = "hilbert"
    chunk: int = 64
    memory: bool = True
    memory_depth: int = 2
    mlp_ratio: int = 2
    fusion_variant: str = "attention"

    def to_dict(self) -> dict:
        return {
            "modalities": self.modalities,
            "channels": list(self.channels),
            "d_state": self.d_state,
            "scheme": self.scheme,
            "chunk": self.chunk,
            "memory": self.memory,
            "memory_depth": self.memory_depth,
            "mlp_ratio": self.mlp_ratio,
            "fusion_variant": self.fusion_variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


class Conv3d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dilation: int = 1, scale: float = 1.0):
        super().__init__()
        std = scale * np.sqrt(2.0 / (c_in * k ** 3))
        self.weight = Parameter(rng.standard_normal((c_out, c_in, k, k, k)) * std, "weight")
        self.bias = Parameter(np.zeros(c_out), "bias")
        self.stride, self.pad, self.dilation = stride, pad, dilation

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv3d(x, self.weight, stride=self.stride, pad=self.pad, dilation=self.dilation)
        b = T.reshape(self.bias, (-1, 1, 1, 1))
        return T.add(y, T.expand(b, y.data.shape))


class TransposedConv3d(Layer):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        super().__init__()
        std = np.sqrt(2.0 / (c_in * k ** 3))
        # weight layout matches conv3d's (c_in plays the conv out-channel role)
        self.weight = Parameter(rng.standard_normal((c_in, c_out, k, k, k)) * std, "weight")
        self.bias = Parameter(np.zeros(c_out), "bias")
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor, output_shape=None) -> Tensor:
        y = T.transposed_conv3d(x, self.weight, stride=self.stride, pad=self.pad,
                                output_shape=output_shape)
        b = T.reshape(self.bias, (-1, 1, 1, 1))
        return T.add(y, T.expand(b, y.data.shape))


class ModalityEncoder(Layer):
    """Four-scale pyramid for one modality: strided conv stages + scan blocks."""

    def __init__(self, cfg: SegConfig, rng: np.random.Generator):
        super().__init__()
        ch = cfg.channels
        self.stem = Conv3d(1, ch[0], 3, rng, pad=1)
        downs = []
        blocks = []
        prev = ch[0]
        for c in ch:
            downs.append(Conv3d(prev, c, 3, rng, stride=2, pad=1))
            blocks.append(HilbertMambaBlock(c, cfg.d_state, rng, cfg.scheme, cfg.chunk))
            prev = c
        self.downs = downs
        self.blocks = blocks

    def __call__(self, x: Tensor) -> list[Tensor]:
        h = T.gelu(self.stem(x))
        feats = []
        for down, block in zip(self.downs, self.blocks):
            h = block(T.gelu(down(h)))
            feats.append(h)
        return feats


class MultiScaleContextUnit(Layer):
    """Parallel dilated conv branches (rates 1, 2, 3) summed, residual."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.branches = [
            Conv3d(channels, channels, 3, rng, pad=d, dilation=d, scale=0.5) for d in (1, 2, 3)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        acc = self.branches[0](x)
        for b in self.branches[1:]:
            acc = T.add(acc, b(x))
        return T.add(x, T.gelu(acc))


class DualPathDecoder(Layer):
    def __init__(self, cfg: SegConfig, rng: np.random.Generator):
        super().__init__()
        ch = cfg.channels
        # stage 1: coarse mask path on the finest fused scale
        self.coarse_block = HilbertMambaBlock(ch[0], cfg.d_state, rng, cfg.scheme, cfg.chunk)
        self.coarse_conv = Conv3d(ch[0], ch[0], 3, rng, pad=1)
        self.coarse_up = TransposedConv3d(ch[0], ch[0], 2, rng, stride=2)
        self.coarse_head = Conv3d(ch[0], 1, 1, rng, scale=0.5)
        # stage 2: refinement path, coarsest-to-finest
        self.fuse_convs = [
            # scale index j = i + 1; the coarsest concatenates (main, bank),
            # every other scale additionally takes the upsampled coarser map
            Conv3d(2 * ch[i] if i == len(ch) - 1 else 3 * ch[i], ch[i], 3, rng, pad=1)
            for i in range(len(ch))
        ]
        self.context_units = [MultiScaleContextUnit(ch[i], rng) for i in range(len(ch))]
        self.ups = [TransposedConv3d(ch[i + 1], ch[i], 2, rng, stride=2) for i in range(len(ch) - 1)]
        self.refine_up = TransposedConv3d(ch[0], ch[0], 2, rng, stride=2)
        self.refine_head = Conv3d(ch[0], 1, 1, rng, scale=0.5)
        self.final_head = Conv3d(2, 1, 1, rng, scale=0.5)

    def __call__(self, fused: list[Tensor], bank: list[Tensor]):
        if len(bank) != len(fused):
            raise DimensionError(f"need one bank per scale, got {len(bank)} for {len(fused)}")
        # stage 1
        z = self.coarse_block(fused[0])
        z = T.gelu(self.coarse_conv(z))
        coarse_logits = self.coarse_head(self.coarse_up(z))
        # stage 2, scales 4 -> 1
        g = None
        for i in range(len(fused) - 1, -1, -1):
            parts = [fused[i], bank[i]]
            if g is not None:
                parts.append(self.ups[i](g, output_shape=fused[i].data.shape[1:]))
            g = self.context_units[i](T.gelu(self.fuse_convs[i](T.concat(parts, axis=0))))
        refined_logits = self.refine_head(self.refine_up(g))
        final_logits = self.final_head(T.concat([coarse_logits, refined_logits], axis=0))
        return coarse_logits, refined_logits, final_logits


class SegModel(Layer):
    def __init__(self, cfg: SegConfig, seed: int = 0):
        super().__init__()
        if cfg.modalities != 2:
            raise ParameterError(f"model is two-modality, got {cfg.modalities}")
        if len(cfg.channels) != 4:
            raise ParameterError("config must define exactly 4 scales")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoders = [ModalityEncoder(cfg, rng) for _ in range(cfg.modalities)]
        self.fusions = [
            CrossModalFusion(c, cfg.mlp_ratio * c, rng, cfg.d_state, cfg.scheme, cfg.chunk,
                             cfg.fusion_variant)
            for c in cfg.channels
        ]
        if cfg.memory:
            self.memories = [
                MemoryStack(c, cfg.d_state, rng, cfg.memory_depth, cfg.scheme, cfg.chunk)
                for c in cfg.channels
            ]
        self.decoder = DualPathDecoder(cfg, rng)
        bind_parameter_names(self, "seg.")

    def encode(self, volume: Tensor):
        if volume.data.shape[0] != self.cfg.modalities:
            raise ParameterError(
                f"expected {self.cfg.modalities} modalities, got {volume.data.shape[0]}"
            )
        pyramids = []
        for m, enc in enumerate(self.encoders):
            xm = T.narrow(volume, 0, m, 1)
            pyramids.append(enc(xm))
        return pyramids

    def fuse(self, p1: list[Tensor], p2: list[Tensor]) -> list[Tensor]:
        return [fusion(a, b) for fusion, a, b in zip(self.fusions, p1, p2)]

    def __call__(self, volume: Tensor, zero_bank: bool = False):
        p1, p2 = self.encode(volume)
        fused = self.fuse(p1, p2)
        if self.cfg.memory:
            refined, banks = [], []
            for mem, f in zip(self.memories, fused):
                r, b, _ = mem(f)
                refined.append(r)
                banks.append(b)
        else:
            refined = fused
            banks = [T.zeros(f.data.shape) for f in fused]
        if zero_bank:
            banks = [T.zeros(f.data.shape) for f in fused]
        coarse, refined_logits, final_logits = self.decoder(refined, banks)
        return {
            "coarse_logits": coarse,
            "refined_logits": refined_logits,
            "final_logits": final_logits,
            "probabilities": T.sigmoid(final_logits),
        }


# ---------------------------------------------------------------------------
# training

def soft_dice_loss(logits: Tensor, gt: Tensor, eps: float = 1.0) -> Tensor:
    p = T.sigmoid(logits)
    inter = T.sum_(T.mul(p, gt))
    denom = T.add(T.sum_(p), T.sum_(gt))
    return T.sub(T.tensor(1.0), T.div(T.add(T.mul(inter, 2.0), eps), T.add(denom, eps)))


def seg_loss(outputs: dict, gt: Tensor) -> Tensor:
    """Dice + BCE on the final head and both intermediate heads, equal weights."""
    total = None
    for key in ("final_logits", "coarse_logits", "refined_logits"):
        logits = outputs[key]
        term = T.add(T.bce_with_logits(logits, gt), soft_dice_loss(logits, gt))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / 3.0)


def train_step(model: SegModel, batch, optimizer: Adam) -> float:
    """One optimizer step over a batch of (volume_array, mask_array) pairs."""
    optimizer.zero_grad()
    total = 0.0
    for bi, (vol, mask) in enumerate(batch):
        outputs = model(T.tensor(vol))
        gt = T.tensor(np.asarray(mask, dtype=np.float64)[None])
        loss = seg_loss(outputs, gt)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss for batch item {bi}")
        total += loss.item()
        T.backward(T.mul(loss, 1.0 / len(batch)))
    optimizer.step()
    return total / len(batch)


def segment(model: SegModel, volume: np.ndarray) -> np.ndarray:
    """Foreground probabilities for one (modalities, D, H, W) array."""
    with T.no_grad():
        return model(T.tensor(volume))["probabilities"].data[0]
