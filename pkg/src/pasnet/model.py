"""The two-branch network: shared residual encoder, class head, mask decoder."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .layers import (ResidualBlockParams, StemParams, UpBlockParams, kaiming_uniform, make_residual_block,
                     make_stem, make_up_block, residual_block_forward, stem_forward, up_block_forward,
                     zeros_param)
from .tensor import (DTYPE, ShapeError, Tensor, concat_channels, conv2d, global_avg_pool, linear, upsample_nearest2x)

N_CLASSES = 4
N_STAGES = 4
CLASS_NAMES = ("non-PAS", "PA", "PI", "PP")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field name."""


@dataclass(frozen=True)
class ModelConfig:
    n_in: int = 10
    n_f: int = 16
    n_classes: int = N_CLASSES
    input_hw: int = 448
    with_decoder: bool = True

    def validate(self) -> None:
        if not isinstance(self.n_in, int) or self.n_in < 1:
            raise ConfigError(f"n_in: must be a positive integer, got {self.n_in!r}")
        if not isinstance(self.n_f, int) or self.n_f < 1:
            raise ConfigError(f"n_f: must be a positive integer, got {self.n_f!r}")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes: must be {N_CLASSES}, got {self.n_classes!r}")
        if not isinstance(self.input_hw, int) or self.input_hw < 32 or self.input_hw % 32:
            raise ConfigError(f"input_hw: must be a positive multiple of 32, got {self.input_hw!r}")

    @property
    def feature_dim(self) -> int:
        return 32 * self.n_f

    def stage_channels(self) -> List[int]:
        """Channel counts after the stem and after each residual block."""
        return [2 * self.n_f * 2 ** i for i in range(N_STAGES + 1)]


class PasNet:
    """Residual encoder with a GAP + linear class head and an optional U-Net style decoder.

    Forward returns raw class logits ``[N, 4]`` and, when the decoder is
    built, raw mask logits ``[N, n_in, H, W]``.
    """

    def __init__(self, config: ModelConfig, stem: StemParams, blocks: List[ResidualBlockParams],
                 cls_weight: Tensor, cls_bias: Tensor, up_blocks: Optional[List[UpBlockParams]] = None,
                 head_weight: Optional[Tensor] = None, head_bias: Optional[Tensor] = None):
        self.config = config
        self.stem = stem
        self.blocks = blocks
        self.cls_weight = cls_weight
        self.cls_bias = cls_bias
        self.up_blocks = up_blocks
        self.head_weight = head_weight
        self.head_bias = head_bias

    @property
    def has_decoder(self) -> bool:
        return self.up_blocks is not None

    def encode(self, x: Tensor, training: bool) -> List[Tensor]:
        feats = [stem_forward(x, self.stem, training)]
        for blk in self.blocks:
            feats.append(residual_block_forward(feats[-1], blk, training))
        return feats

    def forward(self, x: Tensor, training: bool = False) -> Tuple[Tensor, Optional[Tensor]]:
        cfg = self.config
        hw = cfg.input_hw
        if x.data.ndim != 4 or x.shape[1:] != (cfg.n_in, hw, hw):
            raise ShapeError(f"expected input [N,{cfg.n_in},{hw},{hw}], got {x.shape}")
        feats = self.encode(x, training)
        logits = linear(global_avg_pool(feats[-1]), self.cls_weight, self.cls_bias)
        if not self.has_decoder:
            return logits, None
        h = feats[-1]
        for up, skip in zip(self.up_blocks, reversed(feats[:-1])):
            h = up_block_forward(h, skip, up, training)
        # the head sees the input itself as a full-resolution skip
        masks = conv2d(concat_channels(upsample_nearest2x(h), x), self.head_weight, self.head_bias, 1, 1)
        return logits, masks

    __call__ = forward

    def parameters(self) -> List[Tuple[str, Tensor]]:
        """Trainable tensors in a fixed order; decoder names start with ``decoder.``."""
        out = list(self.stem.named_parameters("stem"))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_parameters(f"encoder.{i}"))
        out.append(("classifier.weight", self.cls_weight))
        out.append(("classifier.bias", self.cls_bias))
        if self.has_decoder:
            for i, up in enumerate(self.up_blocks):
                out.extend(up.named_parameters(f"decoder.{i}"))
            out.append(("decoder.head.weight", self.head_weight))
            out.append(("decoder.head.bias", self.head_bias))
        return out

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        """Batchnorm running statistics, needed to reproduce eval-mode outputs."""
        out = list(self.stem.named_buffers("stem"))
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_buffers(f"encoder.{i}"))
        if self.has_decoder:
            for i, up in enumerate(self.up_blocks):
                out.extend(up.named_buffers(f"decoder.{i}"))
        return out

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.parameters())
        bufs = dict(self.buffers())
        expected = set(own) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            target = own[name].data if name in own else bufs[name]
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr


def build(config: ModelConfig, seed: int = 0) -> PasNet:
    """Deterministically initialise a network.

    Encoder and decoder draw from separate streams so the backbone weights do
    not depend on whether the decoder is built.
    """
    config.validate()
    enc_rng = np.random.default_rng([seed, 0])
    ch = config.stage_channels()
    stem = make_stem(enc_rng, config.n_in, config.n_f)
    blocks = [make_residual_block(enc_rng, ch[i], ch[i + 1], stride=2) for i in range(N_STAGES)]
    cls_w = kaiming_uniform(enc_rng, (config.n_classes, config.feature_dim), config.feature_dim)
    cls_b = zeros_param(config.n_classes)
    if not config.with_decoder:
        return PasNet(config, stem, blocks, cls_w, cls_b)

    dec_rng = np.random.default_rng([seed, 1])
    # stage s consumes the deeper map and the encoder map one level up
    up_blocks = [make_up_block(dec_rng, ch[i + 1], ch[i], ch[i]) for i in reversed(range(N_STAGES))]
    head_in = ch[0] + config.n_in
    head_w = kaiming_uniform(dec_rng, (config.n_in, head_in, 3, 3), 9 * head_in)
    head_b = zeros_param(config.n_in)
    return PasNet(config, stem, blocks, cls_w, cls_b, up_blocks, head_w, head_b)


def parameter_count(n_f: int, n_in: int = 10, with_decoder: bool = True) -> int:
    """Closed-form trainable parameter count for the architecture."""
    f = n_f
    stem = 9 * n_in * 2 * f + 4 * f
    encoder = 19040 * f * f + 360 * f
    head = 128 * f + 4
    total = stem + encoder + head
    if with_decoder:
        total += 12240 * f * f + 120 * f + 9 * n_in * (2 * f + n_in) + n_in
    return total


# ---------------------------------------------------------------------------
# checkpoint file: b"PASW", u32 version, u32 entry count, then per entry
# u32 name length, name bytes (utf-8), u32 rank, u32 extents, float32 LE data

CHECKPOINT_MAGIC = b"PASW"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: PasNet, path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.state_dict()))]
    for name, arr in net.state_dict().items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint reading {what} at offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(4 * n, name), dtype="<f4").astype(DTYPE).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return state


def config_from_state(state: Dict[str, np.ndarray], input_hw: int) -> ModelConfig:
    """Recover the architecture from checkpoint tensor shapes."""
    w = state["stem.conv.weight"]
    return ModelConfig(n_in=int(w.shape[1]), n_f=int(w.shape[0]) // 2, input_hw=input_hw,
                       with_decoder="decoder.head.weight" in state)


def load_checkpoint(path, input_hw: int) -> PasNet:
    state = read_checkpoint(path)
    net = build(config_from_state(state, input_hw))
    net.load_state_dict(state)
    return net


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
