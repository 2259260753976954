"""Four-stage windowed self-attention backbone.

A scaled-down stand-in for a hierarchical vision transformer: patch
embedding, per-stage windowed multi-head self-attention blocks, 2x2
merge between stages, and a linear classifier (C_S) on the pooled final
feature.  Windows are not shifted at this scale; the config flag is
reserved for future work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    stage_channels: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (1, 1, 2, 1)
    window_size: int = 2
    num_heads: tuple = (1, 2, 4, 4)
    num_classes: int = 4
    shifted_windows: bool = False  # reserved, not implemented

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_depths = tuple(self.stage_depths)
        self.num_heads = tuple(self.num_heads)
        self.validate()

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("stage_channels/stage_depths/num_heads must have 4 entries")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.image_size % (self.patch_size * 8) != 0:
            raise ConfigError("image_size must be divisible by patch_size * 8 (four halving stages)")
        for i in range(3):
            if self.stage_channels[i + 1] != 2 * self.stage_channels[i]:
                raise ConfigError("stage channels must double per stage")
        if self.window_size < 1:
            raise ConfigError("window_size must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        for i in range(4):
            side = self.stage_side(i)
            w = self.stage_window(i)
            if side % w != 0:
                raise ConfigError(f"window {w} does not divide stage-{i} side {side}")
            if self.stage_channels[i] % self.num_heads[i] != 0:
                raise ConfigError(f"heads must divide channels in stage {i}")
        if self.shifted_windows:
            raise ConfigError("shifted windows are reserved and not implemented")

    def stage_side(self, i: int) -> int:
        return self.image_size // self.patch_size // (2**i)

    def stage_window(self, i: int) -> int:
        # a stage whose grid is smaller than the window uses the whole grid
        return min(self.window_size, self.stage_side(i))


def _map_to_tokens(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)), (1, 0))


def _tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    n, c = t.shape
    return T.transpose(T.reshape(t, (h, w, c)), (2, 0, 1))


class WindowBlock(Module):
    """Per-window multi-head self-attention + tokenwise MLP, both residual."""

    def __init__(self, channels: int, heads: int, window: int, rng: np.random.Generator,
                 mlp_ratio: int = 2):
        if channels % heads != 0:
            raise ConfigError("heads must divide channels")
        self.channels = channels
        self.heads = heads
        self.window = window
        self.ln1 = LayerNorm(channels)
        self.wq = Linear(channels, channels, rng)
        self.wk = Linear(channels, channels, rng)
        self.wv = Linear(channels, channels, rng)
        self.wo = Linear(channels, channels, rng)
        self.ln2 = LayerNorm(channels)
        self.fc1 = Linear(channels, mlp_ratio * channels, rng)
        self.fc2 = Linear(mlp_ratio * channels, channels, rng)
        self.last_attn: np.ndarray | None = None  # stashed for tests, not a parameter

    def _split_heads(self, x: Tensor, nw: int, n_tok: int) -> Tensor:
        dh = self.channels // self.heads
        return T.transpose(T.reshape(x, (nw, n_tok, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        win = self.window
        if h % win or w % win:
            raise ConfigError(f"window {win} does not divide map {h}x{w}")
        t = _map_to_tokens(x)

        a = self.ln1(t)
        # partition into (h/win * w/win) windows of win*win tokens
        nwh, nww = h // win, w // win
        nw, n_tok = nwh * nww, win * win
        aw = T.reshape(
            T.transpose(T.reshape(a, (nwh, win, nww, win, c)), (0, 2, 1, 3, 4)),
            (nw, n_tok, c),
        )
        q = self._split_heads(self.wq(aw), nw, n_tok)
        k = self._split_heads(self.wk(aw), nw, n_tok)
        v = self._split_heads(self.wv(aw), nw, n_tok)
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), (c // self.heads) ** -0.5)
        attn = T.softmax(scores, axis=-1)
        self.last_attn = attn.numpy()
        o = T.bmm(attn, v)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (nw, n_tok, c))
        o = self.wo(o)
        # undo the window partition
        o = T.reshape(
            T.transpose(T.reshape(o, (nwh, nww, win, win, c)), (0, 2, 1, 3, 4)),
            (h * w, c),
        )
        t = T.add(t, o)

        m = self.fc2(T.relu(self.fc1(self.ln2(t))))
        t = T.add(t, m)
        return _tokens_to_map(t, h, w)


class PatchMerge(Module):
    """2x2 neighborhood concatenation followed by a linear reduction to 2C."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.reduce = Linear(4 * channels, 2 * channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"downsample needs even spatial size, got {h}x{w}")
        g = T.reshape(
            T.transpose(T.reshape(x, (c, h // 2, 2, w // 2, 2)), (1, 3, 0, 2, 4)),
            (h // 2 * (w // 2), 4 * c),
        )
        out = self.reduce(g)
        return _tokens_to_map(out, h // 2, w // 2)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        p, c1 = cfg.patch_size, cfg.stage_channels[0]
        self.patch_proj = Linear(3 * p * p, c1, rng)
        self.stages = [
            [
                WindowBlock(cfg.stage_channels[i], cfg.num_heads[i], cfg.stage_window(i), rng)
                for _ in range(cfg.stage_depths[i])
            ]
            for i in range(4)
        ]
        self.merges = [PatchMerge(cfg.stage_channels[i], rng) for i in range(3)]
        self.norm = LayerNorm(cfg.stage_channels[3])
        self.head = Linear(cfg.stage_channels[3], cfg.num_classes, rng)

    def named_params(self, prefix: str = ""):
        out = {}
        out.update(self.patch_proj.named_params(prefix + "patch_proj."))
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                out.update(blk.named_params(f"{prefix}stages.{i}.{j}."))
        for i, m in enumerate(self.merges):
            out.update(m.named_params(f"{prefix}merges.{i}."))
        out.update(self.norm.named_params(prefix + "norm."))
        out.update(self.head.named_params(prefix + "head."))
        return out

    def patch_embed(self, image: Tensor) -> Tensor:
        cfg = self.cfg
        if image.shape != (3, cfg.image_size, cfg.image_size):
            raise ConfigError(f"image shape {image.shape} does not match config")
        p = cfg.patch_size
        hp = cfg.image_size // p
        patches = T.reshape(
            T.transpose(T.reshape(image, (3, hp, p, hp, p)), (1, 3, 0, 2, 4)),
            (hp * hp, 3 * p * p),
        )
        return _tokens_to_map(self.patch_proj(patches), hp, hp)

    def forward(self, image: Tensor):
        """Returns (pyramid of 4 maps, C_S logits [K], pooled final feature)."""
        x = self.patch_embed(image)
        pyramid = []
        for i in range(4):
            for blk in self.stages[i]:
                x = blk(x)
            pyramid.append(x)
            if i < 3:
                x = self.merges[i](x)
        tokens = _map_to_tokens(pyramid[3])
        feat = T.global_avg_pool(_tokens_to_map(self.norm(tokens), *pyramid[3].shape[1:]))
        logits_s = self.head(feat)
        return pyramid, logits_s, feat

    __call__ = forward
