"""Spatial feature self-organizing module.

Projects the 4 pyramid levels to a common (D, S, S) shape with 1x1
convolutions and max-pooling, then aggregates higher-level features into
lower ones: the last level passes through unchanged, and every earlier
level adds a residual cross-attention read of the already-aggregated
level above it.  Attention projections are not shared across levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import _map_to_tokens, _tokens_to_map
from .errors import ConfigError
from .nn import Linear, Module, uniform_fan_in
from .tensor import Tensor


@dataclass
class SfsoConfig:
    common_channels: int | None = None  # default: channels of pyramid level 3
    common_side: int | None = None      # default: side of pyramid level 4
    kernel: int = 1

    def resolve(self, stage_channels, final_side: int) -> "SfsoConfig":
        d = self.common_channels if self.common_channels is not None else stage_channels[2]
        s = self.common_side if self.common_side is not None else final_side
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("sfso.kernel must be odd and positive")
        return SfsoConfig(common_channels=d, common_side=s, kernel=self.kernel)


class CrossAttention(Module):
    """Single-head scaled dot-product attention, query from the lower level."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, query_tokens: Tensor, context_tokens: Tensor) -> Tensor:
        q = self.wq(query_tokens)
        k = self.wk(context_tokens)
        v = self.wv(context_tokens)
        attn = T.softmax(T.scale(T.bmm(q, T.transpose(k, (1, 0))), self.dim**-0.5), axis=-1)
        return self.wo(T.bmm(attn, v))


class Sfso(Module):
    def __init__(self, cfg: SfsoConfig, stage_channels, final_side: int, rng: np.random.Generator):
        cfg = cfg.resolve(stage_channels, final_side)
        self.cfg = cfg
        self.stage_channels = tuple(stage_channels)
        d, k = cfg.common_channels, cfg.kernel
        self.conv_w = [
            uniform_fan_in(rng, (d, c, k, k), c * k * k) for c in self.stage_channels
        ]
        self.conv_b = [Tensor(np.zeros((d, 1, 1)), requires_grad=True) for _ in range(4)]
        self.attn = [CrossAttention(d, rng) for _ in range(3)]

    def named_params(self, prefix: str = ""):
        out = {}
        for i in range(4):
            out[f"{prefix}conv_w.{i}"] = self.conv_w[i]
            out[f"{prefix}conv_b.{i}"] = self.conv_b[i]
        for i, a in enumerate(self.attn):
            out.update(a.named_params(f"{prefix}attn.{i}."))
        return out

    def project_to_common(self, pyramid) -> list[Tensor]:
        """Per-level conv to D channels, then pooling down to side S."""
        s = self.cfg.common_side
        out = []
        for i, x in enumerate(pyramid):
            side = x.shape[1]
            if side < s:
                raise ConfigError(f"pyramid level {i} side {side} smaller than common side {s}")
            if side % s != 0:
                raise ConfigError(f"pyramid level {i} side {side} not divisible by {s}")
            y = T.add(
                T.conv2d(x, self.conv_w[i], stride=1, padding=self.cfg.kernel // 2),
                self.conv_b[i],
            )
            if side > s:
                k = side // s
                y = T.maxpool2d(y, k, stride=k)
            out.append(y)
        return out

    def high_to_low_aggregate(self, common) -> list[Tensor]:
        shapes = {c.shape for c in common}
        if len(shapes) != 1:
            raise ConfigError(f"aggregate needs 4 same-shape inputs, got {shapes}")
        s = common[0].shape[1]
        reorganized = [None, None, None, common[3]]
        for t in (2, 1, 0):
            q = _map_to_tokens(common[t])
            ctx = _map_to_tokens(reorganized[t + 1])
            delta = self.attn[t](q, ctx)
            reorganized[t] = T.add(common[t], _tokens_to_map(delta, s, s))
        return reorganized

    def forward(self, pyramid) -> list[Tensor]:
        return self.high_to_low_aggregate(self.project_to_common(pyramid))

    __call__ = forward
