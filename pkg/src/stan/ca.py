"""Context-aware forget gate.

An inner single-layer LSTM scans the current feature map pixel by pixel
(each pixel vector concatenated with the outer hidden state), and its
final hidden output, concatenated with the pooled input feature, goes
through a fully-connected layer and a sigmoid to produce the soft forget
mask in (0,1).

The inner LSTM's initial cell/hidden states are drawn once at
construction (N(0, 0.01)) and kept fixed thereafter; by default they are
trainable.  Per-forward randomness would make inference
non-deterministic, which evaluation cannot tolerate.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Linear, Module
from .tensor import Tensor

SCAN_ORDERS = ("row_major", "column_major")


def pixel_split(x_map: Tensor, scan_order: str = "row_major") -> list[Tensor]:
    """Enumerate spatial positions of [D,S,S] as a sequence of [D] vectors."""
    if scan_order not in SCAN_ORDERS:
        raise ConfigError(f"unknown scan order {scan_order!r}")
    d, h, w = x_map.shape
    m = x_map if scan_order == "row_major" else T.transpose(x_map, (0, 2, 1))
    tokens = T.transpose(T.reshape(m, (d, h * w)), (1, 0))
    return [T.reshape(T.narrow(tokens, 0, j, 1), (d,)) for j in range(h * w)]


class CaGate(Module):
    def __init__(
        self,
        pixel_channels: int,
        stfl_input: int,
        stfl_hidden: int,
        rng: np.random.Generator,
        hidden: int | None = None,
        scan_order: str = "row_major",
        freeze_init_states: bool = False,
    ):
        if scan_order not in SCAN_ORDERS:
            raise ConfigError(f"unknown scan order {scan_order!r}")
        d_ca = stfl_hidden if hidden is None else hidden
        self.pixel_channels = pixel_channels
        self.scan_order = scan_order
        z_width = d_ca + pixel_channels + stfl_hidden
        self.wi = Linear(z_width, d_ca, rng)
        self.wf = Linear(z_width, d_ca, rng)
        self.wg = Linear(z_width, d_ca, rng)
        self.wo = Linear(z_width, d_ca, rng)
        self.c0 = Tensor(rng.normal(0.0, 0.01, size=d_ca), requires_grad=not freeze_init_states)
        self.h0 = Tensor(rng.normal(0.0, 0.01, size=d_ca), requires_grad=not freeze_init_states)
        self.fc = Linear(d_ca + stfl_input, stfl_hidden, rng)
        # start near "keep the memory": sigmoid(+1) ~ 0.73
        self.fc.b = Tensor(np.ones(stfl_hidden), requires_grad=True)

    def forget_mask(self, h_prev: Tensor, x_t_vec: Tensor, x_t_map: Tensor) -> Tensor:
        if x_t_map.shape[0] != self.pixel_channels:
            raise ConfigError(
                f"feature map has {x_t_map.shape[0]} channels, gate expects {self.pixel_channels}"
            )
        c, h = self.c0, self.h0
        for px in pixel_split(x_t_map, self.scan_order):
            u = T.concat([px, h_prev])
            z = T.concat([h, u])
            i = T.sigmoid(self.wi(z))
            f = T.sigmoid(self.wf(z))
            g = T.tanh(self.wg(z))
            o = T.sigmoid(self.wo(z))
            c = T.add(T.mul(f, c), T.mul(i, g))
            h = T.mul(o, T.tanh(c))
        return T.sigmoid(self.fc(T.concat([h, x_t_vec])))

    __call__ = forget_mask
