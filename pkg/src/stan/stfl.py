"""Spatial-temporal feature learning: an LSTM over the 4 reorganized maps.

Each map contributes one moment.  The LSTM consumes globally
average-pooled vectors while the forget gate sees the un-pooled map; the
initial cell/hidden states are instance-adaptive, mapped from the pooled
final-moment feature.  The final hidden state is the fine-grained
representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ca import CaGate
from .errors import ConfigError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class LstmState:
    cell: Tensor
    hidden: Tensor


class Stfl(Module):
    def __init__(
        self,
        d_in: int,
        hidden: int,
        rng: np.random.Generator,
        ca: CaGate | None = None,
        reverse_moments: bool = False,
    ):
        self.d_in = d_in
        self.hidden = hidden
        self.reverse_moments = reverse_moments
        z_width = hidden + d_in
        self.wi = Linear(z_width, hidden, rng)
        self.wg = Linear(z_width, hidden, rng)
        self.wo = Linear(z_width, hidden, rng)
        self.w_c0 = Linear(d_in, hidden, rng)
        self.w_h0 = Linear(d_in, hidden, rng)
        self.ca = ca
        if ca is None:
            # plain learned forget gate for the no-CA ablation; +1 bias keeps
            # early memory, the usual forget-gate practice
            self.wf = Linear(z_width, hidden, rng)
            self.wf.b = Tensor(np.ones(hidden), requires_grad=True)
        else:
            self.wf = None

    def init_states(self, x_final_vec: Tensor) -> LstmState:
        return LstmState(
            cell=T.tanh(self.w_c0(x_final_vec)),
            hidden=T.tanh(self.w_h0(x_final_vec)),
        )

    def step(self, state: LstmState, x_t_vec: Tensor, x_t_map: Tensor) -> LstmState:
        z = T.concat([state.hidden, x_t_vec])
        i = T.sigmoid(self.wi(z))
        g = T.tanh(self.wg(z))
        o = T.sigmoid(self.wo(z))
        if self.ca is not None:
            f = self.ca(state.hidden, x_t_vec, x_t_map)
        else:
            f = T.sigmoid(self.wf(z))
        cell = T.add(T.mul(f, state.cell), T.mul(i, g))
        hidden = T.mul(o, T.tanh(cell))
        return LstmState(cell=cell, hidden=hidden)

    def forward(self, seq) -> tuple[Tensor, list[Tensor]]:
        """Run the 4-moment unroll; returns (final hidden, all hiddens)."""
        if len(seq) != 4:
            raise ConfigError(f"expected 4 moments, got {len(seq)}")
        maps = list(reversed(seq)) if self.reverse_moments else list(seq)
        vecs = [T.global_avg_pool(m) for m in maps]
        state = self.init_states(vecs[-1])
        hiddens = []
        for x_vec, x_map in zip(vecs, maps):
            state = self.step(state, x_vec, x_map)
            hiddens.append(state.hidden)
        return hiddens[-1], hiddens

    __call__ = forward
