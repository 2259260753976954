"""Full model assembly: backbone -> SFSO -> STFL(+CA) -> classifier.

Besides the full pipeline, the classifier can be fed by simpler
aggregation strategies (used by the ablation studies):

  backbone     pooled final backbone feature only
  module1_agg  concatenation of pooled pyramid features
  module2_agg  concatenation of pooled reorganized (SFSO) features
  module3_agg  concatenation of all 4 LSTM hidden states
  stan         the final LSTM hidden state (default)

Only the modules a mode actually uses are constructed, so checkpoints
always match their configuration exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .ca import CaGate
from .errors import ConfigError
from .nn import Linear, Module
from .sfso import Sfso, SfsoConfig
from .stfl import Stfl
from .tensor import Tensor

AGG_MODES = ("backbone", "module1_agg", "module2_agg", "module3_agg", "stan")


@dataclass
class ForwardOut:
    pyramid: list
    logits_s: Tensor
    logits_st: Tensor
    rep: Tensor
    sfso_maps: list | None = None
    hiddens: list | None = None


class StanModel(Module):
    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        sfso_cfg: SfsoConfig | None = None,
        stfl_hidden: int | None = None,
        aggregation_mode: str = "stan",
        reverse_moments: bool = False,
        ca_enabled: bool = True,
        ca_hidden: int | None = None,
        ca_scan_order: str = "row_major",
        ca_freeze_init_states: bool = False,
        rng: np.random.Generator | None = None,
    ):
        if aggregation_mode not in AGG_MODES:
            raise ConfigError(f"unknown aggregation mode {aggregation_mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = aggregation_mode
        self.backbone = Backbone(backbone_cfg, rng)
        chans = backbone_cfg.stage_channels

        self.sfso = None
        self.stfl = None
        d = None
        if aggregation_mode in ("module2_agg", "module3_agg", "stan"):
            self.sfso = Sfso(
                sfso_cfg if sfso_cfg is not None else SfsoConfig(),
                chans,
                backbone_cfg.stage_side(3),
                rng,
            )
        if aggregation_mode in ("module3_agg", "stan"):
            d_in = self.sfso.cfg.common_channels
            d = stfl_hidden if stfl_hidden is not None else d_in
            ca = None
            if ca_enabled:
                ca = CaGate(
                    pixel_channels=d_in,
                    stfl_input=d_in,
                    stfl_hidden=d,
                    rng=rng,
                    hidden=ca_hidden,
                    scan_order=ca_scan_order,
                    freeze_init_states=ca_freeze_init_states,
                )
            self.stfl = Stfl(d_in, d, rng, ca=ca, reverse_moments=reverse_moments)

        widths = {
            "backbone": chans[3],
            "module1_agg": sum(chans),
            "module2_agg": 4 * (self.sfso.cfg.common_channels if self.sfso else 0),
            "module3_agg": 4 * (d or 0),
            "stan": d or 0,
        }
        self.rep_width = widths[aggregation_mode]
        self.classifier = Linear(self.rep_width, backbone_cfg.num_classes, rng)

    def named_params(self, prefix: str = ""):
        out = self.backbone.named_params(prefix + "backbone.")
        if self.sfso is not None:
            out.update(self.sfso.named_params(prefix + "sfso."))
        if self.stfl is not None:
            out.update(self.stfl.named_params(prefix + "stfl."))
        out.update(self.classifier.named_params(prefix + "classifier."))
        return out

    def param_groups(self):
        """(backbone-with-C_S params, rest-of-network params) for the two optimizers."""
        backbone = self.backbone.named_params("backbone.")
        rest = {k: v for k, v in self.named_params().items() if k not in backbone}
        return backbone, rest

    def forward(self, image: Tensor) -> ForwardOut:
        pyramid, logits_s, feat_s = self.backbone(image)
        sfso_maps = None
        hiddens = None
        if self.mode == "backbone":
            rep = feat_s
        elif self.mode == "module1_agg":
            rep = T.concat([T.global_avg_pool(m) for m in pyramid])
        else:
            sfso_maps = self.sfso(pyramid)
            if self.mode == "module2_agg":
                rep = T.concat([T.global_avg_pool(m) for m in sfso_maps])
            else:
                final_hidden, hiddens = self.stfl(sfso_maps)
                rep = T.concat(hiddens) if self.mode == "module3_agg" else final_hidden
        logits_st = self.classifier(rep)
        return ForwardOut(
            pyramid=pyramid,
            logits_s=logits_s,
            logits_st=logits_st,
            rep=rep,
            sfso_maps=sfso_maps,
            hiddens=hiddens,
        )

    __call__ = forward
