"""Joint loss, optimizers, training loop, and open-set inference.

Training follows the two-optimizer scheme: AdamW (decoupled weight
decay) for the backbone including its classifier C_S, plain SGD with
weight decay for everything else.  Inference scores a sample by the
maximum C_ST logit and rejects it as unknown when the score does not
exceed the threshold.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import build_model, config_hash
from .dataio import Manifest, load_entry_image
from .errors import ConfigError, DataError, NumericalError
from .metrics import UNKNOWN, MetricReport, ScoredSample, full_report
from .model import StanModel
from .tensor import GradTape, Tensor, backward


@dataclass
class Decision:
    score: float
    predicted: int  # known-class index, or UNKNOWN
    theta: float


def open_set_score(logits) -> float:
    """Maximum logit value."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.size == 0:
        raise DataError("empty logit vector")
    return float(arr.max())


def predict(logits, theta: float) -> Decision:
    """Known argmax if the score strictly exceeds theta, else unknown."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    score = open_set_score(arr)
    predicted = int(arr.argmax()) if score > theta else UNKNOWN
    return Decision(score=score, predicted=predicted, theta=float(theta))


def calibrate_threshold(known_val_scores, target_tpr: float) -> float:
    """Lower-interpolation quantile of known validation scores at 1-TPR,
    nudged down so that at least target_tpr of them score strictly above."""
    scores = sorted(float(s) for s in known_val_scores)
    if not scores:
        raise DataError("cannot calibrate threshold on empty score list")
    if not 0.0 < target_tpr <= 1.0:
        raise ConfigError("target_tpr must be in (0, 1]")
    n = len(scores)
    idx = int(np.floor((1.0 - target_tpr) * (n - 1)))
    theta = scores[idx]
    need = int(np.ceil(target_tpr * n))
    while sum(1 for s in scores if s > theta) < need:
        lower = [s for s in scores if s < theta]
        theta = lower[-1] if lower else scores[0] - 1.0
    return theta


def total_loss(logits_s: Tensor, logits_st: Tensor, labels, lam: float) -> Tensor:
    """Cross-entropy on C_S plus lambda times cross-entropy on C_ST."""
    ls = T.cross_entropy(logits_s, labels)
    lst = T.cross_entropy(logits_st, labels)
    return T.add(ls, T.scale(lst, lam))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: StanModel
    loss_history: list = field(default_factory=list)  # one entry per minibatch
    meta: dict = field(default_factory=dict)


def model_hash(cfg: dict) -> str:
    """Hash of the model-shaping config sections (checkpoint compatibility)."""
    return config_hash({k: cfg[k] for k in ("backbone", "sfso", "stfl", "ca")})


def make_optimizers(model: StanModel, cfg: dict):
    opt_cfg = cfg["optimizer"]
    if opt_cfg["lr_schedule"] != "constant":
        raise ConfigError("only the constant lr schedule is implemented")
    backbone_params, rest_params = model.param_groups()

    def build(group_cfg, params):
        if group_cfg["algo"] == "adamw":
            return AdamW(params, lr=group_cfg["lr"], weight_decay=group_cfg["weight_decay"],
                         betas=tuple(group_cfg.get("betas", (0.9, 0.999))),
                         eps=group_cfg.get("eps", 1e-8))
        if group_cfg["algo"] == "sgd":
            return Sgd(params, lr=group_cfg["lr"], weight_decay=group_cfg["weight_decay"],
                       momentum=group_cfg.get("momentum", 0.0))
        raise ConfigError(f"unknown optimizer algo {group_cfg['algo']!r}")

    return build(opt_cfg["backbone"], backbone_params), build(opt_cfg["rest"], rest_params)


def _batch_logits(model: StanModel, images) -> tuple[Tensor, Tensor]:
    rows_s, rows_st = [], []
    for img in images:
        out = model(Tensor(img))
        rows_s.append(T.reshape(out.logits_s, (1, -1)))
        rows_st.append(T.reshape(out.logits_st, (1, -1)))
    return T.concat(rows_s, axis=0), T.concat(rows_st, axis=0)


def train(manifest: Manifest, cfg: dict, epochs: int | None = None,
          model: StanModel | None = None, progress=None) -> TrainResult:
    """Minibatch descent on the joint loss over the known-class train split.

    Deterministic given config seed; raises NumericalError on a
    non-finite loss.  An existing model may be passed to continue
    training (used by tests that train in stages).
    """
    entries = manifest.select(split="train")
    if not entries:
        raise DataError("empty training split")
    if manifest.num_known_classes != cfg["backbone"]["num_classes"]:
        raise ConfigError(
            f"manifest has {manifest.num_known_classes} known classes but config "
            f"expects {cfg['backbone']['num_classes']}"
        )
    images = [load_entry_image(manifest, e) for e in entries]
    labels = np.array([e.label for e in entries], dtype=np.int64)

    rng = np.random.default_rng(cfg["seed"])
    if model is None:
        model = build_model(cfg, rng)
    opt_backbone, opt_rest = make_optimizers(model, cfg)
    params = model.named_params()

    lam = cfg["loss"]["lambda"]
    batch = cfg["optimizer"]["batch_size"]
    n_epochs = cfg["optimizer"]["epochs"] if epochs is None else epochs
    history = []
    for epoch in range(n_epochs):
        order = rng.permutation(len(entries))
        for start in range(0, len(entries), batch):
            idx = order[start : start + batch]
            zero_grads(params)
            with GradTape():
                logits_s, logits_st = _batch_logits(model, [images[i] for i in idx])
                loss = total_loss(logits_s, logits_st, labels[idx], lam)
                backward(loss)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            opt_backbone.step()
            opt_rest.step()
            history.append(val)
        if progress is not None:
            progress(epoch, history)

    meta = {
        "config_hash": config_hash(cfg),
        "model_hash": model_hash(cfg),
        "seed": cfg["seed"],
    }
    return TrainResult(model=model, loss_history=history, meta=meta)


# ---------------------------------------------------------------------------
# inference / evaluation
# ---------------------------------------------------------------------------


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get("STAN_THREADS", "1")))
    except ValueError:
        return 1


def score_entries(model: StanModel, manifest: Manifest, entries) -> list[ScoredSample]:
    """Score samples (no tape); fan-out controlled by STAN_THREADS, merged
    back in stable entry order."""

    def one(entry):
        img = load_entry_image(manifest, entry)
        out = model(Tensor(img))
        arr = out.logits_st.data
        return ScoredSample(
            score=float(arr.max()),
            true_label=entry.label if entry.openness == "known" else UNKNOWN,
            predicted_known_label=int(arr.argmax()),
        )

    workers = _n_workers()
    if workers == 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, entries))


def closed_set_accuracy(model: StanModel, manifest: Manifest, split: str = "train") -> float:
    entries = manifest.select(split=split, openness="known")
    samples = score_entries(model, manifest, entries)
    return float(np.mean([s.predicted_known_label == s.true_label for s in samples]))


def calibrate_on_val(model: StanModel, manifest: Manifest, target_tpr: float) -> float:
    entries = manifest.select(split="val", openness="known")
    if not entries:
        raise DataError("manifest has no known validation entries to calibrate on")
    samples = score_entries(model, manifest, entries)
    return calibrate_threshold([s.score for s in samples], target_tpr)


def evaluate(model: StanModel, manifest: Manifest, theta: float):
    """Score the test split and compute the metric report.

    Returns (MetricReport, score rows for the CSV dump).
    """
    known_entries = manifest.select(split="test", openness="known")
    unknown_entries = manifest.select(split="test", openness="unknown")
    if not known_entries or not unknown_entries:
        raise DataError("evaluation needs both known and unknown test entries")
    known = score_entries(model, manifest, known_entries)
    unknown = score_entries(model, manifest, unknown_entries)
    report = full_report(known, unknown, theta, manifest.num_known_classes)
    rows = []
    for entry, s in zip(known_entries + unknown_entries, known + unknown):
        pred = s.predicted_known_label if s.score > theta else UNKNOWN
        rows.append((entry.path, s.true_label, pred, s.score))
    return report, rows
