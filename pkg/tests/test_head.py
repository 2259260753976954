"""Loss composition, open-set decisions, threshold calibration,
optimizer behavior, and short training-loop bookkeeping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stan.tensor as T
from stan.config import DEFAULTS, resolve_config
from stan.errors import ConfigError, DataError
from stan.head import (
    AdamW,
    Sgd,
    calibrate_threshold,
    open_set_score,
    predict,
    total_loss,
    train,
)
from stan.metrics import UNKNOWN
from stan.model import StanModel
from stan.tensor import Tensor

from conftest import TINY_BACKBONE


def tiny_train_cfg(**over):
    cfg = resolve_config({
        "backbone": dict(TINY_BACKBONE, num_classes=4),
        "optimizer": {"epochs": 1, "batch_size": 4},
    })
    for k, v in over.items():
        sect, key = k.split(".", 1)
        cfg[sect][key] = v
    return cfg


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_loss_lambda_zero_is_just_ls(rng):
    a = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    b = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    labels = [0, 1, 2, 0]
    got = total_loss(a, b, labels, 0.0).item()
    assert got == pytest.approx(T.cross_entropy(a, labels).item())


def test_loss_equal_terms_double(rng):
    a = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    labels = [2, 1, 0, 2]
    got = total_loss(a, a, labels, 1.0).item()
    assert got == pytest.approx(2 * T.cross_entropy(a, labels).item(), rel=1e-6)


def test_loss_composition_oracle(rng):
    a = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
    b = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
    labels = list(rng.integers(0, 4, size=6))
    lam = 0.37
    want = T.cross_entropy(a, labels).item() + lam * T.cross_entropy(b, labels).item()
    assert abs(total_loss(a, b, labels, lam).item() - want) < 1e-6


def test_loss_derivative_in_lambda_is_lst(rng):
    a = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    b = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    labels = [0, 1, 2, 0]
    eps = 1e-3
    fd = (total_loss(a, b, labels, 1.0 + eps).item()
          - total_loss(a, b, labels, 1.0 - eps).item()) / (2 * eps)
    assert fd == pytest.approx(T.cross_entropy(b, labels).item(), rel=1e-3)


# ---------------------------------------------------------------------------
# scoring / decisions
# ---------------------------------------------------------------------------


def test_score_is_max_logit():
    assert open_set_score(np.array([0.1, 2.5, -1.0])) == 2.5
    assert open_set_score(np.array([3.0, 3.0])) == 3.0


def test_score_shift_invariance(rng):
    v = rng.normal(size=7)
    assert open_set_score(v + 5.0) == pytest.approx(open_set_score(v) + 5.0)


def test_score_rejects_empty():
    with pytest.raises(DataError):
        open_set_score(np.array([]))


def test_predict_clear_margin():
    d = predict(np.array([3.0, 1.0]), theta=2.0)
    assert d.predicted == 0 and d.score == 3.0


def test_predict_boundary_is_unknown():
    # score equal to theta fails the strict-greater test
    assert predict(np.array([3.0, 1.0]), theta=3.0).predicted == UNKNOWN


def test_predict_tie_takes_first_index():
    assert predict(np.array([2.0, 2.0, 1.0]), theta=0.0).predicted == 0


def test_predict_matches_case_split_oracle(rng):
    for _ in range(1000):
        logits = rng.normal(size=rng.integers(2, 6))
        theta = float(rng.normal())
        if rng.random() < 0.1:
            theta = float(logits.max())  # exercise the boundary case
        d = predict(logits, theta)
        want = int(logits.argmax()) if logits.max() > theta else UNKNOWN
        assert d.predicted == want


def test_predict_invariant_under_positive_affine(rng):
    logits = rng.normal(size=5)
    theta = 0.2
    base = predict(logits, theta).predicted
    assert predict(3.5 * logits + 2.0, 3.5 * theta + 2.0).predicted == base


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def test_calibrate_quantile_example():
    theta = calibrate_threshold([1, 2, 3, 4, 5], target_tpr=0.8)
    assert sum(s > theta for s in [1, 2, 3, 4, 5]) == 4
    assert theta == 1


def test_calibrate_full_tpr_below_min():
    theta = calibrate_threshold([3.0, 5.0, 4.0], target_tpr=1.0)
    assert theta < 3.0


def test_calibrate_constant_scores():
    theta = calibrate_threshold([2.0, 2.0, 2.0], target_tpr=0.5)
    assert theta < 2.0  # everything must pass: no score exceeds the constant


def test_calibrate_rejects_bad_args():
    with pytest.raises(DataError):
        calibrate_threshold([], 0.9)
    with pytest.raises(ConfigError):
        calibrate_threshold([1.0], 0.0)


@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=50),
    st.floats(0.05, 1.0),
)
@settings(max_examples=100, deadline=None)
def test_calibrate_guarantees_coverage(scores, tpr):
    theta = calibrate_threshold(scores, tpr)
    passed = sum(1 for s in scores if s > theta)
    assert passed >= int(np.ceil(tpr * len(scores)))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def test_sgd_plain_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.5])
    Sgd({"p": p}, lr=0.1).step()
    np.testing.assert_allclose(p.numpy(), [0.95, 2.05])


def test_sgd_weight_decay_shrinks_without_gradient():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.0])
    Sgd({"p": p}, lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.numpy(), [2.0 - 0.1 * 0.5 * 2.0])


def test_sgd_momentum_accumulates():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Sgd({"p": p}, lr=1.0, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()  # v=1, p=-1
    opt.step()  # v=1.9, p=-2.9
    np.testing.assert_allclose(p.numpy(), [-2.9])


def test_adamw_first_step_is_lr_sized():
    # bias-corrected first step moves by ~lr regardless of gradient scale
    for g in (1e-3, 1.0, 1e3):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([g])
        AdamW({"p": p}, lr=0.1).step()
        assert p.numpy()[0] == pytest.approx(-0.1, rel=1e-4)


def test_adamw_decoupled_decay_independent_of_gradient():
    p1 = Tensor(np.array([4.0]), requires_grad=True)
    p2 = Tensor(np.array([4.0]), requires_grad=True)
    p1.grad = np.array([1.0])
    p2.grad = np.array([1.0])
    AdamW({"p": p1}, lr=0.1, weight_decay=0.0).step()
    AdamW({"p": p2}, lr=0.1, weight_decay=0.5).step()
    # decay shows up as an extra -lr*wd*w term, independent of the Adam step
    assert p2.numpy()[0] == pytest.approx(p1.numpy()[0] - 0.1 * 0.5 * 4.0, rel=1e-6)


# ---------------------------------------------------------------------------
# training loop bookkeeping (real runs live in the acceptance suite)
# ---------------------------------------------------------------------------


def test_history_length_one_epoch(easy_dataset):
    cfg = tiny_train_cfg()
    cfg["backbone"]["image_size"] = 32
    res = train(easy_dataset, cfg, epochs=1)
    n_train = len(easy_dataset.select(split="train"))
    assert len(res.loss_history) == int(np.ceil(n_train / cfg["optimizer"]["batch_size"]))
    assert res.meta["seed"] == cfg["seed"]


def test_zero_learning_rates_leave_params_bitwise(easy_dataset):
    cfg = tiny_train_cfg()
    cfg["backbone"]["image_size"] = 32
    cfg["optimizer"]["backbone"]["lr"] = 0.0
    cfg["optimizer"]["rest"]["lr"] = 0.0
    from stan.config import build_model

    model = build_model(cfg, np.random.default_rng(cfg["seed"]))
    before = {k: v.copy() for k, v in model.state().items()}
    train(easy_dataset, cfg, epochs=1, model=model)
    after = model.state()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_train_rejects_class_count_mismatch(easy_dataset):
    cfg = tiny_train_cfg()
    cfg["backbone"]["image_size"] = 32
    cfg["backbone"]["num_classes"] = 7
    with pytest.raises(ConfigError):
        train(easy_dataset, cfg, epochs=1)


def test_param_groups_partition_exactly():
    model = StanModel(
        backbone_cfg=__import__("stan.backbone", fromlist=["BackboneConfig"]).BackboneConfig(
            **TINY_BACKBONE
        ),
        rng=np.random.default_rng(0),
    )
    bb, rest = model.param_groups()
    allp = model.named_params()
    assert set(bb) | set(rest) == set(allp)
    assert not set(bb) & set(rest)
    assert any(k.startswith("backbone.head.") for k in bb)  # C_S rides with the backbone
    assert any(k.startswith("classifier.") for k in rest)
