"""Command-line entry point.

Subcommands: train, eval, calibrate, gen-data, ablate, attn-dump,
gradcheck.  Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure, 5 I/O error.  The only environment variable with
any effect is STAN_THREADS (evaluation worker count, default 1).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import tensor as T
from .config import build_model, config_hash, load_config, resolve_config
from .dataio import (
    SyntheticSpec,
    dump_scores,
    generate_synthetic,
    load_checkpoint,
    load_manifest,
    read_tensor,
    save_checkpoint,
    write_tensor,
)
from .errors import ConfigError, DataError, IoError, NumericalError, StanError
from .head import (
    calibrate_on_val,
    evaluate,
    make_optimizers,
    model_hash,
    total_loss,
    train,
    zero_grads,
    _batch_logits,
)
from .tensor import GradTape, Tensor, backward

TINY_GRADCHECK_CONFIG = {
    "backbone": {
        "image_size": 16,
        "patch_size": 2,
        "stage_channels": [2, 4, 8, 16],
        "stage_depths": [1, 1, 1, 1],
        "window_size": 2,
        "num_heads": [1, 1, 2, 2],
        "num_classes": 3,
    },
}


def _write_json(path: str, doc: dict) -> None:
    from .dataio import _atomic_write

    _atomic_write(path, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8"))


def _load_dataset(cfg: dict):
    data = cfg["data"]
    if data.get("manifest"):
        return load_manifest(data["manifest"])
    if data.get("synthetic"):
        spec_doc = dict(data["synthetic"])
        out_dir = spec_doc.pop("out_dir", None)
        if out_dir is None:
            raise ConfigError("data.synthetic needs an out_dir key")
        try:
            spec = SyntheticSpec(**spec_doc)
        except TypeError as e:
            raise ConfigError(f"bad synthetic spec: {e}") from e
        return load_manifest(generate_synthetic(spec, out_dir))
    raise ConfigError("config data section needs either a manifest path or a synthetic spec")


def _load_model_from_ckpt(cfg: dict, ckpt_path: str):
    state, meta = load_checkpoint(ckpt_path)
    if meta.get("model_hash") != model_hash(cfg):
        raise ConfigError("checkpoint was trained with a different model configuration")
    model = build_model(cfg)
    model.load_state(state)
    return model, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = _load_dataset(cfg)
    result = train(manifest, cfg)
    save_checkpoint(args.out, result.model.state(), result.meta)
    loss_path = args.out + ".loss.csv"
    lines = ["step,loss"] + [f"{i},{v:.9g}" for i, v in enumerate(result.loss_history)]
    from .dataio import _atomic_write

    _atomic_write(loss_path, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"checkpoint written to {args.out} ({len(result.loss_history)} steps)")
    return 0


def _resolve_theta(args, cfg, model, manifest) -> float:
    if args.theta is not None:
        return float(args.theta)
    if args.calibrate:
        return calibrate_on_val(model, manifest, cfg["eval"]["target_tpr"])
    raise ConfigError("eval needs either --theta or --calibrate")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    manifest = _load_dataset(cfg)
    model, meta = _load_model_from_ckpt(cfg, args.ckpt)
    theta = _resolve_theta(args, cfg, model, manifest)
    report, rows = evaluate(model, manifest, theta)
    doc = report.to_dict()
    doc.update(
        {
            "theta": theta,
            "config_hash": config_hash(cfg),
            "seed": cfg["seed"],
            "checkpoint_seed": meta.get("seed"),
        }
    )
    _write_json(args.out, doc)
    dump_scores(args.out + ".scores.csv", rows)
    print(
        f"acc={report.acc:.4f} auroc={report.auroc:.4f} "
        f"oscr={report.oscr:.4f} macro_f1={report.macro_f1:.4f} theta={theta:.6g}"
    )
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    manifest = load_manifest(args.manifest) if args.manifest else _load_dataset(cfg)
    model, _ = _load_model_from_ckpt(cfg, args.ckpt)
    theta = calibrate_on_val(model, manifest, args.target_tpr)
    print(f"{theta:.9g}")
    return 0


def cmd_gen_data(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {args.spec}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.spec}: invalid JSON: {e}") from e
    try:
        spec = SyntheticSpec(**doc)
    except TypeError as e:
        raise ConfigError(f"bad synthetic spec: {e}") from e
    manifest_path = generate_synthetic(spec, args.out)
    print(manifest_path)
    return 0


GRID_MODULE_ROWS = {
    (1,): {"mode": "backbone", "ca": False},
    (1, 2): {"mode": "module2_agg", "ca": False},
    (1, 2, 3): {"mode": "stan", "ca": False},
    (1, 2, 3, 4): {"mode": "stan", "ca": True},
}


def _row_config(base_cfg: dict, row: dict) -> dict:
    cfg = json.loads(json.dumps(base_cfg))  # deep copy
    known = {"name", "modules", "aggregation_mode", "seed"}
    unknown = set(row) - known
    if unknown:
        raise ConfigError(f"unknown grid row key(s): {sorted(unknown)}")
    if "modules" in row:
        key = tuple(sorted(row["modules"]))
        if key not in GRID_MODULE_ROWS:
            raise ConfigError(f"unsupported module combination {list(key)}")
        cfg["stfl"]["aggregation_mode"] = GRID_MODULE_ROWS[key]["mode"]
        cfg["ca"]["enabled"] = GRID_MODULE_ROWS[key]["ca"]
    if "aggregation_mode" in row:
        cfg["stfl"]["aggregation_mode"] = row["aggregation_mode"]
    if "seed" in row:
        cfg["seed"] = int(row["seed"])
    return resolve_config(cfg)


def cmd_ablate(args) -> int:
    import os

    base_cfg = load_config(args.config)
    try:
        with open(args.grid, "r", encoding="utf-8") as f:
            grid = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {args.grid}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.grid}: invalid JSON: {e}") from e
    if not isinstance(grid, list) or not grid:
        raise ConfigError("grid file must be a non-empty JSON list of rows")

    os.makedirs(args.out, exist_ok=True)
    lines = ["name,acc,auroc,oscr,macro_f1"]
    for i, row in enumerate(grid):
        name = row.get("name", f"row{i}")
        cfg = _row_config(base_cfg, row)
        manifest = _load_dataset(cfg)
        result = train(manifest, cfg)
        theta = calibrate_on_val(result.model, manifest, cfg["eval"]["target_tpr"])
        report, _ = evaluate(result.model, manifest, theta)
        save_checkpoint(
            os.path.join(args.out, f"{name}.ckpt"), result.model.state(), result.meta
        )
        lines.append(
            f"{name},{report.acc:.9g},{report.auroc:.9g},{report.oscr:.9g},"
            f"{report.macro_f1:.9g}"
        )
        print(lines[-1])
    from .dataio import _atomic_write

    _atomic_write(
        os.path.join(args.out, "ablation.csv"), ("\n".join(lines) + "\n").encode("utf-8")
    )
    return 0


def _pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    levels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + levels.tobytes()


def attention_maps(model, image: np.ndarray):
    """Per-block channel-mean absolute activation probes (raw, unnormalized)."""
    pyramid, _, _ = model.backbone(Tensor(image))
    return [np.abs(m.data).mean(axis=0).astype(np.float32) for m in pyramid]


def cmd_attn_dump(args) -> int:
    import os

    cfg = load_config(args.config)
    model, _ = _load_model_from_ckpt(cfg, args.ckpt)
    image = read_tensor(args.image)
    if image.shape != (3, cfg["backbone"]["image_size"], cfg["backbone"]["image_size"]):
        raise DataError(f"image shape {image.shape} does not match config")
    os.makedirs(args.out, exist_ok=True)
    side = image.shape[1]
    for i, raw in enumerate(attention_maps(model, image)):
        write_tensor(os.path.join(args.out, f"block{i + 1}_raw.stan"), raw)
        lo, hi = float(raw.min()), float(raw.max())
        norm = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
        up = np.repeat(np.repeat(norm, side // raw.shape[0], axis=0), side // raw.shape[1], axis=1)
        from .dataio import _atomic_write

        _atomic_write(os.path.join(args.out, f"block{i + 1}.pgm"), _pgm_bytes(up))
    print(f"4 attention maps written to {args.out}")
    return 0


def run_gradcheck(cfg: dict, tol: float, sabotage: bool = False):
    """Full-model finite-difference sweep on a 2-sample batch.

    Returns {module prefix: worst relative error}.  Runs in float64 so
    the finite-difference noise floor stays far below the tolerance.
    """
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(cfg["seed"])
        model = build_model(cfg, np.random.default_rng(cfg["seed"] + 1))
        k = cfg["backbone"]["num_classes"]
        side = cfg["backbone"]["image_size"]
        images = [rng.normal(0, 1, size=(3, side, side)) for _ in range(2)]
        labels = rng.integers(0, k, size=2)
        lam = cfg["loss"]["lambda"]
        params = model.named_params()

        def loss_value() -> float:
            ls, lst = _batch_logits(model, images)
            return total_loss(ls, lst, labels, lam).item()

        zero_grads(params)
        with GradTape():
            ls, lst = _batch_logits(model, images)
            loss = total_loss(ls, lst, labels, lam)
            backward(loss)
        if sabotage:
            first = next(iter(params.values()))
            first.grad = (first.grad if first.grad is not None else 0.0) + 1.0

        report = T.grad_check_params(loss_value, params, eps=1e-5, tol=tol)
    per_module: dict[str, float] = {}
    for name, err in report.details:
        mod = "ca" if name.startswith("stfl.ca.") else name.split(".", 1)[0]
        per_module[mod] = max(per_module.get(mod, 0.0), err)
    return per_module


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(TINY_GRADCHECK_CONFIG) if args.config is None else load_config(args.config)
    per_module = run_gradcheck(cfg, args.tol, sabotage=args.sabotage)
    worst = max(per_module.values())
    for mod, err in sorted(per_module.items()):
        print(f"{mod}: worst rel err {err:.3e}")
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= tol {args.tol:g}")
    print(f"gradcheck passed (worst {worst:.3e} < {args.tol:g})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--theta", type=float, default=None, help="decision threshold")
    e.add_argument("--calibrate", action="store_true",
                   help="calibrate theta on the known validation split")
    e.add_argument("--out", default="report.json", help="metric report JSON path")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("calibrate", help="print a threshold calibrated on validation scores")
    c.add_argument("--config", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--manifest", default=None, help="override the config dataset")
    c.add_argument("--target-tpr", type=float, default=0.95)
    c.set_defaults(fn=cmd_calibrate)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="synthetic spec JSON")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(fn=cmd_gen_data)

    a = sub.add_parser("ablate", help="train+eval every row of a grid file")
    a.add_argument("--config", required=True)
    a.add_argument("--grid", required=True, help="JSON list of grid rows")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(fn=cmd_ablate)

    d = sub.add_parser("attn-dump", help="dump per-block attention probe maps")
    d.add_argument("--config", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True, help="image tensor file")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(fn=cmd_attn_dump)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    gc.add_argument("--config", default=None, help="defaults to a built-in tiny config")
    gc.add_argument("--tol", type=float, default=5e-3)
    gc.add_argument("--sabotage", action="store_true",
                    help="debug: corrupt one gradient to self-test the checker")
    gc.set_defaults(fn=cmd_gradcheck)
    return p


EXIT_CODES = [
    (ConfigError, 2),
    (DataError, 3),
    (NumericalError, 4),
    (IoError, 5),
    (StanError, 2),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StanError as e:
        for cls, code in EXIT_CODES:
            if isinstance(e, cls):
                print(f"error: {cls.__name__}: {e}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
