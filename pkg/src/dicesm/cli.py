"""Single entry point exposing the library as subcommands.

Machine-readable JSON goes to stdout, logs to stderr. Exit codes: 0 success,
1 validation error (bad data, shape mismatches, file-format problems),
2 usage error (bad flags, malformed config). Every source of randomness is
seeded through --seed / config seeds; DICESM_SEED overrides the default 42.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import losses as losses_mod
from .calibration import (
    KdeSpec,
    SCOPE_ALL,
    SCOPE_BOUNDARY,
    kde_calibrate_batch,
    sample_key_points,
    select_scope_pixels,
)
from .core import (
    DicesmError,
    LabelField,
    ProbField,
    RaterStack,
    TensorF,
    read_label_field,
    read_prob_field,
    read_tensor,
    write_field,
    write_tensor,
)
from .losses import ReductionSpec, TverskyParams, make_loss
from .metrics import (
    BDiceSpec,
    CalibRecord,
    EceSpec,
    bdice,
    ece,
    hard_dice,
)
from .properties import run_suite
from .softlabels import STRATEGIES, SoftLabelSpec, build_labels, build_labels_dataset
from .training import (
    KdSpec,
    ModelSpec,
    RaterNoise,
    SynthDataset,
    SynthImage,
    SynthSpec,
    TrainSpec,
    binarize,
    distill,
    generate_synthetic,
    load_model,
    save_model,
    subset,
    train,
    write_trace_csv,
)


class UsageError(Exception):
    pass


def _default_seed() -> int:
    return int(os.environ.get("DICESM_SEED", "42"))


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")


def _log(msg: str) -> None:
    sys.stderr.write(msg + "\n")


def _require_keys(d: dict, allowed: set, where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise UsageError(f"unknown keys in {where}: {extra}")


# --------------------------------------------------------------------------
# eval-loss
# --------------------------------------------------------------------------

def _reduction_from_args(args) -> ReductionSpec:
    return ReductionSpec(class_mode=args.class_mode, batch_mode=args.batch_mode,
                         empty_both_value=args.empty_both_value)


def _loss_params_from_args(args) -> dict | None:
    if args.loss in ("stl", "ctl", "cftl"):
        params = {"alpha": args.alpha, "beta": args.beta, "gamma": args.gamma}
        if args.loss == "stl" and args.soft_ok:
            params["allow_soft"] = True
        return params
    if args.loss == "compound":
        return {"w_ce": args.w_ce, "w_dml": args.w_dml, "overlap": args.overlap}
    return None


def cmd_eval_loss(args) -> int:
    if args.curve:
        tv = TverskyParams(args.alpha, args.beta, args.gamma)
        params = tv if args.loss in ("stl", "ctl", "cftl") else None
        grid = np.linspace(0.0, 1.0, args.curve_points)
        vals = losses_mod.pairwise_values(args.loss, grid[:, None],
                                          np.full((grid.size, 1), args.label_value),
                                          params)
        sys.stdout.write("x,value\n")
        for x, v in zip(grid, vals):
            sys.stdout.write(f"{float(x)!r},{float(v)!r}\n")
        return 0
    if not args.pred or not args.label:
        raise UsageError("--pred and --label are required without --curve")
    x = read_prob_field(args.pred)
    y = read_label_field(args.label)
    fn = make_loss(args.loss, _loss_params_from_args(args))
    pair = fn(x, y, _reduction_from_args(args))
    if args.grad_out:
        write_tensor(args.grad_out, pair.grad)
    _emit({"loss": args.loss, "value": pair.value})
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    pred = read_prob_field(args.pred)
    label = read_label_field(args.label)
    if args.metric == "dice":
        hard_pred = binarize(pred)
        per_class = [hard_dice(hard_pred, label, c) for c in range(pred.n_classes)]
    elif args.metric == "bdice":
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
        spec = BDiceSpec(thresholds=thresholds)
        per_class = [bdice(pred, label, spec, c) for c in range(pred.n_classes)]
    else:
        fg = 0 if pred.n_classes == 1 else 1
        if pred.n_classes > 2:
            raise UsageError("ece supports binary tasks (C <= 2)")
        record = CalibRecord(pred.array[fg].ravel(), label.array[fg].ravel())
        per_class = [ece(record, EceSpec(n_bins=args.bins))]
    value = float(np.mean(per_class))
    _emit({"metric": args.metric, "value": value, "per_class": per_class})
    return 0


# --------------------------------------------------------------------------
# make-soft-labels
# --------------------------------------------------------------------------

def _stack_from_files(paths) -> RaterStack:
    return RaterStack(tuple(read_label_field(p, "hard") for p in paths))


def cmd_make_soft_labels(args) -> int:
    spec = SoftLabelSpec(strategy=args.strategy, epsilon=args.epsilon,
                         seed=args.seed, tie_break=args.tie_break,
                         weights_scope=args.weights)
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        _require_keys(manifest, {"images"}, "manifest")
        entries = manifest["images"]
        stacks = [_stack_from_files(e["raters"]) for e in entries]
        outs = build_labels_dataset(stacks, spec)
        for e, field in zip(entries, outs):
            write_field(e["out"], field)
        _emit({"strategy": args.strategy, "written": [e["out"] for e in entries]})
        return 0
    if not args.raters or not args.out:
        raise UsageError("--raters and --out are required without --manifest")
    if args.weights == "per_dataset":
        raise UsageError("per_dataset weighting needs --manifest")
    field = build_labels(_stack_from_files(args.raters), spec)
    write_field(args.out, field)
    _emit({"strategy": args.strategy, "written": [args.out],
           "hardness": field.hardness})
    return 0


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------

def _calibration_pass(pred: ProbField, label: LabelField, spec: KdeSpec):
    c = pred.n_classes
    conf_rows = pred.array.reshape(c, -1).T
    lab_rows = label.array.reshape(c, -1).T
    keys = sample_key_points(conf_rows, lab_rows, spec)
    if spec.pixel_scope == SCOPE_ALL:
        out = kde_calibrate_batch(conf_rows, keys, spec.bandwidth)
        n_scope = conf_rows.shape[0]
    else:
        idx = select_scope_pixels(pred, label, spec)
        out = conf_rows.copy()
        if idx.size:
            out[idx] = kde_calibrate_batch(conf_rows[idx], keys, spec.bandwidth)
        n_scope = int(idx.size)
    arr = np.clip(out.T.reshape(pred.dims), 0.0, 1.0)
    return ProbField.from_array(arr), keys, n_scope


def _binary_ece(pred: ProbField, label: LabelField, n_bins=15) -> float:
    fg = 0 if pred.n_classes == 1 else 1
    record = CalibRecord(pred.array[fg].ravel(), label.array[fg].ravel())
    return ece(record, EceSpec(n_bins=n_bins))


def cmd_calibrate(args) -> int:
    pred = read_prob_field(args.pred)
    label = read_label_field(args.label, "hard")
    scope = SCOPE_ALL if args.scope == "all" else SCOPE_BOUNDARY
    if args.sweep:
        rows = []
        for h in (float(tok) for tok in args.sweep.split(",")):
            spec = KdeSpec(bandwidth=h, n_key=args.n_key, pixel_scope=scope,
                           boundary_radius=args.boundary_radius, seed=args.seed)
            calibrated, _, n_scope = _calibration_pass(pred, label, spec)
            rows.append({"bandwidth": h,
                         "ece_before": _binary_ece(pred, label),
                         "ece_after": _binary_ece(calibrated, label),
                         "scope_pixels": n_scope})
        _emit({"sweep": rows})
        return 0
    if not args.out:
        raise UsageError("--out is required without --sweep")
    spec = KdeSpec(bandwidth=args.bandwidth, n_key=args.n_key, pixel_scope=scope,
                   boundary_radius=args.boundary_radius, seed=args.seed)
    calibrated, keys, n_scope = _calibration_pass(pred, label, spec)
    write_field(args.out, calibrated)
    _emit({"out": args.out, "n_key": len(keys), "scope_pixels": n_scope,
           "ece_before": _binary_ece(pred, label),
           "ece_after": _binary_ece(calibrated, label)})
    return 0


# --------------------------------------------------------------------------
# gen-data and dataset IO
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SynthSpec(n_images=args.n_images, height=args.height, width=args.width,
                     n_classes=args.n_classes, k_raters=args.k_raters,
                     noise=RaterNoise((args.radius_lo, args.radius_hi),
                                      args.flip_prob),
                     image_noise=args.image_noise, seed=args.seed)
    ds = generate_synthetic(spec)
    out = Path(args.out)
    for sub in ("images", "raters", "clean"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, im in enumerate(ds.images):
        img_path = f"images/img_{i:04d}.sdt"
        write_tensor(out / img_path, TensorF.from_array(im.image))
        rater_paths = []
        for k, r in enumerate(im.raters.raters):
            rp = f"raters/img_{i:04d}_rater_{k}.sdt"
            write_field(out / rp, r)
            rater_paths.append(rp)
        clean_path = f"clean/img_{i:04d}.sdt"
        write_field(out / clean_path, im.clean)
        entries.append({"image": img_path, "raters": rater_paths,
                        "clean": clean_path})
    manifest = {
        "spec": {"n_images": spec.n_images, "height": spec.height,
                 "width": spec.width, "n_classes": spec.n_classes,
                 "k_raters": spec.k_raters,
                 "noise": {"dilate_erode_radius": list(spec.noise.dilate_erode_radius),
                           "boundary_flip_prob": spec.noise.boundary_flip_prob},
                 "image_noise": spec.image_noise, "seed": spec.seed},
        "images": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _emit({"out": str(out), "n_images": len(entries)})
    return 0


def _synth_spec_from_json(d: dict) -> SynthSpec:
    _require_keys(d, {"n_images", "height", "width", "n_classes", "k_raters",
                      "noise", "image_noise", "seed"}, "synth spec")
    noise = d.get("noise", {})
    _require_keys(noise, {"dilate_erode_radius", "boundary_flip_prob"}, "noise")
    kwargs = {k: v for k, v in d.items() if k != "noise"}
    if noise:
        kwargs["noise"] = RaterNoise(
            tuple(noise.get("dilate_erode_radius", (0, 2))),
            noise.get("boundary_flip_prob", 0.1))
    return SynthSpec(**kwargs)


def load_dataset_dir(path) -> SynthDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = _synth_spec_from_json(manifest["spec"])
    images = []
    for e in manifest["images"]:
        img = read_tensor(root / e["image"]).as_array()
        raters = RaterStack(tuple(read_label_field(root / p, "hard")
                                  for p in e["raters"]))
        clean = read_label_field(root / e["clean"], "hard")
        images.append(SynthImage(img, raters, clean))
    return SynthDataset(spec, tuple(images))


def _dataset_from_config(cfg: dict) -> SynthDataset:
    _require_keys(cfg, {"dir", "synth"}, "data")
    if ("dir" in cfg) == ("synth" in cfg):
        raise UsageError("data needs exactly one of 'dir' or 'synth'")
    if "dir" in cfg:
        return load_dataset_dir(cfg["dir"])
    return generate_synthetic(_synth_spec_from_json(cfg["synth"]))


# --------------------------------------------------------------------------
# train / distill configs
# --------------------------------------------------------------------------

def _model_spec_from_json(d: dict) -> ModelSpec:
    _require_keys(d, {"kind", "feature_set", "radii", "channels", "n_classes",
                      "seed"}, "model spec")
    kwargs = dict(d)
    if "radii" in kwargs:
        kwargs["radii"] = tuple(kwargs["radii"])
    return ModelSpec(**kwargs)


def _label_source_from_json(d: dict) -> SoftLabelSpec:
    _require_keys(d, {"strategy", "epsilon", "seed", "tie_break",
                      "weights_scope"}, "label_source")
    return SoftLabelSpec(**d)


def _train_spec_from_json(d: dict) -> TrainSpec:
    _require_keys(d, {"lr0", "momentum", "weight_decay", "epochs", "batch_size",
                      "poly_power", "loss", "label_source", "reduction", "seed"},
                  "train spec")
    kwargs = dict(d)
    loss = kwargs.pop("loss", {"name": "compound"})
    _require_keys(loss, {"name", "params"}, "loss")
    kwargs["loss_name"] = loss.get("name", "compound")
    kwargs["loss_params"] = loss.get("params")
    if "label_source" in kwargs:
        kwargs["label_source"] = _label_source_from_json(kwargs["label_source"])
    if "reduction" in kwargs:
        kwargs["reduction"] = losses_mod.reduction_from_json(kwargs["reduction"])
    return TrainSpec(**kwargs)


def _kde_spec_from_json(d: dict) -> KdeSpec:
    _require_keys(d, {"bandwidth", "n_key", "pixel_scope", "boundary_radius",
                      "seed"}, "kde spec")
    return KdeSpec(**d)


def _kd_spec_from_json(d: dict) -> KdSpec:
    _require_keys(d, {"teacher_checkpoint", "use_kde", "kde", "kd_weight",
                      "kd_terms"}, "kd spec")
    kwargs = dict(d)
    if "kde" in kwargs:
        kwargs["kde"] = _kde_spec_from_json(kwargs["kde"])
    return KdSpec(**kwargs)


def _split(dataset: SynthDataset, val_fraction: float, seed: int):
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if n_val == 0:
        return dataset, None
    order = np.random.default_rng(np.random.SeedSequence([seed, 104729])).permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    return subset(dataset, train_idx), subset(dataset, val_idx)


def _finish_training(result, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace_csv(out / "trace.csv", result.trace)
    save_model(result.model, out / "model")
    metrics = {k: result.final_metrics[k] for k in ("dice", "bdice", "ece")}
    _emit({"out": str(out), **metrics})


def cmd_train(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    _require_keys(cfg, {"data", "model", "train", "val_fraction", "eval_every",
                        "out_dir"}, "config")
    dataset = _dataset_from_config(cfg["data"])
    model_spec = _model_spec_from_json(cfg.get("model", {}))
    train_spec = _train_spec_from_json(cfg.get("train", {}))
    tr, va = _split(dataset, cfg.get("val_fraction", 0.0), train_spec.seed)
    result = train(tr, model_spec, train_spec, va, cfg.get("eval_every", 1))
    _finish_training(result, cfg.get("out_dir", "train_out"))
    return 0


def cmd_distill(args) -> int:
    cfg = json.loads(Path(args.config).read_text())
    _require_keys(cfg, {"data", "student", "train", "kd", "val_fraction",
                        "eval_every", "out_dir"}, "config")
    dataset = _dataset_from_config(cfg["data"])
    student_spec = _model_spec_from_json(cfg.get("student", {}))
    train_spec = _train_spec_from_json(cfg.get("train", {}))
    kd_spec = _kd_spec_from_json(cfg.get("kd", {}))
    if not kd_spec.teacher_checkpoint:
        raise UsageError("kd.teacher_checkpoint is required")
    teacher = load_model(kd_spec.teacher_checkpoint)
    tr, va = _split(dataset, cfg.get("val_fraction", 0.0), train_spec.seed)
    result = distill(tr, teacher, student_spec, train_spec, kd_spec, va,
                     cfg.get("eval_every", 1))
    _finish_training(result, cfg.get("out_dir", "distill_out"))
    return 0


def cmd_check_properties(args) -> int:
    report = run_suite(trials=args.trials, seed=args.seed, mutate=args.mutate)
    _emit(report)
    return 0 if report["all_pass"] else 1


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicesm",
        description="Soft-label-compatible region losses, calibration and "
                    "training tools")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("eval-loss", formatter_class=fmt,
                       help="evaluate one loss on prediction/label tensors")
    p.add_argument("--loss", required=True, choices=losses_mod.LOSS_NAMES)
    p.add_argument("--pred", help="prediction .sdt file")
    p.add_argument("--label", help="label .sdt file")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--w-ce", type=float, default=0.25)
    p.add_argument("--w-dml", type=float, default=0.75)
    p.add_argument("--overlap", default="dml1",
                   choices=("sdl", "sjl", "jml1", "jml2", "dml1", "dml2"))
    p.add_argument("--class-mode", default="mean_present",
                   choices=("mean_present", "mean_all"))
    p.add_argument("--batch-mode", default="per_image_then_mean",
                   choices=("per_image_then_mean", "pooled"))
    p.add_argument("--empty-both-value", type=float, default=0.0)
    p.add_argument("--soft-ok", action="store_true",
                   help="let stl accept soft labels (demonstration only)")
    p.add_argument("--grad-out", help="write d(loss)/dx as an .sdt tensor")
    p.add_argument("--curve", action="store_true",
                   help="emit CSV of loss values over a scalar prediction sweep")
    p.add_argument("--label-value", type=float, default=0.8,
                   help="scalar soft label for --curve")
    p.add_argument("--curve-points", type=int, default=1001)
    p.set_defaults(fn=cmd_eval_loss)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a metric on prediction/label tensors")
    p.add_argument("--pred", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--metric", required=True, choices=("dice", "bdice", "ece"))
    p.add_argument("--thresholds", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--bins", type=int, default=15)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("make-soft-labels", formatter_class=fmt,
                       help="build training targets from rater annotations")
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--tie-break", default="background",
                   choices=("background", "lowest_class"))
    p.add_argument("--weights", default="per_image",
                   choices=("per_image", "per_dataset"))
    p.add_argument("--raters", nargs="+", help="one .sdt file per rater")
    p.add_argument("--out", help="output .sdt file")
    p.add_argument("--manifest", help="JSON manifest for multi-image runs")
    p.set_defaults(fn=cmd_make_soft_labels)

    p = sub.add_parser("calibrate", formatter_class=fmt,
                       help="KDE-recalibrate a probability field")
    p.add_argument("--pred", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--bandwidth", type=float, default=1e-3)
    p.add_argument("--n-key", type=int, default=128)
    p.add_argument("--scope", default="all", choices=("all", "boundary"))
    p.add_argument("--boundary-radius", type=int, default=1)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", help="output .sdt file")
    p.add_argument("--sweep", help="comma-separated bandwidths to compare")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="generate a synthetic multi-rater dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--n-classes", type=int, default=1)
    p.add_argument("--k-raters", type=int, default=5)
    p.add_argument("--radius-lo", type=int, default=0)
    p.add_argument("--radius-hi", type=int, default=2)
    p.add_argument("--flip-prob", type=float, default=0.1)
    p.add_argument("--image-noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a reference model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", formatter_class=fmt,
                       help="teacher->student distillation from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("check-properties", formatter_class=fmt,
                       help="run the full invariant suite")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--mutate", choices=("sign",),
                   help="inject a known bug to demonstrate suite sensitivity")
    p.set_defaults(fn=cmd_check_properties)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.fn(args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return 2
    except json.JSONDecodeError as e:
        _log(f"bad JSON config: {e}")
        return 2
    except (TypeError, ValueError) as e:
        _log(f"invalid configuration: {e}")
        return 2
    except FileNotFoundError as e:
        _log(f"missing file: {e}")
        return 1
    except DicesmError as e:
        _log(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
