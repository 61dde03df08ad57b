"""``volwindow`` command line: preprocess, sample, plan, init-model, infer,
eval, loss-check and demo.

Data goes to files or to one JSON document on stdout; diagnostics go to
stderr. Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import augment, dynunet, metrics, preprocess, swinfer, trainmath
from .config import PipelineConfig, apply_overrides, load_config
from .errors import ValidationError, VolwindowError
from .volgrid import read_nifti, write_nifti

log = logging.getLogger("volwindow")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _config(args, overrides: dict) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    return apply_overrides(cfg, overrides)


# ----------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    cfg = _config(
        args,
        {
            "preprocess.target_spacing": args.target_spacing,
            "preprocess.lower_percentile": args.lower_percentile,
            "preprocess.upper_percentile": args.upper_percentile,
            "preprocess.clip": args.clip,
            "preprocess.nan_guard": args.nan_guard,
        },
    )
    if args.mask:
        out = preprocess.preprocess_mask(read_nifti(args.input, mask=True), cfg.preprocess)
        write_nifti(out, args.output)
        _emit({"replaced_nans": 0, "lo": None, "hi": None, "degenerate": False, "out_shape": list(out.shape)})
        return EXIT_OK
    res = preprocess.preprocess_image(read_nifti(args.input), cfg.preprocess)
    write_nifti(res.volume, args.output)
    _emit(
        {
            "replaced_nans": res.replaced_nans,
            "lo": res.lo,
            "hi": res.hi,
            "degenerate": res.degenerate,
            "out_shape": list(res.volume.shape),
        }
    )
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(
        args,
        {"crop.crop_size": args.crop_size, "crop.pos_ratio": args.pos_ratio, "crop.seed": args.seed},
    )
    if args.rot_p > 0 and len(set(cfg.crop.crop_size)) != 1:
        raise UsageError(f"--rot-p needs a cubic crop size, got {list(cfg.crop.crop_size)}; pass --rot-p 0")
    image = read_nifti(args.image)
    label = read_nifti(args.label, mask=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = augment.make_rng(cfg.crop.seed, args.case_id)
    manifest = []
    for i in range(args.n):
        crop = augment.sample_balanced_crop(image, label, cfg.crop, rng)
        img, lab, flips = augment.random_flip(crop.image.data, crop.label.data, args.flip_p, rng)
        img, lab, rots = augment.random_rot90(img, lab, args.rot_p, rng)
        img_name, lab_name = f"crop_{i:04d}_image.nii.gz", f"crop_{i:04d}_label.nii.gz"
        write_nifti(crop.image.with_data(img), out_dir / img_name)
        write_nifti(crop.label.with_data(lab), out_dir / lab_name)
        manifest.append(
            {
                "index": i,
                "center": list(crop.center),
                "center_class": crop.center_class,
                "fallback": crop.fallback,
                "flips": list(flips),
                "rotations": rots,
                "image": img_name,
                "label": lab_name,
            }
        )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    pos = sum(m["center_class"] == "pos" for m in manifest)
    _emit({"n": args.n, "out_dir": str(out_dir), "pos_fraction": pos / max(args.n, 1)})
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _config(args, {"roi": args.roi, "overlap": args.overlap})
    plan = swinfer.plan_tiles(args.shape, cfg.roi, cfg.overlap)
    _emit(plan.to_dict())
    return EXIT_OK


def cmd_init_model(args) -> int:
    cfg = _config(args, {"seed": args.seed})
    arch = dynunet.toy_arch() if args.toy else cfg.arch
    if args.filters:
        strides = [[1, 1, 1]] + [[2, 2, 2]] * (len(args.filters) - 1)
        arch = dynunet.ArchSpec.from_dict({**arch.to_dict(), "filters": args.filters, "strides": strides})
    params = dynunet.init_params(arch, cfg.seed)
    dynunet.save_params(params, args.output)
    _emit(
        {
            "output": str(args.output),
            "arch": arch.to_dict(),
            "n_tensors": len(params),
            "n_params": int(sum(v.size for v in params.values())),
        }
    )
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(
        args,
        {
            "roi": args.roi,
            "overlap": args.overlap,
            "blend.kind": args.blend,
            "blend.sigma_scale": args.sigma_scale,
            "model_paths": args.model,
        },
    )
    if not cfg.model_paths:
        raise UsageError("infer needs at least one --model (or model_paths in the config)")
    t0 = time.perf_counter()
    volume = read_nifti(args.input)
    probs = []
    for path in cfg.model_paths:
        predictor = dynunet.DynUNetPredictor(dynunet.load_params(path))
        probs.append(
            swinfer.sliding_window_infer(volume, predictor, cfg.roi, cfg.overlap, cfg.blend, jobs=args.jobs)
        )
    mask = swinfer.ensemble_vote(probs, reference=volume, mode=args.vote)
    write_nifti(mask, args.output)
    if args.probs:
        mean = np.mean(probs, axis=0)
        write_nifti(volume.with_data(mean[1]), args.probs)
    _emit(
        {
            "tiles": len(swinfer.plan_tiles(volume.shape, cfg.roi, cfg.overlap)),
            "roi": list(cfg.roi),
            "overlap": cfg.overlap,
            "models": len(cfg.model_paths),
            "lesion_voxels": int(mask.data.sum()),
            "seconds": round(time.perf_counter() - t0, 3),
        }
    )
    return EXIT_OK


def _nifti_files(directory: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(directory.iterdir()):
        if p.name.endswith(".nii") or p.name.endswith(".nii.gz"):
            out[p.name] = p
    return out


def cmd_eval(args) -> int:
    cfg = _config(args, {"connectivity": args.connectivity})
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be files or both be directories")
    if pred.is_dir():
        pf, gf = _nifti_files(pred), _nifti_files(gt)
        names = sorted(set(pf) & set(gf))
        if not names:
            raise UsageError(f"no NIfTI files with matching names in {pred} and {gt}")
        for missing in sorted(set(pf) ^ set(gf)):
            log.warning("unpaired file %s skipped", missing)
        pairs = [(n, pf[n], gf[n]) for n in names]
    else:
        pairs = [(pred.name, pred, gt)]

    def one(item):
        name, p, g = item
        pm, gm = read_nifti(p, mask=True), read_nifti(g, mask=True)
        report = metrics.evaluate_case(pm, gm, gm.spacing, cfg.connectivity)
        return {"case": name, **report.to_dict()}

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        cases = list(pool.map(one, pairs))
    reports = [metrics.MetricsReport(**{k: v for k, v in c.items() if k != "case"}) for c in cases]
    _emit({"cases": cases, "aggregate": metrics.aggregate(reports)})
    return EXIT_OK


def cmd_loss_check(args) -> int:
    res = trainmath.gradient_check(args.instances, args.seed)
    res["tolerance"] = args.tolerance
    res["passed"] = res["max_rel_error"] < args.tolerance
    _emit(res)
    return EXIT_OK if res["passed"] else EXIT_INVALID


def cmd_demo(args) -> int:
    from .demo import run_demo

    cfg = _config(args, {"seed": args.seed})
    _emit(run_demo(cfg.seed, jobs=args.jobs, n_models=args.models, out_dir=args.out_dir))
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")

    parser = _Parser(prog="volwindow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("preprocess", parents=[common], help="NaN guard, RAS, resample, scale")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mask", action="store_true", help="treat input as a label map")
    p.add_argument("--target-spacing", type=_floats)
    p.add_argument("--lower-percentile", type=float)
    p.add_argument("--upper-percentile", type=float)
    p.add_argument("--clip", dest="clip", action="store_true", default=None)
    p.add_argument("--no-clip", dest="clip", action="store_false")
    p.add_argument("--nan-guard", dest="nan_guard", action="store_true", default=None)
    p.add_argument("--no-nan-guard", dest="nan_guard", action="store_false")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("sample", parents=[common], help="balanced crops with flips/rotations")
    p.add_argument("--image", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--case-id", type=int, default=0)
    p.add_argument("--crop-size", type=_ints)
    p.add_argument("--pos-ratio", type=float)
    p.add_argument("--flip-p", type=float, default=0.1)
    p.add_argument("--rot-p", type=float, default=0.1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("plan", parents=[common], help="list sliding-window tiles")
    p.add_argument("--shape", type=_ints, required=True)
    p.add_argument("--roi", type=_ints)
    p.add_argument("--overlap", type=float)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("init-model", parents=[common], help="write randomly initialized params")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--toy", action="store_true", help="two-level (4, 8) network")
    p.add_argument("--filters", type=_ints, help="filters per level; strides 1 then 2")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("infer", parents=[common], help="sliding-window inference / ensemble")
    p.add_argument("--input", required=True)
    p.add_argument("--model", action="append", help="params file; repeat for an ensemble")
    p.add_argument("--roi", type=_ints)
    p.add_argument("--overlap", type=float)
    p.add_argument("--blend", choices=["constant", "gaussian"])
    p.add_argument("--sigma-scale", type=float)
    p.add_argument("--vote", choices=["mean", "hard"], default="mean")
    p.add_argument("--output", required=True)
    p.add_argument("--probs", help="optional path for the lesion probability volume")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="Dice / FNV / FPV")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--connectivity", type=int, choices=[6, 18, 26])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss-check", parents=[common], help="gradient check of the Dice+CE loss")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("demo", parents=[common], help="synthetic end-to-end run")
    p.add_argument("--seed", type=int)
    p.add_argument("--models", type=int, default=3)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_demo)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("VOLWINDOW_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    root = logging.getLogger("volwindow")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(levels.get(level, logging.WARNING))


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (VolwindowError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
