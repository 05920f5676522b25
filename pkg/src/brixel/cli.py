"""Command-line entry point.

Subcommands: ``distill`` (train), ``extract`` (dump teacher features),
``eval`` (fidelity + optional toy probe), ``viz`` (PCA-RGB panels) and
``bench`` (analytic cost table + SVG + local wall-clock).

Exit codes are a stable contract: 0 success, 2 configuration error,
3 IO/data error, 4 numeric failure. All run outputs land under ``--out``
with fixed names (metrics.tsv, config.resolved, checkpoints/, panels/).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .data import load_directory, synthetic_dataset, two_region_dataset
from .errors import ConfigError, DataIOError, NumericError
from .evalbench import (
    cost_svg,
    cost_table,
    fidelity,
    flop_model,
    linear_probe_eval,
    linear_probe_train,
    pca_rgb,
    upsample_baseline,
)
from .imgio import image_to_rgb8, read_ppm, write_png, write_ppm
from .losses import SpectralConfig, default_r0
from .refiner import init_student, student_feature_map
from .runconfig import RunConfig
from .tensors import ImageTensor, TensorFormatError, resize_bilinear, save_tensor
from .training import (
    TrainRun,
    init_run,
    load_checkpoint,
    run_training,
    save_checkpoint,
)
from .vit import init_backbone, vit_forward

FIDELITY_HEADER = ("# columns: sample_id\tstudent_l1\tstudent_cosine\tstudent_specgap"
                   "\tbaseline_l1\tbaseline_cosine\tbaseline_specgap")


def _load_dataset(spec: str, resolution: int, seed: int, count: int):
    if spec == "synthetic":
        return synthetic_dataset(count, resolution, seed)
    return load_directory(spec, resolution)


def _crop_to_teacher(img: ImageTensor, resolution: int) -> ImageTensor:
    side = min(img.h, img.w)
    y0 = (img.h - side) // 2
    x0 = (img.w - side) // 2
    img = ImageTensor(np.ascontiguousarray(img.data[:, y0:y0 + side, x0:x0 + side]))
    return resize_bilinear(img, resolution, resolution, antialias=True)


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------

def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_distill(seed=args.seed)
    return cfg


def cmd_distill(args) -> int:
    cfg = _config_from_args(args)
    dataset = _load_dataset(args.data, cfg.distill.teacher_resolution,
                            cfg.distill.seed, cfg.distill.dataset_size)
    if args.data != "synthetic" and len(dataset) != cfg.distill.dataset_size:
        cfg = cfg.with_distill(dataset_size=len(dataset))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints" / "latest"

    if args.resume:
        if not (ckpt_dir / "manifest.txt").exists():
            raise DataIOError(f"--resume requested but no checkpoint at {ckpt_dir}")
        template = init_student(cfg.vit, cfg.adapter, seed=cfg.distill.seed + 1)
        student, adam, start_iter = load_checkpoint(ckpt_dir, template)
        run = TrainRun(student=student, backbone=init_backbone(cfg.vit, cfg.distill.seed),
                       adam=adam, start_iter=start_iter)
    else:
        run = init_run(cfg.vit, cfg.adapter, cfg.distill)

    (out / "config.resolved").write_text(cfg.resolved_text())
    remaining = cfg.distill.total_iters - run.start_iter
    if remaining < 0:
        raise ConfigError(f"checkpoint is at iteration {run.start_iter}, beyond "
                          f"total_iters={cfg.distill.total_iters}")

    with open(out / "metrics.tsv", "a") as log:
        def log_line(line: str):
            log.write(line + "\n")
            log.flush()

        run_training(run, dataset, cfg.vit, cfg.adapter, cfg.distill,
                     iters=remaining, log_line=log_line)

    save_checkpoint(ckpt_dir, run.student, run.adam, run.start_iter)
    (ckpt_dir / "config.resolved").write_text(cfg.resolved_text())
    print(f"trained to iteration {run.start_iter}; artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg = _config_from_args(args)
    dataset = _load_dataset(args.data, cfg.distill.teacher_resolution,
                            cfg.distill.seed, cfg.distill.dataset_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backbone = init_backbone(cfg.vit, cfg.distill.seed)
    for sid, img in dataset:
        fm = vit_forward(img, cfg.vit, backbone)
        save_tensor(fm.data, out / f"{sid}.brxt")
    print(f"wrote {len(dataset)} teacher feature maps to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_run(ckpt_dir: Path):
    if not ckpt_dir.is_dir():
        raise DataIOError(f"checkpoint directory not found: {ckpt_dir}")
    cfg_path = ckpt_dir / "config.resolved"
    if not cfg_path.exists():
        raise DataIOError(f"checkpoint is missing config.resolved: {ckpt_dir}")
    cfg = RunConfig.from_file(cfg_path)
    template = init_student(cfg.vit, cfg.adapter, seed=cfg.distill.seed + 1)
    student, _, _ = load_checkpoint(ckpt_dir, template)
    backbone = init_backbone(cfg.vit, cfg.distill.seed)
    return cfg, student, backbone


def _student_and_baseline(img, cfg, student, backbone):
    d = cfg.distill
    low = resize_bilinear(img, img.h // d.downsample_factor,
                          img.w // d.downsample_factor, antialias=True)
    s_fm = student_feature_map(low, cfg.vit, cfg.adapter, backbone, student)
    low_fm = vit_forward(low, cfg.vit, backbone)
    base_fm = upsample_baseline(low_fm, cfg.adapter.upsample_factor)
    return s_fm, base_fm, low_fm


def cmd_eval(args) -> int:
    cfg, student, backbone = _load_run(Path(args.checkpoint))
    d = cfg.distill
    dataset = _load_dataset(args.data, d.teacher_resolution, d.seed, d.dataset_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    agg = np.zeros(6)
    for sid, img in dataset:
        teacher = vit_forward(img, cfg.vit, backbone)
        s_fm, base_fm, _ = _student_and_baseline(img, cfg, student, backbone)
        grid = teacher.grid
        scfg = SpectralConfig(r0=d.r0 if d.r0 > 0 else default_r0(*grid), eps_log=d.eps_log)
        fs = fidelity(s_fm, teacher, scfg)
        fb = fidelity(base_fm, teacher, scfg)
        vals = (fs.l1, fs.cosine, fs.spectrum_gap, fb.l1, fb.cosine, fb.spectrum_gap)
        agg += np.array(vals)
        rows.append(sid + "\t" + "\t".join(f"{v:.6g}" for v in vals))
    agg /= len(dataset)
    rows.append("mean\t" + "\t".join(f"{v:.6g}" for v in agg))
    (out / "fidelity.tsv").write_text(FIDELITY_HEADER + "\n" + "\n".join(rows) + "\n")
    print(f"fidelity over {len(dataset)} samples: student cosine {agg[1]:.4f} "
          f"vs baseline {agg[4]:.4f}")

    if args.probe:
        miou_s, miou_b, acc_s, acc_b = _run_probe(cfg, student, backbone)
        (out / "probe.tsv").write_text(
            "# columns: features\tmiou\tpixel_accuracy\n"
            f"student\t{miou_s:.6g}\t{acc_s:.6g}\n"
            f"baseline\t{miou_b:.6g}\t{acc_b:.6g}\n")
        print(f"probe mIoU: student {miou_s:.4f} vs baseline {miou_b:.4f}")
    return 0


def _run_probe(cfg, student, backbone, count: int = 12):
    d = cfg.distill
    samples = two_region_dataset(count, d.teacher_resolution, d.seed)
    feats_s, feats_b, masks = [], [], []
    for _, img, mask in samples:
        s_fm, base_fm, _ = _student_and_baseline(img, cfg, student, backbone)
        feats_s.append(s_fm)
        feats_b.append(base_fm)
        masks.append(mask)
    half = count // 2
    probe_s = linear_probe_train(feats_s[:half], masks[:half], classes=2)
    probe_b = linear_probe_train(feats_b[:half], masks[:half], classes=2)
    miou_s, acc_s = linear_probe_eval(feats_s[half:], masks[half:], probe_s)
    miou_b, acc_b = linear_probe_eval(feats_b[half:], masks[half:], probe_b)
    return miou_s, miou_b, acc_s, acc_b


# ---------------------------------------------------------------------------
# viz
# ---------------------------------------------------------------------------

def cmd_viz(args) -> int:
    cfg, student, backbone = _load_run(Path(args.checkpoint))
    d = cfg.distill
    src = Path(args.image)
    if not src.exists():
        raise DataIOError(f"image not found: {src}")
    img = _crop_to_teacher(read_ppm(src), d.teacher_resolution)

    teacher = vit_forward(img, cfg.vit, backbone)
    s_fm, base_fm, low_fm = _student_and_baseline(img, cfg, student, backbone)
    panels = pca_rgb([teacher, low_fm, s_fm], reference=teacher)

    out = Path(args.out) / "panels"
    out.mkdir(parents=True, exist_ok=True)
    stem = src.stem
    named = {
        f"{stem}_input": image_to_rgb8(img),
        f"{stem}_teacher": panels[0],
        f"{stem}_baseline": panels[1],
        f"{stem}_student": panels[2],
    }
    writer, suffix = (write_png, ".png") if args.png else (write_ppm, ".ppm")
    for name, rgb in named.items():
        writer(out / f"{name}{suffix}", rgb)
    print(f"wrote 4 panels to {out} (teacher grid {teacher.grid}, "
          f"baseline grid {low_fm.grid}, student grid {s_fm.grid})")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _time_forward(fn, repeats: int = 1) -> float:
    fn()  # warm caches once
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    try:
        grids = [int(g) for g in args.sizes.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be a comma list of grids, got {args.sizes!r}") from exc
    p = cfg.vit.patch_size
    for g in grids:
        if g % 4:
            raise ConfigError(f"output grid {g} must be divisible by 4 (the 4x protocol)")

    reports = [flop_model(cfg.vit, cfg.adapter, g * p) for g in grids]
    timings = {}
    backbone = init_backbone(cfg.vit, cfg.distill.seed)
    student = init_student(cfg.vit, cfg.adapter, seed=cfg.distill.seed + 1)
    rng = np.random.default_rng(cfg.distill.seed)
    for g in grids:
        if g * g > args.max_time_tokens:
            continue  # analytic columns still cover this size
        side = g * p
        hi = ImageTensor(rng.random((3, side, side)).astype(np.float32))
        low = resize_bilinear(hi, side // 4, side // 4, antialias=True)
        t_teacher = _time_forward(lambda: vit_forward(hi, cfg.vit, backbone))
        t_student = _time_forward(
            lambda: student_feature_map(low, cfg.vit, cfg.adapter, backbone, student))
        timings[g] = (t_teacher, t_student)

    table = cost_table(reports, timings)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.tsv").write_text(table)
        (out / "cost.svg").write_text(cost_svg(reports))
        print(f"wrote cost.tsv and cost.svg to {out}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="brixel",
        description="Self-distillation of dense backbone features from 4x-downsampled input.")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distill", help="train the refiner/head against the frozen teacher")
    d.add_argument("--config", required=True)
    d.add_argument("--data", required=True, help="image directory or 'synthetic'")
    d.add_argument("--out", required=True)
    d.add_argument("--resume", action="store_true")
    d.add_argument("--seed", type=int, default=None, help="override the config seed")
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("extract", help="dump teacher feature maps as .brxt files")
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=None, help="override the config seed")
    e.set_defaults(fn=cmd_extract)

    v = sub.add_parser("eval", help="fidelity report (and optional toy probe)")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--probe", action="store_true")
    v.set_defaults(fn=cmd_eval)

    z = sub.add_parser("viz", help="PCA-RGB panels for one image")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--image", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--png", action="store_true")
    z.set_defaults(fn=cmd_viz)

    b = sub.add_parser("bench", help="analytic cost model + local wall-clock")
    b.add_argument("--config", required=True)
    b.add_argument("--sizes", required=True, help="comma list of output grids, e.g. 16,32,64")
    b.add_argument("--out", default="")
    b.add_argument("--seed", type=int, default=None, help="override the config seed")
    b.add_argument("--max-time-tokens", type=int, default=4096,
                   help="skip wall-clock measurement above this token count")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataIOError, TensorFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
