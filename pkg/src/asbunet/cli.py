"""Command-line front end.

Exit status 0 on success, 1 on a domain error (bad data, corrupt checkpoint,
mismatched inputs), 2 on a usage error.  Results go to stdout or to the files
named by flags; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint, ops, plotting, quantize, rf, segeval
from .data import generate_dataset, render_background
from .network import DEFAULT_DILATIONS, POOL_PLACEMENT, Network, build_default_spec
from .train import TrainConfig, TrainingError, predict, split_dataset, train

log = logging.getLogger("asbunet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- image I/O (8-bit PNG: RGB in, grayscale out) --------------------------------

def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.all((arr == 0) | (arr == 255)):
        raise ValueError(f"{path}: mask pixels must be 0 or 255")
    return arr == 255


def write_gray(path, arr) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def write_rgb(path, image) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _dilations(text: str | None):
    if text is None:
        return DEFAULT_DILATIONS
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--dilations must be comma-separated integers, got {text!r}") from None


def _kv(**items) -> str:
    return "".join(f"{k}={v:.6g}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in items.items())


def _load_any(path):
    """Float network or quantized model, by checkpoint version."""
    data = Path(path).read_bytes()
    version, _, _ = checkpoint.decode(data)
    if version == checkpoint.QUANT_VERSION:
        return quantize.load_quantized(path)
    return checkpoint.load_checkpoint(path)


# -- subcommands -----------------------------------------------------------------

def cmd_build(args, out):
    spec = build_default_spec(args.scaling, _dilations(args.dilations))
    net = Network(spec, seed=args.seed)
    size = args.input_size
    if size % spec.downsampling:
        raise ValueError(f"input size {size} is not divisible by {spec.downsampling}")
    bottleneck, skips = net.encoder.forward(np.zeros((1, spec.input_channels, size, size)))
    out.write(f"{'module':<24}{'params':>10}\n")
    for child in net.children():
        out.write(f"{child.name:<24}{child.num_params():>10}\n")
    out.write(_kv(scaling=spec.scaling, params=net.num_params(),
                  bottleneck="x".join(map(str, bottleneck.shape[1:])),
                  skips=",".join(f"{k}:{'x'.join(map(str, v.shape[1:]))}" for k, v in skips.items())))
    if args.out:
        n = checkpoint.save_checkpoint(net, args.out)
        out.write(_kv(checkpoint=args.out, bytes=n))
    if args.spec_out:
        Path(args.spec_out).write_text(spec.dumps() + "\n", encoding="utf-8")
    return 0


def cmd_rf_report(args, out):
    if args.geometric_stack:
        trace = rf.receptive_field(rf.stage_stack(_dilations(args.dilations)))
    else:
        spec = build_default_spec(args.scaling, _dilations(args.dilations))
        trace = rf.receptive_field(rf.spec_rf_layers(spec))
    report = rf.linearity_report(trace, args.ratio_threshold)
    out.write(rf.format_table(trace) + "\n")
    out.write(_kv(final_rf=trace[-1].receptive_field, final_stride=trace[-1].effective_stride,
                  stage_increments=",".join(f"{v:g}" for v in report.increments),
                  max_ratio=report.max_ratio, spread=report.spread,
                  near_linear=str(report.near_linear).lower()))
    if args.plot:
        plotting.plot_rf_growth(trace, args.plot, report)
    return 0


def cmd_train(args, out):
    cfg = TrainConfig.from_text(Path(args.config).read_text(encoding="utf-8")) if args.config else TrainConfig()
    data = generate_dataset(args.samples, args.image_size, seed=args.dataset_seed)
    train_set, test_set = split_dataset(data, cfg.split, seed=cfg.seed)
    spec = build_default_spec(args.scaling)
    net = Network(spec, seed=cfg.seed)
    log.info("training on %d images, holding out %d", len(train_set), len(test_set))
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write("step,lr,loss\n")
            _, history = train(net, train_set, cfg, log_file=fh)
    else:
        _, history = train(net, train_set, cfg)
    checkpoint.save_checkpoint(net, args.out)
    probs = predict(net, np.stack([s.image for s in test_set]))
    report = segeval.evaluate_dataset([s.label for s in test_set], list(probs > 0.5))
    means = [float(np.mean([h[2] for h in history if h[3] == e])) for e in range(cfg.epochs)]
    out.write(_kv(train_images=len(train_set), test_images=len(test_set), steps=len(history),
                  final_epoch_loss=means[-1], heldout_score=report.mean_score,
                  heldout_jaccard=report.mean_jaccard, heldout_misdetections=report.total_misdetections,
                  checkpoint=args.out))
    if args.plot:
        plotting.plot_loss_curve(history, args.plot)
    return 0


def cmd_eval(args, out):
    labels_dir, preds_dir = Path(args.labels), Path(args.preds)
    for d in (labels_dir, preds_dir):
        if not d.is_dir():
            raise ValueError(f"{d} is not a directory")
    label_names = sorted(p.name for p in labels_dir.glob("*.png"))
    pred_names = sorted(p.name for p in preds_dir.glob("*.png"))
    if label_names != pred_names:
        only_l = sorted(set(label_names) - set(pred_names))
        only_p = sorted(set(pred_names) - set(label_names))
        raise ValueError(f"label and prediction files do not pair up: only in labels {only_l[:5]}, "
                         f"only in predictions {only_p[:5]}")
    if not label_names:
        raise ValueError(f"no PNG masks in {labels_dir}")
    params = segeval.IgnoreBandParams(args.osf_beta, args.min_radius)
    labels = [read_mask(labels_dir / n) for n in label_names]
    preds = [read_mask(preds_dir / n) for n in pred_names]
    report = segeval.evaluate_dataset(labels, preds, params, names=label_names)
    out.write(f"{'image':<24}{'jaccard':>10}{'misdet':>8}{'score':>10}\n")
    for n, j, m, s in zip(report.names, report.jaccard, report.misdetections, report.scores):
        out.write(f"{n:<24}{j:>10.4f}{m:>8d}{s:>10.4f}\n")
    out.write(_kv(count=report.count, mean_score=report.mean_score, mean_jaccard=report.mean_jaccard,
                  misdetections=report.total_misdetections))
    if args.plot:
        plotting.plot_score_histogram(report, args.plot)
    return 0


def cmd_quantize(args, out):
    net = checkpoint.load_checkpoint(args.ckpt)
    size = args.image_size
    calib = generate_dataset(args.calib_samples, size, seed=args.calib_seed)
    qparams = quantize.calibrate(net, np.stack([s.image for s in calib]))
    model = quantize.quantize_network(net, qparams)
    qbytes = quantize.save_quantized(model, args.out)
    fbytes = Path(args.ckpt).stat().st_size
    items = dict(float_bytes=fbytes, quant_bytes=qbytes, size_ratio=qbytes / fbytes)
    if args.eval_samples:
        test = generate_dataset(args.eval_samples, size, seed=args.eval_seed)
        x = np.stack([s.image for s in test])
        pf = predict(net, x)
        pq = quantize.quantized_forward(model, x, structure=net)[:, 0]
        items["mean_abs_deviation"] = float(np.mean(np.abs(pf - pq)))
        labels = [s.label for s in test]
        items["float_score"] = segeval.evaluate_dataset(labels, list(pf > 0.5)).mean_score
        items["quant_score"] = segeval.evaluate_dataset(labels, list(pq > 0.5)).mean_score
    out.write(_kv(**items))
    return 0


def cmd_infer(args, out):
    model = _load_any(args.ckpt)
    spec = model.spec
    image = read_rgb(args.image)
    _, h, w = image.shape
    f = spec.downsampling
    x = image[None]
    if h % f or w % f:
        if not args.resize:
            raise ValueError(f"image is {h}x{w}, not divisible by {f}; pass --resize to rescale")
        x = ops.bilinear_resize(x, max(f, round(h / f) * f), max(f, round(w / f) * f))
    if isinstance(model, quantize.QuantizedModel):
        prob = quantize.quantized_forward(model, x)[:, 0]
    else:
        prob = predict(model, x)
    prob = prob[None]
    if prob.shape[-2:] != (h, w):
        prob = ops.bilinear_resize(prob, h, w)
    prob = prob[0, 0]
    mask = prob > args.threshold
    write_gray(args.out, np.where(mask, 255, 0))
    if args.heatmap:
        write_gray(args.heatmap, np.round(np.clip(prob, 0.0, 1.0) * 255.0))
    out.write(_kv(height=h, width=w, foreground_fraction=float(mask.mean()), mask=args.out))
    return 0


def cmd_gen_data(args, out):
    root = Path(args.out)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(args.n - 1)))
    if args.background:
        rng = np.random.default_rng(args.seed)
        for i in range(args.n):
            write_rgb(root / "images" / f"{i:0{width}d}.png", render_background(rng, args.size))
            write_gray(root / "labels" / f"{i:0{width}d}.png", np.zeros((args.size, args.size)))
    else:
        for i, s in enumerate(generate_dataset(args.n, args.size, seed=args.seed)):
            write_rgb(root / "images" / f"{i:0{width}d}.png", s.image)
            write_gray(root / "labels" / f"{i:0{width}d}.png", s.label * 255)
    out.write(_kv(images=args.n, size=args.size, out=str(root)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asbunet", description="Atrous-block segmentation network toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    scalings = sorted(POOL_PLACEMENT)

    b = sub.add_parser("build", help="build a network from the default spec and report its shape")
    b.add_argument("--scaling", choices=scalings, default="1/16")
    b.add_argument("--dilations", help="seven comma-separated dilation rates")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--input-size", type=int, default=224)
    b.add_argument("--out", help="write a freshly initialised checkpoint")
    b.add_argument("--spec-out", help="write the canonical network spec as JSON")
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("rf-report", help="receptive-field table and linearity check")
    r.add_argument("--scaling", choices=scalings, default="1/16")
    r.add_argument("--dilations", help="comma-separated dilation rates")
    r.add_argument("--geometric-stack", action="store_true",
                   help="analyse a plain stride-1 stack of stages with --dilations instead of the encoder")
    r.add_argument("--ratio-threshold", type=float, default=2.0)
    r.add_argument("--plot", help="growth curve figure (.png or .svg)")
    r.set_defaults(func=cmd_rf_report)

    t = sub.add_parser("train", help="train on a seeded synthetic dataset")
    t.add_argument("--config", help="key = value training config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--dataset-seed", type=int, default=0)
    t.add_argument("--samples", type=int, default=600)
    t.add_argument("--image-size", type=int, default=128)
    t.add_argument("--scaling", choices=scalings, default="1/16")
    t.add_argument("--log", help="per-step CSV log (step,lr,loss)")
    t.add_argument("--plot", help="loss curve figure (.png or .svg)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ignore-band score of predicted masks against labels")
    e.add_argument("--labels", required=True)
    e.add_argument("--preds", required=True)
    e.add_argument("--osf-beta", type=float, default=0.05)
    e.add_argument("--min-radius", type=int, default=1)
    e.add_argument("--plot", help="score histogram figure (.png or .svg)")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", help="post-training int8 quantization of a float checkpoint")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--calib-samples", type=int, default=32)
    q.add_argument("--calib-seed", type=int, default=1000)
    q.add_argument("--eval-samples", type=int, default=0)
    q.add_argument("--eval-seed", type=int, default=2000)
    q.add_argument("--image-size", type=int, default=128)
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="segment one PNG image")
    i.add_argument("--ckpt", required=True, help="float or quantized checkpoint")
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="binary mask PNG (0/255)")
    i.add_argument("--heatmap", help="grayscale probability PNG")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--resize", action="store_true",
                   help="rescale images whose size is not divisible by the network stride")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as PNG files")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--background", action="store_true", help="object-free images with empty labels")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args, out)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except (ValueError, OSError, TrainingError, KeyError) as e:
        # checkpoint, shape and config errors all derive from ValueError
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
