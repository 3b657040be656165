"""Command-line surface: training, encoding, decoding, evaluation, ablation.

Exit codes: 0 ok, 1 user error (bad arguments, missing files, mismatched
models), 2 internal error. Every command logs its fully resolved
configuration to stderr so runs are reproducible from the log plus the seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import data as dat
from . import hsvlc, metrics, pipeline
from .autoencoder import (AutoencoderModel, AutoencoderTrainConfig, encode_image,
                          train_autoencoder)
from .diffusion import DiffusionTrainConfig, train_epsilon
from .guided_decoder import DecodeError, GuidanceConfig, decode
from .hsvlc import CodecTrainConfig, train_codec
from .weight_map import RegionSpec, WeightMap, build_from_mask, build_from_regions, grid_shape

log = logging.getLogger("rsic")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{message}\n{self.format_usage()}")


def _parse_region(text: str) -> RegionSpec:
    try:
        rect_part, weight_part = text.rsplit(":", 1)
        x, y, w, h = (int(v) for v in rect_part.split(","))
        return RegionSpec((x, y, w, h), float(weight_part))
    except (ValueError, TypeError) as e:
        raise UserError(f"bad region {text!r}, expected x,y,w,h:weight ({e})") from e


def _log_config(args: argparse.Namespace) -> None:
    cfg = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()
           if k != "func"}
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UserError(f"{what} not found: {path}")
    return path


def _load_corpus(data_dir) -> tuple[np.ndarray, list[str]]:
    paths = dat.list_examples(_require_file(data_dir, "data directory"))
    if not paths:
        raise UserError(f"no images found in {data_dir}")
    images, captions = [], []
    for p in paths:
        img, caption, _ = dat.load_example(p)
        images.append(img)
        captions.append(caption)
    return np.stack(images), captions


def _encode_latents(ae: AutoencoderModel, images: np.ndarray) -> np.ndarray:
    return np.stack([encode_image(ae, img) for img in images])


def cmd_make_dataset(args) -> int:
    dat.generate_dataset(args.out, args.train, args.test, seed=args.seed, size=args.size)
    log.info("wrote %d train and %d test examples to %s", args.train, args.test, args.out)
    return 0


def cmd_train_autoencoder(args) -> int:
    images, _ = _load_corpus(args.data)
    cfg = AutoencoderTrainConfig(seed=args.seed, epochs=args.epochs,
                                 batch_size=args.batch_size, lr=args.lr,
                                 width=args.width, crop=args.crop or None,
                                 log_every=args.log_every)
    model = train_autoencoder(images, cfg)
    model.save(args.out)
    log.info("autoencoder saved to %s (val mse %.5f)", args.out, model.config["val_mse"])
    return 0


def cmd_train_codec(args) -> int:
    images, _ = _load_corpus(args.data)
    ae = AutoencoderModel.load(_require_file(args.autoencoder, "autoencoder checkpoint"))
    latents = _encode_latents(ae, images)
    cfg = CodecTrainConfig(seed=args.seed, steps=args.steps, batch_size=args.batch_size,
                           lr=args.lr, hidden=args.hidden, bottleneck=args.bottleneck,
                           num_scales=args.scales, log_every=args.log_every)
    model = train_codec(latents, cfg, tuple(images.shape[1:3]))
    model.save(args.out)
    log.info("codec saved to %s (final rd %.4f)", args.out, model.config["final_loss"])
    return 0


def cmd_train_diffusion(args) -> int:
    images, captions = _load_corpus(args.data)
    ae = AutoencoderModel.load(_require_file(args.autoencoder, "autoencoder checkpoint"))
    latents = _encode_latents(ae, images)
    cfg = DiffusionTrainConfig(seed=args.seed, steps=args.steps,
                               batch_size=args.batch_size, lr=args.lr,
                               width=args.width, t_train=args.t_train,
                               cond_dropout=args.cond_dropout, log_every=args.log_every)
    model = train_epsilon(latents, captions, cfg)
    model.save(args.out)
    log.info("diffusion model saved to %s (final mse %.5f)", args.out,
             model.config["final_loss"])
    return 0


def _build_map(args, dims) -> WeightMap:
    regions = [_parse_region(r) for r in (args.region or [])]
    if args.mask and regions:
        raise UserError("give either --region or --mask, not both")
    try:
        if args.mask:
            mask = dat.load_gray(_require_file(args.mask, "mask"))
            if mask.shape != dims:
                raise UserError(f"mask {mask.shape} does not match image {dims}")
            return build_from_mask(dims, mask, args.levels)
        return build_from_regions(dims, regions, args.levels)
    except ValueError as e:
        raise UserError(str(e)) from e


def cmd_encode(args) -> int:
    image = dat.load_image(_require_file(args.image, "image"))
    dims = image.shape[:2]
    M = _build_map(args, dims)
    ae, codec = pipeline.load_encoder_models(
        _require_file(args.models, "models directory"))
    container = pipeline.encode_container(image, args.caption, M, ae, codec,
                                          include_latents=not args.no_latent)
    payload = bs.serialize(container)
    Path(args.out).write_bytes(payload)
    total, breakdown = bs.total_bpp(container)
    if args.json:
        print(json.dumps({"out": str(args.out), "bytes": len(payload),
                          "bpp": total, "breakdown": breakdown}, sort_keys=True))
    else:
        print(f"wrote {args.out}: {len(payload)} bytes, {total:.6f} bpp")
        for name, v in breakdown.items():
            print(f"  {name:12s} {v:.6f} bpp")
    return 0


def cmd_decode(args) -> int:
    payload = _require_file(args.input, "container").read_bytes()
    try:
        container = bs.unpack_container(payload)
    except bs.ContainerError as e:
        raise UserError(str(e)) from e
    models = pipeline.load_decoder_models(_require_file(args.models, "models directory"))
    config = GuidanceConfig(steps=args.steps, recurrence=args.recurrence,
                            gamma_base=args.gamma, seed=args.seed)
    log.info("decoding with steps=%d recurrence=%d gamma=%g seed=%d",
             config.steps, config.recurrence, config.gamma_base, config.seed)
    try:
        image = decode(container, models, config)
    except DecodeError as e:
        raise UserError(str(e)) from e
    dat.save_image(args.out, image)
    log.info("wrote %s", args.out)
    return 0


_METRIC_NAMES = ("psnr", "fpsnr", "ssim", "fssim")


def cmd_eval(args) -> int:
    ref = dat.load_image(_require_file(args.ref, "reference image"))
    test = dat.load_image(_require_file(args.test, "test image"))
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for name in names:
        if name not in _METRIC_NAMES:
            raise UserError(f"unknown metric {name!r}, choose from {_METRIC_NAMES}")
    mask = None
    if args.mask:
        mask = dat.load_gray(_require_file(args.mask, "mask")) > 0.5
    results = {}
    try:
        for name in names:
            if name == "psnr":
                results[name] = metrics.psnr(ref, test)
            elif name == "ssim":
                results[name] = metrics.ssim(ref, test)
            else:
                if mask is None:
                    raise UserError(f"metric {name} needs --mask")
                if name == "fpsnr":
                    results[name] = metrics.masked_psnr(ref, test, mask)
                else:
                    results[name] = metrics.masked_ssim(ref, test, mask)
    except ValueError as e:
        raise UserError(str(e)) from e
    if args.json:
        print(json.dumps(results, sort_keys=True))
    else:
        for name in names:
            print(f"{name}: {results[name]:.4f}")
    return 0


def _referring_map(dims, mask, levels=8) -> WeightMap:
    x, y, w, h = dat.mask_bbox(mask)
    return build_from_regions(dims, [RegionSpec((x, y, w, h), 1.0)], levels)


def run_ablation(data_dir, models_dir, n_images=8, steps=50, recurrence=8,
                 gamma=1e3, seed=0) -> list[dict]:
    """Decode the test corpus under each ablation row and score it."""
    paths = [p for p in dat.list_examples(data_dir)
             if dat.load_example(p)[2] is not None][:n_images]
    if not paths:
        raise UserError(f"no images with masks in {data_dir}")
    models = pipeline.load_decoder_models(models_dir)
    single = None
    single_path = Path(models_dir) / pipeline.CODEC_SINGLE_FILE
    if single_path.exists():
        single = pipeline.load_decoder_models(models_dir, pipeline.CODEC_SINGLE_FILE)

    rows = [
        {"name": "full", "caption": True, "referring": True, "latents": True,
         "models": models, "steps": steps},
        {"name": "wo_gde", "caption": False, "referring": True, "latents": True,
         "models": models, "steps": steps},
        {"name": "wo_rge", "caption": True, "referring": False, "latents": False,
         "models": models, "steps": steps},
        {"name": "wo_hsvlc", "caption": True, "referring": True, "latents": True,
         "models": single, "steps": steps},
        {"name": "ggd_t10", "caption": True, "referring": True, "latents": True,
         "models": models, "steps": 10},
        {"name": "ggd_t30", "caption": True, "referring": True, "latents": True,
         "models": models, "steps": 30},
    ]

    report = []
    for row in rows:
        if row["models"] is None:
            report.append({"name": row["name"], "skipped": "codec_single.ckpt missing"})
            continue
        mdl = row["models"]
        scores = {"bpp": [], "psnr": [], "fpsnr": [], "fssim": []}
        for p in paths:
            img, caption, mask = dat.load_example(p)
            dims = img.shape[:2]
            if row["referring"]:
                M = _referring_map(dims, mask)
            else:
                M = WeightMap(np.zeros(grid_shape(dims), np.int64), 1, dims)
            container = pipeline.encode_container(
                img, caption if row["caption"] else "", M, mdl.autoencoder, mdl.codec,
                include_latents=row["latents"])
            config = GuidanceConfig(steps=row["steps"], recurrence=recurrence,
                                    gamma_base=gamma, seed=seed)
            out = decode(container, mdl, config)
            scores["bpp"].append(bs.total_bpp(container)[0])
            scores["psnr"].append(metrics.psnr(img, out))
            scores["fpsnr"].append(metrics.masked_psnr(img, out, mask))
            scores["fssim"].append(metrics.masked_ssim(img, out, mask))
        entry = {"name": row["name"], "images": len(paths)}
        entry.update({k: float(np.mean(v)) for k, v in scores.items()})
        report.append(entry)
        log.info("ablation row %-9s bpp %.5f psnr %.2f fpsnr %.2f fssim %.4f",
                 entry["name"], entry["bpp"], entry["psnr"], entry["fpsnr"],
                 entry["fssim"])
    return report


def cmd_ablate(args) -> int:
    report = run_ablation(_require_file(args.data, "data directory"),
                          _require_file(args.models, "models directory"),
                          n_images=args.images, steps=args.steps,
                          recurrence=args.recurrence, gamma=args.gamma, seed=args.seed)
    if args.json:
        print(json.dumps({"rows": report}, sort_keys=True))
    else:
        print(f"{'row':10s} {'bpp':>9s} {'PSNR':>7s} {'f-PSNR':>7s} {'f-SSIM':>7s}")
        for row in report:
            if "skipped" in row:
                print(f"{row['name']:10s} skipped: {row['skipped']}")
            else:
                print(f"{row['name']:10s} {row['bpp']:9.5f} {row['psnr']:7.2f} "
                      f"{row['fpsnr']:7.2f} {row['fssim']:7.4f}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rsic", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate the toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=1024)
    p.add_argument("--test", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-autoencoder", help="train the image autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1.5e-3)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--crop", type=int, default=64, help="0 trains on full frames")
    p.add_argument("--log-every", type=int, default=5)
    p.set_defaults(func=cmd_train_autoencoder)

    p = sub.add_parser("train-codec", help="train the latent codec")
    p.add_argument("--data", required=True)
    p.add_argument("--autoencoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--bottleneck", type=int, default=32)
    p.add_argument("--scales", type=int, default=4, choices=(1, 4))
    p.add_argument("--log-every", type=int, default=200)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-diffusion", help="train the noise predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--autoencoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--t-train", type=int, default=1000)
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.add_argument("--log-every", type=int, default=200)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("encode", help="compress an image to a .rsic container")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--caption", default="")
    p.add_argument("--region", action="append",
                   help="x,y,w,h:weight (repeatable)")
    p.add_argument("--mask", help="grayscale importance mask image")
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--no-latent", action="store_true",
                   help="skip latent streams (description-only container)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a .rsic container to an image")
    p.add_argument("--input", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--recurrence", type=int, default=8)
    p.add_argument("--gamma", type=float, default=1e3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="fidelity metrics between two images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mask")
    p.add_argument("--metrics", default="psnr,fpsnr,ssim,fssim")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="toy-scale ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--recurrence", type=int, default=8)
    p.add_argument("--gamma", type=float, default=1e3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _log_config(args)
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse -h
        return int(e.code or 0)
    except Exception as e:  # internal failure
        log.exception("internal error: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
