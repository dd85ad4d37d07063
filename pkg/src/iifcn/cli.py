"""Command-line entry point: ``iifcn {train,infer,eval,refine,synth}``.

Exit codes: 0 success, 1 validation or configuration error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, serialize_config
from .crf import CrfParams, refine
from .dataio import load_dataset, read_png, save_dataset, synth_dataset, worker_count, write_png
from .errors import IIFCNError
from .metrics import CSV_HEADER, evaluate, threshold_mask
from .model import pad_and_crop_infer
from .trainer import to_network_input, train

log = logging.getLogger("iifcn")


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(worker_count())


def _rgb(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.ascontiguousarray(img[..., :3])


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    out = Path(args.out or cfg.run.out or "run")
    if args.synthetic:
        size = (cfg.train.stages[0].height, cfg.train.stages[0].width)
        samples = synth_dataset(args.synthetic, size, cfg.seed)
    else:
        data = args.data or cfg.run.data
        if data is None:
            raise IIFCNError("train needs --data DIR or --synthetic N")
        _, samples = load_dataset(data)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg))
    result = train(samples, cfg.train, cfg.model, cfg.augment, cfg.crf, out_dir=out)
    last = result.log[-1] if result.log else None
    if last is not None:
        print(f"trained {len(result.log)} epochs; final loss {last.mean_train_loss:.5f}, "
              f"val jaccard {last.val_jaccard_baseline:.4f} (crf {last.val_jaccard_crf:.4f})")
    print(f"checkpoint: {out / 'final.iifcn'}")
    return 0


def _crf_params(args) -> CrfParams:
    iters = getattr(args, "crf_iters", None)
    return CrfParams(iterations=iters) if iters else CrfParams()


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = _rgb(args.image)
    prob = pad_and_crop_infer(model, to_network_input(image))
    if args.crf:
        mask = refine(image.transpose(2, 0, 1), prob, _crf_params(args))
    else:
        mask = threshold_mask(prob[1], args.threshold)
    write_png(args.out, mask * 255)
    if args.prob_out:
        write_png(args.prob_out, np.rint(prob[1] * 255))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, samples = load_dataset(args.data)
    print(CSV_HEADER)
    for s in samples:
        prob = pad_and_crop_infer(model, to_network_input(s.image))
        if args.crf:
            pred = refine(s.image.transpose(2, 0, 1), prob, CrfParams())
        else:
            pred = threshold_mask(prob[1], args.threshold)
        print(evaluate(pred, s.mask).to_csv(s.id))
    return 0


def cmd_refine(args) -> int:
    image = _rgb(args.image)
    p = read_png(args.prob)
    if p.ndim == 3:
        p = p[..., 0]
    if p.shape != image.shape[:2]:
        raise IIFCNError(f"probability map {p.shape} does not match image {image.shape[:2]}")
    obj = np.clip(p.astype(np.float64) / 255.0, 0.0, 1.0)
    prob = np.stack([1.0 - obj, obj])
    mask = refine(image.transpose(2, 0, 1), prob, CrfParams(iterations=args.crf_iters))
    write_png(args.out, mask * 255)
    return 0


def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, tuple(args.size), args.seed)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} pairs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iifcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", help="directory of <id>.png / <id>_segmentation.png pairs")
    t.add_argument("--config", help="key = value configuration file")
    t.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic samples instead")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory for checkpoints and epochs.csv")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--threshold", type=float, default=0.8)
    i.add_argument("--crf", action="store_true")
    i.add_argument("--out", required=True, help="binary mask PNG")
    i.add_argument("--prob-out", help="optional 8-bit object-probability PNG")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="per-image metrics for a labelled directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float, default=0.8)
    e.add_argument("--crf", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine", help="CRF-refine a probability map")
    r.add_argument("--image", required=True)
    r.add_argument("--prob", required=True, help="8-bit object-probability PNG")
    r.add_argument("--out", required=True)
    r.add_argument("--crf-iters", type=int, default=10)
    r.set_defaults(func=cmd_refine)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except (IIFCNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
