"""Command-line interface: run experiments, evaluate checkpoints, preview
compression, and plot results tables."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cam import BBox, compute_cam, mask_to_bbox, threshold_mask
from .compression import Image, compress, from_uint8, reconstruct, to_uint8
from .config import load_config
from .data import ingest_dataset, to_images
from .errors import CimxError, DatasetError
from .experiment import run_experiment
from .model import Branch, load_checkpoint
from .training import evaluate


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output:
        config.output_dir = args.output
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
    summaries = []
    for seed in seeds:
        out = Path(config.output_dir)
        if len(seeds) > 1:
            out = out / f"seed-{seed}"
        result = run_experiment(config, output_dir=out, seed=seed)
        summaries.append(result.summary())
        print(
            f"seed {seed}: average_accuracy={result.average_accuracy:.4f} "
            f"last_accuracy={result.last_accuracy:.4f} ({len(result.rows)} phases)"
        )
    if len(summaries) > 1:
        mean_avg = float(np.mean([s["average_accuracy"] for s in summaries]))
        mean_last = float(np.mean([s["last_accuracy"] for s in summaries]))
        print(f"mean over {len(summaries)} seeds: average_accuracy={mean_avg:.4f} last_accuracy={mean_last:.4f}")
    return 0


def _cmd_eval(args) -> int:
    state, info = load_checkpoint(args.checkpoint)
    dataset = ingest_dataset(args.data, state.net.spec.image_size)
    class_names = info["class_order"]
    test = []
    for cid in range(state.class_count):
        name = class_names[cid]
        if name not in dataset["test"]:
            raise DatasetError(f"class {name!r} from the checkpoint is missing in {args.data}")
        test.extend(to_images(dataset["test"][name], cid, prefix=name))
    acc = evaluate(state, test)
    print(f"accuracy={acc:.4f} over {len(test)} samples, {state.class_count} classes")
    return 0


def _draw_box(pixels_u8: np.ndarray, box: BBox) -> np.ndarray:
    out = pixels_u8.copy()
    color = np.array([255, 40, 40], dtype=np.uint8)[: out.shape[2]]
    out[box.h_min, box.w_min : box.w_max + 1] = color
    out[box.h_max, box.w_min : box.w_max + 1] = color
    out[box.h_min : box.h_max + 1, box.w_min] = color
    out[box.h_min : box.h_max + 1, box.w_max] = color
    return out


def _cmd_compress_preview(args) -> int:
    from PIL import Image as PilImage

    state, _ = load_checkpoint(args.checkpoint)
    size = state.net.spec.image_size
    with PilImage.open(args.image) as img:
        img = img.convert("RGB")
        if img.size != (size, size):
            img = img.resize((size, size), PilImage.BILINEAR)
        pixels_u8 = np.asarray(img, dtype=np.uint8)
    pixels = from_uint8(pixels_u8)

    if args.label is not None:
        label = args.label
    else:
        import torch

        with torch.no_grad():
            x = torch.from_numpy(pixels.transpose(2, 0, 1))[None]
            _, logits = state.net(x, Branch.RELU)
        label = int(logits.argmax())

    cam = compute_cam(pixels, label, state, Branch.CIM)
    mask = threshold_mask(cam, args.threshold)
    if cam.degenerate or mask.empty:
        box = BBox.full(size, size)
    else:
        box = mask_to_bbox(mask)
    exemplar = compress(Image(pixels=pixels, label=label), box, args.ratio)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    PilImage.fromarray(pixels_u8).save(out / "original.png")
    PilImage.fromarray(to_uint8(cam.values[:, :, None])[:, :, 0]).save(out / "soft_mask.png")
    PilImage.fromarray(_draw_box(pixels_u8, box)).save(out / "bbox_overlay.png")
    PilImage.fromarray(to_uint8(reconstruct(exemplar).pixels)).save(out / "compressed.png")
    print(
        f"label={label} bbox=({box.h_min},{box.w_min})-({box.h_max},{box.w_max}) "
        f"cost={exemplar.cost:.4f} -> {out}"
    )
    return 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = Path(args.results) / "results.csv"
    if not results.exists():
        raise DatasetError(f"no results.csv under {args.results}")
    rows = results.read_text().strip().splitlines()[1:]
    parsed = [row.split(",") for row in rows]
    phases = [int(r[0]) for r in parsed]
    acc = [float(r[2]) for r in parsed]
    cost = [float(r[4]) for r in parsed]

    out = Path(args.output) if args.output else Path(args.results)
    for values, name, ylabel in (
        (acc, "accuracy_vs_phase.png", "top-1 accuracy"),
        (cost, "cost_vs_phase.png", "mean exemplar cost"),
    ):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(phases, values, marker="o")
        ax.set_xlabel("phase")
        ax.set_ylabel(ylabel)
        ax.set_xticks(phases)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
    print(f"wrote plots to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a config-driven experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seeds", default="", help="comma-separated seeds, e.g. 0,1,2")
    run.add_argument("--output", default="", help="override output directory")
    run.set_defaults(func=_cmd_run)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.set_defaults(func=_cmd_eval)

    prev = sub.add_parser("compress-preview", help="visualize the compression of one image")
    prev.add_argument("--image", required=True)
    prev.add_argument("--checkpoint", required=True)
    prev.add_argument("--tau", "--threshold", dest="threshold", type=float, default=0.6)
    prev.add_argument("--eta", "--ratio", dest="ratio", type=float, default=4.0)
    prev.add_argument("--label", type=int, default=None)
    prev.add_argument("--output", default="preview")
    prev.set_defaults(func=_cmd_compress_preview)

    plot = sub.add_parser("plot", help="plot accuracy and cost per phase")
    plot.add_argument("--results", required=True)
    plot.add_argument("--output", default="")
    plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CimxError as exc:
        print(f"error: [{type(exc).__name__}] {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: [Internal] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
