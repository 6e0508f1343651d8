"""Command-line surface: train, eval, segment, synth, ablate, export-prompt."""

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import corpus, evaluate, trainer


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit("--set expects key=value, got %r" % pair)
        key, value = pair.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _load_config(path, overrides):
    cfg_dict = {}
    if path:
        with open(path) as fh:
            cfg_dict = json.load(fh)
    profile = cfg_dict.pop("profile", overrides.pop("profile", "desk"))
    cfg_dict.update(overrides)
    return trainer.config_for_profile(profile, **{
        k: v for k, v in cfg_dict.items()
    })


def _progress(step, values):
    parts = " ".join("%s=%.4f" % (k, v) for k, v in sorted(values.items()))
    print("step %d %s" % (step, parts), flush=True)


def cmd_train(args):
    overrides = _parse_overrides(args.set)
    config = _load_config(args.config, overrides)
    manifest = corpus.load_manifest(args.manifest)
    dataset = trainer.PairDataset.from_manifest(
        manifest, root=os.path.dirname(os.path.abspath(args.manifest)),
        max_text_len=config.max_text_len,
        keep_duplicate_nouns=config.keep_duplicate_nouns)
    metrics = trainer.MetricsWriter(args.metrics)
    try:
        state = trainer.train(dataset, config, metrics=metrics,
                              checkpoint_dir=args.checkpoint_dir,
                              progress=_progress if args.verbose else None)
    finally:
        metrics.close()
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    state.save(args.out)
    print("saved checkpoint to %s" % args.out)


def _load_classes(spec):
    if os.path.exists(spec):
        with open(spec) as fh:
            names = [line.strip() for line in fh if line.strip()]
    else:
        names = [part.strip() for part in spec.split(",") if part.strip()]
    return names


def cmd_eval(args):
    state = trainer.TrainState.load(args.checkpoint)
    names = _load_classes(args.classes)
    vocab = evaluate.ClassVocabulary(
        names=names, has_background=not args.no_background,
        background_threshold=args.background_threshold)
    manifest = corpus.load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    preds = []
    gts = []
    for image_uri, _caption in manifest.entries:
        image = corpus.load_image(os.path.join(root, image_uri))
        label_map, _scores = evaluate.segment_image(state.model, image, vocab)
        preds.append(label_map)
        gt_path = os.path.join(root, args.gt_dir,
                               os.path.splitext(os.path.basename(image_uri))[0] + ".png")
        gts.append(np.asarray(Image.open(gt_path), dtype=np.int64))
    report = evaluate.miou(preds, gts, vocab)
    print(json.dumps(report.to_dict(), indent=2))


def cmd_segment(args):
    state = trainer.TrainState.load(args.checkpoint)
    names = _load_classes(args.classes)
    vocab = evaluate.ClassVocabulary(
        names=names, has_background=not args.no_background,
        background_threshold=args.background_threshold)
    image = corpus.load_image(args.image)
    label_map, _scores = evaluate.segment_image(state.model, image, vocab)
    out = Image.fromarray(label_map.astype(np.uint8), mode="P")
    palette = [0, 0, 0]
    rng = np.random.default_rng(0)
    for _ in range(255):
        palette.extend(int(v) for v in rng.integers(32, 256, size=3))
    out.putpalette(palette[:768])
    out.save(args.out)
    print("wrote %s" % args.out)


def cmd_synth(args):
    spec = corpus.SyntheticSpec(n_samples=args.n, seed=args.seed,
                                image_size=args.image_size)
    samples = corpus.generate_synthetic_corpus(spec)
    corpus.export_synthetic_corpus(samples, args.out)
    print("wrote %d samples to %s" % (len(samples), args.out))


def cmd_ablate(args):
    overrides = _parse_overrides(args.set)
    overrides.setdefault("steps", 400)
    config = _load_config(args.config, overrides)
    spec = corpus.SyntheticSpec(n_samples=args.n, seed=args.seed,
                                image_size=config.image_size)
    samples = corpus.generate_synthetic_corpus(spec)
    n_eval = max(2, args.n // 5)
    train_samples, eval_samples = samples[n_eval:], samples[:n_eval]
    rows = evaluate.run_ablation_suite(
        train_samples, eval_samples, config, sweep=args.sweep_hcl,
        progress=_progress if args.verbose else None)
    print(evaluate.format_ablation_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


def cmd_export_prompt(args):
    state = trainer.TrainState.load(args.checkpoint)
    rendered = state.model.region_prompt.rendered().numpy()
    arr = np.round(rendered * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(args.out)
    print("wrote %s" % args.out)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="code", description="image-text co-decomposition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on an image-caption manifest")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--metrics", default=None, help="ndjson metrics stream path")
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--set", nargs="*", metavar="K=V", help="config overrides")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU evaluation against label-map PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True, help="class file or comma list")
    p.add_argument("--gt-dir", default="labels")
    p.add_argument("--background-threshold", type=float, default=0.5)
    p.add_argument("--no-background", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="zero-shot segmentation of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--out", default="mask.png")
    p.add_argument("--background-threshold", type=float, default=0.5)
    p.add_argument("--no-background", action="store_true")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("synth", help="generate the synthetic shapes corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="component toggle / lambda_hcl sweep table")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--profile", default="desk")
    p.add_argument("--n", type=int, default=120, help="synthetic corpus size")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--sweep-hcl", action="store_true")
    p.add_argument("--out", default=None, help="JSON output path")
    p.add_argument("--set", nargs="*", metavar="K=V")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-prompt", help="render the region prompt as PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="prompt.png")
    p.set_defaults(func=cmd_export_prompt)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (FileNotFoundError, corpus.ManifestError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
