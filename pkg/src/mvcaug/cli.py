"""Command line interface: ``mvcaug <subcommand> [options]``.

Every subcommand accepts ``--config FILE``, ``--set key.path=value`` (repeatable,
flags win over the file) and ``--seed``.  Outputs default to a fresh run
directory ``<run_root>/<UTC timestamp>-<config hash>/`` where the resolved
config is written first; ``$MVCAUG_RUN_ROOT`` overrides ``paths.run_root``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import workflow as wf
from .captions import embed_caption, null_embedding, read_captions_file
from .classifier import compare_strategies, evaluate, train_classifier
from .codec import load_codec, reconstruction_error, save_codec
from .config import RunConfig, load_config
from .data import DatasetManifest, save_image
from .denoiser import load_denoiser, save_denoiser
from .errors import EXIT_CODES, MVCError
from .mvc import MixerConfig, mix_embeddings, save_conditionings
from .nn import save_checkpoint
from .pipeline import (DiffusionBundle, GenerationRequest, build_augmented_dataset, class_embedding_pool,
                       generate_images, smoothed)
from .render import render_grid
from .shapes import SHAPES, generate_shapes

log = logging.getLogger("mvcaug")


def _run_dir(cfg: RunConfig, explicit) -> Path:
    if explicit:
        d = Path(explicit)
    else:
        root = Path(os.environ.get("MVCAUG_RUN_ROOT", cfg.paths.run_root))
        d = root / f"{time.strftime('%Y%m%dT%H%M%S', time.gmtime())}-{cfg.digest()}"
    d.mkdir(parents=True, exist_ok=True)
    cfg.save(d / "config.yaml")
    return d


def _out(args, run_dir: Path, default: str) -> Path:
    return Path(args.out) if args.out else run_dir / default


def _bundle(cfg, args) -> DiffusionBundle:
    return DiffusionBundle(load_codec(args.codec), load_denoiser(args.model), wf.schedule_from(cfg),
                           wf.embedder_from(cfg))


def cmd_gen_shapes(cfg, args, run_dir):
    classes = args.classes.split(",") if args.classes else list(SHAPES)
    out = _out(args, run_dir, "shapes")
    m = generate_shapes(out, classes, args.count, args.size or cfg.data.image_size, cfg.seed, args.prefix)
    print(f"wrote {len(m)} images to {out} ({out / 'manifest.json'})")


def cmd_train_codec(cfg, args, run_dir):
    manifest = DatasetManifest.load(args.manifest)
    codec = wf.train_codec_from(cfg, manifest)
    out = _out(args, run_dir, "codec.ckpt")
    save_codec(out, codec)
    mse = reconstruction_error(codec, manifest.real().load_images(channels=cfg.data.channels))
    print(f"codec ({cfg.codec.mode}) reconstruction mse {mse:.5f} -> {out}")


def cmd_train_diffusion(cfg, args, run_dir):
    manifest = DatasetManifest.load(args.manifest)
    codec = load_codec(args.codec)
    model, curve = wf.train_diffusion_from(cfg, manifest, codec)
    out = _out(args, run_dir, "denoiser.ckpt")
    save_denoiser(out, model)
    np.savetxt(out.with_suffix(".loss.txt"), np.asarray(curve))
    if curve:
        s = smoothed(curve)
        print(f"diffusion loss {s[0]:.4f} -> {s[-1]:.4f} over {len(curve)} steps -> {out}")
    else:
        print(f"no training steps; initial model -> {out}")


def cmd_mix(cfg, args, run_dir):
    emb = wf.embedder_from(cfg)
    if args.captions:
        pools = read_captions_file(args.captions)
        if args.label not in pools:
            raise MVCError(f"label {args.label!r} not in {args.captions}")
        pool = [embed_caption(emb, c) for c in pools[args.label]]
    else:
        pool = class_embedding_pool(DatasetManifest.load(args.manifest), args.label, emb)
    conds = mix_embeddings(pool, wf.mixer_from(cfg, args.n), null_embedding(emb), args.label)
    out = _out(args, run_dir, f"mixed_{args.label}.emb")
    save_conditionings(out, conds)
    print(f"wrote {len(conds)} mixed conditionings for {args.label!r} -> {out}")


def cmd_generate(cfg, args, run_dir):
    manifest = DatasetManifest.load(args.manifest)
    bundle = _bundle(cfg, args)
    req = GenerationRequest(args.label, args.count, wf.guidance_from(cfg), wf.mixer_from(cfg), cfg.seed,
                            cfg.guidance.ancestral)
    out = _out(args, run_dir, "generated")
    metas = []
    for k, (img, meta) in enumerate(generate_images(req, manifest, bundle, cfg.data.channels,
                                                    cfg.pipeline.gen_batch_size)):
        name = f"{args.label}_{k:04d}.png"
        save_image(out / name, img)
        metas.append({"file": name, **meta})
    (out / "provenance.json").write_text(json.dumps(metas, indent=1))
    print(f"wrote {len(metas)} images -> {out}")


def cmd_augment(cfg, args, run_dir):
    manifest = DatasetManifest.load(args.manifest)
    out = _out(args, run_dir, "augmented")
    merged = build_augmented_dataset(manifest, cfg.pipeline.ratio, _bundle(cfg, args), out, wf.guidance_from(cfg),
                                     wf.mixer_from(cfg), cfg.seed, cfg.data.channels, cfg.guidance.ancestral,
                                     cfg.pipeline.gen_batch_size)
    merged.validate((cfg.data.channels, cfg.data.image_size, cfg.data.image_size), cfg.data.channels)
    print(f"augmented manifest with {len(merged)} records -> {out / 'manifest.json'}")


def cmd_train_classifier(cfg, args, run_dir):
    manifest = DatasetManifest.load(args.manifest)
    strat = wf.strategy_from(cfg, args.strategy)
    ccfg = wf.classifier_config_from(cfg, len(manifest.classes))
    train = manifest.real() if strat.kind == "baseline" else manifest
    model = train_classifier(train, strat, ccfg, cfg.seed)
    out = _out(args, run_dir, f"classifier_{args.strategy}.ckpt")
    save_checkpoint(out, model, "classifier", {"num_classes": ccfg.num_classes, "channels": ccfg.channels,
                                               "image_size": ccfg.image_size, "widths": list(ccfg.widths)},
                    {"strategy": strat.to_json(), "classes": manifest.classes})
    msg = f"classifier ({args.strategy}) -> {out}"
    if args.test:
        rep = evaluate(model, DatasetManifest.load(args.test), manifest, cfg.data.channels, args.strategy, cfg.seed)
        msg += f"; test accuracy {100 * rep.accuracy:.1f}% ({rep.correct}/{rep.total})"
    print(msg)


def cmd_compare(cfg, args, run_dir):
    train, test = DatasetManifest.load(args.train), DatasetManifest.load(args.test)
    report = compare_strategies(train, test, wf.strategies_from(cfg), cfg.classifier.seeds,
                                wf.classifier_config_from(cfg, len(train.classes)))
    stem = _out(args, run_dir, "report")
    report.save(stem)
    print(report.to_text())
    print(f"report -> {stem}.json, {stem}.txt")


def cmd_render_grid(cfg, args, run_dir):
    manifest = DatasetManifest.load(args.manifest)
    out = _out(args, run_dir, "grid.png")
    render_grid(manifest, out, args.real, args.synthetic, cfg.data.channels)
    print(f"grid -> {out}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--run-dir", help="explicit run directory")
    common.add_argument("--out", help="output path (default: inside the run directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mvcaug", description="Diffusion-based dataset augmentation by mixing caption embeddings.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-shapes", parents=[common], help="render the synthetic shapes dataset")
    s.add_argument("--classes", help="comma separated subset of circle,square,cross")
    s.add_argument("--count", type=int, default=20, help="images per class")
    s.add_argument("--size", type=int, help="image side (default data.image_size)")
    s.add_argument("--prefix", default="img")
    s.set_defaults(func=cmd_gen_shapes)

    s = sub.add_parser("train-codec", parents=[common], help="train the latent autoencoder")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("train-diffusion", parents=[common], help="train the conditional denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--codec", required=True)
    s.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("mix", parents=[common], help="write mixed conditionings for one class")
    s.add_argument("--label", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--captions", help="label<TAB>caption file")
    src.add_argument("--manifest")
    s.add_argument("--n", type=int, help="number of outputs (default mixer.N_y)")
    s.set_defaults(func=cmd_mix)

    for name, func, hlp in (("generate", cmd_generate, "generate images for one class"),
                            ("augment", cmd_augment, "generate synthetic data for every class and merge")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--manifest", required=True)
        s.add_argument("--codec", required=True)
        s.add_argument("--model", required=True)
        if name == "generate":
            s.add_argument("--label", required=True)
            s.add_argument("--count", type=int, default=8)
        s.set_defaults(func=func)

    s = sub.add_parser("train-classifier", parents=[common], help="train one classifier under a strategy")
    s.add_argument("--manifest", required=True)
    s.add_argument("--strategy", choices=["baseline", "combined", "rsp", "two_phase"], default="baseline")
    s.add_argument("--test", help="optional test manifest to evaluate on")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("compare", parents=[common], help="compare training strategies over seeds")
    s.add_argument("--train", required=True, help="augmented training manifest")
    s.add_argument("--test", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("render-grid", parents=[common], help="real-vs-synthetic image grid")
    s.add_argument("--manifest", required=True)
    s.add_argument("--real", type=int, default=1)
    s.add_argument("--synthetic", type=int, default=3)
    s.set_defaults(func=cmd_render_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        run_dir = _run_dir(cfg, args.run_dir)
        print(f"mvcaug {args.command} seed={cfg.seed} config={cfg.digest()} run_dir={run_dir}")
        args.func(cfg, args, run_dir)
    except MVCError as exc:
        where = getattr(exc, "__traceback__", None)
        while where is not None and where.tb_next is not None:
            where = where.tb_next
        module = Path(where.tb_frame.f_code.co_filename).stem if where is not None else "cli"
        print(f"error [{exc.category}] in {module} ({args.command}): {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
