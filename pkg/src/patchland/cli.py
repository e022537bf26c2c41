"""Command-line entry point: ``patchland {synth,train,evaluate,classify,sweep}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from patchland.config import RunConfig, apply_override, build_config, load_config
from patchland.errors import ConfigError, DataError, PatchlandError
from patchland.evaluation import classify_scene, default_palette, read_palette, render_map
from patchland.experiment import SweepResult, TrainedModel, evaluate, fit, prepare, sweep_patch_sizes
from patchland.raster import (
    BorderPolicy,
    PatchSpec,
    exclude_bands,
    extract_patches,
    load_cube,
    load_labels,
    split_dataset,
    write_labels,
)
from patchland.synth import SceneSpec, synthesize, write_scene

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads(args, cfg_threads: int = 1) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PATCHLAND_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"PATCHLAND_THREADS must be an integer, got {env!r}") from None
    return cfg_threads


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag in ("classifier", "patch_size"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{flag}={json.dumps(val)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        doc: dict = {}
        for o in overrides:
            apply_override(doc, o)
        cfg = build_config(doc)
    # path flags are relative to the working directory, not the config file
    for flag in ("cube", "labels", "model", "palette", "out"):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, flag, val)
    cfg.threads = _threads(args, cfg.threads)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"no {what} given (config key or command-line flag)")
    return value


def _load_scene(cfg: RunConfig):
    cube = load_cube(_require(cfg.cube, "cube path"))
    labels = load_labels(_require(cfg.labels, "label map path"))
    return cube, labels


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    if not args.config:
        raise ConfigError("synth needs --config pointing at a scene spec JSON")
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    for o in args.set or []:
        apply_override(doc, o)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SceneSpec.from_json(doc)
    except TypeError as exc:
        raise ConfigError(f"invalid scene spec: {exc}") from None
    scene = synthesize(spec)
    out = _out_dir(args.out or ".")
    write_scene(scene, spec, out / "scene.cube", out / "scene.lbl", out / "scene.json")
    counts = Counter(int(v) for v in scene.labels.labels.ravel() if v)
    print(f"scene {spec.rows}x{spec.cols}x{spec.bands}, {len(scene.fields)} fields, "
          f"{sum(counts.values())} labeled pixels")
    for c in sorted(counts):
        n_fields = sum(1 for f in scene.fields if f.class_id == c)
        print(f"  class {c}: {n_fields} field(s), {counts[c]} pixels")
    print(f"wrote {out / 'scene.cube'}, {out / 'scene.lbl'}, {out / 'scene.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    cube, labels = _load_scene(cfg)
    if cfg.exclude_bands:
        cube = exclude_bands(cube, cfg.exclude_bands)
    spec = cfg.patch_spec()
    prep = prepare(cube, labels, spec, cfg.train_fraction, cfg.seed)
    tm = fit(cfg, cfg.classifier, prep)
    metrics = evaluate(tm, prep.test, len(prep.train))
    out = _out_dir(cfg.out)
    model_path = Path(cfg.model) if cfg.model else out / "model.json"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    tm.save(model_path)
    _write_json(out / "metrics.json", metrics)
    print(f"{cfg.classifier} p={spec.p}: overall accuracy {metrics['overall_accuracy']:.2f}% "
          f"({metrics['train_size']} train / {metrics['test_size']} test)")
    print(f"wrote {model_path}, {out / 'metrics.json'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    tm = TrainedModel.load(_require(cfg.model, "model path"))
    cube, labels = _load_scene(cfg)
    cube = tm.prepare_cube(cube)
    ds = extract_patches(cube, labels, PatchSpec(tm.patch_size, cfg.border_policy))
    seed = args.seed if args.seed is not None else tm.seed
    if args.split == "all":
        test, train_size = ds, 0
    else:
        train, test = split_dataset(ds, tm.train_fraction, seed)
        train_size = len(train)
    tm.seed = seed
    metrics = evaluate(tm, test, train_size)
    out = _out_dir(cfg.out)
    _write_json(out / "evaluation.json", metrics)
    print(f"{tm.kind} p={tm.patch_size}: overall accuracy {metrics['overall_accuracy']:.2f}% on {len(test)} samples")
    return 0


def cmd_classify(args) -> int:
    cfg = _run_config(args)
    tm = TrainedModel.load(_require(cfg.model, "model path"))
    cube = tm.prepare_cube(load_cube(_require(cfg.cube, "cube path")))
    label_map = classify_scene(cube, tm, PatchSpec(tm.patch_size, BorderPolicy.MIRROR), threads=cfg.threads)
    palette = read_palette(cfg.palette) if cfg.palette else default_palette(tm.class_ids)
    out = _out_dir(cfg.out)
    write_labels(out / "map.lbl", label_map)
    (out / "map.ppm").write_bytes(render_map(label_map, palette))
    print(f"classified {label_map.rows}x{label_map.cols} pixels; wrote {out / 'map.lbl'}, {out / 'map.ppm'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    if not cfg.p_list:
        raise ConfigError("sweep needs a non-empty p_list")
    classifiers = cfg.classifiers or (cfg.classifier,)
    cube, labels = _load_scene(cfg)
    if cfg.exclude_bands:
        cube = exclude_bands(cube, cfg.exclude_bands)
    out = _out_dir(cfg.out)
    metrics_dir = _out_dir(out / "metrics")
    done: list = []

    def flush(row, metrics):
        done.append(row)
        _write_json(metrics_dir / f"{row.classifier}_p{row.patch_size}.json", metrics)
        SweepResult(done).write_csv(out / "sweep.csv")
        print(f"{row.classifier} p={row.patch_size}: {row.accuracy_pct:.2f}%", flush=True)

    result = sweep_patch_sizes(cube, labels, cfg, classifiers, cfg.p_list, on_result=flush)
    result.write_csv(out / "sweep.csv")
    for name, spread in result.spread().items():
        print(f"{name}: accuracy spread across patch sizes {spread:.2f} points")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchland", description="Patch-based classification of multi-band raster scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help="worker threads (default: PATCHLAND_THREADS or 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set nn.epochs=1 (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic scene")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="extract, split, train and test one classifier")
    common(p)
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--model", help="where to write the model (default OUT/model.json)")
    p.add_argument("--classifier", choices=("svm", "nn", "cnn"))
    p.add_argument("--patch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model on a labeled scene")
    common(p)
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--model")
    p.add_argument("--split", choices=("test", "all"), default="test",
                   help="score the held-out split of the model's seed (default) or every patch")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("classify", help="classify every pixel of a scene and render a map")
    common(p)
    p.add_argument("--cube")
    p.add_argument("--model")
    p.add_argument("--palette", help="CSV of class_id,r,g,b")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sweep", help="accuracy across patch sizes and classifiers")
    common(p)
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        return exc.code if isinstance(exc.code, int) else 1
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except PatchlandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
