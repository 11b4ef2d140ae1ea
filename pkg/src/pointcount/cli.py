"""Command-line entry point.

Subcommands cover the full workflow: dataset generation (lego gen / lego
scenes), classifier training (train), signature dictionary building (dict
build), count-head training (count train), pipeline runs (run c2p / run
p2c), scoring (eval) and overlay rendering (render).

Every run prints its fully resolved configuration and embeds it in the
artifacts it writes. All randomness derives from --seed, so rerunning a
command reproduces its outputs byte for byte. Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .counthead import load_svm, saturate_count, save_svm, svm_train, extract_count_features
from .dataio import load_annotations, read_container, unpack_json
from .errors import DataError, NumericError
from .evaluation import (
    count_accuracy,
    count_report_rows,
    format_count_table,
    format_pointing_table,
    pointing_accuracy,
    pointing_report_rows,
    render_overlay,
    report_csv,
)
from .lego import gen_classification_set, gen_scene_set, make_ruleset, parse_instances
from .net import TrainConfig, build_network, load_network, metrics_csv, save_network, train
from .pipelines import load_results, run_c2p, run_p2c, save_results
from .signatures import build_dictionary, load_dictionary, save_dictionary

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def data_path(p) -> Path:
    """Relative dataset paths resolve against PNC_DATA_DIR when it is set."""
    p = Path(p)
    root = os.environ.get("PNC_DATA_DIR")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_split(data_dir, split: str):
    """(images, labels, annotations) for one emitted classification split."""
    data_dir = data_path(data_dir)
    img_path = data_dir / f"{split}_images.tnsr"
    ann_path = data_dir / f"{split}_annotations.jsonl"
    if not img_path.exists():
        raise DataError(f"missing {img_path}")
    tensors = read_container(img_path)
    annotations = load_annotations(ann_path)
    images = tensors["images"]
    if len(annotations) != len(images):
        raise DataError(f"{data_dir}: {len(images)} images but {len(annotations)} annotations")
    labels = np.array([a.class_id for a in annotations], dtype=np.int64)
    return images, labels, annotations


def load_scenes(scenes_dir):
    scenes_dir = data_path(scenes_dir)
    img_path = scenes_dir / "scenes_images.tnsr"
    ann_path = scenes_dir / "scenes_annotations.jsonl"
    if not img_path.exists():
        raise DataError(f"missing {img_path}")
    images = read_container(img_path)["images"]
    annotations = load_annotations(ann_path)
    if len(annotations) != len(images):
        raise DataError(f"{scenes_dir}: {len(images)} images but {len(annotations)} annotations")
    return images, annotations


def _resolved_config(args: argparse.Namespace, command: str) -> dict:
    skip = {"func", "config"}
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}
    return {"tool": "pnc", "version": __version__, "command": command, "args": resolved}


def _announce(cfg: dict) -> None:
    args = " ".join(f"{k}={v}" for k, v in cfg["args"].items())
    print(f"[pnc {cfg['version']}] {cfg['command']}: {args}")


# -- subcommand implementations ----------------------------------------------


def cmd_lego_gen(args):
    cfg = _resolved_config(args, "lego gen")
    _announce(cfg)
    ruleset = make_ruleset(args.classes, args.digits, args.seed)
    gen_classification_set(
        ruleset, args.train, args.test, args.out,
        canvas=args.canvas, noise=args.noise, seed=args.seed, scale=args.scale,
        pool_per_digit=args.pool, run_config=cfg,
    )
    print(f"wrote {args.classes * args.train} train / {args.classes * args.test} test samples to {args.out}")
    return EXIT_OK


def cmd_lego_scenes(args):
    cfg = _resolved_config(args, "lego scenes")
    _announce(cfg)
    ruleset = make_ruleset(args.classes, args.digits, args.ruleset_seed if args.ruleset_seed is not None else args.seed)
    instances = parse_instances(args.instances)
    gen_scene_set(
        ruleset, args.n, args.preset, args.out,
        instances=instances, canvas=args.canvas, noise=args.noise, seed=args.seed,
        run_config=cfg,
    )
    print(f"wrote {args.n} {args.preset} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolved_config(args, "train")
    _announce(cfg)
    images, labels, _ = load_split(args.data, "train")
    val_images = val_labels = None
    if args.val:
        val_images, val_labels, _ = load_split(args.data, "test")
    class_count = int(labels.max()) + 1
    net = build_network(class_count, seed=args.seed, input_size=images.shape[1])
    tc = TrainConfig(
        learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch,
        epochs=args.epochs, seed=args.seed, weight_decay=args.weight_decay,
    )
    metrics = train(net, images, labels, tc, val_images, val_labels, log=lambda msg: print(msg, flush=True))
    save_network(args.out, net, run_config=cfg)
    Path(str(args.out) + ".metrics.csv").write_text(metrics_csv(metrics))
    if metrics:
        last = metrics[-1]
        summary = ", ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "epoch")
        print(f"saved {args.out} ({summary})")
    return EXIT_OK


def cmd_dict_build(args):
    cfg = _resolved_config(args, "dict build")
    _announce(cfg)
    images, labels, _ = load_split(args.data, "train")
    if args.per_class:
        keep = []
        seen = {}
        for i, lab in enumerate(labels):
            if seen.get(int(lab), 0) < args.per_class:
                keep.append(i)
                seen[int(lab)] = seen.get(int(lab), 0) + 1
        images, labels = images[keep], labels[keep]
    net = load_network(data_path(args.model))
    dictionary = build_dictionary(images, labels, net)
    save_dictionary(args.out, dictionary, run_config=cfg)
    print(f"wrote dictionary for {len(dictionary.class_ids)} classes to {args.out}")
    return EXIT_OK


def cmd_count_train(args):
    cfg = _resolved_config(args, "count train")
    _announce(cfg)
    images, annotations = load_scenes(args.scenes)
    net = load_network(data_path(args.model))
    feats = []
    labels = []
    for i in range(len(images)):
        _, trace = net.forward_with_trace(images[i].astype(np.float32) / np.float32(255.0))
        feats.append(extract_count_features(trace))
        labels.append(saturate_count(annotations[i].count, args.c_max))
    model = svm_train(np.stack(feats), labels, lam=args.lam, epochs=args.epochs, seed=args.seed, c_max=args.c_max)
    save_svm(args.out, model, run_config=cfg)
    print(f"wrote count head ({len(feats)} samples, dim {model.feature_dim}) to {args.out}")
    return EXIT_OK


def cmd_run(args):
    cfg = _resolved_config(args, f"run {args.pipeline}")
    _announce(cfg)
    images, annotations = load_scenes(args.scenes)
    net = load_network(data_path(args.model))
    outputs = []
    if args.pipeline == "c2p":
        if not args.svm:
            raise DataError("run c2p needs --svm")
        svm = load_svm(data_path(args.svm))
        for i in range(len(images)):
            outputs.append(run_c2p(images[i], net, svm, image_id=annotations[i].image_id, seed=args.seed))
    else:
        if not args.dict:
            raise DataError("run p2c needs --dict")
        dictionary = load_dictionary(data_path(args.dict))
        for i in range(len(images)):
            outputs.append(
                run_p2c(images[i], net, dictionary, image_id=annotations[i].image_id,
                        k_last=args.k_last, k_prev=args.k_prev)
            )
    save_results(args.out, outputs, meta=cfg)
    print(f"wrote {len(outputs)} results to {args.out}")
    return EXIT_OK


def _annotations_from(path):
    path = data_path(path)
    if path.is_dir():
        candidates = sorted(path.glob("*_annotations.jsonl")) + sorted(path.glob("*.jsonl"))
        if not candidates:
            raise DataError(f"no annotation files under {path}")
        return load_annotations(candidates[0])
    return load_annotations(path)


def cmd_eval(args):
    cfg = _resolved_config(args, "eval")
    _announce(cfg)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    annotations = _annotations_from(args.annotations)
    results = load_results(data_path(args.results))
    by_method: dict[str, list] = {}
    for out in results:
        by_method.setdefault(out.method, []).append(out)

    count_rows = []
    pointing_rows = []
    supplement = []
    for method in sorted(by_method):
        outs = by_method[method]
        ids = {o.image_id for o in outs}
        anns = [a for a in annotations if a.image_id in ids]
        creport = count_accuracy(outs, anns)
        count_rows.append(count_report_rows(method, creport))
        preport = pointing_accuracy(outs, anns, ratios=ratios)
        pointing_rows.extend(pointing_report_rows(method, preport))
        for t in sorted(preport.per_threshold):
            supplement.append((t, method, preport.per_threshold[t]["4+"]))

    pointing_rows.sort(key=lambda r: (r[0], r[1]))
    csv_text = report_csv(count_rows, pointing_rows, pointing_supplement=supplement,
                          meta={"command": cfg["command"], "version": cfg["version"]})
    Path(args.out).write_text(csv_text)
    print(format_count_table(count_rows))
    print()
    print(format_pointing_table(pointing_rows))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_render(args):
    cfg = _resolved_config(args, "render")
    _announce(cfg)
    images, annotations = load_scenes(args.scenes)
    by_id = {a.image_id: i for i, a in enumerate(annotations)}
    results = load_results(data_path(args.results))[: args.limit]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    net = load_network(data_path(args.model)) if args.model else None
    dictionary = load_dictionary(data_path(args.dict)) if args.dict else None
    svm = load_svm(data_path(args.svm)) if args.svm else None

    from .grids import Heatmap

    for res in results:
        if res.image_id not in by_id:
            raise DataError(f"result {res.image_id!r} has no scene")
        image = images[by_id[res.image_id]]
        if net is not None and (dictionary is not None or svm is not None):
            if res.method == "p2c" and dictionary is not None:
                fresh = run_p2c(image, net, dictionary, image_id=res.image_id)
            else:
                fresh = run_c2p(image, net, svm, image_id=res.image_id, seed=args.seed)
            heatmap = fresh.heatmap
        else:
            heatmap = Heatmap.from_grid(np.asarray(image, dtype=np.float32) / 255.0)
        render_overlay(image, heatmap, res.pointers, out_dir / f"{res.image_id}.png")
    print(f"wrote {len(results)} overlays to {out_dir}")
    return EXIT_OK


# -- argument plumbing --------------------------------------------------------


def _apply_config_file(argv: list[str], parser: argparse.ArgumentParser) -> list[str]:
    """Expand --config key=value files into flags ahead of the CLI flags."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        parser.error("--config needs a path")
    path = Path(argv[idx + 1])
    if not path.exists():
        parser.error(f"config file {path} not found")
    injected = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            parser.error(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        injected += [f"--{key.strip().replace('_', '-')}", value.strip()]
    rest = argv[:idx] + argv[idx + 2 :]
    # config first so explicit flags win
    return rest[:2] + injected + rest[2:] if len(rest) >= 2 else injected + rest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"pnc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    lego = sub.add_parser("lego", help="synthetic dataset generation")
    lego_sub = lego.add_subparsers(dest="lego_command", required=True)

    g = lego_sub.add_parser("gen", help="single-object classification set")
    g.add_argument("--classes", type=int, default=100)
    g.add_argument("--digits", type=int, default=3)
    g.add_argument("--train", type=int, default=500)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", type=int, default=84)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--pool", type=int, default=200, help="digit exemplars per class per split")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_lego_gen)

    s = lego_sub.add_parser("scenes", help="multi-instance scenes with annotations")
    s.add_argument("--preset", choices=["easy", "big_o", "parallel", "close_by"], required=True)
    s.add_argument("--instances", default="1-4", help="fixed count '3' or range '1-4'")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--classes", type=int, default=100)
    s.add_argument("--digits", type=int, default=3)
    s.add_argument("--ruleset-seed", type=int, default=None, help="defaults to --seed")
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--canvas", type=int, default=168)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_lego_scenes)

    t = sub.add_parser("train", help="train the conv classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=2)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val", action="store_true", help="evaluate the test split per epoch")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("dict", help="signature dictionary")
    d_sub = d.add_subparsers(dest="dict_command", required=True)
    db = d_sub.add_parser("build")
    db.add_argument("--data", required=True)
    db.add_argument("--model", required=True)
    db.add_argument("--per-class", type=int, default=0, help="cap samples per class (0 = all)")
    db.add_argument("--out", required=True)
    db.set_defaults(func=cmd_dict_build)

    c = sub.add_parser("count", help="bounded count head")
    c_sub = c.add_subparsers(dest="count_command", required=True)
    ct = c_sub.add_parser("train")
    ct.add_argument("--scenes", required=True)
    ct.add_argument("--model", required=True)
    ct.add_argument("--c-max", type=int, default=4)
    ct.add_argument("--lam", type=float, default=1e-4)
    ct.add_argument("--epochs", type=int, default=50)
    ct.add_argument("--seed", type=int, default=0)
    ct.add_argument("--out", required=True)
    ct.set_defaults(func=cmd_count_train)

    r = sub.add_parser("run", help="run a pipeline over scenes")
    r.add_argument("pipeline", choices=["c2p", "p2c"])
    r.add_argument("--scenes", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--dict", default=None)
    r.add_argument("--svm", default=None)
    r.add_argument("--k-last", type=int, default=20)
    r.add_argument("--k-prev", type=int, default=50)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score results against annotations")
    e.add_argument("--results", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--ratios", default="0.5,0.8")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("render", help="write overlay PNGs for results")
    v.add_argument("--results", required=True)
    v.add_argument("--scenes", required=True)
    v.add_argument("--model", default=None, help="recompute heatmaps when given")
    v.add_argument("--dict", default=None)
    v.add_argument("--svm", default=None)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--limit", type=int, default=24)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_file(argv, parser)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
