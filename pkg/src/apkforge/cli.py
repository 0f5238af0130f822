"""``forge`` command line.

Exit codes: 0 success, 1 usage, 2 no usable inputs, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classifier, pipeline
from .errors import ConfigError, ForgeError, NoInputs, UnwritableOutput
from .fusion import encode_png

EXIT_OK, EXIT_USAGE, EXIT_NO_INPUT, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("apkforge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> pipeline.PipelineConfig:
    overrides = {
        "workers": getattr(args, "workers", None),
        "channels": getattr(args, "channels", None),
        "dex_mode": getattr(args, "dex_mode", None),
        "rebinarize": True if getattr(args, "rebinarize", False) else None,
        "include_third_party": True if getattr(args, "include_third_party", False) else None,
    }
    return pipeline.load_config(args.config, overrides)


def _load_split(dataset: Path, split: str, cfg):
    records = pipeline.read_manifest(dataset / pipeline.MANIFEST_NAME)
    train, test = pipeline.split_records(records, cfg.test_fraction, cfg.seed)
    chosen = {"train": train, "test": test, "all": train + test}[split]
    if not chosen:
        raise NoInputs(f"no usable records in the {split!r} split of {dataset}")
    return chosen


def _features(dataset: Path, records, d: int) -> np.ndarray:
    from PIL import Image

    rows = []
    for r in records:
        with Image.open(dataset / r.output_png) as im:
            rows.append(classifier.featurize(np.asarray(im.convert("RGB")), d))
    return np.vstack(rows)


def cmd_extract(args):
    cfg = _config(args)
    feat = pipeline.extract_features(Path(args.apk).read_bytes(), cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "classes.dex.bin").write_bytes(feat.dex)
    (out / "AndroidManifest.xml").write_bytes(feat.manifest)
    (out / "api_calls.txt").write_bytes(feat.api)
    for w in feat.warnings:
        log.warning(w)
    print(f"{feat.sha256}  dex={len(feat.dex)} manifest={len(feat.manifest)} api={len(feat.api)}")
    return EXIT_OK


def cmd_dump_apis(args):
    feat = pipeline.extract_features(Path(args.apk).read_bytes(), _config(args))
    sys.stdout.buffer.write(feat.api)
    return EXIT_OK


def cmd_dump_manifest(args):
    feat = pipeline.extract_features(Path(args.apk).read_bytes(), _config(args))
    sys.stdout.buffer.write(feat.manifest)
    return EXIT_OK


def cmd_imagize(args):
    cfg = _config(args)
    feat = pipeline.extract_features(Path(args.apk).read_bytes(), cfg)
    planes, notes = pipeline.enhanced_planes(feat, cfg)
    from .fusion import merge_rgb
    rgb = merge_rgb(planes["dex"], planes["manifest"], planes["api"], cfg.fuse)
    Path(args.output).write_bytes(encode_png(rgb))
    if args.planes_dir:
        d = Path(args.planes_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, plane in planes.items():
            (d / f"{name}.png").write_bytes(encode_png(plane))
    for w in feat.warnings + notes:
        log.warning(w)
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    records = pipeline.run_pipeline(args.input_dir, args.output_dir, cfg)
    ok = sum(r.status == "Ok" for r in records)
    for r in records:
        if r.status != "Ok":
            log.warning("%s: %s", r.apk_path, r.reason)
    print(f"{ok}/{len(records)} APKs imaged; manifest at "
          f"{Path(args.output_dir) / pipeline.MANIFEST_NAME}")
    return EXIT_OK if ok else EXIT_NO_INPUT


def cmd_train(args):
    cfg = _config(args)
    dataset = Path(args.dataset)
    records = _load_split(dataset, args.split, cfg)
    x = _features(dataset, records, cfg.feature_size)
    hyper = classifier.Hyper(cfg.learning_rate, cfg.epochs, cfg.l2, cfg.batch_size)
    model = classifier.train(x, [r.label for r in records], hyper, cfg.seed)
    model.input_size = cfg.feature_size
    classifier.save_model(model, args.model)
    print(f"trained on {len(records)} samples, classes={model.classes}, "
          f"final loss={model.loss_trace[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    dataset = Path(args.dataset)
    model = classifier.load_model(args.model)
    records = _load_split(dataset, args.split, cfg)
    x = _features(dataset, records, model.input_size or cfg.feature_size)
    result = classifier.evaluate(model, x, [r.label for r in records])
    if isinstance(result, classifier.Metrics):
        payload = {"model": args.name, "binary": result.as_dict()}
        summary = result.as_dict()
    else:
        payload = {
            "model": args.name,
            "per_class": {c: m.as_dict() for c, m in zip(model.classes, result)},
            "macro": classifier.macro_average(result),
            "weighted": classifier.weighted_average(result),
        }
        summary = payload["macro"]
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.metrics_out:
        Path(args.metrics_out).write_text(text + "\n", encoding="utf-8")
    table, _ = pipeline.make_report([(args.name, summary)])
    print(table, end="")
    return EXIT_OK


def cmd_report(args):
    rows = []
    for path in args.metrics:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        summary = data.get("binary") or data.get(args.average)
        if summary is None:
            raise ConfigError(f"{path}: no {args.average!r} metrics")
        rows.append((data.get("model", Path(path).stem), summary))
    table, csv_text = pipeline.make_report(rows)
    print(table, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--workers", type=int)
    common.add_argument("--channels", help="channel mask: rgb|r|g|b|rg|rb|gb")
    common.add_argument("--dex-mode", choices=pipeline.DEX_MODES)
    common.add_argument("--rebinarize", action="store_true",
                        help="threshold resized channels back to 0/255")
    common.add_argument("--include-third-party", action="store_true",
                        help="keep non-platform calls in the API text")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="forge", description="Android APK to fused RGB feature images")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract", parents=[common], help="write the three feature payloads")
    s.add_argument("apk")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("dump-apis", parents=[common], help="print the API-call text")
    s.add_argument("apk")
    s.set_defaults(func=cmd_dump_apis)

    s = sub.add_parser("dump-manifest", parents=[common], help="print the decoded manifest")
    s.add_argument("apk")
    s.set_defaults(func=cmd_dump_manifest)

    s = sub.add_parser("imagize", parents=[common], help="fuse one APK into a PNG")
    s.add_argument("apk")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--planes-dir", help="also write each resized channel as a gray PNG")
    s.set_defaults(func=cmd_imagize)

    s = sub.add_parser("run", parents=[common], help="image a directory of APKs")
    s.add_argument("input_dir")
    s.add_argument("output_dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("train", parents=[common], help="train the built-in classifier")
    s.add_argument("dataset", help="directory produced by 'forge run'")
    s.add_argument("-m", "--model", required=True, help="output model file")
    s.add_argument("--split", choices=("train", "all"), default="train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    s.add_argument("dataset")
    s.add_argument("-m", "--model", required=True)
    s.add_argument("--split", choices=("test", "all"), default="test")
    s.add_argument("--name", default="builtin", help="model name in reports")
    s.add_argument("--metrics-out", help="write metrics JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="tabulate metrics JSON files")
    s.add_argument("metrics", nargs="*")
    s.add_argument("--csv", help="write CSV summary here")
    s.add_argument("--average", choices=("macro", "weighted"), default="macro")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NoInputs, UnwritableOutput) as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return EXIT_NO_INPUT
    except ForgeError as exc:
        print(f"forge: {exc.reason}: {exc}", file=sys.stderr)
        return EXIT_NO_INPUT
    except FileNotFoundError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return EXIT_NO_INPUT
    except Exception as exc:
        log.exception("internal error")
        print(f"forge: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
