"""Command-line entry points.

Every subcommand resolves its configuration as: built-in defaults, then the
``--config`` JSON file (flat dotted keys), then ``--set key=value`` pairs, then
explicit flags. The resolved configuration is written to ``<out>/config.json``
and can be fed back with ``--config`` to reproduce a run bit-exactly.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import cv2
import numpy as np

from . import corpus as corpus_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DegradationParams,
    class_vocabulary,
    degrade,
    iter_frames,
    load_annotations,
    load_image,
    save_image,
    to_uint8,
    validate_image,
)
from .enhancer import EnhanceSpec, enhance_frame, enhanced_name
from .errors import DataValidationError, NumericalError, ShapeError
from .evaluate import compare_pipelines, ground_truth_from_annotations, mean_average_precision
from .gan import GanTrainConfig, train_gan
from .probe import extract_feature_matrix, probe_report, train_linear_probe, write_probe_report
from .ssd import Detection, DetectorConfig, DetectorTrainConfig, detect, detect_cascade, train_detector

log = logging.getLogger("dcgan_ssd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
VIDEO_SUFFIXES = {".mp4", ".avi", ".mov", ".mkv", ".webm"}


class UsageError(Exception):
    pass


DEFAULTS: dict[str, dict] = {
    "make-corpus": {
        "seed": 0,
        "out": "corpus",
        "corpus.classification.count": 1000,
        "corpus.classification.size": 32,
        "corpus.detection.count": 200,
        "corpus.detection.size": 128,
    },
    "train-gan": {
        "seed": 0,
        "out": "runs/gan",
        "data.annotations": "corpus/classification/annotations.jsonl",
        "gan.mode": "latent",
        "gan.batch_size": 72,
        "gan.epochs": 25,
        "gan.image_size": 32,
        "gan.noise_dim": 100,
        "gan.noise": "uniform",
        "gan.learning_rate": 2e-4,
        "gan.beta1": 0.5,
        "gan.beta2": 0.999,
        "gan.loss_variant": "non_saturating",
        "gan.lambda_rec": 100.0,
        "gan.lambda_adv": 1.0,
        "gan.generator_channels": [256, 128, 64],
        "gan.discriminator_channels": [64, 128, 256],
        "gan.conditional_channels": [32, 64],
        "degrade.downscale": 2.0,
        "degrade.brightness": 0.4,
        "degrade.sigma": 0.02,
    },
    "train-ssd": {
        "seed": 0,
        "out": "runs/ssd",
        "data.annotations": "corpus/detection/annotations.jsonl",
        "det.input_size": 128,
        "det.backbone_channels": [64, 128, 256],
        "det.extra_channels": [256, 256],
        "det.aspects": [[1.0, 2.0, 0.5], [1.0, 2.0, 0.5], [1.0, 2.0, 0.5]],
        "det.s_min": 0.15,
        "det.s_max": 0.6,
        "train.epochs": 10,
        "train.batch_size": 16,
        "train.learning_rate": 1e-3,
        "train.iou_threshold": 0.5,
        "train.neg_pos_ratio": 3,
        "init": None,
        "generator": None,
    },
    "enhance": {
        "seed": 0,
        "out": "runs/enhanced",
        "checkpoint": None,
        "input": None,
        "target": "1920x1080",
        "tile": 0,
        "stride": 1,
    },
    "detect": {
        "seed": 0,
        "out": "runs/detect",
        "detector": None,
        "generator": None,
        "input": None,
        "cascade": False,
        "target": None,
        "conf": 0.5,
        "nms": 0.45,
        "top_k": 200,
        "stride": 1,
        "render": False,
    },
    "probe": {
        "seed": 0,
        "out": "runs/probe",
        "discriminator": None,
        "data.annotations": "corpus/classification/annotations.jsonl",
        "l2": 1e-2,
        "test_fraction": 0.2,
    },
    "eval": {
        "seed": 0,
        "out": "runs/eval",
        "data.annotations": None,
        "detections": None,
        "detector": None,
        "conf": 0.5,
        "nms": 0.45,
        "iou": 0.5,
    },
    "compare": {
        "seed": 0,
        "out": "runs/compare",
        "data.annotations": None,
        "detector": None,
        "generator": None,
        "target": None,
        "conf": 0.5,
        "nms": 0.45,
        "iou": 0.5,
    },
}


# ---------------------------------------------------------------------------
# Config plumbing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    config = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = json.loads(path.read_text())
        unknown = set(loaded) - set(config)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        config.update(loaded)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in config:
            raise UsageError(f"unknown config key for {command}: {key}")
        config[key] = _parse_value(value)
    for key in config:
        flag = key.replace(".", "_").replace("-", "_")
        value = getattr(args, flag, None)
        if value is not None:
            config[key] = value
    return config


def _write_resolved(config: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _require(config: dict, key: str) -> str:
    if config.get(key) in (None, ""):
        raise UsageError(f"missing required setting: {key}")
    return config[key]


def _existing(path_text: str, what: str) -> Path:
    path = Path(path_text)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", str(text))
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise UsageError(f"size must look like WIDTHxHEIGHT, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _load_dataset(annotations_path: str):
    path = _existing(annotations_path, "annotation file")
    anns = load_annotations(path)
    if not anns:
        raise DataValidationError(f"{path}: no annotated images")
    images = []
    for ann in anns:
        image = validate_image(load_image(_existing(path.parent / ann.image_id, "image")))
        if (image.shape[1], image.shape[0]) != ann.image_size:
            raise DataValidationError(f"{ann.image_id}: image is {image.shape[1]}x{image.shape[0]}, annotation says {ann.image_size}")
        images.append(image)
    return images, anns


def _iter_inputs(path_text: str, stride: int):
    """Yield (stem, image) pairs from an image file, a directory, or a video."""
    path = _existing(path_text, "input")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        for p in files:
            yield p.stem, load_image(p)
    elif path.suffix.lower() in VIDEO_SUFFIXES:
        for i, frame in enumerate(iter_frames(path, stride)):
            yield f"{path.stem}_f{i * stride:05d}", frame
    else:
        yield path.stem, load_image(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_make_corpus(config: dict, out: Path) -> None:
    seed = int(config["seed"])
    corpus_mod.write_classification_corpus(
        out / "classification", int(config["corpus.classification.count"]), seed, int(config["corpus.classification.size"])
    )
    corpus_mod.write_detection_corpus(
        out / "detection", int(config["corpus.detection.count"]), seed + 1, int(config["corpus.detection.size"])
    )


def gan_config_from(config: dict) -> GanTrainConfig:
    return GanTrainConfig(
        batch_size=int(config["gan.batch_size"]),
        epochs=int(config["gan.epochs"]),
        image_size=int(config["gan.image_size"]),
        noise_dim=int(config["gan.noise_dim"]),
        learning_rate=float(config["gan.learning_rate"]),
        optimizer_moments=(float(config["gan.beta1"]), float(config["gan.beta2"])),
        seed=int(config["seed"]),
        generator_loss_variant=config["gan.loss_variant"],
        reconstruction_weight=float(config["gan.lambda_rec"]),
        adversarial_weight=float(config["gan.lambda_adv"]),
        mode=config["gan.mode"],
        noise_distribution=config["gan.noise"],
        generator_channels=tuple(config["gan.generator_channels"]),
        discriminator_channels=tuple(config["gan.discriminator_channels"]),
        conditional_channels=tuple(config["gan.conditional_channels"]),
    )


def cmd_train_gan(config: dict, out: Path) -> None:
    gan_cfg = gan_config_from(config)
    gan_cfg.validate()
    images, _ = _load_dataset(config["data.annotations"])
    if gan_cfg.mode == "latent":
        size = gan_cfg.image_size
        bad = [i for i, im in enumerate(images) if im.shape[:2] != (size, size)]
        if bad:
            raise DataValidationError(f"{len(bad)} images are not {size}x{size} (first: index {bad[0]})")
        result = train_gan(gan_cfg, images, checkpoint_dir=out / "checkpoints", log_path=out / "losses.csv")
    else:
        inputs = [
            degrade(im, DegradationParams(float(config["degrade.downscale"]), float(config["degrade.brightness"]),
                                          float(config["degrade.sigma"]), gan_cfg.seed + i))
            for i, im in enumerate(images)
        ]
        result = train_gan(gan_cfg, inputs, images, checkpoint_dir=out / "checkpoints", log_path=out / "losses.csv")
    save_checkpoint(result.generator, out / "generator")
    save_checkpoint(result.discriminator, out / "discriminator")


def cmd_train_ssd(config: dict, out: Path) -> None:
    images, anns = _load_dataset(config["data.annotations"])
    det_cfg = DetectorConfig(
        input_size=int(config["det.input_size"]),
        class_names=tuple(class_vocabulary(anns)),
        backbone_channels=tuple(config["det.backbone_channels"]),
        extra_channels=tuple(config["det.extra_channels"]),
        aspects=tuple(tuple(a) if isinstance(a, list) else a for a in config["det.aspects"]),
        s_min=float(config["det.s_min"]),
        s_max=float(config["det.s_max"]),
    )
    train_cfg = DetectorTrainConfig(
        epochs=int(config["train.epochs"]),
        batch_size=int(config["train.batch_size"]),
        learning_rate=float(config["train.learning_rate"]),
        seed=int(config["seed"]),
        iou_threshold=float(config["train.iou_threshold"]),
        neg_pos_ratio=int(config["train.neg_pos_ratio"]),
    )
    init = str(_existing(config["init"], "pretrained checkpoint")) if config["init"] else None
    generator = load_checkpoint(_existing(config["generator"], "generator checkpoint"), "generator_conditional") \
        if config["generator"] else None
    result = train_detector(train_cfg, images, anns, detector_config=det_cfg, generator=generator, init_from=init,
                            checkpoint_dir=out / "checkpoints", log_path=out / "losses.csv")
    save_checkpoint(result.detector, out / "detector")


def cmd_enhance(config: dict, out: Path) -> None:
    width, height = parse_size(config["target"])
    ckpt = _existing(_require(config, "checkpoint"), "generator checkpoint")
    spec = EnhanceSpec(width, height, int(config["tile"]), str(ckpt))
    generator = load_checkpoint(ckpt, "generator_conditional")
    written = 0
    for stem, image in _iter_inputs(_require(config, "input"), int(config["stride"])):
        save_image(enhance_frame(generator, image, spec), out / enhanced_name(stem, spec))
        written += 1
    log.info("wrote %d enhanced frames to %s", written, out)


def _render(image: np.ndarray, dets: list[Detection], names) -> np.ndarray:
    pixels = np.ascontiguousarray(to_uint8(image))
    h, w = pixels.shape[:2]
    for d in dets:
        x0, y0, x1, y1 = (int(round(v)) for v in (d.box[0] * w, d.box[1] * h, d.box[2] * w, d.box[3] * h))
        cv2.rectangle(pixels, (x0, y0), (x1 - 1, y1 - 1), (255, 0, 0), 1)
        cv2.putText(pixels, f"{names[d.class_id - 1]} {d.confidence:.2f}", (x0, max(y0 - 2, 8)),
                    cv2.FONT_HERSHEY_SIMPLEX, 0.3, (255, 0, 0), 1)
    return pixels.astype(np.float32) / 127.5 - 1.0


def _detection_record(frame_id: str, dets: list[Detection], names) -> dict:
    return {
        "frame": frame_id,
        "detections": [
            {"class": names[d.class_id - 1], "confidence": d.confidence, "bbox_norm": list(d.box)} for d in dets
        ],
    }


def cmd_detect(config: dict, out: Path) -> None:
    if config["cascade"] and not config["generator"]:
        raise UsageError("--cascade needs a generator checkpoint (--generator)")
    detector = load_checkpoint(_existing(_require(config, "detector"), "detector checkpoint"), "detector")
    generator = None
    if config["cascade"]:
        generator = load_checkpoint(_existing(config["generator"], "generator checkpoint"), "generator_conditional")
    names = detector.config.class_names
    conf, nms_t, top_k = float(config["conf"]), float(config["nms"]), int(config["top_k"])
    with open(out / "detections.jsonl", "w") as fh:
        for stem, image in _iter_inputs(_require(config, "input"), int(config["stride"])):
            if generator is not None:
                h, w = image.shape[:2]
                s = detector.config.input_size
                tw, th = parse_size(config["target"]) if config["target"] else (max(w, s), max(h, s))
                dets = detect_cascade(generator, detector, image, EnhanceSpec(tw, th), conf, nms_t, top_k, stem)
            else:
                dets = detect(detector, image, conf, nms_t, top_k, stem)
            fh.write(json.dumps(_detection_record(stem, dets, names)) + "\n")
            if config["render"]:
                save_image(_render(image, dets, names), out / f"{stem}_det.png")


def cmd_probe(config: dict, out: Path) -> None:
    d = load_checkpoint(_existing(_require(config, "discriminator"), "discriminator checkpoint"), "discriminator")
    images, anns = _load_dataset(config["data.annotations"])
    bad = [a.image_id for a, im in zip(anns, images) if im.shape[:2] != (32, 32)]
    if bad:
        raise DataValidationError(f"probe corpus images must be 32x32; {bad[0]} is not")
    if any(len(a.objects) < 1 for a in anns):
        raise DataValidationError("every probe image needs a class label")
    names = class_vocabulary(anns)
    labels = np.array([names.index(a.objects[0].label) for a in anns])
    if len(names) < 2:
        raise DataValidationError("probe corpus needs at least two classes")
    seed = int(config["seed"])
    order = np.random.default_rng(seed).permutation(len(images))
    n_test = max(1, int(round(len(images) * float(config["test_fraction"]))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    features = extract_feature_matrix(d, images)
    probe = train_linear_probe(features[train_idx], labels[train_idx], float(config["l2"]), seed)
    reports = [
        probe_report(probe, features[train_idx], labels[train_idx], "train", len(names)),
        probe_report(probe, features[test_idx], labels[test_idx], "test", len(names)),
    ]
    write_probe_report(reports, names, out / "probe_report.csv")
    save_checkpoint(probe, out / "probe")
    summary = {"feature_dim": int(features.shape[1]), "classes": names,
               "train_accuracy": reports[0].accuracy, "test_accuracy": reports[1].accuracy}
    (out / "probe_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"feature dim {features.shape[1]}; test accuracy {reports[1].accuracy:.4f}")


def _read_detections(path: Path, names) -> list[Detection]:
    dets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                for d in record["detections"]:
                    dets.append(Detection(tuple(float(v) for v in d["bbox_norm"]), list(names).index(d["class"]) + 1,
                                          float(d["confidence"]), str(record["frame"])))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataValidationError(f"{path}: line {lineno}: malformed detection record ({exc})") from exc
    return dets


def _write_eval(report, out: Path, stem: str) -> None:
    (out / f"{stem}.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "ap"])
        for name, ap in report.per_class_ap.items():
            writer.writerow([name, f"{ap:.6f}"])
        writer.writerow(["mAP", f"{report.map_score:.6f}"])
        writer.writerow(["recall", f"{report.recall_at_iou:.6f}"])


def cmd_eval(config: dict, out: Path) -> None:
    ann_path = _existing(_require(config, "data.annotations"), "annotation file")
    if config["detections"]:
        anns = load_annotations(ann_path)
        names = class_vocabulary(anns)
        dets = _read_detections(_existing(config["detections"], "detections file"), names)
    else:
        detector = load_checkpoint(_existing(_require(config, "detector"), "detector checkpoint"), "detector")
        images, anns = _load_dataset(str(ann_path))
        names = detector.config.class_names
        dets = [d for im, a in zip(images, anns)
                for d in detect(detector, im, float(config["conf"]), float(config["nms"]), image_id=a.image_id)]
    gts = ground_truth_from_annotations(anns, names)
    report = mean_average_precision(dets, gts, float(config["iou"]), names,
                                    {"conf_threshold": float(config["conf"]), "seed": int(config["seed"])})
    _write_eval(report, out, "eval_report")


def cmd_compare(config: dict, out: Path) -> None:
    detector = load_checkpoint(_existing(_require(config, "detector"), "detector checkpoint"), "detector")
    generator = load_checkpoint(_existing(_require(config, "generator"), "generator checkpoint"), "generator_conditional")
    images, anns = _load_dataset(_require(config, "data.annotations"))
    if config["target"]:
        tw, th = parse_size(config["target"])
    else:
        s = detector.config.input_size
        tw, th = max(images[0].shape[1], s), max(images[0].shape[0], s)
    report = compare_pipelines(detector, generator, images, anns, EnhanceSpec(tw, th),
                               float(config["conf"]), float(config["iou"]), float(config["nms"]))
    report.write(out / "compare_report.json", out / "per_image_recall.csv")
    print(f"recall baseline {report.baseline.recall_at_iou:.4f} cascade {report.cascade.recall_at_iou:.4f} "
          f"delta {report.delta_recall:+.4f}")


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train-gan": cmd_train_gan,
    "train-ssd": cmd_train_ssd,
    "enhance": cmd_enhance,
    "detect": cmd_detect,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcgan-ssd", description="DCGAN-enhanced single-shot detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of dotted-key settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    common("make-corpus", "write the bundled synthetic corpora")
    p = common("train-gan", "train the DCGAN (latent or conditional)")
    p.add_argument("--data", dest="data_annotations", help="annotations.jsonl of the training images")
    p.add_argument("--epochs", dest="gan_epochs", type=int)
    p.add_argument("--mode", dest="gan_mode", choices=["latent", "conditional"])
    p = common("train-ssd", "train the single-shot detector")
    p.add_argument("--data", dest="data_annotations")
    p.add_argument("--epochs", dest="train_epochs", type=int)
    p.add_argument("--init", help="pretrained detector or discriminator checkpoint for the backbone")
    p.add_argument("--generator", help="conditional generator for on-the-fly enhancement")
    p = common("enhance", "enhance images, a directory, or a video")
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--target", help="WIDTHxHEIGHT")
    p.add_argument("--tile", type=int)
    p.add_argument("--stride", type=int)
    p = common("detect", "run the detector, optionally behind the enhancer")
    p.add_argument("--detector")
    p.add_argument("--generator")
    p.add_argument("--input")
    p.add_argument("--cascade", action="store_true", default=None)
    p.add_argument("--target", help="WIDTHxHEIGHT for the cascade's enhancement")
    p.add_argument("--conf", type=float)
    p.add_argument("--nms", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--render", action="store_true", default=None)
    p = common("probe", "linear-probe a discriminator")
    p.add_argument("--discriminator")
    p.add_argument("--data", dest="data_annotations")
    p.add_argument("--l2", type=float)
    p = common("eval", "mAP / recall of detections")
    p.add_argument("--data", dest="data_annotations")
    p.add_argument("--detections")
    p.add_argument("--detector")
    p.add_argument("--conf", type=float)
    p.add_argument("--iou", type=float)
    p = common("compare", "cascade versus detector-only on the same frames")
    p.add_argument("--data", dest="data_annotations")
    p.add_argument("--detector")
    p.add_argument("--generator")
    p.add_argument("--target", help="WIDTHxHEIGHT")
    p.add_argument("--conf", type=float)
    p.add_argument("--iou", type=float)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args.command, args)
        out = Path(config["out"])
        _write_resolved(config, out)
        COMMANDS[args.command](config, out)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataValidationError, ShapeError, FileNotFoundError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
