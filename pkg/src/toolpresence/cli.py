"""Command-line entry point: ``ingest``, ``synth``, ``train``, ``predict``, ``evaluate``.

Exit codes: 0 success, 2 configuration/contract error, 3 evaluation coverage
error.  Output goes to ``--out`` or, failing that, to a subdirectory of
``$TOOLPRESENCE_OUT`` (default ``./runs``).

Training configuration is resolved as defaults < preset < ``--config``
file < command-line flags, and the resolved result is written next to the
run as ``config.txt`` (same ``key=value`` format as ``--config``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from toolpresence import data_ingest as di
from toolpresence import metrics_eval as me
from toolpresence import network as nw
from toolpresence import synthetic_bench as sb
from toolpresence.errors import ConfigurationError, CoverageError, ToolkitError
from toolpresence.train_engine import PRESET_NAMES, TrainingConfig, train

OUT_ENV = "TOOLPRESENCE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_COVERAGE = 0, 2, 3


@dataclass(frozen=True)
class RunPreset:
    name: str
    variant: str
    dataset: str
    overrides: dict = field(default_factory=dict)


PRESETS = {
    "ToolNet-m2cai16": RunPreset("ToolNet-m2cai16", "ToolNet", "m2cai16-tool", {"phase_loss_weight": 0.0}),
    "ToolNet-Cholec80": RunPreset("ToolNet-Cholec80", "ToolNet", "cholec80", {"phase_loss_weight": 0.0}),
    "EndoNet-Cholec80": RunPreset("EndoNet-Cholec80", "EndoNet", "cholec80", {}),
}
assert tuple(PRESETS) == PRESET_NAMES

# Run keys beyond TrainingConfig that a config file may set.
MODEL_KEYS = {
    "variant": str,
    "backbone": str,
    "image_height": int,
    "image_width": int,
    "phase_count": int,
    "phase_input": str,
    "pretrained": str,
}
_TYPES = {"int": int, "float": float, "bool": None, "Optional[str]": str, "str": str}


def _coerce(key: str, raw: str):
    if key in MODEL_KEYS:
        return MODEL_KEYS[key](raw)
    types = TrainingConfig.field_types()
    if key not in types:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = types[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigurationError(f"{key}: {raw!r} is not a boolean")
        return low in ("true", "1", "yes")
    try:
        return _TYPES[kind](raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = _coerce(key.strip(), value.strip())
    return out


def write_config_file(path, values: dict) -> None:
    lines = [f"{k}={'' if v is None else v}" for k, v in values.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _csv(text: Optional[str]) -> list:
    return [t for t in (text or "").split(",") if t]


# -- ingest -----------------------------------------------------------------


def cmd_ingest(args) -> int:
    ann_dir = Path(args.annotations)
    files = sorted(ann_dir.glob("*.txt"))
    if not files:
        raise ConfigurationError(f"no annotation files (*.txt) in {ann_dir}")
    pairs = [(p, p.stem) for p in files]
    phase_pairs = None
    if args.phases:
        phase_pairs = [(p, p.stem) for p in sorted(Path(args.phases).glob("*.txt"))]
    manifest = di.build_manifest(pairs, phase_pairs, Fraction(args.fps))

    out = Path(args.out) if args.out else _out_dir(args, "ingest") / "manifest.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    di.write_manifest(out, manifest)
    print(f"videos: {len(manifest.videos)}  frames: {len(manifest)}  "
          f"phases: {manifest.phase_count if manifest.phase_count else '-'}")
    print(f"manifest: {out}")

    if args.train_videos or args.test_videos:
        train_m, test_m = di.split_manifest(manifest, _csv(args.train_videos), _csv(args.test_videos))
        stem = out.with_suffix("")
        di.write_manifest(f"{stem}.train.tsv", train_m)
        di.write_manifest(f"{stem}.test.tsv", test_m)
        print(f"split: {len(train_m)} train / {len(test_m)} test frames")
    if args.stats and len(manifest):
        print(di.class_frequency(manifest).render())
    return EXIT_OK


# -- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    priors = [float(p) for p in _csv(args.priors)] or [0.5]
    if len(priors) == 1:
        priors = priors * di.NUM_TOOLS
    cfg = sb.SyntheticConfig(
        image_size=(args.size, args.size),
        tool_priors=tuple(priors),
        phase_count=args.phase_count,
        frames_per_video=args.frames_per_video,
        video_count=args.videos,
        seed=args.seed,
        scarcity_profile=args.scarcity,
    )
    out = _out_dir(args, "synth")
    _, manifest = sb.generate_dataset(cfg, out)
    print(f"wrote {len(manifest)} frames in {len(manifest.videos)} videos to {out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

_FLAG_KEYS = (
    "total_iterations", "batch_size", "base_lr", "head_lr", "decay_factor", "decay_every",
    "tool_loss_weight", "phase_loss_weight", "momentum", "weight_decay", "checkpoint_every",
    "seed", "hflip",
) + tuple(MODEL_KEYS)


def resolve_run_config(args) -> tuple:
    """Merge defaults, preset, config file and flags.

    Returns ``(TrainingConfig, model options dict, keys set explicitly)``.
    """
    values = {f.name: f.default for f in fields(TrainingConfig)}
    values.update({"variant": "ToolNet", "backbone": "alexnet", "image_height": 227,
                   "image_width": 227, "phase_count": None, "phase_input": "confidences",
                   "pretrained": None})
    explicit = set()

    file_values = read_config_file(args.config) if args.config else {}
    preset_name = args.preset or file_values.pop("preset", None)
    file_values.pop("preset", None)
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset_name!r}; choose from {PRESET_NAMES}")
        preset = PRESETS[preset_name]
        values["variant"] = preset.variant
        values.update(preset.overrides)
        values["preset"] = preset_name
    values.update(file_values)
    explicit |= set(file_values)

    for key in _FLAG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            values[key] = flag
            explicit.add(key)

    if preset_name and values["variant"] != PRESETS[preset_name].variant:
        raise ConfigurationError(f"variant {values['variant']} conflicts with preset {preset_name}")
    if values["variant"] not in nw.VARIANTS:
        raise ConfigurationError(f"unknown variant {values['variant']!r}")
    if values["variant"] == "ToolNet":
        if values["phase_loss_weight"] > 0 and "phase_loss_weight" in explicit:
            raise ConfigurationError("phase_loss_weight > 0 conflicts with a ToolNet run")
        values["phase_loss_weight"] = 0.0
        if "phase_count" in explicit:
            raise ConfigurationError("phase_count conflicts with a ToolNet run")

    cfg = TrainingConfig(**{f.name: values[f.name] for f in fields(TrainingConfig)})
    model_opts = {k: values[k] for k in MODEL_KEYS}
    return cfg, model_opts, explicit


def build_model_spec(model_opts: dict, manifest: di.DatasetManifest) -> nw.ModelSpec:
    shape = (3, model_opts["image_height"], model_opts["image_width"])
    if model_opts["backbone"] == "alexnet":
        backbone = nw.alexnet_backbone()
    elif model_opts["backbone"] == "reduced":
        backbone = nw.reduced_backbone()
    else:
        raise ConfigurationError(f"unknown backbone {model_opts['backbone']!r} (alexnet|reduced)")
    phase_count = None
    if model_opts["variant"] == "EndoNet":
        phase_count = model_opts["phase_count"] or manifest.phase_count or nw.DEFAULT_PHASE_COUNT
    return nw.ModelSpec(
        variant=model_opts["variant"], input_shape=shape, backbone=backbone,
        phase_count=phase_count, phase_input=model_opts["phase_input"],
    )


def cmd_train(args) -> int:
    cfg, model_opts, _ = resolve_run_config(args)
    manifest = di.read_manifest(args.manifest)
    spec = build_model_spec(model_opts, manifest)
    if spec.variant == "EndoNet" and not manifest.has_phases:
        raise ConfigurationError("EndoNet run needs phase labels on every manifest record")

    out = _out_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "config.txt", {**asdict(cfg), **model_opts})

    store = di.FrameStore(Path(args.frames), size=spec.input_shape[1:])
    images = store.load_all(manifest)
    model = nw.init_model(spec, model_opts["pretrained"], seed=cfg.seed)
    _, log = train(model, manifest, cfg, images, out_dir=out)

    meta_path = out / "run_meta.json"
    meta = json.loads(meta_path.read_text())
    meta.update({"manifest": str(args.manifest), "frames": str(args.frames),
                 "pretrained": model_opts["pretrained"], "model_options": model_opts})
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    last = log.entries[-1]
    print(f"trained {len(log)} iterations; final loss {last.loss_total:.6f}; outputs in {out}")
    return EXIT_OK


# -- predict ----------------------------------------------------------------


def _thresholds(text: str) -> tuple:
    values = [float(t) for t in _csv(text)]
    if len(values) == 1:
        values = values * di.NUM_TOOLS
    if len(values) != di.NUM_TOOLS:
        raise ConfigurationError(f"--thresholds needs 1 or {di.NUM_TOOLS} values")
    return tuple(values)


def predict_confidences(model: nw.ToolPresenceNet, images, batch_size: int = 100) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = nw.preprocess(images[start:start + batch_size], model.spec)
            out.append(model(x).tool_confidences.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, di.NUM_TOOLS))


def cmd_predict(args) -> int:
    spec = None
    if args.variant:
        _, meta = nw.load_weights(args.checkpoint)
        base = nw.ModelSpec.from_dict(meta["model_spec"])
        spec = nw.with_variant(base, args.variant)
    model = nw.load_checkpoint(args.checkpoint, spec)
    thresholds = _thresholds(args.thresholds) if args.thresholds else None
    if thresholds is not None:
        me.apply_thresholds(np.zeros(di.NUM_TOOLS), thresholds)  # validate early

    manifest = di.read_manifest(args.manifest)
    store = di.FrameStore(Path(args.frames), size=model.spec.input_shape[1:])
    out = _out_dir(args, "predict")
    out.mkdir(parents=True, exist_ok=True)
    for vid in manifest.videos:
        recs = manifest.records_for(vid)
        if not recs:
            continue
        conf = predict_confidences(model, np.stack([store.load(r) for r in recs]), args.batch_size)
        frames = [r.frame_index for r in recs]
        me.write_prediction_file(out / f"{vid}_pred.txt", frames, conf)
        if thresholds is not None:
            dec = me.apply_thresholds(conf, thresholds)
            (out / f"{vid}_decision.txt").write_bytes(
                me.serialize_decisions(frames, dec.decisions).encode("utf-8"))
    print(f"predictions for {len(manifest)} frames written to {out}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(args) -> int:
    if args.from_ap_file:
        report = me.report_from_percent(me.read_ap_file(args.from_ap_file),
                                        {"source": "ap-file"})
    else:
        if not (args.predictions and args.manifest):
            raise ConfigurationError("evaluate needs --predictions and --manifest, or --from-ap-file")
        truth = di.read_manifest(args.manifest)
        preds = me.load_prediction_dir(args.predictions)
        report = me.evaluate(preds, truth, args.interpolation)
    text = me.render_report(report)
    out = _out_dir(args, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_bytes(text.encode("utf-8"))
    (out / "summary.tsv").write_bytes(me.render_summary(report).encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolpresence", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate annotation files and write a manifest")
    p.add_argument("--annotations", required=True, help="directory of <video_id>.txt tool files")
    p.add_argument("--phases", help="directory of <video_id>.txt phase files")
    p.add_argument("--out", help="manifest path (default $TOOLPRESENCE_OUT/ingest/manifest.tsv)")
    p.add_argument("--fps", default="1", help="sampling rate of the annotations")
    p.add_argument("--train-videos", help="comma-separated video ids for a train split")
    p.add_argument("--test-videos", help="comma-separated video ids for a test split")
    p.add_argument("--stats", action="store_true", help="print per-tool class frequencies")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic glyph dataset")
    p.add_argument("--out")
    p.add_argument("--videos", type=int, default=5)
    p.add_argument("--frames-per-video", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--phase-count", type=int, default=8)
    p.add_argument("--priors", help="one prior for all tools or 7 comma-separated")
    p.add_argument("--scarcity", action="store_true", help="make Scissors/Clipper/Irrigator rare")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fine-tune ToolNet or EndoNet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames", required=True, help="root of <video_id>/<frame:06d>.png")
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--config", help="key=value file with TrainingConfig fields")
    p.add_argument("--out")
    p.add_argument("--variant", choices=nw.VARIANTS)
    p.add_argument("--backbone", choices=("alexnet", "reduced"))
    p.add_argument("--image-height", dest="image_height", type=int)
    p.add_argument("--image-width", dest="image_width", type=int)
    p.add_argument("--phase-count", dest="phase_count", type=int)
    p.add_argument("--phase-input", dest="phase_input", choices=nw.PHASE_INPUTS)
    p.add_argument("--pretrained", help="backbone weights file")
    p.add_argument("--iters", dest="total_iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--head-lr", dest="head_lr", type=float)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--tool-loss-weight", dest="tool_loss_weight", type=float)
    p.add_argument("--phase-loss-weight", dest="phase_loss_weight", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--hflip", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-video confidence files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out")
    p.add_argument("--variant", choices=nw.VARIANTS, help="load under this variant instead of the recorded one")
    p.add_argument("--thresholds", help="one threshold or 7 comma-separated; writes decision files")
    p.add_argument("--batch-size", type=int, default=100)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-tool AP and mean±std report")
    p.add_argument("--predictions", help="directory of <video_id>_pred.txt files")
    p.add_argument("--manifest", help="ground-truth manifest")
    p.add_argument("--from-ap-file", help="tab-separated <Tool>\\t<AP percent> lines")
    p.add_argument("--interpolation", choices=("all_point", "trapezoid"), default="all_point")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CoverageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    except (ToolkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
