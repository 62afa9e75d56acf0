"""Batch subcommands gluing the pipeline together.

Configuration is a flat key=value file with section prefixes
(synth.size = 512); command-line flags override file values. One root
seed drives every stage through fixed spawn keys, so identical
config + seed gives byte-identical output files. Exit codes: 0 ok,
1 usage, 2 bad data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import dataio, dic, metrics, model, speed, synth, training, weights_io
from .errors import DataError, FormatError, NumericError

_KEY_RE = re.compile(r"^[a-z0-9._-]+$")

# spawn keys per pipeline stage, so stages draw independent streams
# from the one root seed
STAGES = ("synth", "label", "train", "infer", "eval", "noise", "speed")


def parse_config(text: str, origin: str = "<config>") -> dict:
    cfg = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{origin}:{n}: expected key = value, got {raw!r}")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise FormatError(f"{origin}:{n}: bad key {key!r}")
        cfg[key] = value.strip()
    return cfg


def format_config(cfg: dict) -> str:
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n" if lines else ""


def _get(cfg, key, default, cast):
    if key not in cfg:
        return default
    try:
        return cast(cfg[key])
    except ValueError:
        raise FormatError(f"config {key} = {cfg[key]!r} is not a valid "
                          f"{cast.__name__}") from None


def _get_path(cfg, key):
    if key not in cfg:
        raise DataError(f"missing required config key {key} "
                        f"(or the matching flag)")
    return Path(cfg[key])


def stage_rng(cfg: dict, stage: str) -> np.random.Generator:
    seed = _get(cfg, "seed", 0, int)
    ss = np.random.SeedSequence(seed, spawn_key=(STAGES.index(stage),))
    return np.random.default_rng(ss)


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text)
    print(f"wrote {path}")


# ----------------------------------------------------------------------
# synth


def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    rng = stage_rng(cfg, "synth")
    sequences = _get(cfg, "synth.sequences", 1, int)
    frames = _get(cfg, "synth.frames", 10, int)
    size = _get(cfg, "synth.size", 512, int)
    opening = _get(cfg, "synth.opening", 4.0, float)
    tip_rate = _get(cfg, "synth.tip-rate", 2.0, float)
    fps = _get(cfg, "synth.fps", 10.0, float)
    mm_per_px = _get(cfg, "synth.mm-per-px", 0.05, float)
    write_flow = _get(cfg, "synth.flow", 0, int)
    full_height = _get(cfg, "synth.full-height", 0, int)
    entries = []
    fps_map = {}
    for s in range(sequences):
        seq_seed = int(rng.integers(0, 2**31 - 1))
        spec = synth.SyntheticSpec(
            size=size, seed=seq_seed, opening=opening, tip_rate=tip_rate,
            fps=fps, mm_per_px=mm_per_px,
            tip_ys=tuple([0.0] * frames) if full_height else None)
        seq = synth.generate(spec, frames=frames)
        sid = f"seq{s}"
        fps_map[sid] = fps
        ref_name = f"{sid}_ref.pgm"
        dataio.save_pgm(out / ref_name, seq.reference)
        for t, fr in enumerate(seq.frames):
            def_name = f"{sid}_{t:04d}_def.pgm"
            gt_name = f"{sid}_{t:04d}_gt.pgm"
            dataio.save_pgm(out / def_name, fr.pair.deformed)
            dataio.save_pgm(out / gt_name,
                            (np.asarray(fr.pair.gt) * 255).astype(np.uint8))
            if write_flow:
                dataio.save_flow((out / def_name).with_suffix(".flo"),
                                 fr.flow_u, fr.flow_v)
            entries.append(dataio.ManifestEntry(
                sequence_id=sid, frame_index=t, ref_path=ref_name,
                def_path=def_name, gt_path=gt_name,
                timestamp_s=fr.pair.timestamp, mm_per_px=mm_per_px))
    manifest = dataio.DatasetManifest(entries=entries, fps=fps_map)
    dataio.save_manifest(out / "manifest.txt", manifest)
    print(f"wrote {out / 'manifest.txt'} ({len(entries)} pairs)")
    return 0


# ----------------------------------------------------------------------
# label


def _group_by_sequence(entries):
    groups = {}
    for e in entries:
        groups.setdefault(e.sequence_id, []).append(e)
    return groups


def cmd_label(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest_path = _get_path(cfg, "label.manifest")
    manifest = dataio.load_manifest(manifest_path)
    threshold = _get(cfg, "label.threshold", 0.5, float)
    window = _get(cfg, "label.window", 3, int)
    subset = dic.SubsetConfig(
        subset_size=_get(cfg, "label.subset-size", 23, int),
        spacing=_get(cfg, "label.spacing", 11, int),
        search_radius=_get(cfg, "label.search-radius", 8, int))
    new_entries = []
    report = ["sequence, frame, marks"]
    for sid, group in sorted(_group_by_sequence(manifest.entries).items()):
        maps = []
        for e in group:
            pair = dataio.load_pair(manifest_path, e)
            fld = dic.compute_displacement_field(pair.reference,
                                                 pair.deformed, subset)
            maps.append(dic.label_crack_edges(fld, pair.reference.shape,
                                              threshold=threshold,
                                              mm_per_px=e.mm_per_px))
        maps = dic.temporal_consistency_correct(maps, n=window)
        for e, full in zip(group, maps):
            target = _get(cfg, "label.map-size",
                          np.asarray(full).shape[0] // 8, int)
            down = dic.downsample_label_map(full, target=target)
            gt_name = f"{sid}_{e.frame_index:04d}_label.pgm"
            dataio.save_pgm(out / gt_name,
                            (np.asarray(down) * 255).astype(np.uint8))
            report.append(f"{sid}, {e.frame_index}, "
                          f"{int(np.asarray(down).sum())}")
            base = manifest_path.parent
            new_entries.append(dataio.ManifestEntry(
                sequence_id=sid, frame_index=e.frame_index,
                ref_path=os.path.relpath(base / e.ref_path, out),
                def_path=os.path.relpath(base / e.def_path, out),
                gt_path=gt_name, timestamp_s=e.timestamp_s,
                mm_per_px=e.mm_per_px))
    labeled = dataio.DatasetManifest(entries=new_entries, fps=manifest.fps)
    dataio.save_manifest(out / "labeled_manifest.txt", labeled)
    _write(out / "label_report.txt", "\n".join(report) + "\n")
    return 0


# ----------------------------------------------------------------------
# train


def _net_config_for(cfg: dict, manifest_path, prefix: str) -> model.NetworkConfig:
    manifest = dataio.load_manifest(manifest_path)
    if not manifest.entries:
        raise DataError(f"{manifest_path}: manifest has no entries")
    first = dataio.load_image(manifest_path.parent / manifest.entries[0].ref_path)
    size = _get(cfg, f"{prefix}.size", first.shape[0], int)
    scale = _get(cfg, f"{prefix}.channel-scale", 0.25, float)
    return model.NetworkConfig(input_size=size, channel_scale=scale)


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest_path = _get_path(cfg, "train.manifest")
    val_path = Path(cfg["train.val-manifest"]) if "train.val-manifest" in cfg \
        else manifest_path
    net_cfg = _net_config_for(cfg, manifest_path, "train")
    train_cfg = training.TrainConfig(
        batch_size=_get(cfg, "train.batch", 6, int),
        epochs=_get(cfg, "train.epochs", 40, int),
        base_lr=_get(cfg, "train.lr", 5e-5, float),
        halve_every=_get(cfg, "train.halve-every", 5, int),
        val_threshold=_get(cfg, "train.val-threshold", 0.5, float),
        seed=_get(cfg, "seed", 0, int),
        flow_weight=_get(cfg, "train.flow-weight", 0.0, float))
    loss_cfg = training.LossConfig(gamma=_get(cfg, "train.gamma", 0.0, float),
                                   lam=_get(cfg, "train.lambda", 1.1, float))
    aug_cfg = None
    if _get(cfg, "train.augment", 1, int):
        aug_cfg = dataio.AugmentationConfig(seed=_get(cfg, "seed", 0, int))
    if "train.weights" in cfg:
        loaded = weights_io.load_weights(_get_path(cfg, "train.weights"))
        weights = weights_io.weights_to_tensors(loaded, net_cfg)
    else:
        prior = _get(cfg, "train.edge-prior", 0.0, float)
        weights = model.init_weights(net_cfg, stage_rng(cfg, "train"),
                                     edge_prior=prior if prior > 0 else None)
    best, log = training.train(weights, net_cfg, manifest_path, val_path,
                               train_cfg, loss_cfg, aug_cfg)
    weights_io.save_weights(out / "best.cpnw", best)
    weights_io.save_weights(out / "last.cpnw", weights)
    _write(out / "training_log.txt", training.format_training_log(log))
    print(f"best epoch {log.best_epoch}: val_f1 = "
          f"{log.entries[log.best_epoch].val_f1!r}")
    return 0


# ----------------------------------------------------------------------
# infer


def _load_model(cfg: dict, manifest_path, prefix: str):
    loaded = weights_io.load_weights(_get_path(cfg, f"{prefix}.weights"))
    scale = loaded["netc.conv1.w"].shape[0] / 64.0
    manifest = dataio.load_manifest(manifest_path)
    if not manifest.entries:
        raise DataError(f"{manifest_path}: manifest has no entries")
    first = dataio.load_image(manifest_path.parent / manifest.entries[0].ref_path)
    size = _get(cfg, f"{prefix}.size", first.shape[0], int)
    net_cfg = model.NetworkConfig(
        input_size=size,
        channel_scale=_get(cfg, f"{prefix}.channel-scale", scale, float))
    weights = weights_io.weights_to_tensors(loaded, net_cfg)
    return weights, net_cfg, manifest


def cmd_infer(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest_path = _get_path(cfg, "infer.manifest")
    weights, net_cfg, manifest = _load_model(cfg, manifest_path, "infer")
    lines = ["sequence, frame, pred_path, gt_path"]
    for e in manifest.entries:
        pair = dataio.load_pair(manifest_path, e)
        prob = model.infer_pair(weights, net_cfg, pair.reference, pair.deformed)
        name = f"{e.sequence_id}_{e.frame_index:04d}_pred.npy"
        np.save(out / name, prob.astype(np.float32))
        gt = "-"
        if e.gt_path is not None:
            gt = os.path.relpath(manifest_path.parent / e.gt_path, out)
        lines.append(f"{e.sequence_id}, {e.frame_index}, {name}, {gt}")
    _write(out / "predictions.txt", "\n".join(lines) + "\n")
    return 0


def _load_predictions(pred_manifest: Path):
    if not pred_manifest.exists():
        raise DataError(f"predictions manifest not found: {pred_manifest}")
    preds, gts, meta = [], [], []
    for n, raw in enumerate(pred_manifest.read_text().splitlines()):
        line = raw.strip()
        if not line or line.startswith("sequence,") or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"{pred_manifest}:{n + 1}: expected 4 fields, "
                              f"got {len(parts)}")
        sid, frame, pred_path, gt_path = parts
        pred_file = pred_manifest.parent / pred_path
        if not pred_file.exists():
            raise DataError(f"{pred_manifest}:{n + 1}: prediction file "
                            f"not found: {pred_file}")
        preds.append(np.load(pred_file))
        if gt_path != "-":
            raw_gt = dataio.load_image(pred_manifest.parent / gt_path)
            gts.append((raw_gt > 0).astype(np.uint8))
        meta.append((sid, int(frame), gt_path))
    return preds, gts, meta


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    preds, gts, _ = _load_predictions(_get_path(cfg, "eval.predictions"))
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} "
                        f"ground-truth maps")
    report = metrics.evaluate(preds, gts)
    _write(out / "eval_report.txt", metrics.format_report(report))
    _write(out / "pr_curve.csv", metrics.curve_csv(report))
    print(f"ods_f1 = {report.ods_f1!r} ois_f1 = {report.ois_f1!r}")
    return 0


# ----------------------------------------------------------------------
# noise


def cmd_noise(cfg: dict) -> int:
    out = _out_dir(cfg)
    manifest_path = _get_path(cfg, "noise.manifest")
    weights, net_cfg, manifest = _load_model(cfg, manifest_path, "noise")
    sigmas = [float(s) for s in str(cfg.get("noise.sigmas", "5,15,25")).split(",")]
    rng = stage_rng(cfg, "noise")
    lines = ["sigma, ods_f1, ods_threshold, ois_f1"]
    for sigma in sigmas:
        preds, gts = [], []
        for e in manifest.entries:
            if e.gt_path is None:
                raise DataError(f"{manifest_path}: entry {e.sequence_id}/"
                                f"{e.frame_index} has no ground truth")
            pair = dataio.load_pair(manifest_path, e)
            ref = dataio.inject_noise(pair.reference, sigma, rng)
            de = dataio.inject_noise(pair.deformed, sigma, rng)
            preds.append(model.infer_pair(weights, net_cfg, ref, de))
            gts.append(np.asarray(pair.gt))
        f, t = metrics.ods_f1(preds, gts)
        ois = metrics.ois_f1(preds, gts)
        lines.append(f"{sigma!r}, {f!r}, {t:.2f}, {ois!r}")
    _write(out / "noise_report.txt", "\n".join(lines) + "\n")
    return 0


# ----------------------------------------------------------------------
# speed


def cmd_speed(cfg: dict) -> int:
    out = _out_dir(cfg)
    axis = cfg.get("speed.axis", "up")
    threshold = _get(cfg, "speed.threshold", 0.5, float)
    tolerance = _get(cfg, "speed.tolerance-px", 2.0, float)
    if "speed.predictions" in cfg:
        preds, _, meta = _load_predictions(_get_path(cfg, "speed.predictions"))
        manifest_path = _get_path(cfg, "speed.manifest")
        manifest = dataio.load_manifest(manifest_path, check_files=False)
        by_key = {(e.sequence_id, e.frame_index): e for e in manifest.entries}
        groups = {}
        for prob, (sid, frame, _) in zip(preds, meta):
            entry = by_key.get((sid, frame))
            if entry is None:
                raise DataError(f"prediction {sid}/{frame} missing from "
                                f"{manifest_path}")
            groups.setdefault(sid, []).append((entry, prob >= threshold))
    else:
        manifest_path = _get_path(cfg, "speed.manifest")
        manifest = dataio.load_manifest(manifest_path)
        groups = {}
        for e in manifest.entries:
            if e.gt_path is None:
                raise DataError(f"{manifest_path}: entry {e.sequence_id}/"
                                f"{e.frame_index} has no ground truth")
            raw = dataio.load_image(manifest_path.parent / e.gt_path)
            groups.setdefault(e.sequence_id, []).append((e, raw > 0))
    summary = []
    for sid, items in sorted(groups.items()):
        entries = [e for e, _ in items]
        first_ref = dataio.load_image(manifest_path.parent / entries[0].ref_path)
        maps, times = [], []
        for e, mask in items:
            scale = (first_ref.shape[0] / mask.shape[0]
                     + first_ref.shape[1] / mask.shape[1]) / 2.0
            maps.append(dic.CrackEdgeMap(mask.astype(np.uint8),
                                         mm_per_px=e.mm_per_px * scale))
            times.append(e.timestamp_s)
        trace = speed.build_trace(maps, times, axis)
        report = speed.compute_speed(trace, tolerance_px=tolerance)
        _write(out / f"speed_{sid}.txt", speed.format_speed_report(report))
        summary.append(f"{sid}: mean_speed_mm_s = {report.mean_speed_mm_s!r}")
    print("\n".join(summary))
    return 0


# ----------------------------------------------------------------------
# wiring


_COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "noise": cmd_noise,
    "speed": cmd_speed,
}

# flag -> config key the flag overrides, per command
_FLAG_KEYS = {
    "sigma": {"noise": "noise.sigmas"},
    "threshold": {"label": "label.threshold", "speed": "speed.threshold"},
    "epochs": {"train": "train.epochs"},
    "channel_scale": {"train": "train.channel-scale",
                      "infer": "infer.channel-scale",
                      "noise": "noise.channel-scale"},
    "weights": {"train": "train.weights", "infer": "infer.weights",
                "noise": "noise.weights"},
    "manifest": {"label": "label.manifest", "train": "train.manifest",
                 "infer": "infer.manifest", "noise": "noise.manifest",
                 "speed": "speed.manifest"},
    "predictions": {"eval": "eval.predictions", "speed": "speed.predictions"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crackflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--sigma", default=None)
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--channel-scale", type=float, default=None,
                       dest="channel_scale")
        p.add_argument("--weights", type=Path, default=None)
        p.add_argument("--manifest", type=Path, default=None)
        p.add_argument("--predictions", type=Path, default=None)
    return parser


def _merge(args) -> dict:
    cfg = {}
    if args.config is not None:
        if not args.config.exists():
            raise DataError(f"config file not found: {args.config}")
        cfg = parse_config(args.config.read_text(), origin=str(args.config))
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    if args.out is not None:
        cfg["out"] = str(args.out)
    for flag, per_cmd in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        key = per_cmd.get(args.command)
        if key is None:
            raise ValueError(f"--{flag.replace('_', '-')} does not apply "
                             f"to {args.command}")
        cfg[key] = str(value)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        cfg = _merge(args)
        return _COMMANDS[args.command](cfg)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
