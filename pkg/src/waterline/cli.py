"""Command-line entry point: ``waterline {synth,train,detect,eval,report}``.

Every random draw derives from the single ``--seed`` through
:func:`derive_seed`, so one number reproduces a whole run. Options may also
come from a ``key = value`` file passed with ``--config``; command-line flags
take precedence over the file, and the file over the preset defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import pnm
from .detector import (MARK_MODES, DetectorConfig, NetworkClassifier, connect_marks,
                       detect_stream, read_frame_dir, read_marks_csv, write_marks_csv)
from .metrics import (DEFAULT_LAMBDA, RECALL_MODES, GroundTruth, MetricReport, evaluate_map,
                      read_anchor_csv, write_anchor_csv, write_report_csv)
from .netbuilder import (GanSpec, NetworkSpec, build_wldetectnet, build_wlgeneratenet, conv_toy,
                         count_conv_layers, count_flops, count_params)
from .synth import (OracleClassifier, PatchDataset, SceneParams, random_scene_params,
                    synth_patch_dataset, synth_scene)
from .training import (Stage, TrainSchedule, gan_alternating_step, generate_filtered_samples,
                       train_two_stage)
from .weightfile import WeightFileError, loads, read_header, save_weights

log = logging.getLogger("waterline")

# Published figures the accounting report is compared against.
CLAIMED_MFLOPS = 3.12
CLAIMED_CONV_LAYERS = 72

PRESETS: Dict[str, Dict[str, object]] = {
    "paper": dict(r=60, s=30, stride=30, width=320, height=240, patch_size=64,
                  train_scenes=16, n_pos=3000, n_neg=3000, n_pos2=9000, n_neg2=9000,
                  epochs="30,50", lr="0.05,0.01"),
    "desk": dict(r=16, s=8, stride=4, width=128, height=64, patch_size=16,
                 train_scenes=8, n_pos=200, n_neg=240, n_pos2=200, n_neg2=240,
                 epochs="10,10", lr="0.01,0.005"),
}


class CLIError(RuntimeError):
    """A contract violation reported with a nonzero exit status."""


def derive_seed(seed: int, tag: str) -> int:
    """63-bit seed for one role, hashed from the master seed and a fixed tag."""
    digest = hashlib.blake2b(f"{int(seed)}/{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def network_spec(preset: str, patch_size: int) -> NetworkSpec:
    base = NetworkSpec.desk() if preset == "desk" else NetworkSpec()
    return dataclasses.replace(base, input_shape=(3, patch_size, patch_size))


def read_config(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CLIError(f"cannot read {text!r} as a boolean")


# ---------------------------------------------------------------------------
# argument parsing

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="parallel window classifications (default: CPU count)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper",
                   help="geometry and schedule defaults (default: paper)")
    p.add_argument("-v", "--verbose", action="store_true")


def _detection(p: argparse.ArgumentParser) -> None:
    p.add_argument("--r", type=int, help="observing-field side (preset default)")
    p.add_argument("--s", type=int, help="recognizing-field side (preset default)")
    p.add_argument("--stride", type=int, help="scan stride h (preset default)")
    p.add_argument("--sample-rate", type=int, default=1, help="keep every f-th frame")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                   help="match distance in pixels (default 10)")
    p.add_argument("--weights", help="weight file for the detector network")
    p.add_argument("--mark-mode", choices=MARK_MODES, default="polyline")


def build_parser():
    parser = argparse.ArgumentParser(prog="waterline", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("synth", help="render scenes, anchors and labelled patch sets")
    _shared(p)
    _detection(p)
    p.add_argument("--frames", type=int, default=6, help="held-out frames to render")
    p.add_argument("--train-scenes", type=int, help="scenes the patch sets are cut from")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian pixel noise sigma")
    p.add_argument("--texture", action="store_true", help="add ripple and speckle textures")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--n-pos", type=int, help="stage-1 positives")
    p.add_argument("--n-neg", type=int, help="stage-1 negatives")
    p.add_argument("--n-pos2", type=int, help="stage-2 positives")
    p.add_argument("--n-neg2", type=int, help="stage-2 negatives")
    p.add_argument("--n-hard", type=int, default=0, help="extra near-boundary negatives per stage")
    subs["synth"] = p

    p = sub.add_parser("train", help="two-stage training of the detector network")
    _shared(p)
    p.add_argument("--data", required=True, help="directory written by 'synth'")
    p.add_argument("--epochs", help="comma-separated epochs per stage")
    p.add_argument("--lr", help="comma-separated learning rate per stage")
    p.add_argument("--batch-size", type=int, default=60)
    p.add_argument("--clip", type=float, help="global gradient-norm clip (off by default)")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="write a checkpoint every N epochs (0: only the final weights)")
    p.add_argument("--gan-samples", type=int, default=0,
                   help="generator-made positives added to stage 2 (default 0)")
    p.add_argument("--gan-steps", type=int, default=200)
    p.add_argument("--gan-lr", type=float, default=0.05)
    subs["train"] = p

    p = sub.add_parser("detect", help="scan frames and write marks plus annotated maps")
    _shared(p)
    _detection(p)
    p.add_argument("--frames", required=True, help="frame directory (or a 'synth' output)")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--oracle", action="store_true",
                   help="classify windows from the scene geometry in manifest.json")
    p.add_argument("--manifest", help="manifest.json for --oracle and ground-truth overlay")
    p.add_argument("--anchors", help="anchor CSV drawn in red on the maps")
    subs["detect"] = p

    p = sub.add_parser("eval", help="per-frame metrics of marks against anchors")
    _shared(p)
    _detection(p)
    p.add_argument("--marks", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--recall-mode", choices=RECALL_MODES, default="literal")
    subs["eval"] = p

    p = sub.add_parser("report", help="parameter, MAC and layer accounting")
    _shared(p)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--toy", action="store_true", help="single 3x3 conv, 3 -> 64, on 64x64")
    subs["report"] = p
    return parser, subs


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = subs[args.command]
        actions = {a.dest: a for a in sp._actions}
        for a in sp._actions:
            for opt in a.option_strings:
                if opt.startswith("--"):
                    actions.setdefault(opt[2:].replace("-", "_"), a)
        values = read_config(args.config)
        defaults = {}
        for key, value in values.items():
            if key not in actions or key in ("help", "config"):
                raise CLIError(f"{args.config}: unknown option {key!r} for '{args.command}'")
            action = actions[key]
            if isinstance(action.default, bool):
                defaults[action.dest] = _parse_bool(value)
            else:
                defaults[action.dest] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for key, value in PRESETS[args.preset].items():
        if getattr(args, key, "absent") is None:
            setattr(args, key, value)
    return args


def _floats(text: str, n: int, name: str) -> List[float]:
    parts = [p for p in str(text).split(",") if p.strip()]
    if len(parts) != n:
        raise CLIError(f"--{name} needs {n} comma-separated values, got {text!r}")
    return [float(p) for p in parts]


# ---------------------------------------------------------------------------
# synth

def _save_dataset(out: Path, tag: str, data: PatchDataset) -> Dict[str, object]:
    files = {}
    for field in ("x", "y", "centers", "scene"):
        name = f"{tag}_{field}.npy"
        arr = getattr(data, field)
        if field == "x":
            arr = arr.astype(np.float32)  # halves the footprint of the larger presets
        np.save(out / name, arr, allow_pickle=False)
        files[field] = name
    return {"n": len(data), "n_pos": int(data.y.sum()), "n_neg": int(len(data) - data.y.sum()),
            "files": files}


def load_dataset(root: Path, entry: Dict[str, object]) -> PatchDataset:
    files = entry["files"]
    x, y, centers, scene = (np.load(root / files[k], allow_pickle=False)
                            for k in ("x", "y", "centers", "scene"))
    return PatchDataset(x.astype(np.float64), y, centers, scene)


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    margin = max(16, (args.r + args.s) // 2 + 1)
    seeds = {role: derive_seed(args.seed, role)
             for role in ("test-scenes", "train-scenes", "stage-1", "stage-2")}

    def scenes(role, n):
        rng = np.random.default_rng(seeds[role])
        return [random_scene_params(rng, args.width, args.height, margin, args.noise, args.texture)
                for _ in range(n)]

    test = scenes("test-scenes", args.frames)
    train = scenes("train-scenes", args.train_scenes)
    names, anchors = [], {}
    for i, params in enumerate(test):
        scene = synth_scene(params)
        name = f"frame_{i:06d}.ppm"
        pnm.write(out / "frames" / name, scene.image)
        names.append(name)
        anchors[i] = scene.anchors
    write_anchor_csv(out / "anchors.csv", anchors)

    stage1 = synth_patch_dataset(train, args.n_pos, args.n_neg, args.r, args.s, args.patch_size,
                                 seeds["stage-1"], n_hard=args.n_hard)
    stage2 = synth_patch_dataset(train, args.n_pos2, args.n_neg2, args.r, args.s, args.patch_size,
                                 seeds["stage-2"], n_hard=args.n_hard)
    manifest = {
        "preset": args.preset, "seed": args.seed, "seeds": seeds,
        "r": args.r, "s": args.s, "patch_size": args.patch_size,
        "frames": names, "anchors": "anchors.csv",
        "scenes": [dataclasses.asdict(p) for p in test],
        "train_scenes": [dataclasses.asdict(p) for p in train],
        "datasets": {"stage1": _save_dataset(out, "stage1", stage1),
                     "stage2": _save_dataset(out, "stage2", stage2)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(names)} frames, {len(stage1)} + {len(stage2)} patches to {out}")
    return 0


def _scene_from_dict(d: Dict[str, object]) -> SceneParams:
    d = dict(d)
    for key in ("land_color", "water_color"):
        d[key] = tuple(d[key])
    return SceneParams(**d)


# ---------------------------------------------------------------------------
# train

def _gan_positives(args, positives: np.ndarray, size: int) -> np.ndarray:
    if size % 4:
        raise CLIError(f"generator augmentation needs a patch size divisible by 4, got {size}")
    spec = GanSpec(noise_dim=16, image_shape=(3, size, size), base_channels=16, upsamples=2,
                   hidden=16)
    G, D = build_wlgeneratenet(spec, derive_seed(args.seed, "gan-init"))
    rng = np.random.default_rng(derive_seed(args.seed, "gan"))
    for _ in range(args.gan_steps):
        batch = positives[rng.choice(len(positives), size=min(16, len(positives)), replace=False)]
        gan_alternating_step(G, D, batch, rng, args.gan_lr, args.gan_lr)
    samples, stats = generate_filtered_samples(G, D, args.gan_samples, rng)
    print(f"generator: {stats.accepted}/{stats.requested} samples accepted, "
          f"acceptance rate {stats.acceptance_rate:.3f}")
    return samples


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "mean_loss", "accuracy"])
        for h in history:
            w.writerow([h.stage, h.epoch, repr(float(h.mean_loss)), repr(float(h.accuracy))])


def cmd_train(args) -> int:
    from .plotting import plot_loss_history

    data = Path(args.data)
    manifest = json.loads((data / "manifest.json").read_text())
    size = int(manifest["patch_size"])
    stage1 = load_dataset(data, manifest["datasets"]["stage1"])
    stage2 = load_dataset(data, manifest["datasets"]["stage2"])
    if args.gan_samples:
        fake = _gan_positives(args, stage1.x[stage1.y == 1], size)
        if len(fake):
            n = len(fake)
            stage2 = stage2.concat(PatchDataset(fake, np.ones(n, dtype=np.int64),
                                                np.full((n, 2), -1, dtype=np.int64),
                                                np.full(n, -1, dtype=np.int64)))
    epochs = [int(e) for e in _floats(args.epochs, 2, "epochs")]
    lrs = _floats(args.lr, 2, "lr")
    schedule = TrainSchedule(tuple(
        Stage(epochs[i], lrs[i], args.batch_size, derive_seed(args.seed, f"shuffle-{i + 1}"),
              f"stage-{i + 1}") for i in range(2)), clip=args.clip)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = build_wldetectnet(network_spec(args.preset, size), derive_seed(args.seed, "init"))

    def checkpoint(rec, network):
        if args.checkpoint_every and rec.epoch % args.checkpoint_every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_weights(network, out / "checkpoints" / f"stage{rec.stage}_epoch{rec.epoch:03d}.wldn")

    result = train_two_stage(net, schedule, stage1, stage2, on_epoch=checkpoint)
    write_loss_csv(out / "loss.csv", result.history)
    if result.history:
        plot_loss_history(result.history, out / "loss.png")
    save_weights(result.network, out / "weights.wldn")
    if result.aborted:
        raise CLIError(f"training aborted: {result.message}")
    if result.history:
        last = result.history[-1]
        print(f"final epoch: mean loss {last.mean_loss:.5f}, accuracy {last.accuracy:.3f}")
    print(f"weights fingerprint {net.fingerprint:016x} written to {out / 'weights.wldn'}")
    return 0


# ---------------------------------------------------------------------------
# detect

def _frame_dir(path: Path) -> Path:
    return path / "frames" if (path / "frames").is_dir() else path


def load_detector(args, spec: NetworkSpec):
    if not args.weights:
        raise CLIError("detect needs --weights, or --oracle for the geometric stub")
    blob = Path(args.weights).read_bytes()
    _, stored, _ = read_header(blob)
    expected = spec.architecture().fingerprint()
    if stored != expected:
        raise CLIError(f"refusing {args.weights}: weight fingerprint {stored:016x} does not match "
                       f"the {args.preset} architecture fingerprint {expected:016x} "
                       f"(input {spec.input_shape[1]}x{spec.input_shape[2]})")
    return loads(spec, blob)


def cmd_detect(args) -> int:
    root = Path(args.frames)
    frame_dir = _frame_dir(root)
    frames = read_frame_dir(frame_dir)
    if not frames:
        raise CLIError(f"no PPM/PGM frames in {frame_dir}")
    manifest_path = Path(args.manifest) if args.manifest else root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else None
    config = DetectorConfig(args.r, args.s, args.stride, args.sample_rate, args.mark_mode,
                            patch_size=args.patch_size)
    if args.oracle:
        if manifest is None:
            raise CLIError(f"--oracle needs scene geometry; {manifest_path} not found")
        classifier = OracleClassifier([_scene_from_dict(d) for d in manifest["scenes"]],
                                      args.r, args.s)
    else:
        classifier = NetworkClassifier(load_detector(args, network_spec(args.preset,
                                                                        args.patch_size)))
    truth = {}
    anchor_path = Path(args.anchors) if args.anchors else (
        root / "anchors.csv" if (root / "anchors.csv").is_file() else None)
    if anchor_path is not None:
        truth = {k: GroundTruth.from_anchors(v).pixels
                 for k, v in read_anchor_csv(anchor_path).items()}

    maps = detect_stream([img for _, img in frames], config, classifier, args.workers)
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    for m in maps:
        name, img = frames[m.frame_index]
        pnm.write(out / "maps" / (Path(name).stem + ".ppm"), m.render(img, truth.get(m.frame_index)))
    write_marks_csv(out / "marks.csv", maps)
    total = sum(len(m.marks) for m in maps)
    print(f"{len(maps)} of {len(frames)} frames scanned, {total} marks written to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def evaluate_files(marks_path, anchors_path, lam: float = DEFAULT_LAMBDA,
                   mark_mode: str = "polyline", recall_mode: str = "literal",
                   sample_rate: int = 1):
    """Per-frame reports plus the frames present in the marks but absent from the anchors."""
    marks = read_marks_csv(marks_path)
    anchors = read_anchor_csv(anchors_path)
    frames = sorted({k for k in anchors if k % sample_rate == 0} | set(marks))
    reports, missing = [], []
    for k in frames:
        if k not in anchors:
            missing.append(k)
            reports.append(MetricReport(k, None, None, None, None, None, lam,
                                        len(marks[k]), 0))
            continue
        est = connect_marks(marks.get(k, []), mark_mode, k).pixels
        reports.append(evaluate_map(est, GroundTruth.from_anchors(anchors[k]), lam, k,
                                    recall_mode))
    return reports, missing


def cmd_eval(args) -> int:
    from .plotting import plot_frame_metrics

    reports, missing = evaluate_files(args.marks, args.anchors, args.lam, args.mark_mode,
                                      args.recall_mode, args.sample_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "metrics.csv", reports)
    if reports:
        plot_frame_metrics(reports, out / "metrics.png")

    def fmt(v):
        return "NA" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)

    print("frame  precision  recall  f1      fp    irrelevance")
    for r in reports:
        print(f"{r.frame:<6} {fmt(r.precision):<10} {fmt(r.recall):<7} {fmt(r.f1):<7} "
              f"{fmt(r.fp):<5} {fmt(r.irrelevance)}")
    if missing:
        raise CLIError(f"frames {missing} have marks but no anchors in {args.anchors}")
    return 0


# ---------------------------------------------------------------------------
# report

def _shape(s) -> str:
    return "x".join(str(v) for v in s)


def cmd_report(args) -> int:
    from .plotting import plot_layer_macs

    if args.toy:
        target, label = conv_toy(), "toy 3x3 conv 3->64 on 64x64"
    else:
        target = network_spec(args.preset, args.patch_size).architecture()
        label = f"{args.preset} preset, input {_shape(target.input_shape)}"
    report = count_flops(target)
    compare = not args.toy and args.preset == "paper" and args.patch_size == 64
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "layers.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "kind", "category", "in_shape", "out_shape", "kernel", "stride",
                    "groups", "params", "macs", "elementwise_ops"])
        for r in report.rows:
            w.writerow([r.name, r.kind, report.category(r.kind), _shape(r.in_shape),
                        _shape(r.out_shape), _shape(r.kernel), r.stride, r.groups, r.params,
                        r.macs, r.elementwise_ops])

    mflops = report.total_flops / 1e6
    summary = [
        ("params", count_params(target), None),
        ("conv_layers", count_conv_layers(target), CLAIMED_CONV_LAYERS if compare else None),
        ("conv_layers_with_fc", count_conv_layers(target, include_fc=True), None),
        ("conv_macs", report.conv_macs, None),
        ("se_macs", report.se_macs, None),
        ("fc_macs", report.fc_macs, None),
        ("total_macs", report.total_macs, None),
        ("activation_ops", report.activation_ops, None),
        ("mflops", round(mflops, 6), CLAIMED_MFLOPS if compare else None),
    ]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "counted", "published"])
        for name, counted, published in summary:
            w.writerow([name, counted, "NA" if published is None else published])
    plot_layer_macs(report, out / "layer_macs.png", title=f"MACs per layer ({label})")

    print(f"architecture: {label}")
    print(f"{'layer':<28} {'kind':<13} {'out':<12} {'params':>9} {'MACs':>12}")
    for r in report.rows:
        if r.params or r.macs:
            print(f"{r.name:<28} {r.kind:<13} {_shape(r.out_shape):<12} {r.params:>9} {r.macs:>12}")
    print()
    for name, counted, published in summary:
        line = f"{name:<22} {counted}"
        if published is not None:
            line += f"  (published: {published}; counted/published = {counted / published:.2f})"
        print(line)
    if compare:
        print(f"note: the counted cost, {mflops:.2f} MFLOPs (2 x MACs), is far from the "
              f"published figure of about {CLAIMED_MFLOPS} MFLOPs, and the default policy counts "
              f"{count_conv_layers(target)} convolutional layers, not {CLAIMED_CONV_LAYERS}.")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval,
            "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except CLIError as exc:
        print(f"waterline: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CLIError, WeightFileError, ValueError, OSError) as exc:
        print(f"waterline: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
