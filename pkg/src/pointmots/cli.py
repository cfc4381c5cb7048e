"""Command-line entry point: ``pointmots <subcommand> ...``.

Subcommands: gen, validate, train, track, eval, gradcheck, viz. Exit code 1
means the inputs were rejected (bad values, failed validation, failed
gradient check); exit code 2 means a file could not be read or written.

Settings come from an optional JSON file (``--config``) with the sections
``world``, ``sampler``, ``train`` and ``tracker``; explicit flags win over it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import embed_net, metric_learning
from .errors import CorruptFile, VersionMismatch
from .mask_geometry import (InstanceObservation, read_mask_lines, rle_decode, write_mask_lines)
from .mots_eval import EvalCounts, evaluate_sequence, motsa, smotsa, write_report
from .pipeline import Ablation, EmbeddingExtractor, track_sequence
from .pointcloud import SamplerConfig, encode_modalities, sample_points
from .synth_world import (WorldConfig, gen_dataset, list_sequences, load_sequence, make_palette,
                          validate_dataset, write_ppm)
from .tracker import TrackerConfig

log = logging.getLogger("pointmots")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _IoFailure(Exception):
    pass


# -- configuration -----------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise _IoFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(data) - {"world", "sampler", "train", "tracker"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return data


def _build(cls, section: dict, **flags):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in flags.items() if v is not None})
    return cls(**values)


def _sampler(args, cfg) -> SamplerConfig:
    return _build(SamplerConfig, cfg.get("sampler", {}), n_fg=args.n_fg, n_env=args.n_env,
                  k=args.k, num_classes=args.num_classes, rng_seed=args.seed)


def _tracker(args, cfg) -> TrackerConfig:
    return _build(TrackerConfig, cfg.get("tracker", {}), alpha=args.alpha, beta=args.beta,
                  gamma=args.gamma)


def _sequences(path) -> list:
    """A dataset root or a single sequence directory."""
    p = Path(path)
    if (p / "meta.json").is_file():
        return [p]
    if not p.is_dir():
        raise _IoFailure(f"{p}: no such dataset or sequence directory")
    seqs = list_sequences(p)
    if not seqs:
        raise _IoFailure(f"{p}: contains no sequences")
    return seqs


def _load_params(path, num_classes):
    try:
        return embed_net.load_params(path, num_classes=num_classes)
    except OSError as exc:
        raise _IoFailure(f"cannot read parameters {path}: {exc}") from exc


def _read_masks(path) -> list:
    try:
        return read_mask_lines(path)
    except OSError as exc:
        raise _IoFailure(f"cannot read mask file {path}: {exc}") from exc


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args, cfg) -> int:
    world = _build(WorldConfig, cfg.get("world", {}), rng_seed=args.seed, frames=args.frames,
                   min_objects=args.min_objects, max_objects=args.max_objects,
                   width=args.width, height=args.height, num_classes=args.num_classes)
    if args.no_occlusion:
        world = replace(world, allow_occlusion=False)
    out = Path(args.out)
    paths = gen_dataset(out, args.sequences, world, prefix=args.prefix, start_index=args.start)
    densities = [json.loads((p / "meta.json").read_text())["density"] for p in paths]
    print(f"wrote {len(paths)} sequences to {out}; mean density {np.mean(densities):.3f} instances/frame")
    problems = validate_dataset(out)
    for p in problems:
        print(f"invalid: {p}", file=sys.stderr)
    return EXIT_INVALID if problems else EXIT_OK


def cmd_validate(args, cfg) -> int:
    if not Path(args.data).is_dir():
        raise _IoFailure(f"{args.data}: not a directory")
    problems = validate_dataset(args.data)
    for p in problems:
        print(f"invalid: {p}")
    print("clean" if not problems else f"{len(problems)} problem(s)")
    return EXIT_INVALID if problems else EXIT_OK


def cmd_train(args, cfg) -> int:
    sampler = _sampler(args, cfg)
    tcfg = _build(metric_learning.TrainConfig, cfg.get("train", {}), epochs=args.epochs, lr=args.lr,
                  margin=args.margin, ids_per_batch=args.ids_per_batch, rng_seed=args.seed,
                  batches_per_epoch=args.batches_per_epoch)
    seqs = [load_sequence(p) for p in _sequences(args.data)]
    db = metric_learning.build_crop_database(((s.name, s.frames()) for s in seqs), sampler.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def report(epoch, loss, _params):
        print(f"epoch {epoch:3d} mean loss {loss:.6f} ({time.perf_counter() - t0:.1f} s)", flush=True)

    params, curve = metric_learning.train(
        db, tcfg, sampler, checkpoint_dir=out / "checkpoints" if args.checkpoints else None,
        threads=args.threads, on_epoch=report)
    embed_net.save_params(params, out / "params.bin")
    metric_learning.write_loss_curve(out / "loss_curve.csv", curve)
    tcfg.to_json(out / "train_config.json")
    (out / "sampler_config.json").write_text(json.dumps(asdict(sampler), indent=2, sort_keys=True) + "\n")
    print(f"{len(db.eligible())} training tracks; parameters written to {out / 'params.bin'}")
    return EXIT_OK


def _ablation(names) -> Ablation:
    ab = Ablation()
    for name in names or []:
        if name not in {f.name for f in fields(Ablation)}:
            raise ValueError(f"unknown ablation {name!r}")
        setattr(ab, name, True)
    return ab


def cmd_track(args, cfg) -> int:
    sampler = _sampler(args, cfg)
    tcfg = _tracker(args, cfg)
    seqs = _sequences(args.data)
    if args.masks and len(seqs) != 1:
        raise ValueError("--masks needs --data to name a single sequence")
    params = _load_params(args.params, sampler.num_classes)
    extractor = EmbeddingExtractor(params, sampler, seed=args.seed, threads=args.threads,
                                   ablation=_ablation(args.ablate))
    out = Path(args.out)
    single = len(seqs) == 1 and out.suffix == ".txt"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for p in seqs:
        seq = load_sequence(p)
        dets = _read_masks(args.masks) if args.masks else None
        hyp = track_sequence(seq, extractor, tcfg, detections=dets)
        target = out if single else out / f"{seq.name}.txt"
        write_mask_lines(target, hyp)
        print(f"{seq.name}: {len({o.track_id for o in hyp})} tracks -> {target}")
    med = extractor.median_latency_ms()
    if med is not None:
        print(f"median embedding extraction latency: {med:.3f} ms/instance "
              f"over {len(extractor.latencies)} instances")
    return EXIT_OK


def _eval_pairs(gt, hyp) -> list:
    """``(name, gt observations, hyp observations)`` for file or directory inputs."""
    gt, hyp = Path(gt), Path(hyp)
    if gt.is_file():
        if not hyp.is_file():
            raise _IoFailure(f"{hyp}: not a file (ground truth {gt} is a file)")
        return [(gt.stem, _read_masks(gt), _read_masks(hyp))]
    pairs = []
    for p in _sequences(gt):
        h = hyp / f"{p.name}.txt" if hyp.is_dir() else hyp
        if not h.is_file():
            raise _IoFailure(f"{h}: missing hypothesis for sequence {p.name}")
        pairs.append((p.name, _read_masks(p / "instances.txt"), _read_masks(h)))
    return pairs


def cmd_eval(args, cfg) -> int:
    rows = []
    total = EvalCounts()
    for name, g, h in _eval_pairs(args.gt, args.hyp):
        c = evaluate_sequence(g, h)
        rows.append((name, c))
        total = total + c
    if len(rows) > 1:
        rows.append(("ALL", total))
    if args.report:
        write_report(args.report, rows)
    for name, c in rows:
        print(f"{name}: sMOTSA {smotsa(c):.4f} MOTSA {motsa(c):.4f} IDS {c.ids} "
              f"TP {c.tp} FP {c.fp} FN {c.fn}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    params, fg, env, pos, labels = metric_learning.reference_tiny_setup(seed=args.batch_seed)
    t0 = time.perf_counter()
    err, n = metric_learning.gradient_check(params, fg, env, pos, labels, h=args.h)
    elapsed = time.perf_counter() - t0
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} over {n} parameters ({elapsed:.1f} s): "
          f"{'ok' if ok else 'FAILED'} (tolerance {args.tolerance:g})")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"max_relative_error": err, "parameters_checked": n, "h": args.h,
             "batch_seed": args.batch_seed},
            indent=2, sort_keys=True) + "\n")
    return EXIT_OK if ok else EXIT_INVALID


def _overlay(image, observations, palette) -> np.ndarray:
    out = image.astype(np.float64)
    for o in observations:
        sel = rle_decode(o.mask).astype(bool)
        color = palette[(o.track_id or 0) % len(palette)]
        out[sel] = 0.45 * out[sel] + 0.55 * color
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def cmd_viz(args, cfg) -> int:
    sampler = _sampler(args, cfg)
    seqs = _sequences(args.data)
    if len(seqs) != 1:
        raise ValueError("viz takes a single sequence directory")
    seq = load_sequence(seqs[0])
    params = _load_params(args.params, sampler.num_classes)
    tracked = _read_masks(args.hyp) if args.hyp else seq.instances
    by_frame: dict = {}
    for o in tracked:
        by_frame.setdefault(o.frame_index, []).append(o)
    palette = make_palette(24)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = range(seq.n_frames) if args.frames is None else range(min(args.frames, seq.n_frames))
    for t in frames:
        image, cls = seq.image(t), seq.class_map(t)
        obs = by_frame.get(t, [])
        write_ppm(out / f"overlay_{t:06d}.ppm", _overlay(image, obs, palette))
        dump = []
        for i, o in enumerate(obs):
            rng = np.random.default_rng([args.seed, t, i])
            pc = sample_points(image, cls, InstanceObservation(t, o.class_id, o.mask), sampler, rng)
            mod = encode_modalities(pc, sampler.num_classes, sampler.normalize)
            _, trace = embed_net.forward(params, mod.fg_features, mod.env_features, mod.position)
            top = embed_net.top_weight_indices(trace, 0.1)
            crit = embed_net.critical_env_indices(trace, 5)
            dump.append({
                "track_id": o.track_id,
                "class_id": o.class_id,
                "crop_box": [pc.crop_box.x0, pc.crop_box.y0, pc.crop_box.x1, pc.crop_box.y1],
                "top_weighted_points": pc.fg_uv[top].astype(int).tolist(),
                "critical_env_points": pc.env_uv[crit].astype(int).tolist(),
            })
        (out / f"points_{t:06d}.json").write_text(json.dumps(dump, indent=1) + "\n")
    print(f"wrote {len(frames)} overlays and point dumps to {out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with world/sampler/train/tracker sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--n-fg", type=int)
    sampling.add_argument("--n-env", type=int)
    sampling.add_argument("--k", type=float)
    sampling.add_argument("--num-classes", type=int)

    parser = argparse.ArgumentParser(prog="pointmots", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--start", type=int, default=0, help="index of the first sequence")
    p.add_argument("--prefix", default="seq")
    p.add_argument("--frames", type=int)
    p.add_argument("--min-objects", type=int)
    p.add_argument("--max-objects", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--no-occlusion", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", parents=[common], help="check a dataset's invariants")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", parents=[common, sampling], help="train the embedding network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--ids-per-batch", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--checkpoints", action="store_true", help="save parameters after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common, sampling], help="track instance masks")
    p.add_argument("--data", required=True, help="sequence directory or dataset root (images)")
    p.add_argument("--params", required=True)
    p.add_argument("--masks", help="detections to track (default: the sequence's masks, ids dropped)")
    p.add_argument("--out", required=True, help="result file (*.txt, single sequence) or directory")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--ablate", nargs="*", help="zero modalities: color position offset category embedding")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="CLEAR-MOTS evaluation")
    p.add_argument("--gt", required=True, help="mask file or dataset root")
    p.add_argument("--hyp", required=True, help="mask file or directory of <sequence>.txt")
    p.add_argument("--report", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--batch-seed", type=int, default=0,
                   help="input batch of the tiny net; 0 is the reference batch (others may put a "
                        "ReLU kink within h and report a spurious error)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="JSON result path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz", parents=[common, sampling], help="overlays and critical points")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--params", required=True)
    p.add_argument("--hyp", help="tracked mask file (default: ground truth)")
    p.add_argument("--frames", type=int, help="only the first N frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = _load_config(args.config)
        # parallelism comes from our own worker pools; single-threaded BLAS
        # keeps every reduction order, and hence every output byte, fixed
        with threadpool_limits(limits=1):
            return args.func(args, cfg)
    except (_IoFailure, OSError, CorruptFile, VersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
