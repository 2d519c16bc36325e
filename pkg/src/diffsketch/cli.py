"""Command-line entry point: ``diffsketch <command> ...``.

Exit codes: 0 ok, 1 usage, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__, checkpoint
from .backends import edge_sketch, make_backend
from .cdst import fit_condition_distribution, load_distribution
from .feature_store import ArchiveError, Image, Sketch, TripletDatum, load_archive, save_archive

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
DIST_SAMPLES = 1000

log = logging.getLogger("diffsketch")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative integer, got {v}")
    return v


# -- image I/O -------------------------------------------------------------------


def read_png(path: str | os.PathLike, mode: str = "RGB") -> np.ndarray:
    from PIL import Image as PILImage

    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such image: {path}")
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    return arr if arr.ndim == 3 else arr[:, :, None]


def write_png(path: str | os.PathLike, pixels: np.ndarray) -> None:
    from PIL import Image as PILImage

    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path, format="PNG")
    else:
        PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


# -- run manifest ------------------------------------------------------------------


def _timestamp(wall_clock: bool) -> str:
    """Fixed time unless asked otherwise, so reruns stay byte-identical."""
    if wall_clock:
        t = time.time()
    else:
        t = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _digest(path: Path) -> str:
    if path.is_file():
        return checkpoint.file_digest(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file() and not q.name.endswith(MANIFEST_NAME)):
        h.update(str(p.relative_to(path)).encode())
        h.update(checkpoint.file_digest(p).encode())
    return h.hexdigest()


def manifest_path(out: str | os.PathLike) -> Path:
    """``DIR/run_manifest.json`` for directory outputs, ``FILE.manifest.json`` for file outputs."""
    out = Path(out)
    return out / MANIFEST_NAME if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def write_run_manifest(path: Path, command: str, args: argparse.Namespace, inputs, outputs, started: str) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    config_bytes = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "config_digest": hashlib.sha256(config_bytes).hexdigest(),
        "seed": args.seed,
        "backend": os.environ.get("DIFFSKETCH_BACKEND", "toy"),
        "inputs": {str(p): _digest(Path(p)) for p in inputs if Path(p).exists()},
        "outputs": {str(p): _digest(Path(p)) for p in outputs},
        "timestamps": {"started": started, "finished": _timestamp(args.wall_clock)},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.dump_json(manifest, path)


def _load_triplet(path) -> TripletDatum:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such triplet archive: {path}")
    return load_archive(path)


def _archive_dirs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "manifest.json").is_file():
            out.append(p)
        elif p.is_dir():
            found = sorted(q.parent for q in p.glob("*/manifest.json"))
            if not found:
                raise InputError(f"no archives under {p}")
            out.extend(found)
        else:
            raise InputError(f"no such archive: {p}")
    return out


def _reference_distribution(backend, seed: int):
    return fit_condition_distribution(backend.sample_conditions(DIST_SAMPLES, seed))


# -- commands ---------------------------------------------------------------------


def cmd_generate(args) -> list:
    """Toy data: archives whose sketch is an edge map of the generated image."""
    backend = make_backend()
    dist = _reference_distribution(backend, args.seed)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    outputs = []
    for i in range(args.n):
        cond = dist.draw(rng)
        s = int(rng.integers(2**31))
        img, traj, pyr = backend.generate(cond, s)
        datum = TripletDatum(traj, pyr, img, edge_sketch(img), condition=cond.astype(np.float32), seed=s)
        dest = out / f"archive_{i:04d}"
        save_archive(datum, dest)
        outputs.append(dest)
    return [], outputs


def cmd_analyze(args):
    from .plotting import selection_figure
    from .selection import run_selection

    dirs = _archive_dirs(args.archives)
    trajs = [load_archive(d).trajectory for d in dirs]
    report = run_selection(trajs, pca_dim=args.pca_dim, seed=args.seed, k=args.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.dumps())
    fig = out.with_suffix(".png")
    selection_figure(report, fig)
    print(f"k={report.k} timesteps={report.timesteps}")
    print(f"score selected={report.score_selected:.4f} equal={report.score_equal:.4f} random={report.score_random:.4f}")
    return dirs, [out, fig]


def _train_config(args):
    from .trainer import TrainConfig

    if args.config is None:
        config = TrainConfig(seed=args.seed)
    else:
        p = Path(args.config)
        if not p.is_file():
            raise InputError(f"no such config: {p}")
        obj = json.loads(p.read_text())
        obj["seed"] = args.seed
        config = TrainConfig.from_json(obj)
    if args.iterations is not None:
        config.iterations = args.iterations
    return config


def cmd_train(args):
    from .plotting import loss_figure
    from .selection import SelectionReport
    from .trainer import Trainer, write_loss_log

    triplet = _load_triplet(args.triplet)
    if triplet.condition is None:
        raise InputError(f"triplet archive {args.triplet} has no condition blob")
    sel = Path(args.selection)
    if not sel.is_file():
        raise InputError(f"no such selection report: {sel}")
    report = SelectionReport.from_json(json.loads(sel.read_text()))
    config = _train_config(args)
    backend = make_backend()
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, backend, triplet, config)
    else:
        dist = load_distribution(args.dist) if args.dist else _reference_distribution(backend, args.seed)
        trainer = Trainer(backend, triplet, triplet.condition, dist, report.timesteps, config)
    trainer.run(checkpoint_every=args.checkpoint_every, checkpoint_dir=out / "checkpoints" if args.checkpoint_every else None)
    trainer.save(out)
    write_loss_log(trainer.log, out / "loss_log.jsonl")
    loss_figure(trainer.log, out / "loss_curve.png")
    last = trainer.log[-1] if trainer.log else {}
    print(f"iterations={trainer.iteration} final_total={last.get('total', float('nan')):.6f}")
    inputs = [args.triplet, sel] + ([args.config] if args.config else []) + ([args.resume] if args.resume else [])
    return inputs, [out / checkpoint.WEIGHTS_NAME, out / checkpoint.CONFIG_NAME, out / "loss_log.jsonl", out / "loss_curve.png"]


def cmd_sample_pairs(args):
    from .distiller import generate_dataset, save_dataset
    from .trainer import load_generator

    ckpt = Path(args.ckpt)
    if not (ckpt / checkpoint.WEIGHTS_NAME).is_file():
        raise InputError(f"no generator checkpoint at {ckpt}")
    teacher, meta = load_generator(ckpt)
    dist = load_distribution(ckpt / "distribution")
    backend = make_backend()
    ds = generate_dataset(
        teacher, backend, args.n, args.S, args.seed, dist, np.asarray(meta["condition"]),
        teacher_digest=checkpoint.file_digest(ckpt / checkpoint.WEIGHTS_NAME),
    )
    out = Path(args.out)
    save_dataset(ds, out)
    print(f"pairs={len(ds)} skipped={len(ds.provenance['failures'])}")
    return [ckpt], [out]


def cmd_distill(args):
    from .distiller import build_student, load_dataset, save_student, train_student
    from .plotting import loss_figure

    pairs = Path(args.pairs)
    if not pairs.is_dir():
        raise InputError(f"no such pair dataset: {pairs}")
    ds = load_dataset(pairs)
    if len(ds) == 0:
        raise InputError(f"pair dataset {pairs} is empty")
    gt = _load_triplet(args.gt)
    torch.manual_seed(args.seed)
    student = build_student(args.width, seed=args.seed)
    run = train_student(
        student, ds, (gt.source, gt.sketch), epochs=args.epochs, reg_every=args.reg_every,
        batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
    )
    out = Path(args.out)
    save_student(student, out, {"iterations": run.iterations, "injections": len(run.injections)})
    loss_figure([{"iter": i, "l1": v} for i, v in enumerate(run.losses)], out / "loss_curve.png", keys=("l1",))
    print(f"iterations={run.iterations} injections={len(run.injections)} final_l1={run.losses[-1]:.6f}")
    return [pairs, args.gt], [out / checkpoint.WEIGHTS_NAME, out / checkpoint.CONFIG_NAME, out / "loss_curve.png"]


def cmd_extract(args):
    from .distiller import load_student

    ckpt = Path(args.ckpt)
    if not (ckpt / checkpoint.WEIGHTS_NAME).is_file():
        raise InputError(f"no student checkpoint at {ckpt}")
    student, _ = load_student(ckpt)
    image = Image(read_png(args.image))
    sketch = student.apply_image(image)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, sketch.pixels)
    return [ckpt, args.image], [out]


def cmd_eval(args):
    from .adapters import make_perceptual
    from .metrics import evaluate, records_to_csv, records_to_rows
    from .plotting import metrics_figure

    pred, gt = Path(args.pred), Path(args.gt)
    for d in (pred, gt):
        if not d.is_dir():
            raise InputError(f"no such directory: {d}")
    names = sorted(p.name for p in gt.glob("*.png"))
    if not names:
        raise InputError(f"no PNG files in {gt}")
    missing = [n for n in names if not (pred / n).is_file()]
    if missing:
        raise InputError(f"predictions missing for: {', '.join(missing[:5])}")
    preds = [Sketch(read_png(pred / n, "L")) for n in names]
    gts = [Sketch(read_png(gt / n, "L")) for n in names]
    records = evaluate(preds, gts, make_perceptual(), style=args.style, variant=args.variant or pred.name)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = records_to_csv(records)
    out.write_text(text)
    fig = out.with_suffix(".png")
    metrics_figure(records_to_rows(records), fig)
    sys.stdout.write(text)
    return [pred, gt], [out, fig]


def cmd_ablate(args):
    """Train every ablation variant on one triplet and score it against edge sketches of fresh samples."""
    from .adapters import make_perceptual
    from .generator import generate_sketch
    from .metrics import ablation_variants, records_to_csv, records_to_rows, run_ablation
    from .plotting import metrics_figure
    from .selection import SelectionReport
    from .trainer import Trainer

    triplet = _load_triplet(args.triplet)
    if triplet.condition is None:
        raise InputError(f"triplet archive {args.triplet} has no condition blob")
    report = SelectionReport.from_json(json.loads(Path(args.selection).read_text()))
    base = _train_config(args)
    backend = make_backend()
    dist = _reference_distribution(backend, args.seed)
    rng = np.random.default_rng([args.seed, 7])
    eval_pairs = []
    for _ in range(args.n_eval):
        img, traj, pyr = backend.generate(dist.draw(rng), int(rng.integers(2**31)))
        eval_pairs.append(((traj, pyr, img), edge_sketch(img)))
    variants = []
    for v in ablation_variants(report.timesteps, backend.T, args.seed):
        cfg = type(base).from_json({**base.to_json(), "use_cdst": v.use_cdst, "l1": v.l1, "use_vae": v.use_vae})
        gen = Trainer(backend, triplet, triplet.condition, dist, list(v.timesteps), cfg).run(log_every=0).generator
        variants.append((v.name, lambda x, g=gen: generate_sketch(g, *x)))
        log.info("trained variant %s", v.name)
    records = run_ablation(variants, eval_pairs, make_perceptual(), style=args.style)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text = records_to_csv(records)
    out.write_text(text)
    fig = out.with_suffix(".png")
    metrics_figure(records_to_rows(records), fig)
    sys.stdout.write(text)
    return [args.triplet, args.selection], [out, fig]


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffsketch", description="Sketch extraction from diffusion features.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0, help="single source of randomness")
        sp.add_argument("--wall-clock", action="store_true", help="record real timestamps (breaks byte-identical reruns)")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=func)
        return sp

    sp = add("generate", cmd_generate, "write toy backend archives")
    sp.add_argument("--n", type=_positive_int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("analyze", cmd_analyze, "select representative timesteps")
    sp.add_argument("--archives", nargs="+", required=True)
    sp.add_argument("--pca-dim", type=_positive_int, default=30)
    sp.add_argument("--k", type=_positive_int, default=None, help="override the clustered k")
    sp.add_argument("--out", required=True)

    def train_flags(sp):
        sp.add_argument("--triplet", required=True)
        sp.add_argument("--selection", required=True)
        sp.add_argument("--config", default=None)
        sp.add_argument("--iterations", type=_positive_int, default=None)
        sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "one-shot training of the sketch generator")
    train_flags(sp)
    sp.add_argument("--dist", default=None, help="saved condition distribution directory")
    sp.add_argument("--checkpoint-every", type=_positive_int, default=None)
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")

    sp = add("sample-pairs", cmd_sample_pairs, "teacher image/sketch pairs under CDST")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=_nonneg_int, required=True)
    sp.add_argument("--S", type=_positive_int, default=30000)
    sp.add_argument("--out", required=True)

    sp = add("distill", cmd_distill, "train the feed-forward student")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--gt", required=True, help="triplet archive supplying the ground-truth pair")
    sp.add_argument("--epochs", type=_positive_int, default=5)
    sp.add_argument("--reg-every", type=_positive_int, default=16)
    sp.add_argument("--batch-size", type=_positive_int, default=8)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--width", type=_positive_int, default=16)
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "sketch one image with a student")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "perceptual distance and SSIM between sketch folders")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--style", default="default")
    sp.add_argument("--variant", default=None)
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "train and score the ablation variants")
    train_flags(sp)
    sp.add_argument("--n-eval", type=_positive_int, default=8)
    sp.add_argument("--style", default="toy")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = _timestamp(args.wall_clock)
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        inputs, outputs = args.func(args)
        write_run_manifest(manifest_path(args.out), args.command, args, inputs, outputs, started)
    except (InputError, ArchiveError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
