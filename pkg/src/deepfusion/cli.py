"""Command line entry point: ``deepfusion {synth,train,select,predict,baseline,evaluate,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import atlas_select, baselines, dfnt, gradcheck, kernels, metrics, nlplf, synthdata, trainer
from . import feature_net as fn

log = logging.getLogger("deepfusion")


def _digest_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files = sorted(f for f in p.rglob("*") if f.is_file() and f.suffix in (".json", ".dfnt"))
        else:
            files = [p] if p.exists() else []
        for f in files:
            out[str(f)] = synthdata.file_digest(f)
    return out


def write_run_manifest(path: Path, args: argparse.Namespace, inputs=()) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    record = {
        "command": args.command,
        "flags": flags,
        "seed": flags.get("seed"),
        "backend": kernels.BACKEND_NAME,
        "inputs": _digest_inputs(inputs),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, default=str))


def _targets(dataset, ids, split):
    if ids:
        return [dataset.by_id(i) for i in ids]
    subjects = dataset.split(split) if split != "all" else dataset.subjects
    if not subjects:
        raise ValueError(f"no subjects in split {split!r}")
    return subjects


def _write_prediction(out: Path, sid: str, label: fn.LabelMap, chosen=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dfnt.write(out / f"{sid}_probs.dfnt", label.probs)
    dfnt.write(out / f"{sid}_mask.dfnt", label.foreground().astype(np.float32))
    dfnt.write(out / f"{sid}_hard.dfnt", label.hard().astype(np.float32))
    if chosen is not None:
        (out / f"{sid}_atlases.txt").write_text("".join(f"{c}\n" for c in chosen))


def cmd_synth(args) -> int:
    spec = synthdata.PhantomSpec(
        size=tuple(args.size), center_jitter=args.center_jitter, misalignment=args.misalignment,
        max_shift=args.max_shift, contrast_jitter=args.contrast_jitter, noise=args.noise,
        texture=args.texture, subjects=args.subjects, test_subjects=args.test_subjects,
        atlases=args.atlases, seed=args.seed, spacing_mm=tuple(args.spacing),
    )
    manifest = synthdata.generate(spec, args.out)
    write_run_manifest(Path(args.out) / "run_manifest.json", args)
    print(f"wrote {len(manifest['subjects'])} subjects to {args.out}")
    return 0


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=args.learning_rate, epochs=args.epochs, k0=args.k0, t=args.t, loss=args.loss,
        sampler=args.sampler, seed=args.seed, checkpoint_interval=args.checkpoint_interval,
        widths=tuple(args.widths), filter_size=args.filter_size, sigmoid=not args.no_sigmoid,
    )


def cmd_train(args) -> int:
    config = _train_config(args)
    data = synthdata.load_manifest(args.manifest)
    subjects = _targets(data, None, args.split)
    init = trainer.load_checkpoint(args.init) if args.init else None
    state = trainer.train(subjects, config, init, checkpoint_dir=args.out)
    out = Path(args.out)
    trainer.save_checkpoint(state.params, out, config)
    trainer.write_loss_csv(state, args.loss_csv or out / "loss.csv")
    write_run_manifest(out / "run_manifest.json", args, [args.manifest] + ([args.init] if args.init else []))
    means = state.epoch_means()
    if means:
        print(f"trained {config.epochs} epochs; mean loss {means[0]:.6f} -> {means[-1]:.6f}")
    return 0


def cmd_select(args) -> int:
    params = trainer.load_checkpoint(args.checkpoint) if args.checkpoint else None
    data = synthdata.load_manifest(args.manifest)
    lines = ["rank\tatlas\tscore\tstrategy"]
    for s in _targets(data, args.target_id, args.split):
        ranking = atlas_select.rank(s.target, s.atlases, params, args.strategy, args.k, args.bins)
        for r, (i, score) in enumerate(ranking.entries, start=1):
            lines.append(f"{r}\t{s.atlases[i].id}\t{score:.9g}\t{args.strategy}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        write_run_manifest(Path(str(args.out) + ".run.json"), args, [args.manifest] + ([args.checkpoint] if args.checkpoint else []))
    else:
        sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    params = trainer.load_checkpoint(args.checkpoint)
    data = synthdata.load_manifest(args.manifest)
    window = nlplf.SearchWindow(args.t)
    out = Path(args.out)
    for s in _targets(data, args.target_id, args.split):
        if args.k > len(s.atlases):
            raise ValueError(f"{s.id}: k={args.k} exceeds the {len(s.atlases)} available atlases")
        ranking = atlas_select.rank(s.target, s.atlases, params, args.strategy, args.k)
        chosen = [s.atlases[i] for i in ranking.indices]
        label = nlplf.predict_full(params, s.target, chosen, window)
        _write_prediction(out, s.id, label, [a.id for a in chosen])
    write_run_manifest(out / "run_manifest.json", args, [args.manifest, args.checkpoint])
    return 0


def cmd_baseline(args) -> int:
    data = synthdata.load_manifest(args.manifest)
    out = Path(args.out)
    targets = _targets(data, args.target_id, args.split)
    if args.method == "mv":
        for s in targets:
            _write_prediction(out, s.id, baselines.majority_vote(s.atlases))
    elif args.method == "pb":
        for s in targets:
            _write_prediction(out, s.id, baselines.patch_fusion(s.target, s.atlases, args.patch_radius, args.t, args.h))
    else:
        features = (trainer.load_checkpoint(args.checkpoint) if args.checkpoint
                    else fn.init_params(tuple(args.widths), args.filter_size, args.seed))
        classes = data.subjects[0].label.class_count
        cnn = baselines.init_cnn(features, classes)
        pool = [(s.target, s.label) for s in data.split("train")]
        state = baselines.cnn_baseline_train(pool, cnn, args.learning_rate, args.epochs, args.seed)
        for s in targets:
            probs = baselines.cnn_baseline_predict(state.params, s.target)
            _write_prediction(out, s.id, fn.LabelMap(fn.paste_interior(probs, features.margin)))
    write_run_manifest(out / "run_manifest.json", args, [args.manifest] + ([args.checkpoint] if args.checkpoint else []))
    return 0


def cmd_evaluate(args) -> int:
    data = synthdata.load_manifest(args.manifest)
    pred_dir = Path(args.predictions)
    preds, truths, spacing = {}, {}, {}
    for s in _targets(data, None, args.split):
        path = pred_dir / f"{s.id}_mask.dfnt"
        if not path.exists():
            raise FileNotFoundError(f"no prediction for subject {s.id} at {path}")
        preds[s.id] = dfnt.read(path) >= 0.5
        truths[s.id] = s.label.foreground()
        spacing[s.id] = s.target.spacing_mm
    report = metrics.evaluate_run(preds, truths, spacing)
    text = report.to_csv(per_slice=args.per_slice)
    if args.out:
        Path(args.out).write_text(text)
        write_run_manifest(Path(str(args.out) + ".run.json"), args, [args.manifest, args.predictions])
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run(args.seed)
    print(gradcheck.format_report(rows))
    return 0 if all(r.passed for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("M", "N"))
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--test-subjects", type=int, default=5)
    s.add_argument("--atlases", type=int, default=9)
    s.add_argument("--misalignment", type=float, default=2.0, help="residual misalignment sigma (px)")
    s.add_argument("--max-shift", type=int, default=3, help="displacement cap (px); keep <= window t")
    s.add_argument("--center-jitter", type=float, default=3.0)
    s.add_argument("--contrast-jitter", type=float, default=0.25)
    s.add_argument("--noise", type=float, default=0.04)
    s.add_argument("--texture", type=float, default=0.12)
    s.add_argument("--spacing", type=float, nargs=2, default=[1.25, 1.25])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the deep fusion net")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--loss-csv")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--split", default="train")
    t.add_argument("--learning-rate", type=float, default=5e-7)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--k0", type=int, default=5)
    t.add_argument("--t", type=int, default=3)
    t.add_argument("--loss", choices=nlplf.LOSS_KINDS, default="l2")
    t.add_argument("--sampler", choices=atlas_select.SAMPLE_STRATEGIES, default="random_nmi")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--widths", type=int, nargs="+", default=list(fn.DEFAULT_WIDTHS))
    t.add_argument("--filter-size", type=int, default=fn.DEFAULT_FILTER)
    t.add_argument("--no-sigmoid", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("select", help="rank atlases for a target")
    r.add_argument("--manifest", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--target-id", action="append")
    r.add_argument("--split", default="test")
    r.add_argument("--strategy", choices=atlas_select.RANK_STRATEGIES, default="top_df")
    r.add_argument("--k", type=int)
    r.add_argument("--bins", type=int, default=atlas_select.DEFAULT_BINS)
    r.add_argument("--out")
    r.set_defaults(func=cmd_select)

    q = sub.add_parser("predict", help="fuse atlas labels for target subjects")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--manifest", required=True)
    q.add_argument("--target-id", action="append")
    q.add_argument("--split", default="test")
    q.add_argument("--strategy", choices=atlas_select.RANK_STRATEGIES, default="top_df")
    q.add_argument("--k", type=int, default=10)
    q.add_argument("--t", type=int, default=3)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_predict)

    b = sub.add_parser("baseline", help="run a reference fusion method")
    b.add_argument("--method", choices=("mv", "pb", "cnn"), required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--target-id", action="append")
    b.add_argument("--split", default="test")
    b.add_argument("--out", required=True)
    b.add_argument("--patch-radius", type=int, default=2)
    b.add_argument("--t", type=int, default=3)
    b.add_argument("--h", type=float, help="PB bandwidth; default is the per-pixel mean distance")
    b.add_argument("--checkpoint", help="CNN: initial feature subnet")
    b.add_argument("--widths", type=int, nargs="+", default=list(fn.DEFAULT_WIDTHS))
    b.add_argument("--filter-size", type=int, default=fn.DEFAULT_FILTER)
    b.add_argument("--learning-rate", type=float, default=0.1)
    b.add_argument("--epochs", type=int, default=30)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--per-slice", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"deepfusion {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
