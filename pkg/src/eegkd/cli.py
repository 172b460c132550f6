"""Command-line entry point: ``eegkd <command> [flags]``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
Every command writes a JSON run manifest; ``eegkd replay MANIFEST`` re-runs it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import save_stack
from .dataio import apply_split, generate_synthetic_corpus, grouped_split, holdout_classes, read_corpus, write_corpus
from .downstream import classify_unseen, extract_features, train_feature_extractor, write_features
from .errors import EegKdError
from .gradcheck import TOLERANCE, run_suite
from .losses import WEIGHT_INTERPRETATIONS
from .recurrent import StackConfig, init_stack
from .teacher import SyntheticTeacherConfig, load_posteriors, synthetic_table, write_posteriors
from .trainer import AdamState, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("eegkd")

MODE_FLAGS = {"supervised": "supervised_kd", "unsupervised": "unsupervised_kd", "hard": "hard_only", "l2": "l2_kd"}


class UsageError(Exception):
    pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _non_negative_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {s}")
    return v


def _fraction(s):
    v = float(s)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1), got {s}")
    return v


def _dropout(s):
    v = float(s)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {s}")
    return v


def _class_list(s):
    try:
        return sorted({int(t) for t in s.split(",") if t.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated class ids, got {s!r}") from None


def _add_stack_flags(p):
    p.add_argument("--depth", type=int, choices=(1, 2, 3, 4), default=2)
    p.add_argument("--hidden", type=_positive_int, default=64)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--bidirectional", dest="bidirectional", action="store_true", default=True)
    g.add_argument("--unidirectional", dest="bidirectional", action="store_false")
    p.add_argument("--dropout", type=_dropout, default=0.5, help="recurrent dropout rate")


def _add_train_flags(p, epochs_required=True):
    p.add_argument("--temperature", type=_positive_float, default=5.0)
    p.add_argument("--epochs", type=int, required=epochs_required, default=None if epochs_required else 30)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--lr", type=_positive_float, default=0.001)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--weight", choices=WEIGHT_INTERPRETATIONS, default=WEIGHT_INTERPRETATIONS[0],
                   help="reading of the soft-term weight")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegkd", description="Knowledge distillation into a stacked BLSTM.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=_positive_int, default=1, help="BLAS threads (1 = bit-deterministic)")
    parser.add_argument("--manifest", type=Path, default=None, help="where to write the run manifest")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic corpus and teacher posteriors")
    p.add_argument("--classes", type=_positive_int, default=8)
    p.add_argument("--images-per-class", type=_positive_int, default=60)
    p.add_argument("--subjects", type=_positive_int, default=1)
    p.add_argument("--timesteps", type=_positive_int, default=64)
    p.add_argument("--channels", type=_positive_int, default=8)
    p.add_argument("--noise", type=_non_negative_float, default=1.0)
    p.add_argument("--fidelity", type=float, default=0.85)
    p.add_argument("--confusion-temperature", type=_positive_float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train the student")
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="supervised")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--posteriors", type=Path)
    _add_stack_flags(p)
    _add_train_flags(p)
    p.add_argument("--split-ratio", type=float, default=0.7, help="train share of images; 1 trains on everything")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a corpus")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--split-ratio", type=_fraction, default=0.7)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract", help="export student features")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--window", type=_positive_int)
    p.add_argument("--stride", type=_positive_int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("unseen", help="unseen-category protocol")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--posteriors", type=Path, required=True)
    p.add_argument("--holdout-classes", type=_class_list, required=True)
    p.add_argument("--window", type=_positive_int, default=200)
    p.add_argument("--stride", type=_positive_int, default=100)
    p.add_argument("--classifier", choices=("knn", "svm", "both"), default="svm")
    p.add_argument("--labeled-ratio", type=_fraction, default=0.5)
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--svm-reg", type=_positive_float, default=1e-3)
    p.add_argument("--svm-epochs", type=_positive_int, default=20)
    _add_stack_flags(p)
    _add_train_flags(p, epochs_required=False)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("path", type=Path)
    return parser


# -- commands ----------------------------------------------------------------

def cmd_gen_synthetic(args, manifest):
    if not 0 < args.fidelity <= 1:
        raise UsageError("--fidelity must be in (0, 1]")
    corpus = generate_synthetic_corpus(args.classes, args.images_per_class, args.subjects, args.timesteps,
                                       args.channels, args.noise, args.seed)
    teacher = SyntheticTeacherConfig(args.classes, args.fidelity, args.confusion_temperature, args.seed)
    table = synthetic_table(corpus.image_classes(), teacher)
    args.out.mkdir(parents=True, exist_ok=True)
    corpus_path = args.out / "corpus.eegc"
    post_path = args.out / "posteriors.tsv"
    write_corpus(corpus, corpus_path)
    write_posteriors(table, post_path)
    manifest["outputs"] = {"corpus": str(corpus_path), "posteriors": str(post_path)}
    manifest["results"] = {"samples": len(corpus)}
    print(f"wrote {len(corpus)} samples to {corpus_path}")
    print(f"wrote {len(table)} posteriors to {post_path}")


def _train_split(corpus, ratio, seed):
    if ratio == 1.0:
        return corpus, None
    if not 0 < ratio < 1:
        raise UsageError("--split-ratio must be in (0, 1]")
    return apply_split(corpus, grouped_split(corpus, ratio, seed))


def cmd_train(args, manifest):
    mode = MODE_FLAGS[args.mode]
    if mode != "hard_only" and args.posteriors is None:
        raise UsageError(f"--mode {args.mode} needs --posteriors")
    corpus = read_corpus(args.corpus)
    manifest["inputs"] = {"corpus": _digest(args.corpus)}
    posteriors = None
    if mode != "hard_only":
        posteriors = load_posteriors(args.posteriors)
        manifest["inputs"]["posteriors"] = _digest(args.posteriors)
    train, test = _train_split(corpus, args.split_ratio, args.seed)
    cfg = TrainConfig(mode=mode, learning_rate=args.lr, beta1=args.beta1, beta2=args.beta2,
                      batch_size=args.batch, epochs=args.epochs, temperature=args.temperature,
                      seed=args.seed, weight_interpretation=args.weight)
    adam, start = None, 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        stack, adam, start = ckpt.stack, ckpt.adam, ckpt.epoch
        manifest["inputs"]["resume"] = _digest(args.resume)
    else:
        stack = init_stack(StackConfig(args.depth, args.hidden, args.bidirectional, args.dropout,
                                       corpus.num_classes, corpus.samples[0].channels), args.seed)
    if adam is None:
        adam = AdamState.zeros_like(stack.params)
    stack, trainlog = fit(train, posteriors, stack, cfg, test=test, adam=adam, start_epoch=start)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt_path = args.out / "checkpoint.cgnt"
    log_path = args.out / "trainlog.json"
    save_checkpoint(stack, adam, ckpt_path, train_config=cfg, epoch=max(cfg.epochs, start))
    log_path.write_text(json.dumps(trainlog.to_dict(), indent=2), encoding="utf-8")
    train_acc = evaluate(train, stack)
    results = {"train_accuracy": train_acc, "label_reads": trainlog.label_reads,
               "posterior_reads": trainlog.posterior_reads,
               "final_loss": trainlog.losses[-1] if trainlog.epochs else None}
    print(f"train accuracy: {train_acc:.6f}")
    if test is not None:
        results["test_accuracy"] = evaluate(test, stack)
        print(f"test accuracy: {results['test_accuracy']:.6f}")
    print(f"label reads: {trainlog.label_reads}")
    print(f"posterior reads: {trainlog.posterior_reads}")
    manifest["config"]["train_config_digest"] = cfg.digest()
    manifest["outputs"] = {"checkpoint": str(ckpt_path), "trainlog": str(log_path)}
    manifest["results"] = results


def cmd_eval(args, manifest):
    ckpt = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    manifest["inputs"] = {"checkpoint": _digest(args.checkpoint), "corpus": _digest(args.corpus)}
    if args.split != "all":
        train, test = apply_split(corpus, grouped_split(corpus, args.split_ratio, args.seed))
        corpus = train if args.split == "train" else test
    acc = evaluate(corpus, ckpt.stack)
    manifest["results"] = {"accuracy": acc}
    print(f"accuracy: {acc:.6f}")


def cmd_extract(args, manifest):
    if (args.window is None) != (args.stride is None):
        raise UsageError("--window and --stride go together")
    ckpt = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    manifest["inputs"] = {"checkpoint": _digest(args.checkpoint), "corpus": _digest(args.corpus)}
    window = None if args.window is None else (args.window, args.stride)
    fs = extract_features(corpus, ckpt.stack, window)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_features(fs, args.out)
    manifest["outputs"] = {"features": str(args.out)}
    manifest["results"] = {"vectors": len(fs), "dim": fs.dim}
    print(f"wrote {len(fs)} feature vectors of dim {fs.dim} to {args.out}")


def cmd_unseen(args, manifest):
    corpus = read_corpus(args.corpus)
    posteriors = load_posteriors(args.posteriors)
    manifest["inputs"] = {"corpus": _digest(args.corpus), "posteriors": _digest(args.posteriors)}
    split = holdout_classes(corpus, args.holdout_classes)
    table = posteriors.restrict(split.seen_classes)
    stack_cfg = StackConfig(args.depth, args.hidden, args.bidirectional, args.dropout,
                            split.seen.num_classes, corpus.samples[0].channels)
    cfg = TrainConfig(mode="unsupervised_kd", learning_rate=args.lr, beta1=args.beta1, beta2=args.beta2,
                      batch_size=args.batch, epochs=args.epochs, temperature=args.temperature, seed=args.seed,
                      weight_interpretation=args.weight)
    stack = train_feature_extractor(split.seen, table, stack_cfg, cfg)
    classifiers = ("knn", "svm") if args.classifier == "both" else (args.classifier,)
    results = {}
    for clf in classifiers:
        acc = classify_unseen(stack, split.unseen, (args.window, args.stride), clf, labeled_ratio=args.labeled_ratio,
                              seed=args.seed, k=args.k, reg=args.svm_reg, svm_epochs=args.svm_epochs)
        results[f"{clf}_accuracy"] = acc
        print(f"{clf} accuracy: {acc:.6f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_stack(stack, args.out / "extractor.cgnt")
        manifest["outputs"] = {"extractor": str(args.out / "extractor.cgnt")}
    manifest["results"] = results


def cmd_gradcheck(args, manifest):
    results = run_suite(args.seed)
    failed = [r for r in results if not r.ok]
    for r in results:
        kind = "bi" if r.bidirectional else "uni"
        print(f"depth={r.depth} {kind:3s} {r.loss:14s} max_rel_err={r.max_rel_error:.3e} "
              f"{'ok' if r.ok else 'FAIL'} ({r.worst_param})")
    manifest["results"] = {"checks": len(results), "failed": len(failed),
                           "max_rel_error": max(r.max_rel_error for r in results)}
    if failed:
        print(f"{len(failed)} of {len(results)} gradient checks exceed {TOLERANCE:g}")
        return 1
    print(f"all gradients within {TOLERANCE:g}")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract": cmd_extract,
    "unseen": cmd_unseen,
    "gradcheck": cmd_gradcheck,
}


def _manifest_path(args) -> Path:
    if args.manifest is not None:
        return args.manifest
    out = getattr(args, "out", None)
    if out is not None:
        return (out if out.suffix == "" else out.parent) / f"{args.command}.manifest.json"
    return Path(f"{args.command}.manifest.json")


def _jsonable(v):
    return str(v) if isinstance(v, Path) else v


def run(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "replay":
        try:
            recorded = json.loads(args.path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            print(f"eegkd: cannot read manifest: {e}", file=sys.stderr)
            return 1
        return run(recorded["argv"])
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": {k: _jsonable(v) for k, v in vars(args).items()},
        "inputs": {},
        "outputs": {},
        "results": {},
    }
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.command](args, manifest) or 0
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"eegkd {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (EegKdError, OSError) as e:
        print(f"eegkd {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    manifest["seconds"] = time.perf_counter() - t0
    path = _manifest_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return code


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
