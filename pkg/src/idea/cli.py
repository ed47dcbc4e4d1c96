"""Command-line entry point: train, eval, ablate, gradcheck, export, synthesize."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import synthetic
from .autodiff import grad_check
from .data import Document, LabelSet, Vocab, load_csv, make_batches, stratified_sample
from .encoder import EncoderConfig
from .head import ABLATION_MODES, AblationConfig
from .model import IdeaModel
from .training import (
    NonFiniteLossError,
    TrainConfig,
    evaluate,
    export_features,
    train,
    welch_t_test,
)

# preset -> (label names in class order, default epoch count)
DATASETS = {
    "agnews": (["world", "sports", "business", "sci tech"], 2),
    "dbpedia": (
        [
            "company", "educational institution", "artist", "athlete", "office holder",
            "mean of transportation", "building", "natural place", "village", "animal",
            "plant", "album", "film", "written work",
        ],
        3,
    ),
    "yahoo": (
        [
            "society & culture", "science & mathematics", "health", "education & reference",
            "computers & internet", "sports", "business & finance", "entertainment & music",
            "family & relationships", "politics & government",
        ],
        2,
    ),
    "yelpp": (["negative", "positive"], 5),
    "yelpf": (["bad", "poor", "fair", "good", "excellent"], 5),
}

ABLATION_FLAGS = {
    "full": "full",
    "only-text": "only_text_features",
    "only-fusing": "only_fusing",
    "no-abs-diff": "no_abs_diff",
    "no-ele-prod": "no_ele_prod",
}

GRADCHECK_THRESHOLD = 1e-4

_TRAIN_DEFAULTS = {
    "dataset": None,
    "train_csv": None,
    "test_csv": None,
    "labels": None,
    "epochs": 2,
    "lr": 5e-5,
    "batch_size": 32,
    "lambda_l2": 0.01,
    "dropout": 0.1,
    "seed": 0,
    "ablation": "full",
    "gamma_mode": "per-sample",
    "train_limit": None,
    "test_limit": None,
    "max_len": 128,
    "max_steps": None,
    "d": 64,
    "n_layers": 2,
    "n_heads": 4,
    "backend": "mini-transformer",
    "min_freq": 1,
    "vocab_max_size": None,
    "out": None,
}


class _Parser(argparse.ArgumentParser):
    # usage problems are validation failures: exit 1, not argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_train_args(p: argparse.ArgumentParser, suppress: bool) -> None:
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("--config", default=d(None), help="JSON config file; flags override it")
    p.add_argument("--dataset", choices=sorted(DATASETS), default=d(None),
                   help="preset supplying label names and the default epoch count")
    p.add_argument("--train-csv", default=d(None), help="training CSV (class index, text fields)")
    p.add_argument("--test-csv", default=d(None), help="test CSV")
    p.add_argument("--labels", default=d(None),
                   help="comma-separated label names in class order")
    p.add_argument("--epochs", type=int, default=d(_TRAIN_DEFAULTS["epochs"]),
                   help="training epochs")
    p.add_argument("--lr", type=float, default=d(_TRAIN_DEFAULTS["lr"]), help="learning rate")
    p.add_argument("--batch-size", type=int, default=d(_TRAIN_DEFAULTS["batch_size"]),
                   help="documents per optimizer step")
    p.add_argument("--lambda", dest="lambda_l2", type=float, default=d(_TRAIN_DEFAULTS["lambda_l2"]),
                   help="squared-norm regularization coefficient")
    p.add_argument("--dropout", type=float, default=d(_TRAIN_DEFAULTS["dropout"]),
                   help="dropout rate")
    p.add_argument("--seed", type=int, default=d(_TRAIN_DEFAULTS["seed"]), help="random seed")
    p.add_argument("--ablation", choices=sorted(ABLATION_FLAGS), default=d("full"),
                   help="feature blocks entering the classifier input")
    p.add_argument("--gamma-mode", choices=["per-sample", "per-batch-literal"],
                   default=d("per-sample"),
                   help="similarity-weight granularity (per-batch-literal couples samples)")
    p.add_argument("--train-limit", type=int, default=d(None),
                   help="stratified subsample size for the training CSV")
    p.add_argument("--test-limit", type=int, default=d(None),
                   help="stratified subsample size for the test CSV")
    p.add_argument("--max-len", type=int, default=d(_TRAIN_DEFAULTS["max_len"]),
                   help="document truncation length in tokens")
    p.add_argument("--max-steps", type=int, default=d(None),
                   help="stop after this many optimizer steps")
    p.add_argument("--d", type=int, default=d(_TRAIN_DEFAULTS["d"]), help="embedding width")
    p.add_argument("--n-layers", type=int, default=d(_TRAIN_DEFAULTS["n_layers"]),
                   help="encoder layers")
    p.add_argument("--n-heads", type=int, default=d(_TRAIN_DEFAULTS["n_heads"]),
                   help="attention heads")
    p.add_argument("--backend", choices=["mini-transformer", "bag-of-embeddings"],
                   default=d(_TRAIN_DEFAULTS["backend"]), help="encoder backend")
    p.add_argument("--min-freq", type=int, default=d(_TRAIN_DEFAULTS["min_freq"]),
                   help="minimum token frequency kept in the vocabulary")
    p.add_argument("--vocab-max-size", type=int, default=d(None),
                   help="vocabulary size cap including specials")
    p.add_argument("--out", default=d(None), help="output directory")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="idea", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", formatter_class=fmt, help="train and report test metrics")
    _add_train_args(p_train, suppress)

    p_eval = sub.add_parser("eval", formatter_class=fmt, help="evaluate a saved model")
    p_eval.add_argument("--model-dir", required=True, help="directory with model.ckpt and vocab.txt")
    p_eval.add_argument("--test-csv", required=True)
    p_eval.add_argument("--test-limit", type=int, default=None)
    p_eval.add_argument("--batch-size", type=int, default=32)
    p_eval.add_argument("--max-len", type=int, default=128)
    p_eval.add_argument("--seed", type=int, default=0, help="seed for --test-limit subsampling")

    p_ablate = sub.add_parser(
        "ablate", formatter_class=fmt,
        help="run every ablation mode over a seed sweep and compare against the full model",
    )
    _add_train_args(p_ablate, suppress)
    p_ablate.add_argument("--seeds", default=argparse.SUPPRESS if suppress else "0,1,2,3,4",
                          help="comma-separated seed list")

    p_grad = sub.add_parser(
        "gradcheck", formatter_class=fmt,
        help="finite-difference check of every gradient on a tiny model",
    )
    p_grad.add_argument("--seeds", default="0", help="comma-separated seed list")
    p_grad.add_argument("--step", type=float, default=1e-5, help="central-difference step")

    p_exp = sub.add_parser("export-features", formatter_class=fmt,
                           help="dump per-sample fused feature vectors as TSV")
    p_exp.add_argument("--model-dir", required=True)
    p_exp.add_argument("--csv", required=True, help="dataset to featurize")
    p_exp.add_argument("--out", required=True, help="output TSV path")
    p_exp.add_argument("--limit", type=int, default=None)
    p_exp.add_argument("--batch-size", type=int, default=32)
    p_exp.add_argument("--max-len", type=int, default=128)
    p_exp.add_argument("--seed", type=int, default=0)

    p_syn = sub.add_parser("make-synthetic", formatter_class=fmt,
                           help="emit a synthetic keyword-bag CSV corpus")
    p_syn.add_argument("--out", required=True, help="output CSV path")
    p_syn.add_argument("--docs", type=int, default=300)
    p_syn.add_argument("--classes", type=int, default=3)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--label-names", default=None, help="override the generated label names")
    p_syn.add_argument("--keywords-per-class", type=int, default=8)
    p_syn.add_argument("--doc-keywords", type=int, default=8)
    p_syn.add_argument("--doc-noise", type=int, default=4)
    p_syn.add_argument("--label-token-rate", type=float, default=0.9)
    p_syn.add_argument("--overlap", type=int, default=0,
                       help="shared ambiguous keywords added to every class")
    p_syn.add_argument("--confusion", type=float, default=0.0,
                       help="per-slot probability of a keyword from a different class")
    return parser


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(data) - set(_TRAIN_DEFAULTS)
    if unknown:
        raise ValueError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return data


def _merge_train_settings(ns_full, ns_explicit) -> dict:
    """flags > config file > dataset preset > built-in defaults."""
    explicit = {k: v for k, v in vars(ns_explicit).items() if k in _TRAIN_DEFAULTS}
    file_cfg = {}
    config_path = getattr(ns_explicit, "config", None) or getattr(ns_full, "config", None)
    if config_path:
        file_cfg = _load_config_file(config_path)

    merged = dict(_TRAIN_DEFAULTS)
    dataset = explicit.get("dataset", file_cfg.get("dataset"))
    if dataset:
        names, epochs = DATASETS[dataset]
        merged["labels"] = ",".join(names)
        merged["epochs"] = epochs
    merged.update(file_cfg)
    merged.update(explicit)
    return merged


def _settings_to_config(settings: dict) -> TrainConfig:
    if not settings["train_csv"] or not settings["test_csv"]:
        raise ValueError("train: --train-csv and --test-csv are required")
    if not settings["labels"]:
        raise ValueError("train: label names required (--labels or --dataset)")
    label_names = [name.strip() for name in settings["labels"].split(",")]
    if any(not n for n in label_names):
        raise ValueError("train: empty label name in --labels")
    return TrainConfig(
        train_csv=settings["train_csv"],
        test_csv=settings["test_csv"],
        label_names=label_names,
        learning_rate=settings["lr"],
        batch_size=settings["batch_size"],
        dropout=settings["dropout"],
        lambda_l2=settings["lambda_l2"],
        epochs=settings["epochs"],
        seed=settings["seed"],
        ablation=ABLATION_FLAGS[settings["ablation"]],
        gamma_mode=settings["gamma_mode"],
        max_len=settings["max_len"],
        max_steps=settings["max_steps"],
        train_limit=settings["train_limit"],
        test_limit=settings["test_limit"],
        d=settings["d"],
        n_layers=settings["n_layers"],
        n_heads=settings["n_heads"],
        backend=settings["backend"],
        min_freq=settings["min_freq"],
        vocab_max_size=settings["vocab_max_size"],
        out_dir=settings["out"],
    )


def cmd_train(ns_full, ns_explicit) -> int:
    config = _settings_to_config(_merge_train_settings(ns_full, ns_explicit))
    result = train(config)
    print(result.report(), end="")
    return 0


def _load_model_dir(model_dir):
    ckpt = os.path.join(model_dir, "model.ckpt")
    vocab_path = os.path.join(model_dir, "vocab.txt")
    for path in (ckpt, vocab_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"eval: missing {path}")
    return IdeaModel.load(ckpt), Vocab.load(vocab_path)


def cmd_eval(ns) -> int:
    model, vocab = _load_model_dir(ns.model_dir)
    docs = load_csv(ns.test_csv, model.n_classes)
    if ns.test_limit is not None:
        docs = stratified_sample(docs, ns.test_limit, ns.seed)
    metrics = evaluate(model, make_batches(docs, vocab, ns.batch_size, max_len=ns.max_len))
    print("\n".join(metrics.report_lines(prefix="test_")))
    return 0


def cmd_ablate(ns_full, ns_explicit) -> int:
    settings = _merge_train_settings(ns_full, ns_explicit)
    seeds = _parse_seeds(getattr(ns_full, "seeds", "0,1,2,3,4"))
    base = _settings_to_config(settings)
    accs: dict[str, list[float]] = {}
    for mode in ABLATION_MODES:
        accs[mode] = []
        for seed in seeds:
            cfg = TrainConfig(**{**vars(base), "ablation": mode, "seed": seed, "out_dir": None})
            result = train(cfg, log=lambda msg: None)
            accs[mode].append(result.test_metrics.accuracy)
            print(f"# {mode} seed={seed} test_acc={result.test_metrics.accuracy:.4f}")

    header = ["mode", "seeds", "mean_acc", "std", "stderr", "t_vs_full", "p_value"]
    rows = [header]
    for mode in ABLATION_MODES:
        xs = accs[mode]
        n = len(xs)
        mean = sum(xs) / n
        std = float(np.std(xs, ddof=1)) if n > 1 else 0.0
        stderr = std / np.sqrt(n) if n > 1 else 0.0
        if n > 1:
            res = welch_t_test(xs, accs["full"])
            t_str, p_str = f"{res.t:.4f}", f"{res.p:.4f}"
        else:
            t_str = p_str = "n/a"
        rows.append([mode, str(n), f"{mean:.4f}", f"{std:.4f}", f"{stderr:.4f}", t_str, p_str])

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for row in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    if settings["out"]:
        os.makedirs(settings["out"], exist_ok=True)
        table_path = os.path.join(settings["out"], "ablation.tsv")
        with open(table_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write("\t".join(row) + "\n")
        print(f"# table written to {table_path}")
    return 0


def gradcheck_setup(seed: int, lambda_l2: float = 0.01):
    """Tiny 64-bit model and batch for finite-difference checking.

    Two documents (6 and 4 tokens, so one row is padded), three
    single-token labels, d=8 over 2 transformer layers.
    """
    rng = np.random.default_rng(seed)
    label_names = ["red", "green", "blue"]
    pool = ["alpha", "beta", "delta", "kappa", "sigma", "omega", "zeta", "theta"]
    vocab = Vocab.from_tokens(pool + label_names + [","])

    def sample_text(n_tokens):
        return " ".join(pool[int(rng.integers(len(pool)))] for _ in range(n_tokens))

    docs = [
        Document(sample_text(6), int(rng.integers(3))),
        Document(sample_text(4), int(rng.integers(3))),
    ]
    batch = make_batches(docs, vocab, batch_size=2)[0]
    enc_cfg = EncoderConfig(
        vocab_size=len(vocab), d=8, n_layers=2, n_heads=2, max_positions=16, dropout=0.1
    )
    model = IdeaModel.build(
        enc_cfg,
        LabelSet(label_names),
        vocab,
        dtype=np.float64,
        rng=rng,
        classifier_init="normal",
    )
    # evaluate at a generic point: at the tiny training init the score
    # biases sit in a near-flat region (uniform tanh curvature cancels
    # against softmax shift invariance) and their gradients drown in
    # finite-difference noise
    for name in ("attn.W_m", "attn.b_m", "attn.W_t", "attn.b_t"):
        p = model.params[name]
        p.data[...] = rng.normal(0.0, 0.5, size=p.data.shape)

    def fn():
        return model.loss(batch, lambda_l2, training=False)[0]

    return model, batch, fn


def cmd_gradcheck(ns) -> int:
    worst = 0.0
    for seed in _parse_seeds(ns.seeds):
        model, _, fn = gradcheck_setup(seed)
        report = grad_check(fn, model.params, step=ns.step)
        print(f"seed {seed}:")
        print(report.format())
        status = "PASS" if report.max_relative_error < GRADCHECK_THRESHOLD else "FAIL"
        print(f"seed {seed}: {status} (max {report.max_relative_error:.3e}, "
              f"threshold {GRADCHECK_THRESHOLD})")
        worst = max(worst, report.max_relative_error)
    return 0 if worst < GRADCHECK_THRESHOLD else 1


def cmd_export_features(ns) -> int:
    model, vocab = _load_model_dir(ns.model_dir)
    docs = load_csv(ns.csv, model.n_classes)
    if ns.limit is not None:
        docs = stratified_sample(docs, ns.limit, ns.seed)
    batches = make_batches(docs, vocab, ns.batch_size, max_len=ns.max_len)
    export_features(model, batches, ns.out)
    print(f"wrote {len(docs)} rows to {ns.out}")
    return 0


def cmd_make_synthetic(ns) -> int:
    label_names = None
    if ns.label_names:
        label_names = [name.strip() for name in ns.label_names.split(",")]
    rows, names = synthetic.generate_rows(
        n_docs=ns.docs,
        n_classes=ns.classes,
        seed=ns.seed,
        label_names=label_names,
        keywords_per_class=ns.keywords_per_class,
        doc_keywords=ns.doc_keywords,
        doc_noise=ns.doc_noise,
        label_token_rate=ns.label_token_rate,
        overlap=ns.overlap,
        confusion=ns.confusion,
    )
    synthetic.write_csv(rows, ns.out)
    print(f"wrote {len(rows)} rows to {ns.out}")
    print(f"labels: {','.join(names)}")
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in str(text).split(",") if part.strip() != ""]
    except ValueError:
        raise ValueError(f"bad seed list {text!r}")
    if not seeds:
        raise ValueError("empty seed list")
    return seeds


def main(argv=None) -> int:
    try:
        ns_full = build_parser(suppress=False).parse_args(argv)
        ns_explicit = build_parser(suppress=True).parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if ns_full.command == "train":
            return cmd_train(ns_full, ns_explicit)
        if ns_full.command == "eval":
            return cmd_eval(ns_full)
        if ns_full.command == "ablate":
            return cmd_ablate(ns_full, ns_explicit)
        if ns_full.command == "gradcheck":
            return cmd_gradcheck(ns_full)
        if ns_full.command == "export-features":
            return cmd_export_features(ns_full)
        if ns_full.command == "make-synthetic":
            return cmd_make_synthetic(ns_full)
        raise ValueError(f"unknown command {ns_full.command!r}")
    except (ValueError, FileNotFoundError) as exc:
        print(f"idea: error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"idea: runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"idea: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
