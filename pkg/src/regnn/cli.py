"""Command line for regnn: build graphs, train, evaluate, diagnose, import corpora.

Every subcommand resolves one flat configuration (flag > ``--config`` JSON
file > built-in default), writes it to ``config.json`` next to its outputs,
and only moves outputs into the output directory once all of them are
written.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import diagnostics, heads
from .errors import ConfigError, ContractError, IngestionError, RegnnError
from .textgraph import Document, PmiTable, Vocab, document_tokens, positive_candidate_counts, read_corpus, write_corpus, write_graphs
from .training import (
    Prepared,
    TrainConfig,
    evaluate,
    headline,
    load_embeddings,
    load_trained,
    make_examples,
    metrics,
    predict_all,
    prepare,
    save_trained,
    split_dev,
    train,
)

log = logging.getLogger("regnn")

OUTPUT_ENV = "REGNN_OUTPUT_DIR"
PATH_KEYS = ("train", "dev", "test", "embeddings", "out")
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# configuration


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("model and training (override --config)")
    g.add_argument("--hidden", type=int, default=S)
    g.add_argument("--layers", type=int, default=S)
    g.add_argument("--max-neighbors", type=int, default=S)
    g.add_argument("--lr0", type=float, default=S)
    g.add_argument("--lr-decay", type=float, default=S)
    g.add_argument("--epochs", type=int, default=S)
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--task", choices=["single", "multi"], default=S)
    g.add_argument("--window", type=int, default=S)
    g.add_argument("--min-count", type=int, default=S)
    g.add_argument("--max-labels", type=int, default=S)
    g.add_argument("--clip-norm", type=float, default=S)
    g.add_argument("--dev-fraction", type=float, default=S)
    g.add_argument("--workers", type=int, default=S)
    g.add_argument("--no-lstm", dest="lstm", action="store_false", default=S)
    g.add_argument("--no-attention", dest="attention", action="store_false", default=S)
    g.add_argument("--no-global", dest="global_node", action="store_false", default=S)
    g.add_argument("--no-positions", dest="positions", action="store_false", default=S)
    g.add_argument("--symmetrize", action="store_true", default=S)
    g.add_argument("--per-layer", dest="shared_layers", action="store_false", default=S, help="separate parameters per layer")
    g.add_argument("--freeze-embeddings", action="store_true", default=S)
    g.add_argument("--deterministic", action="store_true", default=S, help="pin workers to 1")


def _add_data_flags(p: argparse.ArgumentParser, train_required: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--train", default=S, help="label<TAB>text corpus" + (" (required)" if train_required else ""))
    p.add_argument("--dev", default=S, help="dev corpus; default holds out dev_fraction of --train")
    p.add_argument("--test", default=S)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of defaults for any flag")
    p.add_argument("--out", default=argparse.SUPPRESS, help=f"output directory (default ${OUTPUT_ENV} or ./regnn-out)")
    p.add_argument("-v", "--verbose", action="store_true")


def resolve(args: argparse.Namespace) -> dict:
    """Flags over config file over defaults; returns a flat dict with train fields and paths."""
    merged: dict = {k: f.default for k, f in _TRAIN_FIELDS.items()}
    merged.update({k: None for k in PATH_KEYS})
    merged["out"] = os.environ.get(OUTPUT_ENV) or "regnn-out"
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise IngestionError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(from_file, dict):
            raise ConfigError(f"{args.config}: expected a flat JSON object")
        unknown = sorted(set(from_file) - set(merged) - {"deterministic"})
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {unknown}")
        merged.update(from_file)
    flags = vars(args)
    merged.update({k: flags[k] for k in list(_TRAIN_FIELDS) + list(PATH_KEYS) + ["deterministic"] if k in flags})
    if merged.pop("deterministic", False):
        merged["workers"] = 1
    return merged


def train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(**{k: resolved[k] for k in _TRAIN_FIELDS})


def _check_paths(resolved: dict, required: tuple[str, ...]) -> None:
    for key in required:
        if not resolved.get(key):
            raise ConfigError(f"--{key} is required")
    for key in ("train", "dev", "test", "embeddings"):
        path = resolved.get(key)
        if path and not Path(path).is_file():
            raise IngestionError(f"{key} file not found: {path}")


def _read(resolved: dict, key: str) -> list[Document] | None:
    path = resolved.get(key)
    if not path:
        return None
    docs = read_corpus(path)
    if not docs:
        raise IngestionError(f"{path}: corpus is empty")
    return docs


# ---------------------------------------------------------------------------
# output staging


class Outputs:
    """Stage files in a hidden directory and move them into place on success."""

    def __init__(self, out: str | os.PathLike, config: dict):
        self.out = Path(out)
        self.config = config
        self.stage: Path | None = None

    def __enter__(self) -> "Outputs":
        self.out.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))
        self.json("config.json", self.config)
        return self

    def path(self, name: str) -> Path:
        return self.stage / name

    def json(self, name: str, obj) -> None:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            for f in sorted(self.stage.iterdir()):
                os.replace(f, self.out / f.name)
        shutil.rmtree(self.stage, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# subcommands


def _stats(docs: list[Document], vocab: Vocab, labels: list[str]) -> dict:
    lengths = [len(document_tokens(d.text)) for d in docs]
    return {
        "documents": len(docs),
        "vocab_size": len(vocab),
        "classes": len(labels),
        "average_length": float(np.mean(lengths)) if lengths else 0.0,
    }


def _pmi_summary(data: Prepared, top: int = 50) -> dict:
    out = data.pmi.summary()
    scored = [(data.pmi.pmi(i, j), i, j) for (i, j) in data.pmi.pairs]
    scored = sorted((s for s in scored if s[0] > 0), key=lambda s: (-s[0], s[1], s[2]))[:top]
    out["top_pairs"] = [{"a": data.vocab.token(i), "b": data.vocab.token(j), "pmi": s} for s, i, j in scored]
    return out


def _split_docs(cfg: TrainConfig, resolved: dict):
    train_docs = _read(resolved, "train")
    dev_docs = _read(resolved, "dev")
    test_docs = _read(resolved, "test") or []
    if dev_docs is None:
        train_docs, dev_docs = split_dev(train_docs, cfg.dev_fraction, np.random.default_rng([cfg.seed, 1]))
    return train_docs, dev_docs, test_docs


def cmd_build_graph(args, resolved: dict) -> int:
    _check_paths(resolved, ("train",))
    cfg = train_config(resolved)
    train_docs, dev_docs, test_docs = _split_docs(cfg, resolved)
    data = prepare(cfg, train_docs, dev_docs, test_docs)
    stats = {}
    with Outputs(resolved["out"], resolved) as out:
        data.vocab.save(out.path("vocab.tsv"))
        data.pmi.save(out.path("pmi.npz"))
        out.json("pmi_summary.json", _pmi_summary(data))
        for name, docs, exs in (("train", train_docs, data.train), ("dev", dev_docs, data.dev), ("test", test_docs, data.test)):
            if docs:
                write_graphs(out.path(f"graphs_{name}.jsonl"), (ex.graph for ex in exs), data.vocab)
                stats[name] = _stats(docs, data.vocab, data.labels)
        caps = [max(positive_candidate_counts(ex.graph.token_ids, data.pmi), default=0) for ex in data.train + data.dev + data.test]
        stats["max_positive_candidates"] = int(max(caps, default=0))
        out.json("stats.json", stats)
    for name in ("train", "dev", "test"):
        if name in stats:
            s = stats[name]
            print(f"{name}: {s['documents']} docs, vocab {s['vocab_size']}, {s['classes']} classes, avg length {s['average_length']:.2f}")
    return 0


def _training_data(cfg: TrainConfig, resolved: dict) -> Prepared:
    return prepare(cfg, *_split_docs(cfg, resolved))


def cmd_train(args, resolved: dict) -> int:
    _check_paths(resolved, ("train",))
    cfg = train_config(resolved)
    data = _training_data(cfg, resolved)
    embeddings = None
    # the output location is not part of the model; leaving it out keeps reruns byte-identical
    extra = {"run_config": {k: v for k, v in resolved.items() if k != "out"}}
    if resolved.get("embeddings"):
        embeddings, coverage = load_embeddings(resolved["embeddings"], data.vocab, cfg.hidden, np.random.default_rng([cfg.seed, 2]))
        extra["embedding_coverage"] = coverage
        log.info("pretrained vectors cover %.1f%% of the vocabulary", 100 * coverage)
    seeds = args.seeds or [cfg.seed]
    summary: dict = {"runs": []}
    with Outputs(resolved["out"], resolved) as out:
        data.vocab.save(out.path("vocab.tsv"))
        data.pmi.save(out.path("pmi.npz"))
        for s in seeds:
            c = TrainConfig.from_dict({**cfg.to_dict(), "seed": s})
            res = train(c, data.train, data.dev, len(data.vocab), len(data.labels), embeddings=embeddings)
            tag = "" if len(seeds) == 1 else f"_seed{s}"
            save_trained(out.path(f"model{tag}.ckpt"), res, data, extra)
            res.write_log(out.path(f"train_log{tag}.csv"))
            run = {"seed": s, "best_epoch": res.best_epoch, "dev": res.best_metric}
            if data.test:
                run["test"] = evaluate(res.params, data.test, c.workers)
            summary["runs"].append(run)
            print(f"seed {s}: best epoch {res.best_epoch}, dev {res.best_metric:.4f}" + (f", test {headline(run['test']):.4f}" if data.test else ""))
        if data.test and len(seeds) > 1:
            summary["test"] = _mean_std([r["test"] for r in summary["runs"]])
        summary["config"] = resolved
        out.json("metrics.json", summary)
    return 0


def _mean_std(runs: list[dict]) -> dict:
    out = {}
    for key in runs[0]:
        vals = np.array([r[key] for r in runs], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out


def _restore(ckpt: str, pmi_path: str | None):
    """Checkpoint params plus the vocabulary, labels, config and PMI it was trained with."""
    if not Path(ckpt).is_file():
        raise IngestionError(f"checkpoint not found: {ckpt}")
    params, header = load_trained(ckpt)
    if "vocab" not in header or "labels" not in header:
        raise ContractError(f"{ckpt}: checkpoint carries no vocabulary or label set")
    vocab = Vocab(header["vocab"], [0] * len(header["vocab"]))
    cfg = TrainConfig.from_dict(header["train_config"])
    pmi_path = Path(pmi_path) if pmi_path else Path(ckpt).with_name("pmi.npz")
    if not pmi_path.is_file():
        raise IngestionError(f"PMI table not found: {pmi_path} (pass --pmi)")
    pmi = PmiTable.load(pmi_path)
    if len(pmi.unigram) != len(vocab):
        raise ContractError(f"PMI table {pmi_path} was built for a different vocabulary")
    return params, header, vocab, cfg, pmi


def _examples(docs, vocab, pmi, labels, cfg):
    unknown = sorted({lab for d in docs for lab in d.labels} - set(labels))
    if unknown:
        raise ContractError(f"corpus labels {unknown} are not in the checkpoint's label set")
    return make_examples(docs, vocab, pmi, labels, cfg)


def cmd_eval(args, resolved: dict) -> int:
    docs = read_corpus(args.corpus)
    if not docs:
        raise IngestionError(f"{args.corpus}: corpus is empty")
    results = []
    with Outputs(resolved["out"], resolved) as out:
        for k, ckpt in enumerate(args.checkpoint):
            params, header, vocab, cfg, pmi = _restore(ckpt, args.pmi)
            labels = header["labels"]
            exs = _examples(docs, vocab, pmi, labels, cfg)
            pred = predict_all(exs, params, resolved["workers"])
            m = metrics(pred, [ex.labels for ex in exs], params.config.task)
            results.append(m)
            tag = "" if len(args.checkpoint) == 1 else f"_{k}"
            heads.write_predictions(
                out.path(f"predictions{tag}.jsonl"),
                [[labels[y] for y in p] for p in pred],
                [[labels[y] for y in ex.labels] for ex in exs],
            )
        report = dict(results[0]) if len(results) == 1 else _mean_std(results)
        report_out = {"metrics": report, "checkpoints": list(args.checkpoint), "config": resolved}
        if len(results) > 1:
            report_out["runs"] = results
        out.json("metrics.json", report_out)
    if len(results) == 1:
        print(json.dumps(report, sort_keys=True))
    else:
        print(", ".join(f"{k} {v['mean']:.4f} ± {v['std']:.4f}" for k, v in report.items()))
    return 0


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_diagnose(args, resolved: dict) -> int:
    if args.which == "sweep":
        return _diagnose_sweep(args, resolved)
    docs = read_corpus(args.corpus)
    with Outputs(resolved["out"], resolved) as out:
        if args.which == "smoothing":
            profiles = []
            for ckpt in args.checkpoint:
                params, header, vocab, cfg, pmi = _restore(ckpt, args.pmi)
                exs = _examples(docs, vocab, pmi, header["labels"], cfg)
                if args.max_docs:
                    exs = exs[: args.max_docs]
                depth = max(args.depths) if args.depths else params.config.layers
                prof = diagnostics.smoothing_profile(params, exs, depth, min_docs=args.min_docs)
                profiles.append(prof)
                for layer in args.depths or range(depth + 1):
                    print(f"{prof.variant} layer {layer}: {prof.mean[layer]:.4f} ± {prof.std[layer]:.4f}")
            diagnostics.write_profiles(out.path("smoothing.csv"), profiles)
        else:
            params, header, vocab, cfg, pmi = _restore(args.checkpoint[0], args.pmi)
            exs = _examples(docs, vocab, pmi, header["labels"], cfg)
            if not 0 <= args.doc < len(exs):
                raise ContractError(f"--doc {args.doc} outside the {len(exs)} documents of {args.corpus}")
            rows = diagnostics.attention_heatmap(params, exs[args.doc], args.step, args.teacher_forced)
            diagnostics.write_heatmap(out.path("heatmap.jsonl"), [rows])
            top = sorted(rows, key=lambda r: -r["score"])[:5]
            print(" ".join(f"{r['token']}:{r['score']:.3f}" for r in top))
    return 0


def _diagnose_sweep(args, resolved: dict) -> int:
    _check_paths(resolved, ("train",))
    cfg = train_config(resolved)
    train_docs, dev_docs, test_docs = _split_docs(cfg, resolved)
    data = prepare(cfg, train_docs, dev_docs, test_docs)
    eval_docs = test_docs or dev_docs
    with Outputs(resolved["out"], resolved) as out:
        rows = diagnostics.neighbor_sweep(cfg, data, args.n, train_docs, dev_docs, eval_docs)
        diagnostics.write_sweep(out.path("sweep.csv"), rows)
    for r in rows:
        print(f"n={r.n}: {r.metric:.4f}")
    return 0


# ---------------------------------------------------------------------------
# import


def _import_fasttext(path: Path) -> list[Document]:
    docs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        words = line.split()
        labels = [w[len("__label__") :] for w in words if w.startswith("__label__")]
        text = " ".join(w for w in words if not w.startswith("__label__"))
        if not labels:
            raise IngestionError(f"{path}:{lineno}: no __label__ prefix")
        docs.append(Document(labels, text))
    return docs


def _import_csv(path: Path, label_col: str, text_col: str, sep: str) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {label_col, text_col} - set(reader.fieldnames or ())
        if missing:
            raise IngestionError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            labels = [lab.strip() for lab in row[label_col].split(sep) if lab.strip()]
            if not labels:
                raise IngestionError(f"{path}:{reader.line_num}: empty label")
            docs.append(Document(labels, row[text_col]))
    return docs


def _import_dirs(root: Path) -> list[Document]:
    """``root/<label>/<file>``; files found under several labels become multi-label documents."""
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    by_name: dict[str, Document] = {}
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(p for p in label_dir.iterdir() if p.is_file()):
            doc = by_name.get(f.name)
            if doc is None:
                by_name[f.name] = Document([label_dir.name], f.read_text(encoding="utf-8", errors="replace"))
            else:
                doc.labels.append(label_dir.name)
    return [by_name[k] for k in sorted(by_name)]


def cmd_import(args, resolved: dict) -> int:
    src = Path(args.input)
    if not src.exists():
        raise IngestionError(f"input not found: {src}")
    if args.format == "fasttext":
        docs = _import_fasttext(src)
    elif args.format == "csv":
        docs = _import_csv(src, args.label_column, args.text_column, args.label_sep)
    else:
        docs = _import_dirs(src)
    if not docs:
        raise IngestionError(f"{src}: no documents found")
    for d in docs:
        d.labels = [lab.replace("|", "_").replace("\t", " ") for lab in d.labels]
    with Outputs(resolved["out"], resolved) as out:
        write_corpus(out.path(args.name), docs)
    print(f"wrote {len(docs)} documents to {Path(resolved['out']) / args.name}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="vocabulary, PMI table and per-document graphs")
    _add_common(p)
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train and keep the best dev checkpoint")
    _add_common(p)
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--embeddings", default=argparse.SUPPRESS, help="word vectors, 'token v1 ... vd' per line")
    p.add_argument("--seeds", type=_ints, help="train once per seed, e.g. 0,1,2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on a corpus")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", required=True, help="repeat for mean ± std over several runs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pmi", help="PMI table (default: pmi.npz next to the checkpoint)")
    p.add_argument("--workers", type=int, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="over-smoothing profile, attention heat map, neighbour sweep")
    _add_common(p)
    p.add_argument("which", choices=["smoothing", "heatmap", "sweep"])
    p.add_argument("--checkpoint", action="append", default=[], help="smoothing accepts one per variant")
    p.add_argument("--corpus", help="documents to diagnose (smoothing, heatmap)")
    p.add_argument("--pmi")
    p.add_argument("--depths", type=_ints, help="layers to report, e.g. 2,4,6,8,10 (smoothing)")
    p.add_argument("--max-docs", type=int, default=0)
    p.add_argument("--min-docs", type=int, default=10)
    p.add_argument("--doc", type=int, default=0, help="document index (heatmap)")
    p.add_argument("--step", type=int, default=0, help="decoding step, 0-based (heatmap)")
    p.add_argument("--teacher-forced", action="store_true")
    p.add_argument("--n", type=_ints, default=[2, 3, 5, 7, 9], help="neighbour counts (sweep)")
    _add_data_flags(p, train_required=False)
    _add_config_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("import", help="convert a corpus to label<TAB>text")
    _add_common(p)
    p.add_argument("--format", choices=["fasttext", "csv", "dirs"], required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--name", default="corpus.tsv", help="output file name inside --out")
    p.add_argument("--label-column", default="label")
    p.add_argument("--text-column", default="text")
    p.add_argument("--label-sep", default="|")
    p.set_defaults(func=cmd_import)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        resolved = resolve(args)
        if args.command == "diagnose":
            if args.which != "sweep" and (not args.checkpoint or not args.corpus):
                raise ConfigError(f"diagnose {args.which} needs --checkpoint and --corpus")
            if args.which == "heatmap" and len(args.checkpoint) != 1:
                raise ConfigError("diagnose heatmap takes exactly one --checkpoint")
        return args.func(args, resolved)
    except ConfigError as exc:
        print(f"regnn: configuration error: {exc}", file=sys.stderr)
        return 2
    except (RegnnError, OSError, KeyError, ValueError) as exc:
        print(f"regnn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
