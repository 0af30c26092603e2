"""
Command-line surface: synth → build-graphs → pretrain → train → eval → report, plus
export-embeddings. Every subcommand reads the config file and flag overrides, works inside
one run directory and refreshes the run manifest when it finishes.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import markdown
import numpy as np

import data_access_layer.data_store as db
from app.config import config_echo, load_config, render_config
from data_access_layer.entity_linker import Gazetteer
from data_access_layer.graph_builder import build_graphs, build_vocabulary
from data_access_layer.synthetic_corpus import write_synthetic_corpus
from data_object_model.corpus import Document, Vocabulary
from data_object_model.episode import LabeledGraphSet
from data_object_model.errors import CoGraphError
from data_object_model.hewe import HeweGraph
from data_object_model.run_state import (
    ABLATION_MODES, EVAL_SPLITS, SAMPLING_STRATEGIES, MetricsReport, RunConfig,
)
from model_access_layer import fewshot
from model_access_layer.graph_encoder import EncoderParams, seed_from_pretrained
from model_access_layer.pretrain import PretrainModel, ablation_mode, build_sequences

logger = logging.getLogger(__name__)

DEFAULT_OUT = "runs/default"
METRIC_COLUMNS = ("acc", "precision", "recall", "f1")


# --- Shared plumbing -------------------------------------------------------------


class RunContext:
    """Resolved config plus the run directory for one subcommand invocation."""

    def __init__(self, cfg: RunConfig, layout: db.RunLayout, args: argparse.Namespace):
        self.cfg = cfg
        self.layout = layout
        self.args = args

    def load_corpus(self) -> List[Document]:
        return db.read_corpus(self.layout.corpus)

    def load_graphs(self) -> Tuple[Vocabulary, Dict[str, HeweGraph]]:
        vocab = db.load_vocabulary(self.layout.vocabulary)
        return vocab, db.load_graphs(self.layout.graph_dir)

    def splits(self) -> Tuple[Vocabulary, Dict[str, HeweGraph], LabeledGraphSet, LabeledGraphSet, LabeledGraphSet]:
        vocab, graphs = self.load_graphs()
        train, validation, test = fewshot.split_dataset(self.load_corpus(), graphs, self.cfg.fewshot)
        return vocab, graphs, train, validation, test

    def fewshot_model(self) -> Tuple[EncoderParams, fewshot.PredictorParams]:
        path = self.layout.require(self.layout.resolve(self.cfg.fewshot.checkpoint), "run the train stage first")
        return fewshot.load_fewshot(db.load_checkpoint(path))


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    out: Dict[str, object] = {
        "pretrain.mode": args.mode,
        "fewshot.C": args.C,
        "fewshot.K": args.K,
        "fewshot.L": args.L,
        "fewshot.eval_episodes": args.episodes,
        "report.episodes": args.episodes,
        "fewshot.strategy": args.strategy,
        "fewshot.split": args.split,
    }
    if args.seed is not None:
        out.update({"synth.seed": args.seed, "pretrain.seed": args.seed, "fewshot.seed": args.seed})
    return out


def _initial_encoder(ctx: RunContext, vocab: Vocabulary) -> Optional[Dict[str, np.ndarray]]:
    """Encoder tensors seeded from pre-trained word vectors, when configured."""
    path = ctx.cfg.encoder.pretrained_vectors
    if not path:
        return None
    vectors = db.load_pretrained_vectors(ctx.layout.resolve(path), ctx.cfg.encoder.embedding_dim)
    rng = np.random.default_rng(np.random.SeedSequence(ctx.cfg.pretrain.seed).spawn(1)[0])
    encoder = EncoderParams.initialize(vocab.feature_size, ctx.cfg.encoder, rng)
    seed_from_pretrained(encoder, vocab, vectors)
    return encoder.state_dict()


def _metrics_rows(report: MetricsReport) -> List[list]:
    return [[r.episode, r.acc, r.precision, r.recall, r.f1, r.n_queries] for r in report.episodes]


def _summary_row(report: MetricsReport) -> list:
    return [report.acc, report.acc_stderr, report.precision, report.precision_stderr,
            report.recall, report.recall_stderr, report.f1, report.f1_stderr, report.n_episodes]


SUMMARY_HEADER = ["acc", "acc_stderr", "precision", "precision_stderr", "recall", "recall_stderr",
                  "f1", "f1_stderr", "n_episodes"]


# --- Subcommands -----------------------------------------------------------------


def cmd_synth(ctx: RunContext) -> None:
    docs, gazetteer = write_synthetic_corpus(ctx.cfg.synth, ctx.layout)
    print(f"wrote {len(docs)} documents and {len(gazetteer)} gazetteer entries to {ctx.layout.corpus.parent}")


def cmd_build_graphs(ctx: RunContext) -> None:
    g = ctx.cfg.graph
    corpus = ctx.load_corpus()
    if ctx.layout.gazetteer.exists():
        gazetteer = db.read_gazetteer(ctx.layout.gazetteer)
    else:
        logger.warning("no gazetteer at %s; graphs will have no entity nodes", ctx.layout.gazetteer)
        gazetteer = Gazetteer()
    vocab = build_vocabulary(corpus, g.min_count, g.max_words_per_doc, gazetteer)
    graphs = build_graphs(corpus, vocab, gazetteer, g.window_size, g.max_words_per_doc, g.workers)
    db.save_graphs(ctx.layout.graph_dir, graphs)
    db.save_vocabulary(ctx.layout.vocabulary, vocab)
    print(f"built {len(graphs)} graphs over {vocab.n_words} words and {vocab.n_entities} entities")


def cmd_pretrain(ctx: RunContext) -> None:
    p = ctx.cfg.pretrain
    vocab, graphs = ctx.load_graphs()
    sequences = build_sequences(ctx.load_corpus(), graphs)
    model = None
    seeded = _initial_encoder(ctx, vocab)
    if seeded is not None:
        model = PretrainModel.initialize(vocab.feature_size, ctx.cfg.encoder, p,
                                         np.random.default_rng(np.random.SeedSequence(p.seed).spawn(1)[0]))
        model.encoder = EncoderParams.from_state_dict(seeded)
    result = ablation_mode(
        [graphs[k] for k in sorted(graphs)], sequences, p, ctx.cfg.encoder, vocab.feature_size, p.mode,
        model=model, checkpoint_path=ctx.layout.resolve(p.checkpoint), log_path=ctx.layout.pretrain_log,
    )
    if result is None:
        print("mode none: no pre-training checkpoint written")
    else:
        last = result.records[-1]
        print(f"pre-trained {p.epochs} epochs ({p.mode}); final l_total={last.get('l_total')}")


def cmd_train(ctx: RunContext) -> None:
    f = ctx.cfg.fewshot
    vocab, graphs, train, validation, _ = ctx.splits()
    if f.max_train_classes > 0:
        rng = np.random.default_rng(np.random.SeedSequence([f.seed, f.max_train_classes]))
        train = fewshot.restrict_classes(train, f.max_train_classes, f.class_strategy, rng)
        validation = validation.restricted_to([c for c in train.classes if c in validation.class_index])
        logger.info("training restricted to %d classes (%s)", len(train.classes), f.class_strategy)

    if ctx.cfg.pretrain.mode == "none":
        pretrained = _initial_encoder(ctx, vocab)
    else:
        path = ctx.layout.require(ctx.layout.resolve(ctx.cfg.pretrain.checkpoint),
                                  "run the pretrain stage first or set pretrain.mode = none")
        pretrained = db.load_checkpoint(path)
    result = fewshot.train_fewshot(
        train, validation, graphs, f, ctx.cfg.encoder, vocab.feature_size, pretrained=pretrained,
        checkpoint_path=ctx.layout.resolve(f.checkpoint), log_path=ctx.layout.fewshot_log,
    )
    best = "n/a" if result.best_val_acc is None else f"{result.best_val_acc:.4f}"
    print(f"trained {f.epochs} epochs; best validation accuracy {best}")


def _eval_split(ctx: RunContext) -> Tuple[Dict[str, HeweGraph], LabeledGraphSet]:
    _, graphs, _, validation, test = ctx.splits()
    return graphs, test if ctx.cfg.fewshot.split == "test" else validation


def cmd_eval(ctx: RunContext) -> None:
    encoder, predictor = ctx.fewshot_model()
    graphs, data = _eval_split(ctx)
    report = fewshot.evaluate(data, graphs, encoder, predictor, ctx.cfg.fewshot, config=config_echo(ctx.cfg))
    metrics_dir = ctx.layout.metrics_dir
    db.write_json(metrics_dir / "metrics.json", report.to_primitive())
    db.write_csv(metrics_dir / "episodes.csv", ["episode", *METRIC_COLUMNS, "n_queries"], _metrics_rows(report))
    print(f"{ctx.cfg.fewshot.split}: acc={report.acc:.4f}±{report.acc_stderr:.4f} "
          f"precision={report.precision:.4f} recall={report.recall:.4f} f1={report.f1:.4f} "
          f"over {report.n_episodes} episodes")


def _markdown_report(ctx: RunContext, metrics: dict, sweep: Dict[int, MetricsReport],
                     class_rows: Sequence[Tuple[str, int, MetricsReport]]) -> str:
    f = ctx.cfg.fewshot
    lines = [
        f"# Few-shot results ({f.split} split)",
        "",
        f"{f.C}-way {f.K}-shot, {metrics['n_episodes']} episodes, head `{f.head}`, "
        f"pre-training mode `{ctx.cfg.pretrain.mode}`.",
        "",
        "| metric | mean | stderr |",
        "|---|---|---|",
    ]
    for name in METRIC_COLUMNS:
        lines.append(f"| {name} | {metrics[name]:.4f} | {metrics[name + '_stderr']:.4f} |")
    if sweep:
        lines += ["", "## Support size", "", "| K | acc | precision | recall | f1 |", "|---|---|---|---|---|"]
        for k, r in sorted(sweep.items()):
            lines.append(f"| {k} | {r.acc:.4f} | {r.precision:.4f} | {r.recall:.4f} | {r.f1:.4f} |")
    if class_rows:
        lines += ["", "## Training classes", "", "| strategy | classes | acc | f1 |", "|---|---|---|---|"]
        for strategy, n, r in class_rows:
            lines.append(f"| {strategy} | {n} | {r.acc:.4f} | {r.f1:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_report(ctx: RunContext) -> None:
    r = ctx.cfg.report
    metrics_dir = ctx.layout.metrics_dir
    metrics = db.read_json(ctx.layout.require(metrics_dir / "metrics.json", "run the eval stage first"))
    encoder, predictor = ctx.fewshot_model()
    vocab, graphs, train, validation, test = ctx.splits()
    data = test if ctx.cfg.fewshot.split == "test" else validation

    sweep = fewshot.k_sweep(data, graphs, encoder, predictor, ctx.cfg.fewshot, range(1, r.k_max + 1), r.episodes)
    db.write_csv(metrics_dir / "k_sweep.csv", ["K", *SUMMARY_HEADER],
                 [[k, *_summary_row(sweep[k])] for k in sorted(sweep)])
    db.write_csv(metrics_dir / "k_sweep_episodes.csv", ["K", "episode", *METRIC_COLUMNS, "n_queries"],
                 [[k, *row] for k in sorted(sweep) for row in _metrics_rows(sweep[k])])

    class_rows = []
    if r.class_counts:
        pretrained = None
        if ctx.cfg.pretrain.mode != "none":
            pretrained = db.load_checkpoint(ctx.layout.require(ctx.layout.resolve(ctx.cfg.pretrain.checkpoint)))
        class_rows = fewshot.class_count_sweep(
            train, validation, test, graphs, ctx.cfg.fewshot, ctx.cfg.encoder, vocab.feature_size,
            r.class_counts, pretrained, r.episodes,
        )
        db.write_csv(metrics_dir / "class_sweep.csv", ["strategy", "n_classes", *SUMMARY_HEADER],
                     [[s, n, *_summary_row(rep)] for s, n, rep in class_rows])

    text = _markdown_report(ctx, metrics, sweep, class_rows)
    db.write_text(metrics_dir / "report.md", text)
    db.write_text(metrics_dir / "report.html", markdown.markdown(text, extensions=["tables"]) + "\n")
    print(text, end="")


def cmd_export_embeddings(ctx: RunContext) -> None:
    encoder, _ = ctx.fewshot_model()
    graphs, data = _eval_split(ctx)
    embeddings = fewshot.embed_all(data.graph_ids, graphs, encoder)
    rows = [(g, label, embeddings[g]) for label in data.classes for g in data.class_index[label]]
    db.write_embeddings(ctx.layout.embeddings, rows)
    print(f"exported {len(rows)} embeddings to {ctx.layout.embeddings}")


COMMANDS: Dict[str, Tuple[Callable[[RunContext], None], str]] = {
    "synth": (cmd_synth, "generate the synthetic corpus and gazetteer"),
    "build-graphs": (cmd_build_graphs, "build the vocabulary and one HEWE graph per document"),
    "pretrain": (cmd_pretrain, "contrastive pre-training of the graph encoder"),
    "train": (cmd_train, "episodic few-shot training"),
    "eval": (cmd_eval, "evaluate on held-out classes"),
    "report": (cmd_report, "metrics table, K-sweep and optional class-count sweep"),
    "export-embeddings": (cmd_export_embeddings, "write evaluation-split graph embeddings"),
}


# --- Entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", default=DEFAULT_OUT, help=f"run directory (default {DEFAULT_OUT})")
    common.add_argument("--seed", type=int, help="seed for the synthetic corpus, pre-training and few-shot stages")
    common.add_argument("--mode", choices=ABLATION_MODES, help="pre-training losses to use")
    common.add_argument("--C", type=int, help="classes per episode")
    common.add_argument("--K", type=int, help="support graphs per class")
    common.add_argument("--L", type=int, help="query graphs per class")
    common.add_argument("--episodes", type=int, help="evaluation episodes")
    common.add_argument("--strategy", choices=SAMPLING_STRATEGIES, help="episode class sampling")
    common.add_argument("--split", choices=EVAL_SPLITS, help="evaluation split")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="cograph", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = load_config(args.config, _overrides(args))
        logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        logging.getLogger().setLevel(logging.DEBUG if args.verbose else cfg.log_level.upper())

        layout = db.RunLayout(args.out)
        layout.root.mkdir(parents=True, exist_ok=True)
        db.write_text(layout.config_snapshot, render_config(cfg))
        handler, _ = COMMANDS[args.command]
        handler(RunContext(cfg, layout, args))
        db.update_manifest(layout)
    except (CoGraphError, FileNotFoundError, KeyError, ValueError) as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"cograph {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
