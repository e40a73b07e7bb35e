"""Command line interface: one executable exposing the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 data error.  Errors are emitted as
one JSON object per line on stderr; every run echoes its resolved
configuration to stderr for reproducibility.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import FORMAT_VERSION, __version__, fixture_path
from .errors import MmeError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _echo_config(args: dict) -> None:
    resolved = {k: v for k, v in sorted(args.items()) if not k.startswith("_")}
    print("# config " + json.dumps(resolved, sort_keys=True, default=str),
          file=sys.stderr)


def load_config_file(path) -> dict:
    """Flat key=value file; blank lines and #-comments ignored."""
    config = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, _, value = line.partition("=")
            config[key.strip()] = value.strip()
    return config


def _resolve(flag_value, config: dict, key: str, default, cast):
    if flag_value is not None:
        return flag_value
    if key in config:
        raw = config[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def build_parser() -> _Parser:
    parser = _Parser(prog="mme", description=__doc__)
    parser.add_argument("--version", action="store_true",
                        help="print toolkit and format versions")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("build-kg", help="build the API knowledge graph")
    p.add_argument("--docs", required=True)
    p.add_argument("--templates", default=None)
    p.add_argument("--verbs", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-kg-embed", help="train graph embeddings")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)

    p = sub.add_parser("gen", help="generate a synthetic evolving corpus")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-out", default=None)
    p.add_argument("--families", type=int, default=None)
    p.add_argument("--months", type=int, default=None)
    p.add_argument("--per-family", type=int, default=None)
    p.add_argument("--benign", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hostile", action="store_true")

    p = sub.add_parser("embed", help="embed traces into a tensor file")
    p.add_argument("--traces", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--len", type=int, default=None, dest="max_len")
    p.add_argument("--hash-seed", type=int, default=None)
    p.add_argument("--dedup", action="store_true")

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--mode", choices=("regular", "mme"), default=None)
    p.add_argument("--encoder", choices=("textcnn", "meanpool"), default=None)
    p.add_argument("--traces", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-end", default=None,
                   help="train only on traces at or before this period")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--len", type=int, default=None, dest="max_len")
    p.add_argument("--hash-seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("predict", help="score traces with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hash-seed", type=int, default=None)

    p = sub.add_parser("evaluate", help="aging curve over a temporal split")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--split", choices=("yearly", "monthly"), default="monthly")
    p.add_argument("--train-end", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot-data", default=None)
    p.add_argument("--hash-seed", type=int, default=None)

    p = sub.add_parser("maintain", help="active-learning maintenance loop")
    p.add_argument("--strategy", choices=("threshold", "budget"), required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--train-end", required=True)
    p.add_argument("--T", type=float, default=None, dest="threshold")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log-out", default=None)
    p.add_argument("--hash-seed", type=int, default=None)

    p = sub.add_parser("stability", help="per-family feature stability report")
    p.add_argument("--model", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--families", default=None,
                   help="comma-separated family ids to include")
    p.add_argument("--hash-seed", type=int, default=None)

    p = sub.add_parser("demo", help="full desk-scale aging experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--months", type=int, default=None)
    p.add_argument("--families", type=int, default=None)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None, help="flat key=value config file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.version:
        print(f"mme {__version__} format {FORMAT_VERSION}")
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    handler = _HANDLERS[args.command]
    try:
        config = load_config_file(args.config) if getattr(args, "config", None) else {}
        return handler(args, config)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (MmeError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 2


# --- handlers ----------------------------------------------------------------

def _cmd_build_kg(args, config) -> int:
    from .docs import parse_doc_corpus
    from .graph import (build_graph, graph_stats, load_templates,
                        load_verb_lexicon, save_graph)

    templates_path = args.templates or fixture_path("templates.jsonl")
    verbs_path = args.verbs or fixture_path("verbs.txt")
    _echo_config({"docs": args.docs, "templates": str(templates_path),
                  "verbs": str(verbs_path), "out": args.out})
    records = parse_doc_corpus(args.docs)
    g = build_graph(records, load_templates(templates_path),
                    load_verb_lexicon(verbs_path))
    save_graph(g, args.out)
    stats = graph_stats(g)
    print(f"{'entity kind':<12}{'count':>8}")
    for kind, count in stats["entities"].items():
        print(f"{kind:<12}{count:>8}")
    print(f"{'relation':<14}{'count':>6}")
    for rel, count in stats["relations"].items():
        print(f"{rel:<14}{count:>6}")
    return 0


def _cmd_train_kg_embed(args, config) -> int:
    from .graph import load_graph
    from .transe import TranseConfig, save_embeddings, train

    cfg = TranseConfig(
        dim=_resolve(args.dim, config, "transe.dim", 64, int),
        epochs=_resolve(args.epochs, config, "transe.epochs", 200, int),
        seed=_resolve(args.seed, config, "seed", 0, int),
        learning_rate=_resolve(args.lr, config, "transe.lr", 0.01, float),
        margin_gamma=_resolve(args.gamma, config, "transe.gamma", 1.0, float),
    )
    _echo_config({"graph": args.graph, "out": args.out, **vars(cfg)})
    table = train(load_graph(args.graph), cfg)
    save_embeddings(table, args.out)
    print(f"trained {len(table.entity_ids)} entity vectors "
          f"(dim={cfg.dim}, final epoch loss {table.loss_history[-1]:.4f})")
    return 0


def _cmd_gen(args, config) -> int:
    from .graph import load_graph
    from .sequence import save_traces
    from .synth import EvolutionConfig, generate_corpus

    cfg = EvolutionConfig(
        families=_resolve(args.families, config, "gen.families", 10, int),
        months=_resolve(args.months, config, "gen.months", 24, int),
        per_family_month=_resolve(args.per_family, config, "gen.per_family", 4, int),
        benign_per_month=_resolve(args.benign, config, "gen.benign", 40, int),
        seed=_resolve(args.seed, config, "seed", 0, int),
        hostile=args.hostile,
    )
    _echo_config({"graph": args.graph, "out": args.out, **vars(cfg)})
    bundle = generate_corpus(load_graph(args.graph), cfg)
    save_traces(bundle.traces, args.out)
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            json.dump({"substitutions": bundle.substitution_log,
                       "family_cores": bundle.family_cores}, fh, sort_keys=True)
    print(f"wrote {len(bundle.traces)} traces "
          f"({cfg.families} families x {cfg.months} months)")
    return 0


def _embed_params(args, config):
    n_bins = _resolve(getattr(args, "bins", None), config, "hash.bins", 128, int)
    hash_seed = _resolve(args.hash_seed, config, "hash.seed", 9, int)
    max_len = _resolve(getattr(args, "max_len", None), config, "embed.len", 200, int)
    return n_bins, max_len, hash_seed


def _cmd_embed(args, config) -> int:
    from .sequence import embed_dataset, load_traces, save_dataset
    from .transe import load_embeddings

    n_bins, max_len, hash_seed = _embed_params(args, config)
    _echo_config({"traces": args.traces, "emb": args.emb, "out": args.out,
                  "bins": n_bins, "len": max_len, "hash_seed": hash_seed})
    table = load_embeddings(args.emb)
    traces = load_traces(args.traces)
    dataset = embed_dataset(traces, table, n_bins, max_len, hash_seed)
    save_dataset(dataset, args.out)
    print(f"embedded {len(dataset)} traces to "
          f"{dataset.X.shape[1]}x{dataset.X.shape[2]} matrices")
    return 0


def _cmd_train(args, config) -> int:
    from .evaluate import temporal_split
    from .nnet import EncoderConfig, TrainConfig, save_model, train_model
    from .sequence import embed_dataset, load_traces
    from .transe import load_embeddings

    n_bins, max_len, hash_seed = _embed_params(args, config)
    enc_cfg = EncoderConfig(
        kind=_resolve(args.encoder, config, "train.encoder", "textcnn", str),
        filter_widths=(3, 4, 5),
        filters_per_width=int(config.get("train.filters", 8)),
        latent_dim=int(config.get("train.latent", 16)),
    )
    train_cfg = TrainConfig(
        mode=_resolve(args.mode, config, "train.mode", "mme", str),
        learning_rate=_resolve(args.lr, config, "train.lr", 0.05, float),
        epochs=_resolve(args.epochs, config, "train.epochs", 30, int),
        pairs_per_batch=_resolve(args.pairs, config, "train.pairs", 16, int),
        lam=_resolve(args.lam, config, "train.lambda", 1.0, float),
        margin=_resolve(args.margin, config, "train.margin", 1.0, float),
        classifier_hidden=int(config.get("train.hidden", 16)),
        auto_balance=_resolve(None, config, "train.auto_balance", False, bool),
        seed=_resolve(args.seed, config, "seed", 0, int),
    )
    _echo_config({"traces": args.traces, "emb": args.emb, "out": args.out,
                  "bins": n_bins, "len": max_len, "hash_seed": hash_seed,
                  "encoder": vars(enc_cfg), "train": vars(train_cfg),
                  "train_end": args.train_end})
    table = load_embeddings(args.emb)
    traces = load_traces(args.traces)
    dataset = embed_dataset(traces, table, n_bins, max_len, hash_seed)
    if args.train_end:
        split = temporal_split(traces, args.train_end, "monthly")
        dataset = dataset.subset(split.train)
    model = train_model(dataset, enc_cfg, train_cfg)
    save_model(model, args.out)
    print(f"trained {train_cfg.mode} model on {len(dataset)} traces; "
          f"final epoch loss {model.loss_history[-1]:.4f}")
    return 0


def _load_model_dataset(args, config):
    from .nnet import load_model
    from .sequence import embed_dataset, load_traces
    from .transe import load_embeddings

    model = load_model(args.model)
    table = load_embeddings(args.emb)
    n_bins = model.input_dim - table.dim
    if n_bins < 1:
        raise ValueError("model input width is narrower than the embedding dim")
    hash_seed = _resolve(args.hash_seed, config, "hash.seed", 9, int)
    traces = load_traces(args.traces)
    dataset = embed_dataset(traces, table, n_bins, model.max_len, hash_seed)
    return model, traces, dataset


def _cmd_predict(args, config) -> int:
    from .nnet import predict_dataset

    _echo_config({"model": args.model, "traces": args.traces,
                  "emb": args.emb, "out": args.out})
    model, traces, dataset = _load_model_dataset(args, config)
    y_hat, scores, _ = predict_dataset(model, dataset)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("id,y_true,f_x,y_hat\n")
        for i, tid in enumerate(dataset.ids):
            fh.write(f"{tid},{int(dataset.y[i])},{scores[i]:.6f},{int(y_hat[i])}\n")
    print(f"scored {len(dataset)} traces -> {args.out}")
    return 0


def _cmd_evaluate(args, config) -> int:
    from .evaluate import aging_curve, metrics_to_csv, metrics_to_plot_data, temporal_split

    _echo_config({"model": args.model, "traces": args.traces, "emb": args.emb,
                  "split": args.split, "train_end": args.train_end,
                  "out": args.out})
    model, traces, dataset = _load_model_dataset(args, config)
    split = temporal_split(traces, args.train_end, args.split)
    rows = aging_curve(model, split, dataset)
    metrics_to_csv(rows, args.out)
    if args.plot_data:
        metrics_to_plot_data(rows, args.plot_data)
    for r in rows:
        print(f"{r.period}  fpr={r.fpr:.4f} fnr={r.fnr:.4f} f1={r.f1:.4f}")
    return 0


def _cmd_maintain(args, config) -> int:
    from .evaluate import (maintain_to_threshold, maintain_with_budget,
                           metrics_to_csv, temporal_split)

    _echo_config({"model": args.model, "traces": args.traces, "emb": args.emb,
                  "strategy": args.strategy, "T": args.threshold,
                  "budget": args.budget, "ratio": args.ratio,
                  "train_end": args.train_end, "out": args.out})
    model, traces, dataset = _load_model_dataset(args, config)
    split = temporal_split(traces, args.train_end, "monthly")
    if args.strategy == "threshold":
        if args.threshold is None:
            raise _UsageError("--T is required for the threshold strategy")
        result = maintain_to_threshold(model, split, dataset, args.threshold)
    else:
        if (args.budget is None) == (args.ratio is None):
            raise _UsageError("budget strategy needs exactly one of --budget/--ratio")
        result = maintain_with_budget(model, split, dataset,
                                      count=args.budget, ratio=args.ratio)
    metrics_to_csv(result.rows, args.out,
                   extra_rows=(("average", result.average()),))
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            json.dump({"labels_used": result.labels_used,
                       "label_log": result.label_log}, fh, sort_keys=True)
    avg = result.average()
    print(f"labels used: {result.total_labels()}; "
          f"avg fpr={avg['fpr']:.4f} fnr={avg['fnr']:.4f} f1={avg['f1']:.4f}")
    return 0


def _cmd_stability(args, config) -> int:
    from .evaluate import stability_report

    _echo_config({"model": args.model, "traces": args.traces, "emb": args.emb,
                  "groups": args.groups, "families": args.families,
                  "out": args.out})
    model, traces, dataset = _load_model_dataset(args, config)
    if args.families:
        wanted = {int(f) for f in args.families.split(",")}
        traces = [t for t in traces if t.y == 0 or t.family in wanted]
    report = stability_report(model, traces, dataset, args.groups)
    payload = {
        "n_groups": report.n_groups,
        "mean_score": report.mean_score(),
        "family_scores": {str(f): s for f, s in sorted(report.per_family.items())},
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    print(f"mean JS score over {len(report.per_family)} families: "
          f"{report.mean_score():.6f}")
    return 0


def _cmd_demo(args, config) -> int:
    from .evaluate import metrics_to_csv
    from .experiment import ExperimentConfig, curve_summary, run_pipeline
    from .graph import save_graph
    from .nnet import save_model
    from .sequence import save_traces
    from .transe import save_embeddings

    cfg = ExperimentConfig(seed=_resolve(args.seed, config, "seed", 7, int))
    if args.months:
        cfg.months = args.months
    if args.families:
        cfg.families = args.families
    _echo_config({"out": args.out, **{k: str(v) for k, v in vars(cfg).items()}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = run_pipeline(cfg)
    save_graph(bundle.graph, out / "graph.tsv")
    save_embeddings(bundle.table_trained, out / "embeddings.txt")
    save_traces(bundle.corpus.traces, out / "traces.jsonl")
    with open(out / "substitutions.json", "w", encoding="utf-8") as fh:
        json.dump({"substitutions": bundle.corpus.substitution_log,
                   "family_cores": bundle.corpus.family_cores}, fh, sort_keys=True)
    save_model(bundle.model_regular, out / "model_regular.txt")
    save_model(bundle.model_mme, out / "model_mme.txt")
    metrics_to_csv(bundle.curve_regular, out / "aging_regular.csv")
    metrics_to_csv(bundle.curve_mme, out / "aging_mme.csv")
    summary = {
        "seed": cfg.seed,
        "regular": curve_summary(bundle.curve_regular),
        "mme": curve_summary(bundle.curve_mme),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    print(f"{'mode':<10}{'avg FPR':>10}{'avg FNR':>10}{'avg F1':>10}")
    for mode in ("regular", "mme"):
        s = summary[mode]
        print(f"{mode:<10}{s['avg_fpr']:>10.4f}{s['avg_fnr']:>10.4f}"
              f"{s['avg_f1']:>10.4f}")
    print(f"reports written to {out}")
    return 0


_HANDLERS = {
    "build-kg": _cmd_build_kg,
    "train-kg-embed": _cmd_train_kg_embed,
    "gen": _cmd_gen,
    "embed": _cmd_embed,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "maintain": _cmd_maintain,
    "stability": _cmd_stability,
    "demo": _cmd_demo,
}


if __name__ == "__main__":
    sys.exit(main())
