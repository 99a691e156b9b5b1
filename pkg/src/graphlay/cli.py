"""Command-line entry point.

Subcommands: synth-corpus, extract, build-graph, augment, train, generate,
evaluate, graph-stats, serve-annotation.  Exit codes: 0 success, 1 domain
error, 2 usage error.  ``--seed`` is honored by every subcommand that uses
randomness; identical inputs and seeds produce byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import annotation
from .augment import augment_article, format_augmentation
from .concepts import extract_article_concepts, select_salient_concepts
from .corpus import (
    Article,
    article_from_json,
    dump_corpus,
    generate_synthetic_corpus,
    load_corpus,
    load_lexicon,
    mini_lexicon,
)
from .errors import GraphlayError
from .graph import build_graph, graph_stats, parse_graph, serialize_graph
from .metrics import evaluate_run, report_json, report_markdown
from .model import ENHANCEMENTS, ModelConfig, load_checkpoint
from .training import TrainConfig, build_graph_inputs, train, write_outputs


def _lexicon_arg(path: str | None):
    return load_lexicon(path) if path else mini_lexicon()


def _cmd_synth_corpus(args) -> int:
    lexicon = _lexicon_arg(args.lexicon)
    corpus = generate_synthetic_corpus(args.seed, args.n, lexicon)
    dump_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} articles to {args.out}")
    return 0


def _cmd_extract(args) -> int:
    corpus = load_corpus(args.corpus)
    lexicon = _lexicon_arg(args.lexicon)
    result = {}
    for art in corpus:
        scmap = extract_article_concepts(art, lexicon)
        result[art.id] = {str(idx): sorted(ids) for idx, ids in sorted(scmap.concepts.items())}
    payload = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        print(f"wrote concept map for {len(result)} articles to {args.out}")
    else:
        sys.stdout.write(payload)
    return 0


def _cmd_build_graph(args) -> int:
    corpus = load_corpus(args.corpus)
    lexicon = _lexicon_arg(args.lexicon)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for art in corpus:
        scmap = extract_article_concepts(art, lexicon)
        graph = build_graph(art, scmap, lexicon)
        (out_dir / f"{art.id}.graph.json").write_bytes(serialize_graph(graph))
    print(f"wrote {len(corpus)} graphs to {out_dir}")
    return 0


def _cmd_augment(args) -> int:
    lexicon = _lexicon_arg(args.lexicon)
    text = Path(args.article).read_text(encoding="utf-8").strip().splitlines()[0]
    article = article_from_json(json.loads(text), where=args.article)
    if args.graph_concepts:
        concept_map = json.loads(Path(args.graph_concepts).read_text(encoding="utf-8"))
        if article.id not in concept_map:
            raise GraphlayError(f"article {article.id!r} not present in {args.graph_concepts}")
        abstract_ids = concept_map[article.id].get("-1", [])
        # Re-derive mention order from the abstract for the listed ids.
        scmap = extract_article_concepts(article, lexicon)
        salient = [cid for cid in select_salient_concepts(scmap) if cid in set(abstract_ids)]
    else:
        salient = select_salient_concepts(extract_article_concepts(article, lexicon))
    aug = format_augmentation(salient, lexicon)
    sys.stdout.write(augment_article(article.full_text(), aug))
    sys.stdout.write("\n")
    return 0


def _variant_flags(variant: str, combine: list[str]) -> frozenset[str]:
    mapping = {e.replace("_", "-"): e for e in ENHANCEMENTS}
    flags = set()
    for name in [variant, *combine]:
        if name == "base":
            continue
        if name not in mapping:
            raise GraphlayError(f"unknown variant {name!r}")
        flags.add(mapping[name])
    return frozenset(flags)


def _cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    lexicon = _lexicon_arg(args.lexicon)
    flags = _variant_flags(args.variant, args.combine or [])
    config = ModelConfig(
        vocab_size=4,  # replaced once the vocabulary is built
        d_model=args.d_model,
        n_heads=args.n_heads,
        attention_window=args.window,
        max_input_tokens=args.max_input_tokens,
        enhancement=flags,
        p=args.p,
        seed=args.seed,
    )
    train_config = TrainConfig(
        lr=args.lr,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        val_every=args.val_every,
        max_steps=args.max_steps,
    )
    graphs = build_graph_inputs(corpus, lexicon, config) if config.uses_graph else None
    val_ids = args.val_ids.split(",") if args.val_ids else None
    result = train(corpus, graphs, config, lexicon, train_config, val_ids=val_ids, run_dir=args.run_dir)
    print(f"trained variant {args.variant} for {result.epoch_log[-1]['steps']} steps; "
          f"best epoch {result.best_epoch}; run dir {args.run_dir}")
    return 0


def _cmd_generate(args) -> int:
    corpus = load_corpus(args.corpus)
    lexicon = _lexicon_arg(args.lexicon)
    ckpt = load_checkpoint(Path(args.run_dir) / "checkpoints" / "best.json")
    out_path = Path(args.out) if args.out else Path(args.run_dir) / "outputs.jsonl"
    summaries = write_outputs(ckpt, corpus, lexicon, out_path, beam_size=args.beam, max_len=args.max_len)
    print(f"wrote {len(summaries)} summaries to {out_path}")
    return 0


def _load_outputs(run_dir: Path) -> tuple[str, dict[str, str]]:
    config_path = run_dir / "config.json"
    name = run_dir.name
    if config_path.exists():
        name = json.loads(config_path.read_text(encoding="utf-8")).get("variant", name)
    outputs = {}
    with (run_dir / "outputs.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                outputs[obj["id"]] = obj["summary"]
    return name, outputs


def _cmd_evaluate(args) -> int:
    refs = load_corpus(args.refs)
    references = {a.id: a.lay_summary or "" for a in refs}
    sources = {a.id: a.full_text() for a in refs}
    base_name, base_outputs = _load_outputs(Path(args.base_run))
    outputs = {base_name: base_outputs}
    for run in args.run_dir:
        name, outs = _load_outputs(Path(run))
        outputs[name] = outs
    rows = evaluate_run(outputs, references, sources, base_outputs)
    md = report_markdown(rows)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(md, encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(report_json(rows), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    sys.stdout.write(md)
    return 0


def _cmd_graph_stats(args) -> int:
    graphs = []
    for path in sorted(Path(args.graphs_dir).glob("*.graph.json")):
        graphs.append(parse_graph(path.read_bytes()))
    if not graphs:
        raise GraphlayError(f"no *.graph.json files under {args.graphs_dir}")
    sys.stdout.write(graph_stats(graphs).to_markdown())
    return 0


def _cmd_serve_annotation(args) -> int:
    corpus = load_corpus(args.corpus)
    session = annotation.create_session(
        run_dirs=[Path(r) for r in args.runs],
        corpus=corpus,
        session_dir=Path(args.session_dir),
        sample_size=args.sample_size,
        seed=args.seed,
        blind=not args.no_blind,
        base_run=args.base_run,
    )
    service = annotation.AnnotationService(session, Path(args.session_dir))
    server = annotation.serve(service, host=args.host, port=args.port, static_dir=args.static_dir)
    host, port = server.server_address[:2]
    print(f"annotation service listening on http://{host}:{port}/ "
          f"({len(session.tasks)} tasks)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphlay",
        description="Article knowledge graphs, graph-enhanced summarisation, metrics, and judgment collection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--lexicon", help="lexicon JSON (default: bundled mini lexicon)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_corpus)

    p = sub.add_parser("extract", help="per-section concept extraction")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("build-graph", help="build and serialize article graphs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_build_graph)

    p = sub.add_parser("augment", help="print the augmented text for one article")
    p.add_argument("--article", required=True, help="path to a one-article JSON file")
    p.add_argument("--graph-concepts", help="concept map JSON produced by `extract`")
    p.add_argument("--lexicon")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train one enhancement variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--variant", default="base",
                   choices=["base", "text-aug", "doc-enhance", "decoder-attn"])
    p.add_argument("--combine", action="append",
                   choices=["text-aug", "doc-enhance", "decoder-attn"],
                   help="additional enhancement to combine with --variant (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--val-every", type=int, default=1)
    p.add_argument("--val-ids", help="comma-separated validation article ids")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--max-input-tokens", type=int, default=512)
    p.add_argument("--p", type=float, default=0.25)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="generate summaries with a trained checkpoint")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="score runs against references")
    p.add_argument("--run-dir", action="append", default=[], help="run directory (repeatable)")
    p.add_argument("--refs", required=True, help="corpus JSONL with lay summaries")
    p.add_argument("--base-run", required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("graph-stats", help="node/relation frequency report")
    p.add_argument("--graphs-dir", required=True)
    p.set_defaults(func=_cmd_graph_stats)

    p = sub.add_parser("serve-annotation", help="serve the human-judgment API and UI")
    p.add_argument("--runs", nargs="+", required=True, help="run directories with outputs.jsonl")
    p.add_argument("--corpus", required=True)
    p.add_argument("--session-dir", required=True)
    p.add_argument("--base-run", help="run dir treated as the base model (default: first)")
    p.add_argument("--sample-size", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8712)
    p.add_argument("--static-dir", help="directory of built UI assets to serve at /")
    p.add_argument("--no-blind", action="store_true", help="expose model names in task payloads")
    p.set_defaults(func=_cmd_serve_annotation)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GraphlayError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
