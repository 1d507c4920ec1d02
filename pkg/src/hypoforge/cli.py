"""Command-line entry point.

Exit codes: 0 success, 1 operational or usage error, 2 the run finished
but produced nothing (every hypothesis discarded).

Pipeline settings are layered, later layers winning:
defaults < ``--config`` JSON file < command-line flags < environment.
The environment overrides are HYPOFORGE_MAX_CYCLES, HYPOFORGE_ACCEPT_THRESHOLD,
HYPOFORGE_EMIT_FLOOR, HYPOFORGE_CUTOFF and HYPOFORGE_SEED. In scripted mode
the fixture directory's ``pipeline.json`` stands in for ``--config`` when
none is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .core import AgentRole, PipelineConfig, TraceStore, token_totals
from .errors import HypoforgeError, InputError
from .kg import RetrievalLimits, import_primekg, load_graph, retrieve_subgraph, serialize_subgraph
from .literature import InMemoryCorpus, PubMedClient
from .llm import Gateway, HttpBackend, RecordingBackend, RuleBackend, load_backend
from .orchestrator import RunResult, Services, default_run_id, run_pipeline

log = logging.getLogger("hypoforge")

EXIT_OK, EXIT_ERROR, EXIT_EMPTY = 0, 1, 2

# environment variable -> PipelineConfig field
ENV_OVERRIDES = {
    "HYPOFORGE_MAX_CYCLES": ("max_cycles", int),
    "HYPOFORGE_ACCEPT_THRESHOLD": ("accept_threshold", int),
    "HYPOFORGE_EMIT_FLOOR": ("emit_floor", int),
    "HYPOFORGE_CUTOFF": ("temporal_cutoff", str),
    "HYPOFORGE_SEED": ("seed", int),
}

CASE_STUDY = "case-study"


def data_path(name: str) -> Path:
    return Path(str(resources.files("hypoforge") / "data" / name))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# -- configuration ---------------------------------------------------------------

def resolve_config(
    file_values: Mapping | None = None,
    flag_values: Mapping | None = None,
    env: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Merge the layers; ``None`` flag values count as unset."""
    merged: dict = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    env = os.environ if env is None else env
    for var, (name, cast) in ENV_OVERRIDES.items():
        raw = env.get(var)
        if raw is None or raw == "":
            continue
        try:
            merged[name] = cast(raw)
        except ValueError:
            raise InputError(f"{var}={raw!r} is not a valid {cast.__name__}") from None
    try:
        return PipelineConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def fixture_dir(value: str) -> Path:
    if value == CASE_STUDY:
        return data_path("case_study")
    path = Path(value)
    if not path.is_dir():
        raise InputError(f"fixture directory {value} does not exist")
    return path


# -- generate ----------------------------------------------------------------------

def _flag_values(args) -> dict:
    return {
        "max_cycles": args.max_cycles,
        "accept_threshold": args.accept_threshold,
        "emit_floor": args.emit_floor,
        "temporal_cutoff": args.cutoff,
        "seed": args.seed,
    }


def _services(args, config: PipelineConfig, trace: TraceStore, record_dir: str | None = None) -> Services:
    if args.scripted:
        root = fixture_dir(args.scripted)
        backend = RuleBackend.from_json(root / "rules.json") if record_dir else load_backend(root)
        graph = load_graph(args.graph or root / "graph.tsv")
        corpus_file = Path(args.corpus) if args.corpus else root / "corpus.json"
        literature = InMemoryCorpus.from_json(corpus_file)
    else:
        backend = HttpBackend.from_env()
        if not args.graph:
            raise InputError("live mode needs --graph (a TSV knowledge graph)")
        graph = load_graph(args.graph)
        literature = InMemoryCorpus.from_json(args.corpus) if args.corpus else PubMedClient()
    if record_dir:
        backend = RecordingBackend(backend, record_dir)
    gateway = Gateway(
        backend,
        token_budget=config.token_budget,
        seed=config.seed,
        temperature=config.temperature,
        role_temperatures=config.role_temperatures,
    )
    return Services(gateway, graph, literature, trace=trace)


def summarize(result: RunResult) -> str:
    lines = [f"run {result.run_id}: {len(result.outputs)} hypotheses kept, {len(result.discarded)} discarded"]
    for rank, out in enumerate(result.outputs, start=1):
        s = out.scores
        lines.append(
            f"{rank}. [{out.hypothesis.id}] {s.overall}/20 ({out.status.value}; novelty {s.novelty}, "
            f"relevance {s.relevance}, significance {s.significance}, verifiability {s.verifiability})"
        )
        lines.append(f"   {out.hypothesis.text}")
    for h in result.discarded:
        overall = h.scores.overall if h.scores else "?"
        lines.append(f"-  [{h.id}] {overall}/20 discarded")
    return "\n".join(lines)


def _generate(args, record_dir: str | None = None) -> tuple[RunResult, Path]:
    if not args.topic or not args.topic.strip():
        raise InputError("--topic must be nonempty")
    file_values = {}
    if args.config:
        file_values = _read_json(Path(args.config))
    elif args.scripted and (fixture_dir(args.scripted) / "pipeline.json").exists():
        file_values = _read_json(fixture_dir(args.scripted) / "pipeline.json")
    config = resolve_config(file_values, _flag_values(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    keywords = [k.strip() for k in args.keywords.split(",") if k.strip()] if args.keywords else None
    run_id = default_run_id(args.topic, config)
    trace_path = out_dir / f"{run_id}.trace.jsonl"
    trace_path.unlink(missing_ok=True)
    trace = TraceStore(trace_path)
    services = _services(args, config, trace, record_dir)
    result = run_pipeline(args.topic, config, services, keywords=keywords, run_id=run_id)
    return result, result.write(out_dir / f"{run_id}.json")


def cmd_generate(args) -> int:
    result, path = _generate(args)
    print(summarize(result))
    print(f"result: {path}")
    print(f"trace: {result.trace_path}")
    return EXIT_OK if result.outputs else EXIT_EMPTY


def cmd_fixtures_record(args) -> int:
    if not args.scripted:
        raise InputError("fixtures record needs --scripted <dir> holding rules.json")
    dest = args.dest or str(fixture_dir(args.scripted) / "responses")
    result, path = _generate(args, record_dir=dest)
    print(f"recorded {len(list(Path(dest).glob('*.json')))} responses to {dest}")
    print(summarize(result))
    return EXIT_OK if result.outputs else EXIT_EMPTY


# -- eval ------------------------------------------------------------------------

def _comparisons(args):
    from .stats import read_comparisons

    source = args.input or data_path("bt_synthetic.csv")
    records = read_comparisons(source)
    if args.metric:
        records = [r for r in records if r.metric == args.metric.lower()]
        if not records:
            raise InputError(f"no comparisons for metric {args.metric!r}")
    return records


def _write_or_print(rows: Sequence[Sequence], header: Sequence[str], out: str | None) -> None:
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    finally:
        if out:
            fh.close()


def _paired_report(fit, qv, out: str | None, extra: str) -> None:
    from .stats import write_fit_csv

    if out:
        write_fit_csv(fit, qv, out)
    else:
        write_fit_csv(fit, qv, sys.stdout)
    if fit.alpha is not None:
        se = float(fit.vcov[0, 0]) ** 0.5
        extra = f"alpha={fit.alpha:.4f} (se {se:.4f}) {extra}"
    print(f"# loglik={fit.loglik:.4f} converged={fit.converged} {extra}".rstrip(), file=sys.stderr)
    for w in fit.warnings:
        print(f"# warning: {w}", file=sys.stderr)


def cmd_eval_bt(args) -> int:
    from .stats import fit_bradley_terry, quasi_variances

    fit = fit_bradley_terry(_comparisons(args), not args.no_order_effect, identification=args.identification)
    _paired_report(fit, quasi_variances(fit), args.out, "")
    return EXIT_OK


def cmd_eval_davidson(args) -> int:
    from .stats import fit_davidson, quasi_variances

    fit = fit_davidson(_comparisons(args), not args.no_order_effect, identification=args.identification)
    _paired_report(fit, quasi_variances(fit), args.out, f"nu={fit.nu:.4f}")
    return EXIT_OK


def cmd_eval_rasch(args) -> int:
    from .stats import fit_rasch_map, read_ratings
    from .stats.rasch import fit_rows, select_prior_sds

    data = read_ratings(args.input, args.categories)
    sigma_u, sigma_v = args.sigma_u, args.sigma_v
    if args.empirical_bayes:
        sigma_u, sigma_v = select_prior_sds(data)
    fit = fit_rasch_map(data, sigma_u, sigma_v)
    _write_or_print(fit_rows(fit), ("parameter", "estimate", "se"), args.out)
    print(f"# logpost={fit.logpost:.4f} sigma_u={sigma_u} sigma_v={sigma_v} converged={fit.converged}",
          file=sys.stderr)
    for w in fit.warnings:
        print(f"# warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_eval_similarity(args) -> int:
    from .stats import temporal_similarity_eval
    from .stats.similarity import read_text_pairs

    generated, gold, backgrounds = read_text_pairs(args.input)
    ev = temporal_similarity_eval(generated, gold, backgrounds=backgrounds)
    if args.out:
        ev.write_csv(args.out)
    print(f"matched median {ev.matched_median:.4f}; null median {ev.null_median:.4f} "
          f"({len(ev.matched)} matched, {len(ev.null)} null pairs)")
    return EXIT_OK


def cmd_eval_metrics(args) -> int:
    from .stats import classification_metrics

    predicted, true = [], []
    with open(args.input, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"predicted", "true"} <= set(reader.fieldnames or ()):
            raise InputError("row 1: need columns predicted, true")
        for rowno, row in enumerate(reader, start=2):
            if not (row["predicted"] or "").strip() or not (row["true"] or "").strip():
                raise InputError(f"row {rowno}: empty label")
            predicted.append(row["predicted"])
            true.append(row["true"])
    report = classification_metrics(predicted, true)
    _write_or_print(report.rows(), ("class", "precision", "recall", "f1", "support"), args.out)
    print(f"# accuracy={report.accuracy:.4f}", file=sys.stderr)
    return EXIT_OK


# -- kg ----------------------------------------------------------------------------

def _load_any_graph(path: str, fmt: str):
    if fmt == "primekg" or (fmt == "auto" and path.lower().endswith(".csv")):
        return import_primekg(path)
    return load_graph(path)


def cmd_kg_import(args) -> int:
    from .kg import write_tsv

    graph = _load_any_graph(args.input, args.format)
    if args.out:
        write_tsv(graph, args.out)
    print(f"{len(graph.nodes)} nodes, {len(graph.edges)} edges")
    return EXIT_OK


def cmd_kg_query(args) -> int:
    graph = _load_any_graph(args.graph, args.format)
    seeds = []
    for name in (s.strip() for s in args.seeds.split(",")):
        if not name:
            continue
        if name in graph:
            seeds.append(name)
            continue
        found = graph.find(name)
        if not found:
            raise InputError(f"seed {name!r} is not in the graph")
        seeds.extend(n.node_id for n in found if n.node_id not in seeds)
    rels = [r.strip() for r in args.rels.split(",")] if args.rels else None
    sg = retrieve_subgraph(graph, seeds, args.depth, rels, RetrievalLimits(args.max_edges, args.max_paths))
    print(serialize_subgraph(sg))
    return EXIT_OK


# -- trace -------------------------------------------------------------------------

def cmd_trace_show(args) -> int:
    records = TraceStore.load(args.path)
    if args.run_id:
        records = [r for r in records if r.run_id == args.run_id]
    if args.role:
        records = [r for r in records if r.agent_role is AgentRole(args.role)]
    for r in records:
        text = r.output_text if args.full else r.output_text.replace("\n", " | ")[:160]
        print(f"{r.step_index:4d} {r.agent_role.value:<10} {r.tokens_in:6d} {r.tokens_out:6d}  {text}")
    tin, tout = token_totals(records)
    print(f"{len(records)} steps; tokens in {tin}, out {tout}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topic", required=True, help="research topic")
    p.add_argument("--keywords", help="comma-separated keywords; default: split from the topic")
    p.add_argument("--config", help="pipeline settings as JSON")
    p.add_argument("--scripted", metavar="DIR",
                   help=f"replay fixtures from DIR instead of calling a model ('{CASE_STUDY}' for the bundled set)")
    p.add_argument("--graph", help="knowledge graph TSV (defaults to DIR/graph.tsv in scripted mode)")
    p.add_argument("--corpus", help="literature corpus JSON used instead of PubMed")
    p.add_argument("--cutoff", metavar="YYYY-MM-DD", help="exclude literature published after this date")
    p.add_argument("--max-cycles", type=int, help="refinement cycles per branch")
    p.add_argument("--accept-threshold", type=int, help="overall score that accepts a hypothesis")
    p.add_argument("--emit-floor", type=int, help="lowest overall score kept after the last cycle")
    p.add_argument("--seed", type=int, help="sampling seed passed to the model")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypoforge", description=__doc__.split("\n")[0],
                     epilog="Precedence: environment > flags > --config file > defaults.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="generate and refine hypotheses for a topic")
    _generation_flags(gen)
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="fit evaluation models")
    evsub = ev.add_subparsers(dest="eval_command", required=True, parser_class=_Parser)
    for name, func, doc in (
        ("bt", cmd_eval_bt, "Bradley-Terry abilities with ties as half wins"),
        ("davidson", cmd_eval_davidson, "Davidson model with an explicit tie parameter"),
    ):
        p = evsub.add_parser(name, help=doc)
        p.add_argument("--input", help="comparisons CSV (first,second,metric,outcome); default: bundled synthetic set")
        p.add_argument("--metric", help="fit one metric only")
        p.add_argument("--no-order-effect", action="store_true", help="drop the first-position intercept")
        p.add_argument("--identification", choices=("sum", "reference"), default="sum",
                       help="sum-to-zero abilities or the first system pinned at zero")
        p.add_argument("--out", help="fit CSV (default: stdout)")
        p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; fits are deterministic")
        p.set_defaults(func=func)
    p = evsub.add_parser("rasch", help="cumulative probit model for ordinal ratings")
    p.add_argument("--input", required=True, help="ratings CSV (rater,hypothesis,metric,rating)")
    p.add_argument("--categories", type=int, help="number of rating categories (default: largest rating)")
    p.add_argument("--sigma-u", type=float, default=1.0, help="prior sd of rater effects")
    p.add_argument("--sigma-v", type=float, default=1.0, help="prior sd of hypothesis-by-metric effects")
    p.add_argument("--empirical-bayes", action="store_true", help="choose both prior sds by Laplace evidence")
    p.add_argument("--out", help="parameter CSV (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; fits are deterministic")
    p.set_defaults(func=cmd_eval_rasch)
    p = evsub.add_parser("similarity", help="generated vs held-out hypothesis similarity")
    p.add_argument("--input", required=True, help="CSV with generated,gold[,background]")
    p.add_argument("--out", help="per-pair CSV")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; embeddings are deterministic")
    p.set_defaults(func=cmd_eval_similarity)
    p = evsub.add_parser("metrics", help="precision, recall and F1 of relation labels")
    p.add_argument("--input", required=True, help="CSV with predicted,true")
    p.add_argument("--out", help="metrics CSV (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity")
    p.set_defaults(func=cmd_eval_metrics)

    kg = sub.add_parser("kg", help="knowledge graph utilities")
    kgsub = kg.add_subparsers(dest="kg_command", required=True, parser_class=_Parser)
    p = kgsub.add_parser("import", help="validate a graph file and report its size")
    p.add_argument("--input", required=True, help="TSV or PrimeKG-style CSV")
    p.add_argument("--format", choices=("auto", "tsv", "primekg"), default="auto")
    p.add_argument("--out", help="write the canonical TSV here")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity")
    p.set_defaults(func=cmd_kg_import)
    p = kgsub.add_parser("query", help="print the subgraph around seed nodes")
    p.add_argument("--graph", required=True, help="TSV or PrimeKG-style CSV")
    p.add_argument("--format", choices=("auto", "tsv", "primekg"), default="auto")
    p.add_argument("--seeds", required=True, help="comma-separated node ids or names")
    p.add_argument("--depth", type=int, default=2, help="maximum path length")
    p.add_argument("--rels", help="comma-separated relation filter")
    p.add_argument("--max-edges", type=int, default=20)
    p.add_argument("--max-paths", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity")
    p.set_defaults(func=cmd_kg_query)

    fx = sub.add_parser("fixtures", help="scripted fixture tools")
    fxsub = fx.add_subparsers(dest="fixtures_command", required=True, parser_class=_Parser)
    p = fxsub.add_parser("record", help="run DIR/rules.json and save every response as a digest fixture")
    _generation_flags(p)
    p.add_argument("--dest", help="responses directory (default: DIR/responses)")
    p.set_defaults(func=cmd_fixtures_record)

    tr = sub.add_parser("trace", help="inspect run traces")
    trsub = tr.add_subparsers(dest="trace_command", required=True, parser_class=_Parser)
    p = trsub.add_parser("show", help="print the steps of a trace file")
    p.add_argument("path", help="trace JSON Lines file")
    p.add_argument("--run-id")
    p.add_argument("--role", choices=[r.value for r in AgentRole])
    p.add_argument("--full", action="store_true", help="print whole outputs")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity")
    p.set_defaults(func=cmd_trace_show)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HypoforgeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
