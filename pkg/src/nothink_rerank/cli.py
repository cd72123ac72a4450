"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
Every subcommand resolves and validates its full configuration before doing
any work; ``--print-config`` shows the result.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .backend import Backend, HttpBackend, MockBackend, fixture_from_qrels, load_fixture, save_fixture
from .config import CliConfig, resolve_config
from .core import TaskParadigm, ThinkMode
from .errors import BackendError, DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("nothink_rerank")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# flag dest -> config field
FLAG_FIELDS = {
    "endpoint": "backend.endpoint",
    "model": "backend.model_name",
    "temperature": "backend.temperature",
    "top_logprobs": "backend.top_logprobs",
    "max_tokens": "backend.max_tokens",
    "timeout": "backend.timeout",
    "max_retries": "backend.max_retries",
    "backoff": "backend.backoff",
    "api_key_env": "backend.api_key_env",
    "w_bi": "fusion.w_bi",
    "w_fg": "fusion.w_fg",
    "concurrency": "rerank.concurrency_limit",
    "top_k": "rerank.top_k",
    "tag": "rerank.tag",
    "seed": "sampling.rng_seed",
    "max_docs_per_level": "sampling.max_docs_per_level",
    "list_size": "sampling.list_size_range",
    "pair_budget": "sampling.pair_budget_per_query",
    "host": "service.host",
    "port": "service.port",
    "max_in_flight": "service.max_in_flight",
    "max_top_k": "service.max_top_k",
    "backend_concurrency": "service.backend_concurrency",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (sections: backend, fusion, sampling, rerank, service)")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration before running")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--backend", choices=["http", "mock"], default="http", help="inference backend (default: http)")
    g.add_argument("--fixture", type=Path, help="mock backend fixture file (JSONL)")
    g.add_argument("--mock-latency", type=float, default=0.0, help="mock backend per-call latency in seconds")
    g.add_argument("--mock-fallback-unknown", action="store_true", help="mock backend answers neutrally for pairs not in the fixture")
    g.add_argument("--endpoint", help="completions endpoint URL")
    g.add_argument("--model", help="model name sent to the endpoint")
    g.add_argument("--temperature", type=float)
    g.add_argument("--top-logprobs", type=int, help="alternatives requested per token (>= 7)")
    g.add_argument("--max-tokens", type=int, help="override the think-mode derived generation budget")
    g.add_argument("--timeout", type=float, help="per-request timeout in seconds")
    g.add_argument("--max-retries", type=int)
    g.add_argument("--backoff", type=float, help="base of the exponential retry backoff in seconds")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--w-bi", type=float, help="fusion weight of the binary probability")
    g.add_argument("--w-fg", type=float, help="fusion weight of the fine-grained expectation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nothink-rerank", description="Pointwise LLM reranking toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("rerank", help="rerank a first-stage run file")
    p.add_argument("--run", type=Path, required=True, help="first-stage TREC run")
    p.add_argument("--queries", type=Path, required=True, help="queries JSONL {id, text}")
    p.add_argument("--corpus", type=Path, required=True, help="corpus JSONL {id, text}")
    p.add_argument("--out", type=Path, required=True, help="reranked TREC run to write")
    p.add_argument("--metrics-out", type=Path, help="metrics JSONL (default: <out>.metrics.jsonl)")
    p.add_argument("--top-k", type=int, help="candidates reranked per query")
    p.add_argument("--concurrency", type=int, help="backend calls in flight")
    p.add_argument("--tag", help="run tag column")
    p.add_argument("--allow-partial", action="store_true", help="write results even if some queries failed")
    _backend_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="NDCG@k of a run against qrels")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--qrels", type=Path, required=True)
    p.add_argument("--k", type=int, default=10, help="cutoff (default: 10)")
    p.add_argument("--gain", choices=["linear", "exponential"], default="linear")
    p.add_argument("--json-out", type=Path, help="write a machine-readable report")
    _common(p)

    p = sub.add_parser("compare", help="paired significance tests between two runs")
    p.add_argument("--run-a", type=Path, required=True)
    p.add_argument("--run-b", type=Path, required=True)
    p.add_argument("--qrels", type=Path, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--gain", choices=["linear", "exponential"], default="linear")
    p.add_argument("--min-pairs", type=int, default=6, help="minimum non-zero differences for the Wilcoxon test")
    p.add_argument("--json-out", type=Path)
    _common(p)

    p = sub.add_parser("build-data", help="build multi-task SFT corpora")
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--pairs", type=Path, required=True, help="annotated pairs JSONL")
    p.add_argument("--cot", type=Path, help="CoT JSONL {sample_id, cot_text}")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--modes", nargs="+", choices=[m.value for m in ThinkMode], default=[m.value for m in ThinkMode])
    p.add_argument("--paradigms", nargs="+", choices=[t.value for t in TaskParadigm], default=[t.value for t in TaskParadigm])
    p.add_argument("--max-docs-per-level", type=int)
    p.add_argument("--list-size", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--pair-budget", type=int)
    p.add_argument("--query-fraction", type=float, help="sample this fraction of queries per length quartile")
    _common(p)

    p = sub.add_parser("reward", help="score rollouts with the GRPO reward")
    p.add_argument("--in", dest="input", type=Path, required=True, help="rollout JSONL")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="format reward weight (default: 0.5)")
    p.add_argument("--min-think-chars", type=int, default=50)
    _common(p)

    p = sub.add_parser("serve", help="run the HTTP reranking service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--max-in-flight", type=int, help="concurrent requests before 503")
    p.add_argument("--max-top-k", type=int)
    p.add_argument("--backend-concurrency", type=int, help="backend calls in flight across all requests")
    p.add_argument("--concurrency", type=int, help="backend calls in flight per request")
    _backend_flags(p)
    _common(p)

    p = sub.add_parser("make-fixture", help="mock backend fixture encoding graded relevance")
    p.add_argument("--qrels", type=Path, required=True)
    p.add_argument("--run", type=Path, help="also cover every candidate in this run (unjudged get grade 0)")
    p.add_argument("--out", type=Path, required=True)
    _common(p)
    return parser


def _resolve(args: argparse.Namespace) -> CliConfig:
    flags: Dict[str, Any] = {}
    for dest, dotted in FLAG_FIELDS.items():
        if hasattr(args, dest):
            flags[dotted] = getattr(args, dest)
    cfg = resolve_config(args.config, flags=flags)
    if args.print_config:
        print(cfg.dumps())
    return cfg


def _make_backend(args: argparse.Namespace, cfg: CliConfig) -> Backend:
    if args.backend == "mock":
        if args.fixture is None:
            raise UsageError("--backend mock requires --fixture")
        return MockBackend(
            load_fixture(args.fixture),
            latency=args.mock_latency,
            fallback_unknown=args.mock_fallback_unknown,
            config=cfg.backend,
        )
    return HttpBackend(cfg.backend)


class _Outputs:
    """Tracks files a command writes and removes them if it fails."""

    def __init__(self):
        self.paths: List[Path] = []

    def add(self, path: Path) -> Path:
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def cmd_rerank(args, cfg: CliConfig, outputs: _Outputs) -> int:
    from .ranking import rerank_run, write_metrics_report
    from .trec import read_corpus, read_queries, read_run, run_to_candidates, write_run

    run = read_run(args.run)
    queries = read_queries(args.queries)
    corpus = read_corpus(args.corpus)
    backend = _make_backend(args, cfg)
    try:
        result = rerank_run(run_to_candidates(run), queries, corpus, backend, cfg.rerank_config())
    finally:
        backend.close()
    if result.failures and (not args.allow_partial or not result.entries):
        qid, cause = next(iter(result.failures.items()))
        message = f"{len(result.failures)} queries failed; first {qid!r}: {cause}"
        raise BackendError(message) if isinstance(cause, BackendError) else DataError(message)
    for qid, cause in result.failures.items():
        log.warning("query %s skipped: %s", qid, cause)
    write_run(result.rows(cfg.rerank.tag), outputs.add(args.out))
    metrics_path = args.metrics_out or args.out.with_name(args.out.name + ".metrics.jsonl")
    write_metrics_report(result, outputs.add(metrics_path))
    print(result.metrics.summary())
    print(f"queries/hour: {result.metrics.queries_per_hour:.1f}")
    return EXIT_OK


def _per_query(run_path: Path, qrels, k: int, gain: str):
    from .evaluation import evaluate_run
    from .trec import read_run, run_to_rankings

    return evaluate_run(run_to_rankings(read_run(run_path)), qrels, k, gain)


def cmd_eval(args, cfg: CliConfig, outputs: _Outputs) -> int:
    from .evaluation import EvaluationReport
    from .trec import read_qrels

    per_query, mean = _per_query(args.run, read_qrels(args.qrels), args.k, args.gain)
    report = EvaluationReport(args.k, mean, per_query)
    print(report.format_table())
    if args.json_out:
        with open(outputs.add(args.json_out), "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2)
    return EXIT_OK


def cmd_compare(args, cfg: CliConfig, outputs: _Outputs) -> int:
    from .evaluation import significance
    from .trec import read_qrels

    qrels = read_qrels(args.qrels)
    a, mean_a = _per_query(args.run_a, qrels, args.k, args.gain)
    b, mean_b = _per_query(args.run_b, qrels, args.k, args.gain)
    report = significance(a, b, args.min_pairs)
    print(f"run A mean NDCG@{args.k}: {mean_a:.4f}")
    print(f"run B mean NDCG@{args.k}: {mean_b:.4f}")
    print(f"paired t-test   n={report.n}  t={report.t_statistic:.4f}  p={report.t_p_value:.6g}")
    print(f"wilcoxon        n={report.n}  W={report.wilcoxon_statistic:.1f}  p={report.wilcoxon_p_value:.6g}")
    if args.json_out:
        with open(outputs.add(args.json_out), "w", encoding="utf-8") as f:
            json.dump({"k": args.k, "mean_a": mean_a, "mean_b": mean_b, **report.to_dict()}, f, indent=2)
    return EXIT_OK


def cmd_build_data(args, cfg: CliConfig, outputs: _Outputs) -> int:
    from .datagen import CorpusSources, build_corpus

    print(f"seed: {cfg.sampling.rng_seed}")
    sources = CorpusSources.from_files(args.queries, args.corpus, args.pairs, args.cot)
    # build_corpus cleans up its own partial output
    manifest = build_corpus(
        sources,
        args.out_dir,
        cfg.sampling,
        modes=[ThinkMode(m) for m in args.modes],
        paradigms=[TaskParadigm(p) for p in args.paradigms],
        query_fraction=args.query_fraction,
    )
    for key, n in manifest["counts"].items():
        print(f"{key}: {n}")
    print(f"total: {manifest['total']}  missing_cot: {manifest['missing_cot']}")
    return EXIT_OK


def cmd_reward(args, cfg: CliConfig, outputs: _Outputs) -> int:
    from .rewards import reward_file

    with open(args.input, encoding="utf-8") as src, open(outputs.add(args.out), "w", encoding="utf-8") as sink:
        n = reward_file(src, sink, args.lam, args.min_think_chars)
    print(f"scored {n} rollouts (lambda={args.lam})")
    return EXIT_OK


def cmd_serve(args, cfg: CliConfig, outputs: _Outputs) -> int:  # pragma: no cover - blocking
    from .service import create_app, serve

    backend = _make_backend(args, cfg)
    app = create_app(backend, cfg.rerank_config(), cfg.service)
    print(f"serving on http://{cfg.service.host}:{cfg.service.port}")
    serve(app, cfg.service.host, cfg.service.port)
    return EXIT_OK


def cmd_make_fixture(args, cfg: CliConfig, outputs: _Outputs) -> int:
    from .trec import read_qrels, read_run

    qrels = read_qrels(args.qrels)
    pairs = []
    if args.run is not None:
        pairs = [(r.query_id, r.doc_id) for rows in read_run(args.run).values() for r in rows]
    n = save_fixture(fixture_from_qrels(qrels, pairs), outputs.add(args.out))
    print(f"wrote {n} fixture entries to {args.out}")
    return EXIT_OK


COMMANDS = {
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "build-data": cmd_build_data,
    "reward": cmd_reward,
    "serve": cmd_serve,
    "make-fixture": cmd_make_fixture,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    outputs = _Outputs()
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg, outputs)
    except UsageError as exc:
        outputs.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        outputs.cleanup()
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, OSError) as exc:
        outputs.cleanup()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
