"""Command-line interface: solve questions, generate training data, and
inspect tree snapshots.

Settings are resolved as: built-in defaults, then a JSON config file
(--config), then explicit flags. The remote backend URL is additionally
overridden by the RSP_BACKEND_URL environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .core import (
    ContractViolation,
    EngineError,
    ReasoningState,
    answers_equivalent,
    derive_seed,
    normalize_answer,
)
from .datagen import (
    build_manifest,
    export_jsonl,
    filter_solutions,
    harvest_paths,
    select_for_round,
)
from .inference import (
    decode_tree,
    greedy_decode,
    inference_search_config,
    majority_vote,
    sbs_decode,
)
from .mcts import (
    EvaluationMode,
    SearchConfig,
    SnapshotError,
    build_tree,
    snapshot_to_tree,
    tree_to_snapshot,
)
from .policy import BACKEND_URL_ENV, RemoteBackend, TransportError
from .toyenv import Mode, ToyBackend, corpus_to_records, toy_corpus

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_BACKEND = 4


class ConfigError(EngineError):
    pass


class DatasetError(EngineError):
    pass


@dataclass(frozen=True)
class EvalSummary:
    """Aggregate statistics over one solve run."""

    strategy: str
    n_questions: int
    n_solutions: int
    accuracy: float | None
    avg_time_s: float
    avg_steps: float
    avg_candidates: float

    def to_dict(self) -> dict:
        out = {
            "strategy": self.strategy,
            "n_questions": self.n_questions,
            "n_solutions": self.n_solutions,
            "avg_time_s": self.avg_time_s,
            "avg_steps": self.avg_steps,
            "avg_candidates": self.avg_candidates,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out


_DEFAULTS = {
    "strategy": "sbs",
    "backend": "toy",
    "toy_mode": None,  # resolved per command: oracle for solve, cold for generate
    "backend_url": None,
    "b1": 1,
    "b2": 5,
    "n_simulations": 40,
    "c_puct": 1.25,
    "t_max": 8,
    "temperature": None,  # resolved per strategy
    "k": 5,
    "seed": 0,
    "jobs": 1,
    "trees_per_question": 10,
    "max_pos": 4,
    "max_neg": 4,
    "round": 1,
    "beta": 0.01,
}

_CONFIG_TYPES = {
    "strategy": str,
    "backend": str,
    "toy_mode": str,
    "backend_url": str,
    "b1": int,
    "b2": int,
    "n_simulations": int,
    "c_puct": float,
    "t_max": int,
    "temperature": float,
    "k": int,
    "seed": int,
    "jobs": int,
    "trees_per_question": int,
    "max_pos": int,
    "max_neg": int,
    "round": int,
    "beta": float,
}


def _load_config_file(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a flat JSON object")
    settings = {}
    for key, value in raw.items():
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        if value is not None:
            try:
                value = _CONFIG_TYPES[key](value)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r} has invalid value {value!r}")
        settings[key] = value
    return settings


def _merge_settings(args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for key in _DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _make_backend(settings: dict, default_toy_mode: Mode):
    if settings["backend"] == "toy":
        mode_name = settings["toy_mode"] or default_toy_mode.value
        try:
            mode = Mode(mode_name)
        except ValueError:
            raise ConfigError(f"unknown toy mode {mode_name!r}")
        return ToyBackend(mode=mode)
    if settings["backend"] == "remote":
        url = os.environ.get(BACKEND_URL_ENV) or settings["backend_url"]
        if not url:
            raise ConfigError(
                f"remote backend needs --backend-url or ${BACKEND_URL_ENV}"
            )
        return RemoteBackend(url)
    raise ConfigError(f"unknown backend {settings['backend']!r}")


def _load_dataset(path: str, require_gold: bool) -> list[dict]:
    rows: list[dict] = []
    seen: set[str] = set()
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}")
    with handle:
        for lineno, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}")
            if not isinstance(row, dict) or "id" not in row or "question" not in row:
                raise DatasetError(
                    f"{path}:{lineno}: each record needs 'id' and 'question'"
                )
            if row["id"] in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {row['id']!r}")
            seen.add(row["id"])
            if require_gold and not row.get("gold_answer"):
                raise DatasetError(
                    f"{path}:{lineno}: record {row['id']!r} lacks a gold_answer, "
                    f"which data generation requires"
                )
            rows.append(row)
    # an empty dataset is legal: solve reports zero questions, generate
    # writes an empty training file
    return rows


def _strategy_temperature(settings: dict) -> float:
    if settings["temperature"] is not None:
        return settings["temperature"]
    return 0.6 if settings["strategy"] == "mcts" else 1.0


def _solve_one(settings: dict, backend, index: int, row: dict, dump_dir: Path | None) -> dict:
    state = ReasoningState(question_id=row["id"], question_text=row["question"])
    question_seed = derive_seed(settings["seed"], index)
    strategy = settings["strategy"]
    entry = {
        "id": row["id"],
        "answer": None,
        "gold": row.get("gold_answer"),
        "correct": None,
        "elapsed_seconds": 0.0,
        "steps": 0,
        "candidates": 0,
        "error": None,
    }
    try:
        if strategy == "greedy":
            report = greedy_decode(state, backend, max_depth=settings["t_max"])
        elif strategy == "sbs":
            report = sbs_decode(
                state,
                backend,
                beam_width=settings["b1"],
                expansion_width=settings["b2"],
                max_depth=settings["t_max"],
                temperature=_strategy_temperature(settings),
                seed=question_seed,
            )
        elif strategy == "maj":
            report = majority_vote(
                state,
                backend,
                k=settings["k"],
                temperature=_strategy_temperature(settings),
                max_depth=settings["t_max"],
                seed=question_seed,
            )
        elif strategy == "mcts":
            config = inference_search_config(
                c_puct=settings["c_puct"],
                n_simulations=settings["n_simulations"],
                expansion_width=settings["b2"],
                max_depth=settings["t_max"],
                temperature=_strategy_temperature(settings),
            )
            started = time.perf_counter()
            tree = build_tree(state, None, backend, config, question_seed)
            if dump_dir is not None:
                snapshot = tree_to_snapshot(tree)
                (dump_dir / f"{row['id']}.tree.json").write_text(
                    json.dumps(snapshot, ensure_ascii=False), encoding="utf-8"
                )
            report = decode_tree(tree, beam_width=settings["b1"], started=started)
        else:
            raise ConfigError(f"unknown strategy {strategy!r}")
    except ConfigError:
        raise
    except EngineError as exc:
        entry["error"] = str(exc)
        if entry["gold"]:
            entry["correct"] = False
        return entry
    entry["answer"] = report.answer.normalized if report.answer else None
    entry["elapsed_seconds"] = report.elapsed_seconds
    entry["steps"] = report.steps_taken
    entry["candidates"] = report.candidates_returned
    if entry["gold"]:
        entry["correct"] = bool(
            report.answer
            and answers_equivalent(report.answer, normalize_answer(entry["gold"]))
        )
    return entry


def run_solve(settings: dict, dataset_path: str, out: str | None, dump_trees: str | None) -> dict:
    rows = _load_dataset(dataset_path, require_gold=False)
    backend = _make_backend(settings, default_toy_mode=Mode.ORACLE)
    dump_dir = None
    if dump_trees:
        if settings["strategy"] != "mcts":
            raise ConfigError("--dump-trees requires --strategy mcts")
        dump_dir = Path(dump_trees)
        dump_dir.mkdir(parents=True, exist_ok=True)

    def work(item: tuple[int, dict]) -> dict:
        index, row = item
        return _solve_one(settings, backend, index, row, dump_dir)

    jobs = max(1, settings["jobs"])
    if jobs == 1:
        entries = [work(item) for item in enumerate(rows)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(work, enumerate(rows)))

    graded = [e for e in entries if e["gold"]]
    accuracy = (
        sum(1 for e in graded if e["correct"]) / len(graded) if graded else None
    )
    n = max(1, len(entries))
    summary = EvalSummary(
        strategy=settings["strategy"],
        n_questions=len(entries),
        n_solutions=sum(1 for e in entries if e["answer"] is not None),
        accuracy=accuracy,
        avg_time_s=sum(e["elapsed_seconds"] for e in entries) / n,
        avg_steps=sum(e["steps"] for e in entries) / n,
        avg_candidates=sum(e["candidates"] for e in entries) / n,
    )
    # the merged settings (seed included) ride along so any run, in
    # particular one against a remote model server, stays auditable
    result = {"summary": summary.to_dict(), "config": settings, "reports": entries}
    if out:
        Path(out).write_text(
            json.dumps(result, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
    return result


def run_generate(settings: dict, dataset_path: str, out: str) -> dict:
    rows = _load_dataset(dataset_path, require_gold=True)
    backend = _make_backend(settings, default_toy_mode=Mode.COLD)
    search = SearchConfig(
        c_puct=settings["c_puct"],
        n_simulations=settings["n_simulations"],
        expansion_width=settings["b2"],
        max_depth=settings["t_max"],
        temperature=settings["temperature"] or 1.0,
        evaluation=EvaluationMode.TERMINAL_REWARD,
    )

    def work(item: tuple[int, dict]) -> list:
        index, row = item
        state = ReasoningState(question_id=row["id"], question_text=row["question"])
        trees = [
            build_tree(
                state,
                row["gold_answer"],
                backend,
                search,
                derive_seed(settings["seed"], index, tree_index),
            )
            for tree_index in range(settings["trees_per_question"])
        ]
        pooled = filter_solutions(harvest_paths(trees))
        return select_for_round(
            pooled,
            settings["max_pos"],
            settings["max_neg"],
            seed=derive_seed(settings["seed"], index, 0x5E1EC7),
        )

    jobs = max(1, settings["jobs"])
    if jobs == 1:
        per_question = [work(item) for item in enumerate(rows)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_question = list(pool.map(work, enumerate(rows)))

    selected = [path for group in per_question for path in group]
    manifest = build_manifest(
        selected,
        round_index=settings["round"],
        trees_per_question=settings["trees_per_question"],
        max_pos=settings["max_pos"],
        max_neg=settings["max_neg"],
    )
    out_path, manifest_path = export_jsonl(selected, Path(out), manifest)
    return {
        "out": str(out_path),
        "manifest": str(manifest_path),
        "records": manifest.records,
        "pos_neg_ratio": manifest.pos_neg_ratio,
    }


def _histogram(values: list[float], lo: float, hi: float, bins: int) -> list[tuple[str, int]]:
    counts = [0] * bins
    width = (hi - lo) / bins
    for v in values:
        slot = min(bins - 1, max(0, int((v - lo) / width)))
        counts[slot] += 1
    return [
        (f"[{lo + i * width:+.2f},{lo + (i + 1) * width:+.2f})", counts[i])
        for i in range(bins)
    ]


def _step_caption(node) -> str:
    if node.step is None:
        return "(root)"
    for line in node.step.text.splitlines():
        if line and not line.startswith("<"):
            return line[:60]
    return node.step.text[:60]


def run_inspect(snapshot_path: str, beam_width: int) -> str:
    try:
        doc = json.loads(Path(snapshot_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"cannot read snapshot {snapshot_path}: {exc}")
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"snapshot {snapshot_path} is not valid JSON: {exc}")
    tree = snapshot_to_tree(doc)

    nodes = []
    stack = [tree.root]
    while stack:
        node = stack.pop()
        nodes.append(node)
        stack.extend(node.children)
    by_depth: dict[int, int] = {}
    for node in nodes:
        by_depth[node.depth] = by_depth.get(node.depth, 0) + 1
    visited = [n for n in nodes if n.stats.visits > 0]
    q_values = [n.stats.q() for n in visited if n is not tree.root]
    terminals = sum(1 for n in nodes if n.terminal)

    lines = [
        f"snapshot: {snapshot_path}",
        f"question: {tree.question.question_id}",
        f"simulations run: {tree.simulations_run}   "
        f"nodes: {len(nodes)}   terminal: {terminals}",
        "",
        "nodes per depth:",
    ]
    root_depth = tree.root.depth
    for depth in sorted(by_depth):
        lines.append(f"  depth {depth:2d}: {by_depth[depth]}")
    lines.append("")
    lines.append("visit counts (visited nodes):")
    max_visits = max((n.stats.visits for n in visited), default=1)
    for label, count in _histogram(
        [float(n.stats.visits) for n in visited], 0.0, float(max_visits) + 1.0, 6
    ):
        lines.append(f"  {label:>18} {'#' * min(count, 50)} {count}")
    lines.append("")
    lines.append("edge values (visited non-root nodes):")
    for label, count in _histogram(q_values, -1.0, 1.0, 8):
        lines.append(f"  {label:>18} {'#' * min(count, 50)} {count}")
    lines.append("")
    lines.append(f"value sweep (beam width {beam_width}):")
    from .inference import q_sweep

    best, history = q_sweep(tree.root, beam_width, tree.config.q_init)
    for level, kept in enumerate(history, start=root_depth + 1):
        shown = ", ".join(
            f"q={n.stats.q(tree.config.q_init):+.3f} {_step_caption(n)!r}" for n in kept
        )
        lines.append(f"  depth {level}: {shown}")
    lines.append(
        f"best path: depth {best.depth}, q={best.stats.q(tree.config.q_init):+.3f}, "
        f"terminal={best.terminal}"
    )
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsp", description="Value-guided step-level tree search"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_shared(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backend", choices=["toy", "remote"], default=None)
        p.add_argument("--toy-mode", dest="toy_mode", choices=["cold", "oracle"], default=None)
        p.add_argument("--backend-url", dest="backend_url", default=None)
        p.add_argument("--b2", type=int, default=None, help="proposals per expansion")
        p.add_argument("--n-sims", dest="n_simulations", type=int, default=None)
        p.add_argument("--c-puct", dest="c_puct", type=float, default=None)
        p.add_argument("--t-max", dest="t_max", type=int, default=None)
        p.add_argument("--temperature", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON file with default settings")

    solve = sub.add_parser("solve", help="answer questions from a JSONL dataset")
    solve.add_argument("dataset")
    solve.add_argument(
        "--strategy", choices=["greedy", "sbs", "mcts", "maj"], default=None
    )
    solve.add_argument("--b1", type=int, default=None, help="beam width")
    solve.add_argument("--k", type=int, default=None, help="votes for maj")
    solve.add_argument("--out", default=None, help="write full report JSON here")
    solve.add_argument(
        "--dump-trees", dest="dump_trees", default=None,
        help="directory for tree snapshots (mcts strategy only)",
    )
    add_shared(solve)

    generate = sub.add_parser("generate", help="build value-model training data")
    generate.add_argument("dataset")
    generate.add_argument("--out", required=True, help="output JSONL path")
    generate.add_argument("--trees-per-question", dest="trees_per_question", type=int, default=None)
    generate.add_argument("--max-pos", dest="max_pos", type=int, default=None)
    generate.add_argument("--max-neg", dest="max_neg", type=int, default=None)
    generate.add_argument("--round", type=int, default=None)
    generate.add_argument("--beta", type=float, default=None)
    add_shared(generate)

    inspect = sub.add_parser("inspect", help="summarize a tree snapshot")
    inspect.add_argument("snapshot")
    inspect.add_argument("--b1", type=int, default=None, help="sweep beam width")

    toydata = sub.add_parser("toydata", help="write a toy dataset JSONL")
    toydata.add_argument("--n", type=int, default=20)
    toydata.add_argument("--seed", type=int, default=0)
    toydata.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            settings = _merge_settings(args)
            result = run_solve(settings, args.dataset, args.out, args.dump_trees)
            summary = result["summary"]
            accuracy = summary.get("accuracy")
            print(
                f"strategy={summary['strategy']} questions={summary['n_questions']} "
                f"solved={summary['n_solutions']} "
                f"accuracy={'n/a' if accuracy is None else f'{accuracy:.3f}'} "
                f"avg_time_s={summary['avg_time_s']:.4f} "
                f"avg_steps={summary['avg_steps']:.2f} "
                f"avg_candidates={summary['avg_candidates']:.2f}"
            )
            errors = [e for e in result["reports"] if e["error"]]
            for entry in errors[:5]:
                print(f"  {entry['id']}: {entry['error']}", file=sys.stderr)
            if errors:
                print(f"  ({len(errors)} question(s) failed)", file=sys.stderr)
            return EXIT_OK
        if args.command == "generate":
            settings = _merge_settings(args)
            result = run_generate(settings, args.dataset, args.out)
            ratio = result["pos_neg_ratio"]
            print(
                f"wrote {result['records']} records to {result['out']} "
                f"(pos:neg={'n/a' if ratio is None else f'{ratio:.2f}'}, "
                f"manifest {result['manifest']})"
            )
            return EXIT_OK
        if args.command == "inspect":
            print(run_inspect(args.snapshot, args.b1 or 1))
            return EXIT_OK
        if args.command == "toydata":
            corpus = toy_corpus(args.n, args.seed)
            records = corpus_to_records(corpus)
            with open(args.out, "w", encoding="utf-8") as handle:
                for record in records:
                    handle.write(json.dumps(record, ensure_ascii=False) + "\n")
            print(f"wrote {len(records)} problems to {args.out}")
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, SnapshotError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except ContractViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except EngineError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
