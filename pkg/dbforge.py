"""
dbforge command line.

    python dbforge.py characterize --profile toydb --repo fixtures/toydb
    python dbforge.py run --spec fixtures/specs/toy_even.json --llm-mode replay
    python dbforge.py eval --suite fixtures/suites/eval.json

Exit codes: 0 pass, 1 synthesis or validation failure, 2 usage or
configuration error.
"""

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import httpx
import pandas as pd

from artifacts import read_document, write_document
from characterization import (
    CharacterizationDocument,
    FunctionDeclaration,
    GraphCaps,
    characterize_repo,
    load_catalog,
    load_doc_corpus,
    save_characterization,
)
from codebase_index import SymbolIndex, apply_edits, list_source_files, save_index
from config import ABLATIONS, DbProfile, RunConfig, load_profile, load_run_config
from errors import ConfigurationError, DbforgeError, PlanGenerationError, TranscriptMissError
from llm_gateway import LLMGateway, TranscriptStore
from orchestration import (
    MemoryPool,
    SynthesisRequest,
    TrajectoryRecord,
    builtin_registry,
    insert_into_file,
    load_pool,
    run_session,
)
from planning import (
    CodingPlan,
    gather_category_references,
    generate_candidate_plans,
    plans_payload,
    sanitize_and_filter,
    save_plans,
    score_plans,
)
from synthesis import ModeState, SynthesizedUnit, synthesize, units_to_edits
from validation import STAGES, ValidationReport, load_test_suite, run_validation_pipeline, write_validation_report

logger = logging.getLogger("dbforge")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# flag dest -> RunConfig field
_OVERRIDES = {
    "profile": "profile",
    "repo": "repo_root",
    "out": "out_dir",
    "run_id": "run_id",
    "transcripts": "transcripts_dir",
    "seed": "seed",
    "max_steps": "max_steps",
    "max_units": "max_units",
    "max_hops": "max_hops",
    "top_k": "top_k",
    "num_plans": "num_plans",
    "samples": "samples",
    "threshold": "threshold",
    "decay": "decay",
    "floor": "floor",
    "memory": "memory_path",
    "keep_failed": "keep_failed",
    "jobs": "jobs",
    "ablate": "ablations",
}


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration file")
    common.add_argument("--profile", help="Profile name or path (default toydb)")
    common.add_argument("--repo", help="Repository root")
    common.add_argument("--out", help="Output directory for artifacts")
    common.add_argument("--llm-mode", choices=["live", "record", "replay"])
    common.add_argument("--run-id", help="Transcript run id")
    common.add_argument("--transcripts", help="Transcript directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--max-steps", type=int)
    common.add_argument("--max-units", type=int)
    common.add_argument("--max-hops", type=int)
    common.add_argument("--top-k", type=int)
    common.add_argument("--num-plans", type=int)
    common.add_argument("--samples", type=int)
    common.add_argument("--threshold", type=float)
    common.add_argument("--decay", type=float)
    common.add_argument("--floor", type=float)
    common.add_argument("--memory", help="Memory pool file")
    common.add_argument("--keep-failed", action="store_const", const=True, default=None,
                        help="Keep the edits of a failed session")
    common.add_argument("--jobs", type=int, help="Concurrent functions in eval")
    common.add_argument("--ablate", action="append", choices=ABLATIONS, help="Ablation switch (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="dbforge", description="LLM-driven native SQL function synthesis")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("characterize", parents=[common], help="Index and characterize a repository")

    plan = commands.add_parser("plan", parents=[common], help="Generate and score coding plans")
    _target_flags(plan)

    synth = commands.add_parser("synthesize", parents=[common], help="One synthesis attempt")
    _target_flags(synth)
    synth.add_argument("--plan", help="plans.json whose best plan guides the attempt")
    synth.add_argument("--apply", action="store_true", help="Apply the synthesized units to the repository")

    validate = commands.add_parser("validate", parents=[common], help="Validate the repository as it stands")
    _target_flags(validate, required=False)
    validate.add_argument("--stage", choices=STAGES, default="semantic", help="Last stage to run")
    validate.add_argument("--attempt", help="synthesis_attempt.json whose last units are validated")
    validate.add_argument("--files", nargs="*", help="Files for the syntax stage (default: all sources)")
    validate.add_argument("--run-suite", action="store_true", help="Run the existing test suite as semantic tests")

    run = commands.add_parser("run", parents=[common], help="Run a full synthesis session")
    run.add_argument("--spec", required=True, help="Function spec file")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate a suite of functions")
    evaluate.add_argument("--suite", required=True, help="Suite file")

    memory = commands.add_parser("memory", parents=[common], help="Inspect the memory pool")
    memory.add_argument("action", choices=["inspect", "stats"])
    return parser


def _target_flags(parser: argparse.ArgumentParser, required: bool = True) -> None:
    group = parser.add_mutually_exclusive_group(required=required)
    group.add_argument("--spec", help="Function spec file")
    group.add_argument("--function", help="Name of a declared function")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "llm_mode", None):
        overrides["llm"] = {"mode": args.llm_mode}
    return load_run_config(args.config, overrides)


def make_gateway(config: RunConfig, transport: Optional[httpx.BaseTransport] = None) -> LLMGateway:
    store = TranscriptStore.for_run(config.transcripts_dir, config.run_id, config.llm.mode)
    return LLMGateway(config.llm, store, transport)


# -- function specs -----------------------------------------------------------

def parse_function_spec(data: Any, where: str) -> Tuple[FunctionDeclaration, bool]:
    """(declaration, withhold) from a {declaration, withhold} document"""
    if not isinstance(data, dict) or not isinstance(data.get("declaration"), dict):
        raise ConfigurationError(f"{where}: a function spec needs a 'declaration' object")
    withhold = data.get("withhold", False)
    if not isinstance(withhold, bool):
        raise ConfigurationError(f"{where}: 'withhold' must be true or false")
    try:
        return FunctionDeclaration.from_dict(data["declaration"]), withhold
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: invalid declaration ({e})")


def load_function_spec(path: str) -> Tuple[FunctionDeclaration, bool]:
    if not os.path.isfile(path):
        raise ConfigurationError(f"function spec {path} not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_function_spec(json.load(f), path)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"function spec {path} is not valid JSON: {e}")


def load_suite(path: str) -> List[Tuple[FunctionDeclaration, bool]]:
    if not os.path.isfile(path):
        raise ConfigurationError(f"suite {path} not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"suite {path} is not valid JSON: {e}")
    items = data.get("functions") if isinstance(data, dict) else None
    if not isinstance(items, list):
        raise ConfigurationError(f"suite {path} needs a 'functions' list")
    base = os.path.dirname(path)
    specs = []
    for n, item in enumerate(items):
        if isinstance(item, str):
            specs.append(load_function_spec(os.path.join(base, item)))
        else:
            specs.append(parse_function_spec(item, f"{path} entry {n}"))
    return specs


# -- commands -----------------------------------------------------------------

def _repo_root(config: RunConfig) -> str:
    if not os.path.isdir(config.repo_root):
        raise ConfigurationError(f"repository root {config.repo_root} is not a directory")
    return config.repo_root


def _characterize(config: RunConfig, profile: DbProfile) -> Tuple[CharacterizationDocument, SymbolIndex]:
    root = _repo_root(config)
    catalog = os.path.join(root, profile.catalog_path) if profile.catalog_path else None
    return characterize_repo(root, profile, load_doc_corpus(root, profile), load_catalog(catalog),
                             GraphCaps(config.max_units, config.max_hops), config.top_k, config.seed)


def _target(args: argparse.Namespace, ch: CharacterizationDocument) -> FunctionDeclaration:
    if getattr(args, "spec", None):
        return load_function_spec(args.spec)[0]
    decl = ch.declaration(args.function)
    if decl is None:
        raise ConfigurationError(f"function {args.function} is not declared in the repository")
    return decl


def cmd_characterize(config: RunConfig, args: argparse.Namespace) -> int:
    profile = load_profile(config.profile)
    ch, index = _characterize(config, profile)
    if len(index) == 0:
        logger.warning(f"EMPTY REPOSITORY: nothing to characterize under {config.repo_root}")
    save_index(index, os.path.join(config.out_dir, "index.json"))
    path = save_characterization(ch, os.path.join(config.out_dir, "characterization.json"))
    print(f"{len(ch.declarations)} declarations, {len(ch.graphs)} implemented, "
          f"{len(ch.pruned_units)} templates -> {path}")
    return 0


def cmd_plan(config: RunConfig, args: argparse.Namespace, transport=None) -> int:
    profile = load_profile(config.profile)
    ch, index = _characterize(config, profile)
    decl = _target(args, ch)
    llm = make_gateway(config, transport)
    try:
        candidates, drops = generate_candidate_plans(decl, gather_category_references(decl, ch), config.num_plans,
                                                     llm)
    except PlanGenerationError as e:
        logger.error(f"PLANNING FAILED: {e}")
        return 1
    finally:
        llm.close()
    scores = score_plans(candidates, index, config.repo_root, profile, config.weights)
    kept = sanitize_and_filter(candidates, scores, index, config.repo_root, profile, config.threshold)
    path = save_plans(os.path.join(config.out_dir, "plans.json"), plans_payload(kept, scores, drops, candidates))
    print(f"{len(kept)} of {len(candidates)} plan(s) kept -> {path}")
    return 0


def cmd_synthesize(config: RunConfig, args: argparse.Namespace, transport=None) -> int:
    profile = load_profile(config.profile)
    ch, index = _characterize(config, profile)
    decl = _target(args, ch)
    plan = None
    if args.plan:
        plans = read_document(args.plan, "plans").get("plans", [])
        plan = CodingPlan.from_dict(plans[0]) if plans else None
    state = ModeState(decay=config.decay, floor=config.floor, rng_seed=config.seed)
    llm = make_gateway(config, transport)
    try:
        attempt = synthesize(decl, ch, plan, state, llm, index, profile, samples=config.samples, k=config.top_k,
                             references=gather_category_references(decl, ch))
    finally:
        llm.close()
    path = write_document(os.path.join(config.out_dir, "synthesis_attempt.json"), "synthesis_attempt",
                          {"attempts": [attempt.to_dict()], "mode_draws": state.draws})
    if attempt.error:
        logger.error(f"SYNTHESIS FAILED: {attempt.error}")
        return 1
    if args.apply:
        token = apply_edits(config.repo_root, units_to_edits(attempt.units, index, profile), index, profile)
        print(f"applied to {', '.join(token.files)}")
    print(f"{len(attempt.units)} unit(s) ({attempt.mode}) -> {path}")
    return 0


def cmd_validate(config: RunConfig, args: argparse.Namespace, transport=None) -> int:
    profile = load_profile(config.profile)
    root = _repo_root(config)
    stages = STAGES[:STAGES.index(args.stage) + 1]
    units: List[SynthesizedUnit] = []
    if args.attempt:
        attempts = read_document(args.attempt, "synthesis_attempt").get("attempts", [])
        units = [SynthesizedUnit.from_dict(u) for u in (attempts[-1]["units"] if attempts else [])]
    decl = FunctionDeclaration("repository")
    if args.spec or args.function:
        decl = _target(args, _characterize(config, profile)[0]) if args.function else load_function_spec(args.spec)[0]
    elif "semantic" in stages and not args.run_suite:
        raise ConfigurationError("semantic test generation needs --spec or --function (or use --run-suite)")
    files = args.files if args.files else sorted({u.file_path for u in units}) or list_source_files(root, profile)
    suite = load_test_suite(root, profile)
    llm = None if args.run_suite or "semantic" not in stages else make_gateway(config, transport)
    try:
        report = run_validation_pipeline(root, profile, decl, units, llm, files=files, suite=suite,
                                         tests=suite if args.run_suite else None, stages=stages)
    finally:
        if llm is not None:
            llm.close()
    write_validation_report(config.out_dir, report)
    _print_report(report)
    passed = len(report.outcomes) == len(stages) and all(o.passed for o in report.outcomes)
    return 0 if passed else 1


def _print_report(report: ValidationReport) -> None:
    for outcome in report.outcomes:
        print(f"{outcome.stage}: {'passed' if outcome.passed else 'FAILED'}")
        for d in outcome.diagnostics:
            where = f"{d.file}:{d.line}: " if d.file else ""
            print(f"  [{d.error_class or 'info'}] {where}{d.message}")


def run_function(config: RunConfig, decl: FunctionDeclaration, withhold: bool, pool: MemoryPool, llm: LLMGateway,
                 out_dir: Optional[str] = None) -> TrajectoryRecord:
    request = SynthesisRequest(decl, config.repo_root, config.profile, config, withhold)
    registry = builtin_registry(config.ablations)
    _, record = run_session(request, registry, pool, llm, config.max_steps, out_dir or config.out_dir)
    return record


def cmd_run(config: RunConfig, args: argparse.Namespace, transport=None) -> int:
    decl, withhold = load_function_spec(args.spec)
    load_profile(config.profile)
    _repo_root(config)
    pool = load_pool(config.memory_path, config.memory_cap)
    llm = make_gateway(config, transport)
    try:
        record = run_function(config, decl, withhold, pool, llm)
    finally:
        llm.close()
    accepted = insert_into_file(config.memory_path, record, config.memory_cap)
    print(f"{decl.name}: verdict={record.verdict} steps={record.total_count} "
          f"memory={'stored' if accepted else 'skipped'}")
    return 0 if record.verdict == "pass" else 1


def function_seed(seed: int, name: str) -> int:
    """Per-function seed, independent of suite order"""
    return seed + int(hashlib.sha256(name.encode("utf-8")).hexdigest()[:8], 16)


def _eval_one(config: RunConfig, decl: FunctionDeclaration, withhold: bool, pool: MemoryPool,
              llm: LLMGateway) -> Tuple[Dict[str, Any], Optional[TrajectoryRecord], float]:
    started = time.monotonic()
    row = {"name": decl.name, "category": decl.category, "verdict_exe": False, "verdict_res": False, "steps": 0,
           "final_stage": None, "error": None}
    record = None
    workdir = tempfile.mkdtemp(prefix=f"dbforge-{decl.name}-")
    try:
        repo = os.path.join(workdir, "repo")
        shutil.copytree(config.repo_root, repo)
        local = config.model_copy(update={"repo_root": repo, "seed": function_seed(config.seed, decl.name)})
        record = run_function(local, decl, withhold, pool, llm, os.path.join(config.out_dir, "eval", decl.name))
        row.update(
            verdict_exe=record.verdict == "pass" or record.final_stage == "semantic",
            verdict_res=record.verdict == "pass",
            steps=record.total_count,
            final_stage=record.final_stage,
        )
    except Exception as e:
        logger.error(f"EVAL CRASH: {decl.name}: {type(e).__name__}: {e}")
        row["error"] = f"{type(e).__name__}: {e}"
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    return row, record, round(time.monotonic() - started, 3)


def cmd_eval(config: RunConfig, args: argparse.Namespace, transport=None) -> int:
    specs = load_suite(args.suite)
    if not specs:
        raise ConfigurationError(f"suite {args.suite} lists no functions")
    load_profile(config.profile)
    _repo_root(config)
    pool = load_pool(config.memory_path, config.memory_cap)
    llm = make_gateway(config, transport)
    try:
        with ThreadPoolExecutor(max_workers=config.jobs) as workers:
            results = list(workers.map(lambda spec: _eval_one(config, spec[0], spec[1], pool, llm), specs))
    finally:
        llm.close()
    for _, record, _ in results:
        if record is not None:
            insert_into_file(config.memory_path, record, config.memory_cap)

    rows = [row for row, _, _ in results]
    table = pd.DataFrame(rows, columns=["name", "category", "verdict_exe", "verdict_res", "steps", "final_stage",
                                        "error"])
    acc_exe = float(table["verdict_exe"].mean())
    acc_res = float(table["verdict_res"].mean())
    write_document(os.path.join(config.out_dir, "eval_report.json"), "eval_report",
                   {"functions": rows, "acc_exe": acc_exe, "acc_res": acc_res, "total": len(rows)})
    write_document(os.path.join(config.out_dir, "eval_timings.json"), "eval_timings",
                   {"functions": [{"name": row["name"], "wall_time": t} for row, _, t in results]})
    print(table.drop(columns=["error"]).to_string(index=False))
    print(f"acc_exe={acc_exe:.4f} acc_res={acc_res:.4f}")
    return 0 if all(row["verdict_res"] for row in rows) else 1


def cmd_memory(config: RunConfig, args: argparse.Namespace) -> int:
    pool = load_pool(config.memory_path, config.memory_cap)
    if not pool.categories():
        print("(empty memory pool)")
        return 0
    if args.action == "stats":
        for category in pool.categories():
            lo, med, hi = pool.stats(category)
            print(f"{category}: min={lo} median={med} max={hi} count={len(pool.entries[category])}")
        return 0
    rows = [
        {"category": category, "function": r.function_name, "total_count": r.total_count, "verdict": r.verdict,
         "tools": " > ".join(s.tool for s in r.steps)}
        for category in pool.categories() for r in pool.entries[category]
    ]
    print(pd.DataFrame(rows).to_string(index=False))
    return 0


def main(argv: Optional[List[str]] = None, transport: Optional[httpx.BaseTransport] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    setup_logging(args.verbose, args.quiet)
    try:
        config = resolve_config(args)
        if args.command == "characterize":
            return cmd_characterize(config, args)
        if args.command == "memory":
            return cmd_memory(config, args)
        handler = {"plan": cmd_plan, "synthesize": cmd_synthesize, "validate": cmd_validate, "run": cmd_run,
                   "eval": cmd_eval}[args.command]
        return handler(config, args, transport)
    except ConfigurationError as e:
        logger.error(f"CONFIGURATION ERROR: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TranscriptMissError as e:
        logger.error(f"REPLAY MISS: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DbforgeError as e:
        logger.error(f"FAILED: {type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
