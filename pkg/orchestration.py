"""
Tool-based stepwise synthesis sessions.

Every pipeline operation is registered as a tool with a typed argument
schema. A session starts from the coding tool and asks the LLM controller
for the next tool after each step, guided by reference trajectories of the
same category drawn from the memory pool, until the controller stops or the
step cap forces a stop.
"""

import fcntl
import hashlib
import json
import logging
import os
import re
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from pydantic import ConfigDict, ValidationError, create_model

from artifacts import read_document, render_document, write_document
from characterization import (
    CharacterizationDocument,
    FunctionDeclaration,
    GraphCaps,
    characterize_repo,
    expand_reference,
    load_catalog,
    load_doc_corpus,
)
from codebase_index import (
    RollbackToken,
    SymbolEntry,
    SymbolIndex,
    apply_edits,
    classify_edges,
    lookup_symbol,
    registration_entries,
    scan_repo,
    source_lines,
    withhold_entries,
)
from config import DbProfile, RunConfig, load_profile
from errors import (
    AnchorNotFoundError,
    ConfigurationError,
    EditApplyError,
    EditCollisionError,
    LLMError,
    StaleReferenceError,
    SynthesisError,
    ToolRegistrationError,
    TranscriptMissError,
)
from llm_gateway import LLMGateway, Prompt, extract_json
from planning import (
    CodingPlan,
    describe_declaration,
    gather_category_references,
    generate_candidate_plans,
    plans_payload,
    sanitize_and_filter,
    save_plans,
    score_plans,
)
from synthesis import ModeState, SynthesisAttempt, SynthesizedUnit, synthesize, units_to_edits
from validation import TestCase, ValidationReport, load_test_suite, run_validation_pipeline, write_validation_report

logger = logging.getLogger(__name__)

DEFAULT_SEQUENCE = ("plan_agent", "code_agent", "validate_agent", "stop")
OUTCOMES = ("success", "failure", "info")

CONTROLLER_SYSTEM = (
    "You coordinate the synthesis of a native SQL function inside a database codebase. After each step you "
    "choose the next tool. Answer with a single JSON object naming the tool and its arguments."
)

SUMMARY_SYSTEM = "You summarize a function synthesis session in two sentences for future sessions."

_TOOL_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")

Handler = Callable[["SessionContext", Dict[str, Any]], Tuple[str, Dict[str, Any], str]]


# -- tools --------------------------------------------------------------------

@dataclass
class ToolSpec:
    """
    A pipeline operation exposed to the controller.

    args maps each argument name to (type, default); handlers receive the
    validated arguments and return (status, payload, summary_line).
    """

    name: str
    description: str
    args: Dict[str, Tuple[type, Any]] = field(default_factory=dict)
    handler: Optional[Handler] = None
    informational: bool = False
    args_model: type = field(init=False, repr=False)

    def __post_init__(self):
        if not _TOOL_NAME_RE.match(self.name):
            raise ToolRegistrationError(f"'{self.name}' is not a valid tool name")
        if not self.description.strip():
            raise ToolRegistrationError(f"tool '{self.name}' needs a description")
        self.args_model = create_model(
            f"{self.name}_args",
            __config__=ConfigDict(extra="forbid", strict=True),
            **{arg: (typ, default) for arg, (typ, default) in self.args.items()},
        )

    def manifest_line(self) -> str:
        params = ", ".join(f"{arg}: {typ.__name__} = {default!r}" for arg, (typ, default) in self.args.items())
        return f"- {self.name}({params}): {self.description}"


class ToolRegistry:
    def __init__(self):
        self._tools: Dict[str, ToolSpec] = {}

    def register(self, spec: ToolSpec) -> "ToolRegistry":
        if spec.name in self._tools:
            raise ToolRegistrationError(f"tool '{spec.name}' is already registered")
        self._tools[spec.name] = spec
        return self

    def get(self, name: str) -> Optional[ToolSpec]:
        return self._tools.get(name)

    def names(self) -> List[str]:
        return list(self._tools)

    def manifest(self) -> str:
        return "\n".join(spec.manifest_line() for spec in self._tools.values())

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)


def register_tool(registry: ToolRegistry, spec: ToolSpec) -> ToolRegistry:
    """
    Add a tool to a registry.

    Raises:
        ToolRegistrationError: the name is already taken
    """
    return registry.register(spec)


@dataclass
class ToolResult:
    tool: str
    status: str
    payload: Dict[str, Any] = field(default_factory=dict)
    summary_line: str = ""
    terminal: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {"tool": self.tool, "status": self.status, "payload": self.payload,
                "summary_line": self.summary_line}


def route(registry: ToolRegistry, tool: str, args: Optional[Dict[str, Any]] = None,
          ctx: Optional["SessionContext"] = None) -> ToolResult:
    """
    Validate arguments, invoke the handler and wrap its output.

    Unknown tools, schema violations and handler exceptions become failure
    results. A replay transcript miss is not absorbed.
    """
    spec = registry.get(tool)
    if spec is None:
        return ToolResult(tool, "failure", {"error": "unknown tool"}, f"{tool}: not a registered tool")
    try:
        validated = spec.args_model.model_validate(args or {})
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "args"
        return ToolResult(tool, "failure", {"error": str(e)}, f"{tool}: invalid arguments ({where}: {first['msg']})")
    if spec.handler is None:
        return ToolResult(tool, "success", {}, f"{tool}: done", terminal=(tool == "stop"))
    try:
        status, payload, summary = spec.handler(ctx, validated.model_dump())
    except TranscriptMissError:
        raise
    except Exception as e:
        logger.warning(f"TOOL FAILED: {tool} raised {type(e).__name__}: {e}")
        return ToolResult(tool, "failure", {"error": f"{type(e).__name__}: {e}"}, f"{tool}: {type(e).__name__}: {e}")
    return ToolResult(tool, status, payload, summary, terminal=(tool == "stop" and status == "success"))


# -- session state ------------------------------------------------------------

@dataclass
class SessionContext:
    decl: FunctionDeclaration
    root: str
    profile: DbProfile
    config: RunConfig
    llm: LLMGateway
    index: SymbolIndex
    ch: CharacterizationDocument
    state: ModeState
    out_dir: Optional[str] = None
    references: list = field(default_factory=list)
    expanded: Dict[str, str] = field(default_factory=dict)
    suite: List[TestCase] = field(default_factory=list)
    plan: Optional[CodingPlan] = None
    token: Optional[RollbackToken] = None
    units: List[SynthesizedUnit] = field(default_factory=list)
    validated: bool = False
    report: Optional[ValidationReport] = None
    attempts: List[SynthesisAttempt] = field(default_factory=list)

    def artifact(self, name: str) -> Optional[str]:
        return os.path.join(self.out_dir, name) if self.out_dir else None

    def discard_edits(self) -> None:
        if self.token is not None:
            self.token.rollback()
        self.token = None
        self.units = []
        self.validated = False


def _plan_agent(ctx: SessionContext, args: Dict[str, Any]) -> Tuple[str, Dict[str, Any], str]:
    candidates, drops = generate_candidate_plans(ctx.decl, ctx.references, args["plan_num"], ctx.llm)
    scores = score_plans(candidates, ctx.index, ctx.root, ctx.profile, ctx.config.weights)
    kept = sanitize_and_filter(candidates, scores, ctx.index, ctx.root, ctx.profile, ctx.config.threshold)
    ctx.plan = kept[0]
    payload = plans_payload(kept, scores, drops, candidates)
    if ctx.out_dir:
        save_plans(ctx.artifact("plans.json"), payload)
    best = max(s.r for s in scores)
    return "success", payload, f"plan_agent: kept {len(kept)} of {len(candidates)} plan(s), best r={best:.2f}"


def _code_agent(ctx: SessionContext, args: Dict[str, Any]) -> Tuple[str, Dict[str, Any], str]:
    ctx.discard_edits()
    attempt = synthesize(ctx.decl, ctx.ch, ctx.plan, ctx.state, ctx.llm, ctx.index, ctx.profile,
                         samples=ctx.config.samples, k=ctx.config.top_k, references=ctx.references,
                         expanded=ctx.expanded, use_templates=not ctx.config.ablated("no_characterization"))
    ctx.attempts.append(attempt)
    status, summary = "success", ""
    if attempt.error:
        status, summary = "failure", f"code_agent ({attempt.mode}): {attempt.error}"
    else:
        try:
            edits = units_to_edits(attempt.units, ctx.index, ctx.profile)
            ctx.token = apply_edits(ctx.root, edits, ctx.index, ctx.profile)
            ctx.units = list(attempt.units)
            names = ", ".join(u.unit_name for u in attempt.units)
            summary = f"code_agent ({attempt.mode}): applied {len(attempt.units)} unit(s) [{names}]"
        except (EditCollisionError, EditApplyError, AnchorNotFoundError, SynthesisError) as e:
            ctx.state.record_failure()
            attempt.error = f"placement failed: {e}"
            status, summary = "failure", f"code_agent ({attempt.mode}): placement failed: {e}"
    if ctx.out_dir:
        write_document(ctx.artifact("synthesis_attempt.json"), "synthesis_attempt",
                       {"attempts": [a.to_dict() for a in ctx.attempts]})
    return status, attempt.to_dict(), summary


def _validate_agent(ctx: SessionContext, args: Dict[str, Any]) -> Tuple[str, Dict[str, Any], str]:
    if not ctx.units:
        return "failure", {}, "validate_agent: no applied units to validate"
    report = run_validation_pipeline(ctx.root, ctx.profile, ctx.decl, ctx.units, ctx.llm,
                                     files=ctx.token.files if ctx.token else None,
                                     globals_=ctx.index.global_names(), suite=ctx.suite)
    ctx.report = report
    ctx.validated = True
    if ctx.out_dir:
        write_validation_report(ctx.out_dir, report)
    if report.verdict == "pass":
        return "success", report.to_dict(), f"validate_agent: pass ({len(report.tests)} test(s))"
    ctx.state.record_failure()
    failed = report.outcomes[-1]
    first = failed.first_error()
    detail = f"{first.error_class}: {first.message}" if first else "failed"
    return "failure", report.to_dict(), f"validate_agent: {failed.stage} failed ({detail[:200]})"


def _search_repo(ctx: SessionContext, args: Dict[str, Any]) -> Tuple[str, Dict[str, Any], str]:
    query = args["query"].lower()
    matches = [e for e in ctx.index.all_entries() if query in e.name.lower()]
    matches.sort(key=lambda e: (e.name, e.file, e.span))
    rows = [{"name": e.name, "kind": e.kind, "file": e.file, "line": e.span[0]} for e in matches[:20]]
    return "success", {"matches": rows}, f"search_repo: {len(matches)} match(es) for '{args['query']}'"


def _read_file(ctx: SessionContext, args: Dict[str, Any]) -> Tuple[str, Dict[str, Any], str]:
    root = os.path.realpath(ctx.root)
    path = os.path.realpath(os.path.join(root, args["path"]))
    if os.path.isabs(args["path"]) or not path.startswith(root + os.sep) or not os.path.isfile(path):
        return "failure", {}, f"read_file: {args['path']} is not a file in the repository"
    with open(path, "rb") as f:
        lines = source_lines(f.read().decode("utf-8", errors="replace"))
    start = max(1, args["start"])
    end = args["end"] if args["end"] > 0 else start + 99
    end = min(end, len(lines))
    text = "\n".join(lines[start - 1:end])
    return "success", {"path": args["path"], "start": start, "end": end, "text": text}, \
        f"read_file: {args['path']} lines {start}-{end}"


def _expand_reference(ctx: SessionContext, args: Dict[str, Any]) -> Tuple[str, Dict[str, Any], str]:
    name = args["name"]
    known = [r for refs in ctx.ch.reference_units.values() for r in refs if r.name == name]
    known += [r for r in ctx.references if r.name == name]
    if known:
        try:
            text = expand_reference(known[0], ctx.index)
        except StaleReferenceError as e:
            return "failure", {}, f"expand_reference: {e}"
    else:
        entries = [e for e in lookup_symbol(ctx.index, name) if e.kind != "registration_entry"]
        if not entries:
            return "failure", {}, f"expand_reference: {name} is not in the index"
        text = ctx.index.entry_text(entries[0])
    ctx.expanded[name] = text
    return "success", {"name": name, "text": text}, f"expand_reference: {name} ({len(text.splitlines())} lines)"


def builtin_registry(ablations: Sequence[str] = ()) -> ToolRegistry:
    """The shipped tool set, minus tools removed by ablation switches"""
    registry = ToolRegistry()
    specs = [
        ToolSpec("plan_agent", "Generate pseudo-based plans to outline and instruct synthesis",
                 {"plan_num": (int, 3)}, _plan_agent),
        ToolSpec("code_agent", "Synthesize the function units and apply them to the repository", {}, _code_agent),
        ToolSpec("validate_agent", "Run syntax, compliance and semantic validation on the applied units", {},
                 _validate_agent),
        ToolSpec("search_repo", "Find symbols whose name contains a query", {"query": (str, ...)}, _search_repo,
                 informational=True),
        ToolSpec("read_file", "Read lines of a repository file (end=0 reads 100 lines)",
                 {"path": (str, ...), "start": (int, 1), "end": (int, 0)}, _read_file, informational=True),
        ToolSpec("expand_reference", "Fetch the full source of a referenced symbol for the next coding step",
                 {"name": (str, ...)}, _expand_reference),
        ToolSpec("stop", "End the session", {}, None),
    ]
    removed = {"no_plan": "plan_agent", "no_validation": "validate_agent"}
    skip = {removed[a] for a in ablations if a in removed}
    for spec in specs:
        if spec.name not in skip:
            register_tool(registry, spec)
    return registry


# -- trajectories -------------------------------------------------------------

@dataclass
class TrajectoryStep:
    tool: str
    args_digest: str
    outcome: str
    summary_line: str

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown step outcome '{self.outcome}'")

    @classmethod
    def from_result(cls, result: ToolResult, args: Dict[str, Any], informational: bool = False) -> "TrajectoryStep":
        outcome = "info" if informational and result.status == "success" else result.status
        return cls(result.tool, args_digest(args), outcome, result.summary_line)

    def to_dict(self) -> Dict[str, Any]:
        return {"tool": self.tool, "args_digest": self.args_digest, "outcome": self.outcome,
                "summary_line": self.summary_line}


def args_digest(args: Optional[Dict[str, Any]]) -> str:
    canonical = json.dumps(args or {}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class TrajectoryRecord:
    function_name: str
    category: str
    steps: List[TrajectoryStep]
    tool_counts: Dict[str, int]
    total_count: int
    summary: str
    verdict: str
    final_stage: Optional[str] = None

    def __post_init__(self):
        if self.verdict not in ("pass", "fail"):
            raise ValueError(f"unknown verdict '{self.verdict}'")
        if self.total_count != len(self.steps) or sum(self.tool_counts.values()) != self.total_count:
            raise ValueError("tool counts do not add up to the step count")

    @classmethod
    def from_steps(cls, function_name: str, category: str, steps: Sequence[TrajectoryStep], summary: str,
                   verdict: str, final_stage: Optional[str] = None) -> "TrajectoryRecord":
        counts: Dict[str, int] = {}
        for step in steps:
            counts[step.tool] = counts.get(step.tool, 0) + 1
        return cls(function_name, category, list(steps), counts, len(steps), summary, verdict, final_stage)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "function_name": self.function_name,
            "category": self.category,
            "steps": [s.to_dict() for s in self.steps],
            "tool_counts": dict(sorted(self.tool_counts.items())),
            "total_count": self.total_count,
            "summary": self.summary,
            "verdict": self.verdict,
            "final_stage": self.final_stage,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrajectoryRecord":
        return cls(data["function_name"], data["category"], [TrajectoryStep(**s) for s in data["steps"]],
                   dict(data["tool_counts"]), data["total_count"], data["summary"], data["verdict"],
                   data.get("final_stage"))


def deterministic_summary(function_name: str, steps: Sequence[TrajectoryStep], verdict: str,
                          final_stage: Optional[str]) -> str:
    counts: Dict[str, int] = {}
    for step in steps:
        counts[step.tool] = counts.get(step.tool, 0) + 1
    tally = ", ".join(f"{tool} x{n}" for tool, n in sorted(counts.items()))
    return (f"{function_name}: {len(steps)} step(s) [{tally}]; verdict {verdict}; "
            f"final stage {final_stage or 'none'}")


# -- memory pool --------------------------------------------------------------

def lower_median(values: Sequence[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class MemoryPool:
    cap: int = 16
    entries: Dict[str, List[TrajectoryRecord]] = field(default_factory=dict)

    def __post_init__(self):
        if self.cap < 3:
            raise ValueError("memory pool cap must keep at least the min, median and max records")

    def counts(self, category: str) -> List[int]:
        return [r.total_count for r in self.entries.get(category, [])]

    def stats(self, category: str) -> Optional[Tuple[int, int, int]]:
        """(min, lower median, max) of the stored total counts"""
        counts = self.counts(category)
        if not counts:
            return None
        return min(counts), lower_median(counts), max(counts)

    def categories(self) -> List[str]:
        return sorted(self.entries)

    def to_payload(self) -> Dict[str, Any]:
        rows = []
        for category in self.categories():
            lo, med, hi = self.stats(category)
            rows.append({
                "category": category,
                "stats": {"min": lo, "median": med, "max": hi, "count": len(self.entries[category])},
                "records": [r.to_dict() for r in self.entries[category]],
            })
        return {"cap": self.cap, "categories": rows}

    @classmethod
    def from_payload(cls, payload: Dict[str, Any], cap: Optional[int] = None) -> "MemoryPool":
        entries = {row["category"]: [TrajectoryRecord.from_dict(r) for r in row["records"]]
                   for row in payload.get("categories", [])}
        return cls(cap if cap is not None else payload.get("cap", 16), entries)


def _stat_holders(records: Sequence[TrajectoryRecord]) -> List[int]:
    """Positions of the earliest records attaining min, lower median and max"""
    counts = [r.total_count for r in records]
    targets = (min(counts), lower_median(counts), max(counts))
    holders = []
    for target in targets:
        position = counts.index(target)
        if position not in holders:
            holders.append(position)
    return holders


def insert_trajectory(pool: MemoryPool, record: TrajectoryRecord) -> bool:
    """
    Insert a record when it moves the category's min, lower median or max.

    Past the cap, the stored record closest to the median is evicted; the
    records holding the statistics and the new record are kept.

    Returns:
        Whether the record was accepted
    """
    stored = pool.entries.get(record.category, [])
    if not stored:
        pool.entries[record.category] = [record]
        logger.info(f"TRAJECTORY STORED: first {record.category} record ({record.total_count} steps)")
        return True
    lo, med, hi = pool.stats(record.category)
    n = record.total_count
    if not (n < lo or n > hi or lower_median([r.total_count for r in stored] + [n]) != med):
        logger.info(f"TRAJECTORY REJECTED: {record.function_name} ({n} steps) leaves {record.category} "
                    f"stats ({lo}, {med}, {hi}) unchanged")
        return False
    stored.append(record)
    if len(stored) > pool.cap:
        keep = set(_stat_holders(stored))
        median = lower_median([r.total_count for r in stored])
        candidates = [i for i in range(len(stored)) if i not in keep and i != len(stored) - 1]
        if not candidates:
            candidates = [i for i in range(len(stored)) if i not in keep]
        victim = min(candidates, key=lambda i: (abs(stored[i].total_count - median), i))
        evicted = stored.pop(victim)
        logger.info(f"TRAJECTORY EVICTED: {evicted.function_name} ({evicted.total_count} steps)")
    logger.info(f"TRAJECTORY STORED: {record.function_name} ({n} steps); {record.category} stats now "
                f"{pool.stats(record.category)}")
    return True


def retrieve_reference_trajectories(pool: MemoryPool, category: str) -> List[TrajectoryRecord]:
    """The records attaining min, lower median and max total count, deduplicated"""
    stored = pool.entries.get(category, [])
    if not stored:
        return []
    return [stored[i] for i in _stat_holders(stored)]


_POOL_LOCK = threading.Lock()


@contextmanager
def _locked(path: str) -> Iterator[None]:
    with _POOL_LOCK:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path + ".lock", "a") as lock:
            fcntl.flock(lock.fileno(), fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(lock.fileno(), fcntl.LOCK_UN)


def load_pool(path: str, cap: Optional[int] = None) -> MemoryPool:
    if not os.path.isfile(path):
        return MemoryPool(cap if cap is not None else 16)
    return MemoryPool.from_payload(read_document(path, "memory_pool"), cap)


def save_pool(pool: MemoryPool, path: str) -> str:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp.{os.getpid()}.{threading.get_ident()}"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(render_document("memory_pool", pool.to_payload()))
    os.replace(tmp, path)
    return path


def insert_into_file(path: str, record: TrajectoryRecord, cap: int = 16) -> bool:
    """Read-modify-write insertion under the pool lock"""
    with _locked(path):
        pool = load_pool(path, cap)
        accepted = insert_trajectory(pool, record)
        if accepted:
            save_pool(pool, path)
        return accepted


# -- controller ---------------------------------------------------------------

def describe_trajectory(steps: Sequence[TrajectoryStep]) -> str:
    if not steps:
        return "(no steps yet)"
    return "\n".join(f"{i}. {s.tool} -> {s.outcome}: {s.summary_line}" for i, s in enumerate(steps, 1))


def describe_reference_trajectories(refs: Sequence[TrajectoryRecord]) -> str:
    if not refs:
        return "(none)"
    lines = []
    for r in refs:
        sequence = " > ".join(s.tool for s in r.steps)
        lines.append(f"- {r.function_name}: {r.total_count} steps, verdict {r.verdict}: {sequence}. {r.summary}")
    return "\n".join(lines)


def controller_prompt_text(decl: FunctionDeclaration, steps: Sequence[TrajectoryStep],
                           refs: Sequence[TrajectoryRecord], registry: ToolRegistry) -> str:
    return "\n".join([
        describe_declaration(decl),
        "",
        "Tools:",
        registry.manifest(),
        "",
        "Trajectory so far:",
        describe_trajectory(steps),
        "",
        "Reference trajectories of the same category:",
        describe_reference_trajectories(refs),
        "",
        'Answer with JSON: {"tool": "<tool name>", "args": {}}',
    ])


def parse_controller_reply(text: str, registry: ToolRegistry) -> Optional[Tuple[str, Dict[str, Any]]]:
    """A JSON tool choice, else the earliest registered tool name in the text"""
    try:
        data = extract_json(text)
    except ValueError:
        data = None
    if isinstance(data, dict) and isinstance(data.get("tool"), str) and data["tool"] in registry:
        args = data.get("args")
        return data["tool"], dict(args) if isinstance(args, dict) else {}
    best = None
    for name in registry.names():
        m = re.search(rf"\b{re.escape(name)}\b", text)
        if m and (best is None or (m.start(), -len(name)) < (best[0], -len(best[1]))):
            best = (m.start(), name)
    return (best[1], {}) if best else None


def fallback_tool(steps: Sequence[TrajectoryStep], registry: ToolRegistry) -> str:
    """Next tool of the default plan, code, validate, stop sequence"""
    sequence = [t for t in DEFAULT_SEQUENCE if t in registry]
    last = steps[-1].tool if steps else None
    if last in sequence:
        return sequence[min(sequence.index(last) + 1, len(sequence) - 1)]
    return sequence[0]


def next_tool(llm: LLMGateway, steps: Sequence[TrajectoryStep], refs: Sequence[TrajectoryRecord],
              registry: ToolRegistry, decl: FunctionDeclaration) -> Tuple[str, Dict[str, Any]]:
    """
    Ask the controller for the next tool.

    An unusable reply gets one corrective retry; a second failure falls back
    to the default sequence.
    """
    if not len(registry):
        raise ValueError("tool registry is empty")
    messages = [("user", controller_prompt_text(decl, steps, refs, registry))]
    for attempt in range(2):
        prompt = Prompt(CONTROLLER_SYSTEM, list(messages), llm.settings.temperature, llm.settings.max_tokens,
                        "controller")
        try:
            reply = llm.complete(prompt)
        except TranscriptMissError:
            raise
        except LLMError as e:
            logger.warning(f"CONTROLLER ERROR: {e}")
            break
        choice = parse_controller_reply(reply, registry)
        if choice is not None:
            logger.debug(f"controller chose {choice[0]} {choice[1]}")
            return choice
        messages.extend([
            ("assistant", reply),
            ("user", f"That reply named no registered tool. Answer with JSON naming one of: "
                     f"{', '.join(registry.names())}."),
        ])
    tool = fallback_tool(steps, registry)
    logger.warning(f"CONTROLLER FALLBACK: {decl.name} continues with {tool}")
    return tool, {}


# -- sessions -----------------------------------------------------------------

@dataclass
class SynthesisRequest:
    declaration: FunctionDeclaration
    repo_root: str
    profile: str
    config: RunConfig
    withhold: bool = False


def entries_to_withhold(index: SymbolIndex, name: str) -> List[SymbolEntry]:
    """
    Registration entry of a function plus the units only it registers.

    Units also registered by another function stay in place.
    """
    regs = registration_entries(index, name)
    if not regs:
        return []
    own = set()
    for reg in regs:
        own.update(target for target, relation in classify_edges(index, reg) if relation == "call")
    shared = set()
    for entry in index.all_entries():
        if entry.kind == "registration_entry" and entry not in regs:
            shared.update(target for target, relation in classify_edges(index, entry) if relation == "call")
    units = [e for target in sorted(own - shared) for e in lookup_symbol(index, target) if e.kind == "function"]
    return list(regs) + units


def _characterize(root: str, profile: DbProfile, decl: FunctionDeclaration,
                  config: RunConfig) -> Tuple[CharacterizationDocument, SymbolIndex]:
    if config.ablated("no_characterization"):
        return CharacterizationDocument(declarations=[decl]), scan_repo(root, profile)
    catalog = os.path.join(root, profile.catalog_path) if profile.catalog_path else None
    ch, index = characterize_repo(root, profile, load_doc_corpus(root, profile), load_catalog(catalog),
                                  GraphCaps(config.max_units, config.max_hops), config.top_k, config.seed)
    if ch.declaration(decl.name) is None:
        ch.declarations.append(decl)
    return ch, index


def _summarize(ctx: SessionContext, steps: Sequence[TrajectoryStep], verdict: str, final_stage: Optional[str]) -> str:
    digest = deterministic_summary(ctx.decl.name, steps, verdict, final_stage)
    if not ctx.config.llm_summaries:
        return digest
    prompt = ctx.llm.prompt(SUMMARY_SYSTEM, f"{digest}\n\nSteps:\n{describe_trajectory(steps)}", "summary")
    try:
        return " ".join(ctx.llm.complete(prompt).split())
    except TranscriptMissError:
        raise
    except LLMError as e:
        logger.warning(f"SUMMARY FALLBACK: {e}")
        return digest


def run_session(request: SynthesisRequest, registry: ToolRegistry, pool: MemoryPool, llm: LLMGateway,
                max_steps: Optional[int] = None,
                out_dir: Optional[str] = None) -> Tuple[List[SynthesizedUnit], TrajectoryRecord]:
    """
    Run one stepwise synthesis session.

    Args:
        request: Function to synthesize and where
        registry: Tools available to the controller
        pool: Memory pool supplying reference trajectories (not modified)
        llm: Gateway for every LLM call
        max_steps: Step cap; defaults to the run config's
        out_dir: Directory for session artifacts

    Returns:
        (units, record); units are empty unless the verdict is pass
    """
    config = request.config
    max_steps = max_steps if max_steps is not None else config.max_steps
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    profile = load_profile(request.profile)
    decl = request.declaration
    root = request.repo_root
    logger.info(f"SESSION STARTED: {decl.name} ({decl.category})")

    withheld: Optional[RollbackToken] = None
    if request.withhold:
        original = scan_repo(root, profile)
        entries = entries_to_withhold(original, decl.name)
        if not entries:
            raise ConfigurationError(f"{decl.name} has no implementation to withhold")
        withheld = withhold_entries(root, original, entries)

    ctx: Optional[SessionContext] = None
    try:
        ch, index = _characterize(root, profile, decl, config)
        ctx = SessionContext(decl, root, profile, config, llm, index, ch,
                             ModeState(decay=config.decay, floor=config.floor, rng_seed=config.seed), out_dir)
        if not config.ablated("no_characterization"):
            ctx.references = gather_category_references(decl, ch)
        ctx.suite = load_test_suite(root, profile)
        refs = retrieve_reference_trajectories(pool, decl.category)
        fixed = config.ablated("fixed_pipeline")

        steps: List[TrajectoryStep] = []
        if fixed:
            tool, args = fallback_tool([], registry), {}
        else:
            tool = config.initial_tool if config.initial_tool in registry else fallback_tool([], registry)
            args = {}
        while True:
            result = route(registry, tool, args, ctx)
            spec = registry.get(tool)
            steps.append(TrajectoryStep.from_result(result, args, spec is not None and spec.informational))
            logger.info(f"STEP {len(steps)}: {result.summary_line}")
            if result.terminal:
                break
            if len(steps) >= max_steps:
                logger.warning(f"FORCED STOP: {decl.name} reached max_steps={max_steps}")
                result = route(registry, "stop", {}, ctx)
                steps.append(TrajectoryStep.from_result(result, {}))
                break
            if fixed:
                tool, args = fallback_tool(steps, registry), {}
            else:
                tool, args = next_tool(llm, steps, refs, registry, decl)

        if ctx.units and not ctx.validated:
            logger.info(f"ACCEPTANCE VALIDATION: {decl.name}")
            ctx.report = run_validation_pipeline(root, profile, decl, ctx.units, llm,
                                                 files=ctx.token.files if ctx.token else None,
                                                 globals_=index.global_names(), suite=ctx.suite)
            ctx.validated = True
            if out_dir:
                write_validation_report(out_dir, ctx.report)
        verdict = ctx.report.verdict if ctx.units and ctx.report is not None else "fail"
        final_stage = ctx.report.final_stage_reached if ctx.units and ctx.report is not None else None
        units = list(ctx.units) if verdict == "pass" else []

        record = TrajectoryRecord.from_steps(decl.name, decl.category, steps,
                                             _summarize(ctx, steps, verdict, final_stage), verdict, final_stage)
        if out_dir:
            write_document(os.path.join(out_dir, "trajectory.json"), "trajectory", {
                "record": record.to_dict(),
                "mode_draws": ctx.state.draws,
                "integrated": bool(ctx.report and ctx.units and ctx.report.integrated),
                "units": [u.to_dict() for u in units],
            })
        if verdict == "fail" and not config.keep_failed:
            ctx.discard_edits()
        logger.info(f"SESSION FINISHED: {decl.name} verdict={verdict} after {record.total_count} step(s)")
        return units, record
    except BaseException:
        if ctx is not None:
            ctx.discard_edits()
        raise
    finally:
        # withheld code is restored after the session's own edits are undone
        if withheld is not None:
            if ctx is not None and ctx.token is not None:
                ctx.token.rollback()
            withheld.rollback()
