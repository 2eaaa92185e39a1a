"""
Three-tier validation of synthesized units.

Syntax (grammar parse plus declared-before-use on locals), compliance (the
profile's build command) and semantic (generated SQL tests run through the
profile's runner). Stages run in order and the first failure ends the
pipeline.
"""

import glob
import logging
import os
import re
import signal
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from artifacts import write_document
from characterization import FunctionDeclaration
from codebase_index import declarator_name, node_text, parse_source
from config import ERROR_CLASSES, DbProfile
from errors import ConfigurationError, LLMError, SemanticGenerationError, TranscriptMissError
from lexer import KEYWORDS, tokenize
from llm_gateway import LLMGateway, extract_json
from planning import describe_declaration
from synthesis import SynthesizedUnit

logger = logging.getLogger(__name__)

STAGES = ("syntax", "compliance", "semantic")
TEST_SOURCES = ("llm_generated", "existing_suite")
INSUFFICIENT_COVERAGE = "insufficient_coverage"
TRACEBACK_MARKER = "Traceback (most recent call last):"

TEST_SYSTEM = (
    "You are a database testing expert. You write SQL test cases with exact expected outputs for a "
    "native database function. Answer with a single JSON object and nothing else."
)

EXPERTISE = (
    "Cover every argument position. Include boundary values (zero, negative numbers, very large and very "
    "small inputs), NULL arguments and invalid inputs. Give the expected output exactly as the database "
    "prints it; a NULL result prints as NULL. Mark tests that must raise an error with expected_error."
)

_LOCATION_RE = re.compile(r"^(?P<file>[^:\s]+):(?P<line>\d+):")
_SUITE_LINE_RE = re.compile(r"^(?P<sql>[^-\n]+?;)\s*--\s*(?P<expected>.*?)\s*$")


@dataclass
class TestCase:
    sql: str
    expected: str = ""
    source: str = "llm_generated"
    rationale: str = ""
    expected_error: bool = False

    def __post_init__(self):
        if not self.sql.strip():
            raise ValueError("test case needs SQL")
        if self.source not in TEST_SOURCES:
            raise ValueError(f"unknown test source '{self.source}'")
        if not self.expected and not self.expected_error:
            raise ValueError(f"test '{self.sql}' has no expected output")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class StageDiagnostic:
    message: str
    error_class: Optional[str] = None
    file: Optional[str] = None
    line: Optional[int] = None

    def __post_init__(self):
        if self.error_class is not None and self.error_class not in ERROR_CLASSES:
            raise ValueError(f"unknown error class '{self.error_class}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class StageOutcome:
    stage: str
    passed: bool
    diagnostics: List[StageDiagnostic] = field(default_factory=list)
    stderr: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}'")
        if self.passed and any(d.error_class for d in self.diagnostics):
            raise ValueError(f"{self.stage} outcome passed but carries error diagnostics")

    def first_error(self) -> Optional[StageDiagnostic]:
        return next((d for d in self.diagnostics if d.error_class), None)

    def to_dict(self) -> Dict[str, Any]:
        return {"stage": self.stage, "passed": self.passed, "diagnostics": [d.to_dict() for d in self.diagnostics]}


@dataclass
class ValidationReport:
    outcomes: List[StageOutcome] = field(default_factory=list)
    tests: List[TestCase] = field(default_factory=list)

    @property
    def final_stage_reached(self) -> Optional[str]:
        return self.outcomes[-1].stage if self.outcomes else None

    @property
    def verdict(self) -> str:
        stages = [o.stage for o in self.outcomes]
        return "pass" if stages == list(STAGES) and all(o.passed for o in self.outcomes) else "fail"

    @property
    def integrated(self) -> bool:
        """The units parsed and built cleanly"""
        return any(o.stage == "compliance" and o.passed for o in self.outcomes)

    def outcome(self, stage: str) -> Optional[StageOutcome]:
        return next((o for o in self.outcomes if o.stage == stage), None)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "outcomes": [o.to_dict() for o in self.outcomes],
            "final_stage_reached": self.final_stage_reached,
            "verdict": self.verdict,
            "tests": [t.to_dict() for t in self.tests],
        }


def _failed(stage: str, message: str, error_class: str = "other") -> StageOutcome:
    return StageOutcome(stage, False, [StageDiagnostic(message, error_class)])


# -- syntax ---------------------------------------------------------------------

def _first_error_node(node):
    if node.type == "ERROR" or node.is_missing:
        return node
    if not node.has_error:
        return None
    for child in node.children:
        found = _first_error_node(child)
        if found is not None:
            return found
    return None


def _function_definitions(node, language: str) -> Iterable:
    for child in node.named_children:
        if child.type == "function_definition":
            declarator = child.child_by_field_name("declarator")
            while declarator is not None and declarator.type != "function_declarator":
                declarator = declarator.child_by_field_name("declarator")
            inner = declarator.child_by_field_name("declarator") if declarator is not None else None
            if inner is not None and inner.type == "identifier":
                yield child, node_text(inner)
        elif child.type in ("namespace_definition", "linkage_specification"):
            body = child.child_by_field_name("body")
            if body is not None:
                yield from _function_definitions(body, language)
        elif child.type in ("declaration_list", "preproc_ifdef", "preproc_if", "preproc_else"):
            yield from _function_definitions(child, language)


def _file_scope_names(root_node, text: str) -> Set[str]:
    names: Set[str] = set()
    for child in root_node.named_children:
        if child.type == "function_definition":
            name = declarator_name(child.child_by_field_name("declarator"))
            if name:
                names.add(name)
            continue
        names.update(t.value for t in tokenize(node_text(child)) if t.kind == "ident")
    names.update(re.findall(r"^\s*#\s*define\s+(\w+)", text, re.MULTILINE))
    return names


def _parameters(definition) -> Set[str]:
    names = set()
    declarator = definition.child_by_field_name("declarator")
    while declarator is not None and declarator.type != "function_declarator":
        declarator = declarator.child_by_field_name("declarator")
    if declarator is None:
        return names
    for param in declarator.child_by_field_name("parameters").named_children:
        name = declarator_name(param.child_by_field_name("declarator"))
        if name:
            names.add(name)
    return names


def _local_declarations(node, out: Dict[str, int], sites: Set[int]) -> None:
    """Local name -> byte offset of its first declaration"""
    if node.type in ("declaration", "for_range_loop"):
        for declarator in node.children_by_field_name("declarator"):
            target = declarator.child_by_field_name("declarator") if declarator.type == "init_declarator" else declarator
            name_node = _name_node(target)
            if name_node is not None:
                sites.add(name_node.start_byte)
                out.setdefault(node_text(name_node), name_node.start_byte)
    elif node.type == "enumerator":
        name_node = node.child_by_field_name("name")
        if name_node is not None:
            sites.add(name_node.start_byte)
            out.setdefault(node_text(name_node), name_node.start_byte)
    for child in node.children:
        _local_declarations(child, out, sites)


def _name_node(node):
    while node is not None:
        if node.type == "identifier":
            return node
        inner = node.child_by_field_name("declarator")
        if inner is None:
            named = [c for c in node.named_children if c.type not in ("type_qualifier",)]
            inner = named[0] if named else None
        node = inner
    return None


def _identifier_uses(node, sites: Set[int], out: List) -> None:
    t = node.type
    if t.startswith("preproc"):
        return
    if t in ("qualified_identifier", "template_function", "template_type"):
        return
    if t == "call_expression":
        function = node.child_by_field_name("function")
        for child in node.children:
            if child is function and function.type in ("identifier", "qualified_identifier", "template_function",
                                                        "field_expression"):
                if function.type == "field_expression":
                    _identifier_uses(function.child_by_field_name("argument"), sites, out)
                continue
            _identifier_uses(child, sites, out)
        return
    if t == "identifier":
        if node.start_byte not in sites:
            out.append(node)
        return
    for child in node.children:
        _identifier_uses(child, sites, out)


def _check_function(definition, name: str, rel: str, known: Optional[Set[str]]) -> List[StageDiagnostic]:
    params = _parameters(definition)
    body = definition.child_by_field_name("body")
    if body is None:
        return []
    locals_: Dict[str, int] = {}
    sites: Set[int] = set()
    _local_declarations(body, locals_, sites)
    uses: List = []
    _identifier_uses(body, sites, uses)
    diagnostics = []
    reported: Set[str] = set()
    for use in uses:
        ident = node_text(use)
        if ident in reported or ident in params:
            continue
        line = use.start_point[0] + 1
        if ident in locals_:
            if use.start_byte < locals_[ident]:
                reported.add(ident)
                diagnostics.append(StageDiagnostic(f"'{ident}' is used before its declaration in {name}",
                                                   "incorrect_reference", rel, line))
            continue
        if known is not None and ident not in known and ident not in KEYWORDS:
            reported.add(ident)
            diagnostics.append(StageDiagnostic(f"'{ident}' is not declared in {name}", "incorrect_reference",
                                               rel, line))
    return diagnostics


def validate_syntax(files: Sequence[str], profile: DbProfile, root: str,
                    globals_: Optional[Iterable[str]] = None) -> StageOutcome:
    """
    Parse each file and check declared-before-use of locals.

    Args:
        files: Repo-relative paths of the edited files
        profile: Supplies the grammar per file extension
        root: Repository root
        globals_: Names defined elsewhere in the repository; when given,
            identifiers that are neither local, file-scope nor global are
            reported too

    Raises:
        ConfigurationError: no parser for a file's extension
    """
    diagnostics: List[StageDiagnostic] = []
    for rel in sorted(set(files)):
        grammar = profile.grammar_for(rel)
        with open(os.path.join(root, rel), "rb") as f:
            data = f.read()
        text = data.decode("utf-8", errors="replace")
        tree = parse_source(data, grammar)
        bad = _first_error_node(tree.root_node)
        if bad is not None:
            what = f"missing '{bad.type}'" if bad.is_missing else f"syntax error near '{node_text(bad)[:40]}'"
            diagnostics.append(StageDiagnostic(what, "other", rel, bad.start_point[0] + 1))
            continue
        known = None
        if globals_ is not None:
            known = set(globals_) | set(profile.known_externals) | _file_scope_names(tree.root_node, text)
            known |= {"NULL", "true", "false", "nullptr", "this"}
        for definition, name in _function_definitions(tree.root_node, grammar):
            diagnostics.extend(_check_function(definition, name, rel, known))
    passed = not diagnostics
    logger.info(f"SYNTAX {'PASSED' if passed else 'FAILED'}: {len(files)} file(s), {len(diagnostics)} diagnostic(s)")
    return StageOutcome("syntax", passed, diagnostics)


# -- compliance -----------------------------------------------------------------

def run_command(argv: List[str], cwd: str, timeout: float) -> subprocess.CompletedProcess:
    """
    Run a profile command in its own process group.

    On timeout the whole group is killed, so helpers spawned by a build script
    do not outlive it.

    Raises:
        subprocess.TimeoutExpired: carrying the output captured before the kill
    """
    proc = subprocess.Popen(argv, cwd=cwd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
                            start_new_session=True)
    try:
        stdout, stderr = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        stdout, stderr = proc.communicate()
        raise subprocess.TimeoutExpired(argv, timeout, output=stdout, stderr=stderr)
    return subprocess.CompletedProcess(argv, proc.returncode, stdout, stderr)


def classify_stderr(stderr: str, profile: DbProfile) -> List[StageDiagnostic]:
    """One diagnostic per non-empty stderr line, classified by the profile's patterns"""
    patterns = [(re.compile(p), c) for p, c in profile.error_patterns]
    diagnostics = []
    for raw in stderr.splitlines():
        line = raw.strip()
        if not line:
            continue
        error_class = next((c for p, c in patterns if p.search(line)), "other")
        loc = _LOCATION_RE.match(line)
        diagnostics.append(StageDiagnostic(line, error_class, loc.group("file") if loc else None,
                                           int(loc.group("line")) if loc else None))
    return diagnostics


def validate_compliance(root: str, profile: DbProfile) -> StageOutcome:
    """
    Run the profile's build command under its timeout.

    Raises:
        ConfigurationError: no build command, or the command cannot be started
    """
    argv = profile.render_command(profile.build_command, root)
    try:
        proc = run_command(argv, root, profile.build_timeout)
    except subprocess.TimeoutExpired as e:
        logger.warning(f"COMPLIANCE TIMEOUT: build exceeded {profile.build_timeout}s")
        stderr = e.stderr.decode("utf-8", "replace") if isinstance(e.stderr, bytes) else (e.stderr or "")
        outcome = _failed("compliance", f"build timed out after {profile.build_timeout}s", "timeout")
        outcome.stderr = stderr
        return outcome
    except (FileNotFoundError, PermissionError) as e:
        raise ConfigurationError(f"build command {argv[0]} cannot be run: {e}")
    if proc.returncode == 0:
        logger.info("COMPLIANCE PASSED")
        return StageOutcome("compliance", True, [], proc.stderr)
    diagnostics = classify_stderr(proc.stderr, profile)
    if not diagnostics:
        diagnostics = [StageDiagnostic(f"build exited with status {proc.returncode}", "build_failure")]
    logger.info(f"COMPLIANCE FAILED: {diagnostics[0].message}")
    return StageOutcome("compliance", False, diagnostics, proc.stderr)


# -- semantic -------------------------------------------------------------------

class _TestSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    sql: str = Field(min_length=1)
    expected: Any = ""
    rationale: str = ""
    expected_error: bool = False

    @field_validator("expected")
    @classmethod
    def check_expected(cls, value: Any) -> str:
        if value is None:
            return "NULL"
        if isinstance(value, (dict, list)):
            raise ValueError("expected output must be a scalar")
        if isinstance(value, bool):
            return "1" if value else "0"
        return str(value)


def load_test_suite(root: str, profile: DbProfile) -> List[TestCase]:
    """Existing tests written as `<sql>; -- <expected>` lines"""
    tests = []
    for pattern in profile.test_suite_globs:
        for path in sorted(glob.glob(os.path.join(root, pattern))):
            with open(path, "r", encoding="utf-8") as f:
                for line in f:
                    m = _SUITE_LINE_RE.match(line.strip())
                    if not m:
                        continue
                    expected = m.group("expected")
                    is_error = expected.upper().startswith("ERROR")
                    tests.append(TestCase(m.group("sql"), "" if is_error else expected, "existing_suite",
                                          os.path.relpath(path, root).replace(os.sep, "/"), is_error))
    return tests


def _call_arities(sql: str, name: str) -> List[int]:
    arities = []
    for m in re.finditer(rf"\b{re.escape(name)}\s*\(", sql):
        depth, count, i, empty = 1, 1, m.end(), True
        while i < len(sql) and depth:
            ch = sql[i]
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
            elif ch == "," and depth == 1:
                count += 1
            elif not ch.isspace() and depth == 1:
                empty = False
            i += 1
        arities.append(0 if empty and count == 1 else count)
    return arities


def coverage_insufficient(decl: FunctionDeclaration, tests: Sequence[TestCase]) -> bool:
    """No test calls the function with its declared number of arguments"""
    return not any(decl.arity in _call_arities(t.sql, decl.name) for t in tests)


def semantic_prompt_text(decl: FunctionDeclaration, units: Sequence[SynthesizedUnit],
                         suite: Sequence[TestCase], examples: int = 5) -> str:
    lines = [describe_declaration(decl), "", f"Expertise: {EXPERTISE}", "", "Existing tests (format examples):"]
    lines.extend(f"{t.sql} -- {t.expected if not t.expected_error else 'ERROR'}" for t in suite[:examples])
    if not suite:
        lines.append("(none)")
    lines.extend(["", "Code under test:"])
    for unit in units:
        lines.append(f"--- {unit.role} unit {unit.unit_name} ({unit.file_path})")
        lines.append(unit.code_text)
    lines.extend([
        "",
        'Answer with JSON: {"tests": [{"sql": "SELECT ...;", "expected": "...", "rationale": "...",',
        '"expected_error": false}]}',
    ])
    return "\n".join(lines)


def generate_semantic_tests(decl: FunctionDeclaration, units: Sequence[SynthesizedUnit], suite: Sequence[TestCase],
                            llm: LLMGateway) -> List[TestCase]:
    """
    Ask for SQL tests built from expertise, suite examples and the unit code.

    Raises:
        SemanticGenerationError: no parseable test
    """
    prompt = llm.prompt(TEST_SYSTEM, semantic_prompt_text(decl, units, suite), "test")
    try:
        text = llm.complete(prompt)
    except TranscriptMissError:
        raise
    except LLMError as e:
        raise SemanticGenerationError(f"no test completion for {decl.name}: {e}") from e
    try:
        data = extract_json(text)
    except ValueError as e:
        raise SemanticGenerationError(f"test completion for {decl.name} has no JSON: {e}")
    rows = data.get("tests", []) if isinstance(data, dict) else data
    tests = []
    for n, row in enumerate(rows if isinstance(rows, list) else []):
        try:
            parsed = _TestSchema.model_validate(row)
            if not re.search(rf"\b{re.escape(decl.name)}\b", parsed.sql):
                raise ValueError(f"does not call {decl.name}")
            tests.append(TestCase(parsed.sql.strip(), "" if parsed.expected_error else parsed.expected.strip(),
                                  "llm_generated", parsed.rationale, parsed.expected_error))
        except (ValidationError, ValueError) as e:
            logger.warning(f"TEST DROPPED: {decl.name} test {n}: {str(e).splitlines()[0]}")
    if not tests:
        raise SemanticGenerationError(f"no usable semantic test for {decl.name}")
    return tests


def normalize_output(text: str) -> str:
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    return "\n".join(line.rstrip() for line in lines).strip("\n")


def outputs_match(actual: str, expected: str, tolerance: Optional[float] = None) -> bool:
    actual, expected = normalize_output(actual), normalize_output(expected)
    if actual == expected:
        return True
    if tolerance is None:
        return False
    try:
        return abs(float(actual) - float(expected)) <= tolerance
    except ValueError:
        return False


def runner_crash(returncode: int, stderr: str, profile: DbProfile) -> Optional[str]:
    """
    Describe a runner exit that is not an SQL-level result, or None.

    Signal deaths, exit codes outside the profile's runner_error_codes and
    interpreter tracebacks are crashes even when the test expects an error.
    """
    if returncode < 0:
        try:
            name = signal.Signals(-returncode).name
        except ValueError:
            name = f"signal {-returncode}"
        return f"runner killed by {name}"
    if returncode != 0 and returncode not in profile.runner_error_codes:
        return f"runner exited with status {returncode}"
    if TRACEBACK_MARKER in stderr:
        return "runner raised an uncaught exception"
    return None


def _run_test(root: str, profile: DbProfile, test: TestCase) -> Optional[StageDiagnostic]:
    argv = profile.render_command(profile.sql_runner_command, root, test.sql)
    try:
        proc = run_command(argv, root, profile.build_timeout)
    except subprocess.TimeoutExpired:
        return StageDiagnostic(f"{test.sql}: runner timed out", "timeout")
    except (FileNotFoundError, PermissionError) as e:
        raise ConfigurationError(f"SQL runner {argv[0]} cannot be run: {e}")
    crash = runner_crash(proc.returncode, proc.stderr, profile)
    if crash is not None:
        logger.warning(f"RUNNER CRASH: {test.sql}: {crash}")
        return StageDiagnostic(f"{test.sql}: {crash}: {proc.stderr.strip()[-500:]}", "other")
    actual = normalize_output(proc.stdout)
    if test.expected_error:
        if proc.returncode != 0 or actual.upper().startswith("ERROR"):
            return None
        return StageDiagnostic(f"{test.sql}: expected an error, got '{actual}'", "testcase_mismatch")
    if outputs_match(actual, test.expected, profile.numeric_tolerance):
        return None
    return StageDiagnostic(f"{test.sql}: expected '{normalize_output(test.expected)}', got '{actual}'",
                           "testcase_mismatch")


def run_semantic_tests(root: str, profile: DbProfile, tests: Sequence[TestCase]) -> StageOutcome:
    """Run every test through the profile's SQL runner"""
    if not tests:
        return StageOutcome("semantic", True, [StageDiagnostic(f"{INSUFFICIENT_COVERAGE}: no semantic tests were run")])
    if profile.runner_reentrant and len(tests) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(tests))) as pool:
            results = list(pool.map(lambda t: _run_test(root, profile, t), tests))
    else:
        results = [_run_test(root, profile, t) for t in tests]
    diagnostics = [d for d in results if d is not None]
    logger.info(f"SEMANTIC {'PASSED' if not diagnostics else 'FAILED'}: "
                f"{len(tests) - len(diagnostics)}/{len(tests)} tests matched")
    return StageOutcome("semantic", not diagnostics, diagnostics)


# -- pipeline -------------------------------------------------------------------

def run_validation_pipeline(root: str, profile: DbProfile, decl: FunctionDeclaration, units: Sequence[SynthesizedUnit],
                            llm: Optional[LLMGateway], files: Optional[Sequence[str]] = None,
                            globals_: Optional[Iterable[str]] = None, suite: Sequence[TestCase] = (),
                            tests: Optional[Sequence[TestCase]] = None,
                            stages: Sequence[str] = STAGES) -> ValidationReport:
    """
    Run the stages in order, stopping at the first failure.

    Args:
        root: Repository root with the units applied
        profile: Database profile
        decl: Declaration of the synthesized function
        units: Applied units
        llm: Gateway for test generation (unused when tests are given)
        files: Files to parse; defaults to the units' files
        globals_: Repository-wide names for the syntax stage
        suite: Existing tests shown as format examples
        tests: Semantic tests to run instead of generating them
        stages: Subset of stages to run, in pipeline order

    Returns:
        The report; stage errors become failed outcomes
    """
    report = ValidationReport()
    files = sorted({u.file_path for u in units}) if files is None else list(files)
    for stage in STAGES:
        if stage not in stages:
            continue
        try:
            if stage == "syntax":
                outcome = validate_syntax(files, profile, root, globals_)
            elif stage == "compliance":
                outcome = validate_compliance(root, profile)
            else:
                outcome = _semantic_stage(root, profile, decl, units, llm, suite, tests, report)
        except ConfigurationError:
            raise
        except Exception as e:
            logger.warning(f"STAGE ERROR: {stage} raised {type(e).__name__}: {e}")
            outcome = _failed(stage, f"{type(e).__name__}: {e}")
        report.outcomes.append(outcome)
        if not outcome.passed:
            break
    logger.info(f"VALIDATION {report.verdict.upper()}: {decl.name} reached {report.final_stage_reached}")
    return report


def _semantic_stage(root: str, profile: DbProfile, decl: FunctionDeclaration, units: Sequence[SynthesizedUnit],
                    llm: Optional[LLMGateway], suite: Sequence[TestCase], tests: Optional[Sequence[TestCase]],
                    report: ValidationReport) -> StageOutcome:
    if tests is None:
        try:
            tests = generate_semantic_tests(decl, units, suite, llm)
        except SemanticGenerationError as e:
            return _failed("semantic", str(e))
    report.tests = list(tests)
    outcome = run_semantic_tests(root, profile, tests)
    if tests and coverage_insufficient(decl, tests):
        outcome.diagnostics.append(StageDiagnostic(
            f"{INSUFFICIENT_COVERAGE}: no test calls {decl.name} with {decl.arity} argument(s)"))
    return outcome


def write_validation_report(out_dir: str, report: ValidationReport) -> str:
    """Write validation_report.json and archive the compliance stderr beside it"""
    path = write_document(os.path.join(out_dir, "validation_report.json"), "validation_report", report.to_dict())
    compliance = report.outcome("compliance")
    if compliance is not None:
        with open(os.path.join(out_dir, "compliance_stderr.txt"), "w", encoding="utf-8") as f:
            f.write(compliance.stderr)
    return path
