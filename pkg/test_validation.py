import json
import os
import random
import shutil
import tempfile
import time
import unittest
from unittest.mock import MagicMock, patch

from pydantic import ValidationError

from characterization import FunctionDeclaration
from codebase_index import CodeEdit, apply_edits, scan_repo
from config import DbProfile, load_profile
from errors import ConfigurationError, LLMError, SemanticGenerationError
from llm_gateway import Prompt
from synthesis import SynthesizedUnit
from validation import (
    INSUFFICIENT_COVERAGE,
    STAGES,
    StageDiagnostic,
    StageOutcome,
    TestCase as SqlTest,
    ValidationReport,
    classify_stderr,
    coverage_insufficient,
    generate_semantic_tests,
    load_test_suite,
    normalize_output,
    outputs_match,
    run_semantic_tests,
    run_validation_pipeline,
    validate_compliance,
    validate_syntax,
    write_validation_report,
)

HERE = os.path.dirname(os.path.abspath(__file__))
TOYDB = os.path.join(HERE, "fixtures", "toydb")

ABS = FunctionDeclaration("toy_abs", "math", "Absolute value of an integer.", ["int"], "int")
GCD = FunctionDeclaration("toy_gcd", "math", "Greatest common divisor.", ["int", "int"], "int")

BAD_UNIT = """#include "toydb.h"

static void toy_bad(ToyContext *ctx, int argc, ToyValue **argv){
  toy_int y = x + 1;
  toy_int x = 2;
  TOY_RETURN(ctx, y + zzz);
}
"""

BROKEN_IMPL = ("static void toy_broken(ToyContext *ctx, int argc, ToyValue **argv){\n"
               "  toy_int x = TOY_GETARG(argv, 0);\n"
               "  TOY_RETURN(ctx, toy_missing_helper(x));\n"
               "}\n")


def scripted_llm(text):
    llm = MagicMock()
    llm.prompt.side_effect = lambda system, user, tag: Prompt(system, [("user", user)], 0.1, 2048, tag)
    llm.complete.return_value = text
    return llm


def outcome(stage, passed):
    return StageOutcome(stage, passed, [] if passed else [StageDiagnostic(f"{stage} broke", "build_failure")])


class ReportTypeTests(unittest.TestCase):
    """Validation records and output comparison"""

    def test_01_test_case_checks(self):
        """Tests need SQL, a known source and an expectation"""
        with self.assertRaises(ValueError):
            SqlTest(" ", "1")
        with self.assertRaises(ValueError):
            SqlTest("SELECT 1;", "1", "guessed")
        with self.assertRaises(ValueError):
            SqlTest("SELECT 1;")
        self.assertTrue(SqlTest("SELECT toy_nothing(1);", expected_error=True).expected_error)

    def test_02_outcome_checks(self):
        """Passed outcomes carry no error diagnostics and stages are known"""
        with self.assertRaises(ValueError):
            StageOutcome("linking", True)
        with self.assertRaises(ValueError):
            StageOutcome("syntax", True, [StageDiagnostic("x", "other")])
        with self.assertRaises(ValueError):
            StageDiagnostic("x", "mystery")
        note = StageOutcome("semantic", True, [StageDiagnostic(f"{INSUFFICIENT_COVERAGE}: none")])
        self.assertIsNone(note.first_error())

    def test_03_verdict(self):
        """Only three passing stages make a pass"""
        self.assertEqual(ValidationReport([outcome(s, True) for s in STAGES]).verdict, "pass")
        partial = ValidationReport([outcome("syntax", True), outcome("compliance", True)])
        self.assertEqual(partial.verdict, "fail")
        self.assertTrue(partial.integrated)
        self.assertEqual(partial.final_stage_reached, "compliance")
        self.assertIsNone(ValidationReport().final_stage_reached)
        self.assertFalse(ValidationReport([outcome("syntax", False)]).integrated)

    def test_04_outputs_match(self):
        """Line endings and trailing blanks are ignored; numbers may use a tolerance"""
        self.assertEqual(normalize_output("3  \r\n\r\n"), "3")
        self.assertTrue(outputs_match("3\n", "3"))
        self.assertFalse(outputs_match("3.0001", "3"))
        self.assertTrue(outputs_match("3.0001", "3", 0.001))
        self.assertFalse(outputs_match("NULL", "3", 0.5))

    def test_05_coverage(self):
        """Coverage needs one call with the declared arity"""
        self.assertTrue(coverage_insufficient(GCD, [SqlTest("SELECT toy_gcd(4);", "4")]))
        self.assertFalse(coverage_insufficient(GCD, [SqlTest("SELECT toy_gcd(toy_abs(-4), 6);", "2")]))
        one = FunctionDeclaration("toy_one", "math", "One.", [], "int")
        self.assertFalse(coverage_insufficient(one, [SqlTest("SELECT toy_one( );", "1")]))

    def test_06_classify_stderr(self):
        """Compiler lines are classified by the profile's patterns with locations"""
        profile = load_profile("toydb")
        stderr = ("src/funcs.c:60: error: redefinition of 'toy_abs'\n\n"
                  "src/funcs.c:12: undefined reference to `toy_missing_helper'\n"
                  "src/funcs.c:3: error: syntax error\n"
                  "linker noise\n")
        diagnostics = classify_stderr(stderr, profile)
        self.assertEqual([d.error_class for d in diagnostics],
                         ["incorrect_declaration", "incorrect_reference", "build_failure", "other"])
        self.assertEqual((diagnostics[0].file, diagnostics[0].line), ("src/funcs.c", 60))
        self.assertIsNone(diagnostics[3].file)


class StageTests(unittest.TestCase):
    """Syntax, compliance and semantic stages on copies of toydb"""

    @classmethod
    def setUpClass(cls):
        """Load the profile and the existing suite"""
        cls.profile = load_profile("toydb")
        cls.suite = load_test_suite(TOYDB, cls.profile)

    def setUp(self):
        self.workdir = tempfile.mkdtemp(prefix="dbforge-validate-")
        self.addCleanup(shutil.rmtree, self.workdir, True)
        self.repo = os.path.join(self.workdir, "repo")
        shutil.copytree(TOYDB, self.repo)

    def _write(self, rel, text):
        with open(os.path.join(self.repo, rel), "w", encoding="utf-8") as f:
            f.write(text)

    def test_01_load_suite(self):
        """Suite lines become existing tests in file order"""
        self.assertEqual(len(self.suite), 10)
        self.assertEqual(self.suite[0].sql, "SELECT toy_year(20240315);")
        self.assertEqual(self.suite[3].expected, "NULL")
        self.assertEqual(self.suite[4].rationale, "tests/math.sql")
        self.assertTrue(all(t.source == "existing_suite" for t in self.suite))

    def test_02_syntax_clean(self):
        """The shipped sources parse and declare what they use"""
        index = scan_repo(self.repo, self.profile)
        result = validate_syntax(["src/funcs.c", "src/mathx.c"], self.profile, self.repo, index.global_names())
        self.assertTrue(result.passed)
        self.assertEqual(result.diagnostics, [])

    def test_03_syntax_use_before_declaration(self):
        """Locals used before their declaration and unknown names are reported"""
        self._write("src/bad.c", BAD_UNIT)
        local_only = validate_syntax(["src/bad.c"], self.profile, self.repo)
        self.assertFalse(local_only.passed)
        self.assertEqual([(d.message, d.line) for d in local_only.diagnostics],
                         [("'x' is used before its declaration in toy_bad", 4)])
        index = scan_repo(self.repo, self.profile)
        full = validate_syntax(["src/bad.c"], self.profile, self.repo, index.global_names())
        self.assertEqual([d.message for d in full.diagnostics],
                         ["'x' is used before its declaration in toy_bad", "'zzz' is not declared in toy_bad"])
        self.assertTrue(all(d.error_class == "incorrect_reference" and d.file == "src/bad.c"
                            for d in full.diagnostics))

    def test_04_syntax_parse_error(self):
        """Parse errors fail the stage; unknown extensions are a configuration error"""
        self._write("src/broken.c", "static void toy_bad(ToyContext *ctx){\n  TOY_RETURN(ctx, 1)\n}\n")
        result = validate_syntax(["src/broken.c"], self.profile, self.repo)
        self.assertFalse(result.passed)
        self.assertEqual(result.first_error().error_class, "other")
        self.assertEqual(result.first_error().file, "src/broken.c")
        with self.assertRaises(ConfigurationError):
            validate_syntax(["docs/functions.md"], self.profile, self.repo)

    def test_05_compliance(self):
        """The build passes as shipped and reports an unresolved call"""
        self.assertTrue(validate_compliance(self.repo, self.profile).passed)
        apply_edits(self.repo, [CodeEdit("src/funcs.c", 58, "insert_before", BROKEN_IMPL),
                                CodeEdit("src/funcs.c", 67, "insert_before", '  {"toy_broken", 1, toy_broken},')])
        result = validate_compliance(self.repo, self.profile)
        self.assertFalse(result.passed)
        self.assertEqual(result.first_error().error_class, "incorrect_reference")
        self.assertEqual(result.first_error().file, "src/funcs.c")
        self.assertIn("toy_missing_helper", result.stderr)

    def test_06_compliance_configuration(self):
        """Missing or unrunnable build commands raise; slow builds time out"""
        with self.assertRaises(ConfigurationError):
            validate_compliance(self.repo, self.profile.model_copy(update={"build_command": ""}))
        with self.assertRaises(ConfigurationError):
            validate_compliance(self.repo, self.profile.model_copy(update={"build_command": "no-such-build-tool-x"}))
        slow = self.profile.model_copy(update={"build_command": '{python} -c "import time; time.sleep(5)"',
                                               "build_timeout": 0.5})
        with self.assertLogs("validation", level="WARNING"):
            result = validate_compliance(self.repo, slow)
        self.assertEqual(result.first_error().error_class, "timeout")

    def test_07_semantic_run(self):
        """Suite tests pass; wrong expectations mismatch; error tests expect an error"""
        self.assertTrue(run_semantic_tests(self.repo, self.profile, self.suite).passed)
        result = run_semantic_tests(self.repo, self.profile, [
            SqlTest("SELECT toy_abs(-3);", "4"),
            SqlTest("SELECT toy_nothing(1);", expected_error=True),
        ])
        self.assertFalse(result.passed)
        self.assertEqual(len(result.diagnostics), 1)
        self.assertEqual(result.diagnostics[0].error_class, "testcase_mismatch")
        self.assertEqual(result.diagnostics[0].message, "SELECT toy_abs(-3);: expected '4', got '3'")
        empty = run_semantic_tests(self.repo, self.profile, [])
        self.assertTrue(empty.passed)
        self.assertTrue(empty.diagnostics[0].message.startswith(INSUFFICIENT_COVERAGE))

    def test_08_generate_semantic_tests(self):
        """Generated rows are coerced to text; unusable rows are dropped"""
        text = json.dumps({"tests": [
            {"sql": "SELECT toy_abs(-5);", "expected": "5", "rationale": "negative input"},
            {"sql": "SELECT toy_abs(0);", "expected": 0},
            {"sql": "SELECT toy_abs(NULL);", "expected": None},
            {"sql": "SELECT toy_abs('x');", "expected_error": True},
            {"sql": "SELECT toy_neg(1);", "expected": "-1"},
            {"expected": "1", "rationale": "missing SQL"},
        ]})
        units = [SynthesizedUnit("toy_abs", "src/funcs.c", "static void toy_abs(void){}")]
        llm = scripted_llm("```json\n" + text + "\n```")
        with self.assertLogs("validation", level="WARNING") as logs:
            tests = generate_semantic_tests(ABS, units, self.suite, llm)
        self.assertEqual([t.expected for t in tests], ["5", "0", "NULL", ""])
        self.assertTrue(tests[3].expected_error)
        self.assertEqual(sum("TEST DROPPED" in line for line in logs.output), 2)
        prompt_text = llm.prompt.call_args[0][1]
        self.assertIn("SELECT toy_year(20240315); -- 2024", prompt_text)
        self.assertIn("--- implementation unit toy_abs (src/funcs.c)", prompt_text)

    def test_09_generation_failures(self):
        """No JSON, no usable row or no completion raise"""
        for text in ("no tests today", '{"tests": [{"sql": "SELECT 1;", "expected": "1"}]}'):
            with self.assertRaises(SemanticGenerationError):
                generate_semantic_tests(ABS, [], [], scripted_llm(text))
        failing = scripted_llm("")
        failing.complete.side_effect = LLMError("down")
        with self.assertRaises(SemanticGenerationError):
            generate_semantic_tests(ABS, [], [], failing)

    def test_10_pipeline_on_repo(self):
        """Provided tests run end to end; coverage gaps are noted"""
        units = [SynthesizedUnit("toy_abs", "src/funcs.c", "static void toy_abs(void){}")]
        index = scan_repo(self.repo, self.profile)
        report = run_validation_pipeline(self.repo, self.profile, GCD, units, None, globals_=index.global_names(),
                                         tests=[SqlTest("SELECT toy_abs(-2);", "2")])
        self.assertEqual(report.verdict, "pass")
        self.assertEqual(report.final_stage_reached, "semantic")
        self.assertTrue(any(d.message.startswith(INSUFFICIENT_COVERAGE)
                            for d in report.outcome("semantic").diagnostics))
        path = write_validation_report(self.workdir, report)
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        self.assertEqual(data["kind"], "validation_report")
        self.assertEqual(data["verdict"], "pass")
        self.assertTrue(os.path.isfile(os.path.join(self.workdir, "compliance_stderr.txt")))


STUB_RUNNERS = {
    "segv.py": "import os, signal\nos.kill(os.getpid(), signal.SIGSEGV)\n",
    "raises.py": "import sys\nprint('partial')\nraise ValueError('negative shift count')\n",
    "sql_error.py": "import sys\nprint('ERROR: unknown function ' + sys.argv[1])\nsys.exit(1)\n",
    "exit3.py": "import sys\nsys.exit(3)\n",
    "spawn.py": ("import subprocess, sys, time\n"
                 "subprocess.Popen([sys.executable, '-c', "
                 "\"import time; time.sleep(2); open('orphan.txt', 'w').close()\"])\n"
                 "time.sleep(30)\n"),
}


class RunnerTests(unittest.TestCase):
    """Crashing, failing and hanging runner processes"""

    @classmethod
    def setUpClass(cls):
        """Load the profile the stub runners are swapped into"""
        cls.profile = load_profile("toydb")

    def setUp(self):
        self.root = tempfile.mkdtemp(prefix="dbforge-runner-")
        self.addCleanup(shutil.rmtree, self.root, True)
        for name, text in STUB_RUNNERS.items():
            with open(os.path.join(self.root, name), "w", encoding="utf-8") as f:
                f.write(text)

    def _runner(self, script, **kwargs):
        update = {"sql_runner_command": "{python} " + script + " {sql}"}
        update.update(kwargs)
        return self.profile.model_copy(update=update)

    def test_01_signal_death(self):
        """A runner killed by a signal fails the test even when an error is expected"""
        with self.assertLogs("validation", level="WARNING"):
            result = run_semantic_tests(self.root, self._runner("segv.py"),
                                        [SqlTest("SELECT toy_shl(1, -1);", expected_error=True)])
        self.assertFalse(result.passed)
        self.assertEqual(result.first_error().error_class, "other")
        self.assertIn("SIGSEGV", result.first_error().message)

    def test_02_traceback(self):
        """An uncaught exception is a crash and its stderr is kept"""
        for test in (SqlTest("SELECT toy_shl(1, -1);", expected_error=True), SqlTest("SELECT toy_shl(1, 1);", "2")):
            with self.assertLogs("validation", level="WARNING"):
                result = run_semantic_tests(self.root, self._runner("raises.py"), [test])
            self.assertFalse(result.passed)
            self.assertEqual(result.first_error().error_class, "other")
            self.assertIn("ValueError: negative shift count", result.first_error().message)

    def test_03_sql_errors(self):
        """A clean SQL error satisfies error tests and mismatches value tests"""
        profile = self._runner("sql_error.py")
        self.assertTrue(run_semantic_tests(self.root, profile,
                                           [SqlTest("SELECT toy_nothing(1);", expected_error=True)]).passed)
        result = run_semantic_tests(self.root, profile, [SqlTest("SELECT toy_nothing(1);", "1")])
        self.assertEqual(result.first_error().error_class, "testcase_mismatch")

    def test_04_error_exit_codes(self):
        """Only the profile's error exit codes count as SQL errors"""
        test = SqlTest("SELECT toy_nothing(1);", expected_error=True)
        with self.assertLogs("validation", level="WARNING"):
            result = run_semantic_tests(self.root, self._runner("exit3.py"), [test])
        self.assertEqual(result.first_error().error_class, "other")
        self.assertIn("status 3", result.first_error().message)
        self.assertTrue(run_semantic_tests(self.root, self._runner("exit3.py", runner_error_codes=[1, 3]),
                                           [test]).passed)
        self.assertEqual(DbProfile(name="x", source_globs=["*.c"]).runner_error_codes, [1])
        with self.assertRaises(ValidationError):
            DbProfile(name="x", source_globs=["*.c"], runner_error_codes=[0])

    def test_05_timeout_kills_helpers(self):
        """A timed-out build takes the processes it spawned down with it"""
        profile = self.profile.model_copy(update={"build_command": "{python} spawn.py", "build_timeout": 1.0})
        started = time.monotonic()
        with self.assertLogs("validation", level="WARNING"):
            result = validate_compliance(self.root, profile)
        self.assertLess(time.monotonic() - started, 10)
        self.assertEqual(result.first_error().error_class, "timeout")
        time.sleep(2.5)
        self.assertFalse(os.path.exists(os.path.join(self.root, "orphan.txt")))


class PipelineOrderTests(unittest.TestCase):
    """Stage ordering and first-failure stop under injected faults"""

    @classmethod
    def setUpClass(cls):
        """Load the profile"""
        cls.profile = load_profile("toydb")

    def test_01_fault_injection(self):
        """500 random stage patterns stop at the first failure"""
        rng = random.Random(500)
        for _ in range(500):
            behaviour = {stage: rng.choice(["pass", "fail", "raise"]) for stage in STAGES}
            stages = [s for s in STAGES if rng.random() < 0.8] or ["syntax"]

            def stage_result(stage):
                if behaviour[stage] == "raise":
                    raise RuntimeError(f"{stage} exploded")
                return outcome(stage, behaviour[stage] == "pass")

            with patch("validation.validate_syntax", side_effect=lambda *a, **k: stage_result("syntax")) as syn, \
                    patch("validation.validate_compliance", side_effect=lambda *a, **k: stage_result("compliance")) as com, \
                    patch("validation._semantic_stage", side_effect=lambda *a, **k: stage_result("semantic")) as sem:
                with self.assertLogs("validation", level="INFO"):
                    report = run_validation_pipeline(TOYDB, self.profile, ABS, [], None, stages=stages)

            expected = []
            for stage in STAGES:
                if stage not in stages:
                    continue
                expected.append(stage)
                if behaviour[stage] != "pass":
                    break
            self.assertEqual([o.stage for o in report.outcomes], expected)
            for o in report.outcomes:
                self.assertEqual(o.passed, behaviour[o.stage] == "pass")
                if behaviour[o.stage] == "raise":
                    self.assertEqual(o.first_error().message, f"RuntimeError: {o.stage} exploded")
            everything = len(stages) == 3 and all(behaviour[s] == "pass" for s in STAGES)
            self.assertEqual(report.verdict, "pass" if everything else "fail")
            self.assertEqual(syn.call_count, int("syntax" in expected))
            self.assertEqual(com.call_count, int("compliance" in expected))
            self.assertEqual(sem.call_count, int("semantic" in expected))

    def test_02_configuration_errors_propagate(self):
        """A configuration error is not turned into a failed stage"""
        with patch("validation.validate_syntax", side_effect=ConfigurationError("no parser")):
            with self.assertRaises(ConfigurationError):
                run_validation_pipeline(TOYDB, self.profile, ABS, [], None)


if __name__ == "__main__":
    unittest.main()
