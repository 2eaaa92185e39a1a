import os
import random
import shutil
import statistics
import tempfile
import threading
import unittest
from unittest.mock import MagicMock, patch

from characterization import FunctionDeclaration
from codebase_index import scan_repo
from config import LLMSettings, RunConfig, load_profile
from errors import LLMError, ToolRegistrationError, TranscriptMissError
from fixtures.scripted_endpoint import ScriptedEndpoint
from llm_gateway import LLMGateway
from orchestration import (
    MemoryPool,
    SynthesisRequest,
    ToolRegistry,
    ToolSpec,
    TrajectoryRecord,
    TrajectoryStep,
    args_digest,
    builtin_registry,
    deterministic_summary,
    entries_to_withhold,
    fallback_tool,
    insert_into_file,
    insert_trajectory,
    load_pool,
    next_tool,
    parse_controller_reply,
    register_tool,
    retrieve_reference_trajectories,
    route,
    run_session,
)
from validation import StageDiagnostic, StageOutcome, ValidationReport

HERE = os.path.dirname(os.path.abspath(__file__))
TOYDB = os.path.join(HERE, "fixtures", "toydb")

ABS = FunctionDeclaration("toy_abs", "math", "Absolute value of an integer.", ["int"], "int",
                          [("SELECT toy_abs(-3);", "3")])
EVEN = FunctionDeclaration("toy_even", "math", "Returns 1 when the argument is even, otherwise 0.", ["int"], "int",
                           [("SELECT toy_even(4);", "1")])


def make_record(count: int, category: str = "math", name: str = "f", verdict: str = "pass") -> TrajectoryRecord:
    steps = [TrajectoryStep("code_agent", args_digest({}), "success", "code_agent: ok") for _ in range(count)]
    return TrajectoryRecord.from_steps(name, category, steps, f"{name} summary", verdict)


def live_gateway(endpoint: ScriptedEndpoint) -> LLMGateway:
    settings = LLMSettings(mode="live", base_url="http://scripted.test/v1", api_key="test-key", retry_wait=0)
    return LLMGateway(settings, transport=endpoint.transport())


class ToolRegistryTests(unittest.TestCase):
    """Tool registration and routing"""

    @classmethod
    def setUpClass(cls):
        """Build the shipped registry once"""
        cls.registry = builtin_registry()

    def test_01_builtin_names(self):
        """The shipped registry lists every pipeline tool"""
        self.assertEqual(set(self.registry.names()), {"plan_agent", "code_agent", "validate_agent", "search_repo",
                                                      "read_file", "expand_reference", "stop"})

    def test_02_manifest_lists_plan_agent(self):
        """The controller manifest carries the plan tool with its argument"""
        manifest = self.registry.manifest()
        self.assertIn("plan_agent(plan_num: int = 3)", manifest)
        self.assertIn("Generate pseudo-based plans to outline and instruct synthesis", manifest)

    def test_03_duplicate_name_rejected(self):
        """Registering a taken name raises"""
        registry = ToolRegistry()
        register_tool(registry, ToolSpec("plan_agent", "plans", {"plan_num": (int, 3)}))
        with self.assertRaises(ToolRegistrationError):
            register_tool(registry, ToolSpec("plan_agent", "plans again"))
        self.assertEqual(len(registry), 1)

    def test_04_invalid_specs(self):
        """Blank descriptions and malformed names are refused"""
        with self.assertRaises(ToolRegistrationError):
            ToolSpec("search", "   ")
        with self.assertRaises(ToolRegistrationError):
            ToolSpec("Bad Name", "has a description")

    def test_05_ablations_remove_tools(self):
        """no_plan and no_validation drop their tools"""
        registry = builtin_registry(["no_plan", "no_validation"])
        self.assertNotIn("plan_agent", registry)
        self.assertNotIn("validate_agent", registry)
        self.assertIn("code_agent", registry)

    def test_06_route_stop(self):
        """stop succeeds and ends the session"""
        result = route(self.registry, "stop", {})
        self.assertEqual(result.status, "success")
        self.assertTrue(result.terminal)

    def test_07_route_schema_violation(self):
        """A wrongly typed argument becomes a failure result"""
        result = route(self.registry, "plan_agent", {"plan_num": "three"})
        self.assertEqual(result.status, "failure")
        self.assertIn("invalid arguments", result.summary_line)
        self.assertIn("plan_num", result.summary_line)
        self.assertFalse(result.terminal)

    def test_08_route_strict_and_extra_args(self):
        """Numeric strings and unknown arguments are not coerced or ignored"""
        self.assertEqual(route(self.registry, "plan_agent", {"plan_num": "3"}).status, "failure")
        self.assertEqual(route(self.registry, "stop", {"now": True}).status, "failure")

    def test_09_route_unknown_tool(self):
        """An unregistered tool is a failure, not a crash"""
        result = route(self.registry, "deploy", {})
        self.assertEqual(result.status, "failure")
        self.assertIn("not a registered tool", result.summary_line)

    def test_10_handler_errors(self):
        """Handler exceptions are absorbed; transcript misses are not"""

        def boom(ctx, args):
            raise RuntimeError("handler exploded")

        def miss(ctx, args):
            raise TranscriptMissError("abc123", "code")

        registry = ToolRegistry()
        register_tool(registry, ToolSpec("boom", "always raises", {}, boom))
        register_tool(registry, ToolSpec("miss", "replay miss", {}, miss))
        result = route(registry, "boom", {})
        self.assertEqual(result.status, "failure")
        self.assertIn("RuntimeError", result.summary_line)
        with self.assertRaises(TranscriptMissError):
            route(registry, "miss", {})

    def test_11_handler_result_wrapped(self):
        """Handler output is returned in the standard shape"""
        registry = ToolRegistry()
        register_tool(registry, ToolSpec("echo", "echoes its argument", {"word": (str, ...)},
                                         lambda ctx, args: ("success", {"word": args["word"]}, "echo: ok")))
        result = route(registry, "echo", {"word": "hi"})
        self.assertEqual(result.to_dict(), {"tool": "echo", "status": "success", "payload": {"word": "hi"},
                                            "summary_line": "echo: ok"})


class TrajectoryTests(unittest.TestCase):
    """Trajectory steps, records and summaries"""

    def test_01_counts_reconstruct(self):
        """tool_counts and total_count follow the step list"""
        tools = ["code_agent", "plan_agent", "code_agent", "validate_agent", "stop"]
        steps = [TrajectoryStep(t, args_digest({}), "success", t) for t in tools]
        record = TrajectoryRecord.from_steps("toy_abs", "math", steps, "s", "pass", "semantic")
        self.assertEqual(record.total_count, 5)
        self.assertEqual(record.tool_counts, {"code_agent": 2, "plan_agent": 1, "validate_agent": 1, "stop": 1})
        self.assertEqual(TrajectoryRecord.from_dict(record.to_dict()).to_dict(), record.to_dict())

    def test_02_inconsistent_counts(self):
        """A record whose counts disagree with its steps is refused"""
        steps = [TrajectoryStep("stop", args_digest({}), "success", "stop")]
        with self.assertRaises(ValueError):
            TrajectoryRecord("f", "math", steps, {"stop": 2}, 2, "s", "pass")
        with self.assertRaises(ValueError):
            TrajectoryStep("stop", args_digest({}), "maybe", "stop")

    def test_03_args_digest_canonical(self):
        """Argument digests ignore key order"""
        self.assertEqual(args_digest({"a": 1, "b": 2}), args_digest({"b": 2, "a": 1}))
        self.assertNotEqual(args_digest({"a": 1}), args_digest({"a": 2}))
        self.assertEqual(args_digest(None), args_digest({}))

    def test_04_deterministic_summary(self):
        """The replay summary is a digest of the step list"""
        steps = [TrajectoryStep(t, args_digest({}), "success", t) for t in ("code_agent", "validate_agent", "stop")]
        self.assertEqual(deterministic_summary("toy_even", steps, "pass", "semantic"),
                         "toy_even: 3 step(s) [code_agent x1, stop x1, validate_agent x1]; verdict pass; "
                         "final stage semantic")


class MemoryPoolTests(unittest.TestCase):
    """Distribution-gated insertion, eviction and retrieval"""

    def test_01_first_record_accepted(self):
        """The first record of a category is always stored"""
        pool = MemoryPool()
        self.assertTrue(insert_trajectory(pool, make_record(7)))
        self.assertEqual(pool.stats("math"), (7, 7, 7))

    def test_02_gating_examples(self):
        """New extremes are accepted, a count leaving every statistic alone is not"""
        pool = MemoryPool()
        for n in (3, 5, 9):
            insert_trajectory(pool, make_record(n))
        self.assertEqual(pool.stats("math"), (3, 5, 9))
        self.assertFalse(insert_trajectory(pool, make_record(5)))
        self.assertTrue(insert_trajectory(pool, make_record(2)))
        self.assertEqual(pool.stats("math"), (2, 3, 9))
        self.assertTrue(insert_trajectory(pool, make_record(12)))
        self.assertEqual(pool.counts("math"), [3, 5, 9, 2, 12])

    def test_03_median_change_accepted(self):
        """A count moving the lower median is accepted"""
        pool = MemoryPool()
        for n in (3, 5, 9):
            insert_trajectory(pool, make_record(n))
        self.assertTrue(insert_trajectory(pool, make_record(4)))
        self.assertEqual(pool.stats("math"), (3, 4, 9))

    def test_04_retrieval(self):
        """Retrieval returns the min, median and max records, deduplicated"""
        pool = MemoryPool()
        self.assertEqual(retrieve_reference_trajectories(pool, "math"), [])
        for n in (2, 4, 7):
            insert_trajectory(pool, make_record(n, name=f"f{n}"))
        self.assertEqual([r.total_count for r in retrieve_reference_trajectories(pool, "math")], [2, 4, 7])
        single = MemoryPool()
        insert_trajectory(single, make_record(5, "date"))
        self.assertEqual(len(retrieve_reference_trajectories(single, "date")), 1)

    def test_05_cap_validation(self):
        """A cap below three cannot hold the statistic records"""
        with self.assertRaises(ValueError):
            MemoryPool(cap=2)

    def test_06_random_sequences_match_brute_force(self):
        """1000 random insertion sequences per category agree with a brute-force oracle"""
        rng = random.Random(20241018)
        categories = ["math", "date", "string", "system", "aggregate"]
        for _ in range(1000):
            cap = rng.randint(3, 16)
            pool = MemoryPool(cap=cap)
            for i in range(rng.randint(1, 40)):
                category = rng.choice(categories)
                n = rng.randint(1, 30)
                before = pool.counts(category)
                accepted = insert_trajectory(pool, make_record(n, category, f"f{i}"))
                if not before:
                    expected = True
                else:
                    expected = (n < min(before) or n > max(before)
                                or statistics.median_low(before + [n]) != statistics.median_low(before))
                self.assertEqual(accepted, expected)
                for cat in pool.categories():
                    counts = pool.counts(cat)
                    self.assertLessEqual(len(counts), cap)
                    oracle = (min(counts), statistics.median_low(counts), max(counts))
                    self.assertEqual(pool.stats(cat), oracle)
                    refs = retrieve_reference_trajectories(pool, cat)
                    self.assertEqual({r.total_count for r in refs}, set(oracle))
                    self.assertEqual(len(refs), len({id(r) for r in refs}))
                    for r in refs:
                        self.assertIn(r, pool.entries[cat])

    def test_07_eviction_keeps_stat_records(self):
        """Past the cap the record nearest the median goes and the extremes stay"""
        pool = MemoryPool(cap=3)
        for n in (5, 1, 9):
            insert_trajectory(pool, make_record(n, name=f"f{n}"))
        self.assertTrue(insert_trajectory(pool, make_record(20, name="f20")))
        names = [r.function_name for r in pool.entries["math"]]
        self.assertEqual(len(names), 3)
        self.assertIn("f1", names)
        self.assertIn("f20", names)

    def test_08_pool_file_round_trip(self):
        """insert_into_file persists accepted records only"""
        workdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, workdir, True)
        path = os.path.join(workdir, "memory_pool.json")
        self.assertTrue(insert_into_file(path, make_record(3)))
        self.assertTrue(insert_into_file(path, make_record(8)))
        mtime = os.path.getmtime(path)
        self.assertFalse(insert_into_file(path, make_record(8)))
        self.assertEqual(os.path.getmtime(path), mtime)
        pool = load_pool(path)
        self.assertEqual(pool.counts("math"), [3, 8])
        self.assertEqual(pool.to_payload()["categories"][0]["stats"],
                         {"min": 3, "median": 3, "max": 8, "count": 2})

    def test_09_concurrent_writers(self):
        """Concurrent insertions leave a consistent pool file"""
        workdir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, workdir, True)
        path = os.path.join(workdir, "memory_pool.json")
        threads = [threading.Thread(target=insert_into_file, args=(path, make_record(n, name=f"f{n}"), 5))
                   for n in range(1, 13)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        pool = load_pool(path, 5)
        counts = pool.counts("math")
        self.assertLessEqual(len(counts), 5)
        self.assertEqual(pool.stats("math"), (min(counts), statistics.median_low(counts), max(counts)))


class ControllerTests(unittest.TestCase):
    """Controller reply parsing, retries and fallback"""

    @classmethod
    def setUpClass(cls):
        """Shared registry"""
        cls.registry = builtin_registry()

    def _llm(self, replies):
        llm = MagicMock()
        llm.settings = LLMSettings()
        llm.complete.side_effect = replies
        return llm

    def test_01_parse_json_reply(self):
        """JSON replies carry the tool and its arguments"""
        self.assertEqual(parse_controller_reply('{"tool": "plan_agent", "args": {"plan_num": 2}}', self.registry),
                         ("plan_agent", {"plan_num": 2}))
        fenced = 'Next:\n```json\n{"tool": "validate_agent", "args": {}}\n```'
        self.assertEqual(parse_controller_reply(fenced, self.registry), ("validate_agent", {}))

    def test_02_parse_prose_reply(self):
        """Prose replies resolve to the earliest registered name"""
        self.assertEqual(parse_controller_reply("Run validate_agent, then stop.", self.registry),
                         ("validate_agent", {}))
        self.assertEqual(parse_controller_reply("stop", self.registry), ("stop", {}))
        self.assertIsNone(parse_controller_reply('{"tool": "deploy"}', self.registry))

    def test_03_fallback_sequence(self):
        """The fallback walks plan, code, validate, stop"""

        def steps(*tools):
            return [TrajectoryStep(t, args_digest({}), "success", t) for t in tools]

        self.assertEqual(fallback_tool([], self.registry), "plan_agent")
        self.assertEqual(fallback_tool(steps("plan_agent"), self.registry), "code_agent")
        self.assertEqual(fallback_tool(steps("code_agent"), self.registry), "validate_agent")
        self.assertEqual(fallback_tool(steps("validate_agent"), self.registry), "stop")
        self.assertEqual(fallback_tool(steps("code_agent", "search_repo"), self.registry), "plan_agent")
        self.assertEqual(fallback_tool([], builtin_registry(["no_plan"])), "code_agent")

    def test_04_next_tool_parses_reply(self):
        """A usable reply is taken after one call"""
        llm = self._llm(["validate_agent"])
        steps = [TrajectoryStep("code_agent", args_digest({}), "success", "code_agent: applied")]
        self.assertEqual(next_tool(llm, steps, [], self.registry, ABS), ("validate_agent", {}))
        self.assertEqual(llm.complete.call_count, 1)
        prompt = llm.complete.call_args[0][0]
        self.assertEqual(prompt.tag, "controller")
        self.assertIn("Function: toy_abs", prompt.messages[0][1])
        self.assertIn("1. code_agent -> success", prompt.messages[0][1])

    def test_05_next_tool_retry_then_fallback(self):
        """Two unusable replies fall back to the default sequence"""
        llm = self._llm(["I am not sure.", "Still thinking."])
        steps = [TrajectoryStep("code_agent", args_digest({}), "success", "code_agent: applied")]
        with self.assertLogs("orchestration", level="WARNING") as logs:
            choice = next_tool(llm, steps, [], self.registry, ABS)
        self.assertEqual(choice, ("validate_agent", {}))
        self.assertEqual(llm.complete.call_count, 2)
        retry = llm.complete.call_args_list[1][0][0]
        self.assertEqual([role for role, _ in retry.messages], ["user", "assistant", "user"])
        self.assertTrue(any("CONTROLLER FALLBACK" in line for line in logs.output))

    def test_06_next_tool_retry_succeeds(self):
        """The corrective retry can recover"""
        llm = self._llm(["hmm", '{"tool": "stop", "args": {}}'])
        self.assertEqual(next_tool(llm, [], [], self.registry, ABS), ("stop", {}))

    def test_07_next_tool_errors(self):
        """Provider errors fall back; replay misses propagate"""
        self.assertEqual(next_tool(self._llm([LLMError("down")]), [], [], self.registry, ABS), ("plan_agent", {}))
        with self.assertRaises(TranscriptMissError):
            next_tool(self._llm([TranscriptMissError("d", "controller")]), [], [], self.registry, ABS)
        with self.assertRaises(ValueError):
            next_tool(self._llm([]), [], [], ToolRegistry(), ABS)


class SessionTests(unittest.TestCase):
    """Stepwise sessions on a copy of the toydb fixture"""

    @classmethod
    def setUpClass(cls):
        """Load the toydb profile"""
        cls.profile = load_profile("toydb")

    def setUp(self):
        self.workdir = tempfile.mkdtemp(prefix="dbforge-session-")
        self.addCleanup(shutil.rmtree, self.workdir, True)
        self.repo = os.path.join(self.workdir, "repo")
        shutil.copytree(TOYDB, self.repo)
        self.out = os.path.join(self.workdir, "out")
        self.config = RunConfig(profile="toydb", repo_root=self.repo, out_dir=self.out, samples=2)

    def _funcs(self) -> bytes:
        with open(os.path.join(self.repo, "src", "funcs.c"), "rb") as f:
            return f.read()

    def test_01_entries_to_withhold(self):
        """Withholding toy_abs takes its registration entry and its implementation"""
        index = scan_repo(self.repo, self.profile)
        names = sorted(e.name for e in entries_to_withhold(index, "toy_abs"))
        self.assertEqual(names, ["aBuiltin::toy_abs", "toy_abs"])
        self.assertEqual(entries_to_withhold(index, "toy_nothing"), [])

    def test_02_withheld_function_round_trip(self):
        """toy_abs is rebuilt in five steps and the repository is restored afterwards"""
        original = self._funcs()
        endpoint = ScriptedEndpoint()
        llm = live_gateway(endpoint)
        self.addCleanup(llm.close)
        request = SynthesisRequest(ABS, self.repo, "toydb", self.config, withhold=True)
        units, record = run_session(request, builtin_registry(), MemoryPool(), llm, out_dir=self.out)
        self.assertEqual([s.tool for s in record.steps],
                         ["code_agent", "plan_agent", "code_agent", "validate_agent", "stop"])
        self.assertEqual(record.verdict, "pass")
        self.assertEqual(record.final_stage, "semantic")
        self.assertTrue(any(u.role == "implementation" for u in units))
        self.assertEqual(self._funcs(), original)
        for name in ("plans.json", "synthesis_attempt.json", "validation_report.json", "trajectory.json"):
            self.assertTrue(os.path.isfile(os.path.join(self.out, name)), name)

    def test_03_single_step_cap(self):
        """max_steps=1 runs one tool and a forced stop"""
        llm = live_gateway(ScriptedEndpoint())
        self.addCleanup(llm.close)
        request = SynthesisRequest(EVEN, self.repo, "toydb", self.config)
        with self.assertLogs("orchestration", level="WARNING") as logs:
            _, record = run_session(request, builtin_registry(), MemoryPool(), llm, max_steps=1)
        self.assertEqual([s.tool for s in record.steps], ["code_agent", "stop"])
        self.assertTrue(any("FORCED STOP" in line for line in logs.output))
        with self.assertRaises(ValueError):
            run_session(request, builtin_registry(), MemoryPool(), llm, max_steps=0)

    def test_04_always_failing_validation(self):
        """A session that never validates stops at the cap, switches mode and is gated by the pool"""
        original = self._funcs()
        failing = ValidationReport([StageOutcome("syntax", False, [StageDiagnostic("injected failure", "other")])])
        llm = live_gateway(ScriptedEndpoint(controller_cycle=["code_agent", "validate_agent"]))
        self.addCleanup(llm.close)
        request = SynthesisRequest(EVEN, self.repo, "toydb", self.config)
        with patch("orchestration.run_validation_pipeline", return_value=failing) as pipeline, \
                self.assertLogs(level="INFO") as logs:
            units, record = run_session(request, builtin_registry(), MemoryPool(), llm, max_steps=30,
                                        out_dir=self.out)
        self.assertTrue(pipeline.called)
        self.assertEqual(units, [])
        self.assertEqual(record.verdict, "fail")
        self.assertEqual(record.total_count, 31)
        self.assertEqual(record.steps[-1].tool, "stop")
        self.assertTrue(any("FORCED STOP" in line for line in logs.output))
        self.assertTrue(any("MODE SWITCH" in line and "from_scratch" in line for line in logs.output))
        self.assertEqual(self._funcs(), original)

        pool = MemoryPool()
        for n in (3, 5, 9):
            insert_trajectory(pool, make_record(n, name=f"f{n}"))
        self.assertTrue(insert_trajectory(pool, record))
        self.assertEqual(pool.stats("math"), (3, 5, 31))
        self.assertFalse(insert_trajectory(pool, make_record(5)))


if __name__ == "__main__":
    unittest.main()
