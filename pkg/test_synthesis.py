import json
import os
import random
import shutil
import tempfile
import unittest
from unittest.mock import MagicMock

from characterization import CharacterizationDocument, FunctionDeclaration, PrunedUnit
from codebase_index import CodeEdit, apply_edits, scan_repo
from config import load_profile
from errors import FillFailedError, LLMError, SynthesisError, TranscriptMissError
from llm_gateway import Prompt, SampleBatch
from planning import CodingPlan, PlanBlock, PlannedUnit
from synthesis import (
    FillContext,
    ModeState,
    SynthesizedUnit,
    adaptation_probability,
    decide_mode,
    fill_blanks,
    fill_template,
    preserves_template,
    retrieve_templates,
    self_consistency_merge,
    synthesize,
    synthesize_from_scratch,
    units_to_edits,
)

HERE = os.path.dirname(os.path.abspath(__file__))
TOYDB = os.path.join(HERE, "fixtures", "toydb")

ONE = FunctionDeclaration("toy_one", "math", "Returns one.", [], "int")
ONE_IMPL = "static void toy_one(ToyContext *ctx, int argc, ToyValue **argv){\n  TOY_RETURN(ctx, 1);\n}"
REG_TEMPLATE = PrunedUnit("{ {{BLANK_0}} , {{BLANK_1}} , {{BLANK_2}} } ,", 3, 2, "math|", "src/funcs.c", "registration")


def scripted_llm(texts=(), errors=None, single=None):
    llm = MagicMock()
    llm.settings.model = "scripted-model"
    llm.prompt.side_effect = lambda system, user, tag: Prompt(system, [("user", user)], 0.1, 2048, tag)
    texts = list(texts)
    samples = [i for i in range(len(texts) + len(errors or {})) if i not in (errors or {})]
    llm.complete_many.return_value = SampleBatch(texts, samples, dict(errors or {}))
    llm.complete.return_value = single
    return llm


def fill_answer(slots=('"toy_one"', "0", "toy_one"), code=None, impl=ONE_IMPL):
    fill = {"template": 0, "code": code} if code is not None else {"template": 0, "slots": list(slots)}
    fill["unit_name"] = "toy_one:registration"
    return json.dumps({
        "fills": [fill],
        "units": [{"unit_name": "toy_one", "file_path": "src/funcs.c", "role": "implementation", "code": impl}],
    })


class ModeAdaptationTests(unittest.TestCase):
    """Template-mode probability and the seeded mode decision"""

    def test_01_probability(self):
        """The template probability is decay**n for 1000 random pairs"""
        rng = random.Random(5)
        for _ in range(1000):
            n = rng.randint(0, 40)
            decay = rng.uniform(0.01, 0.99)
            self.assertAlmostEqual(adaptation_probability(n, decay), decay ** n, delta=1e-12)
        for n, decay in ((-1, 0.5), (1, 0.0), (1, 1.0)):
            with self.assertRaises(ValueError):
                adaptation_probability(n, decay)

    def test_02_absorbing(self):
        """Below the floor synthesis stays in from-scratch mode for good"""
        state = ModeState(decay=0.5, floor=0.05)
        state.failure_count = 4
        self.assertGreaterEqual(state.probability, state.floor)
        state.record_failure()
        self.assertAlmostEqual(state.probability, 0.03125)
        with self.assertLogs("synthesis", level="INFO") as logs:
            self.assertEqual(decide_mode(state), "from_scratch")
        self.assertTrue(state.absorbed)
        self.assertIsNone(state.draws[-1]["u"])
        self.assertTrue(any("MODE SWITCH: fill_in_blank -> from_scratch" in line for line in logs.output))
        state.failure_count = 0
        self.assertEqual(decide_mode(state), "from_scratch")

    def test_03_seeded_decisions_replay(self):
        """Two states with one seed draw the same modes"""
        runs = []
        for _ in range(2):
            state = ModeState(decay=0.7, floor=0.01, rng_seed=42)
            for _ in range(12):
                decide_mode(state)
                state.record_failure()
            runs.append(state.draws)
        self.assertEqual(runs[0], runs[1])
        self.assertEqual(runs[0][0]["mode"], "fill_in_blank")

    def test_04_draw_frequency(self):
        """Template mode is picked with roughly the current probability"""
        state = ModeState(decay=0.5, floor=0.05, rng_seed=3)
        state.failure_count = 1
        picks = [decide_mode(state) for _ in range(2000)]
        share = picks.count("fill_in_blank") / len(picks)
        self.assertAlmostEqual(share, 0.5, delta=0.05)
        self.assertFalse(state.absorbed)

    def test_05_invalid_state(self):
        """Decay, floor and mode are validated"""
        for kwargs in ({"decay": 1.0}, {"floor": 0.0}, {"mode": "guess"}):
            with self.assertRaises(ValueError):
                ModeState(**kwargs)


class TemplateTests(unittest.TestCase):
    """Template retrieval, shape checks, filling and voting"""

    def test_01_retrieve_templates(self):
        """Exact-group templates come first, then support, then length"""
        ch = CharacterizationDocument(pruned_units=[
            PrunedUnit("a ;", 0, 5, "math|int,int", "src/funcs.c"),
            PrunedUnit("b ( {{BLANK_0}} ) ;", 1, 1, "math|", "src/funcs.c"),
            PrunedUnit("c ;", 0, 9, "date|", "src/funcs.c"),
            PrunedUnit("b ( {{BLANK_0}} ) ;", 1, 1, "math|", "src/funcs.c"),
            PrunedUnit("long ( {{BLANK_0}} ) ;", 1, 5, "math|int", "src/funcs.c"),
        ])
        found = retrieve_templates(ONE, ch, 3)
        self.assertEqual([p.template_text for p in found], ["b ( {{BLANK_0}} ) ;", "long ( {{BLANK_0}} ) ;", "a ;"])
        self.assertEqual(len(retrieve_templates(ONE, ch, 1)), 1)
        with self.assertRaises(ValueError):
            retrieve_templates(ONE, ch, 0)

    def test_02_preserves_template(self):
        """Fixed tokens must appear in order; renamed locals match any local"""
        template = "TOY_RETURN ( v1 , {{BLANK_0}} ) ;"
        self.assertTrue(preserves_template(template, "TOY_RETURN(ctx, x * 2);", ["TOY_RETURN"]))
        self.assertTrue(preserves_template(template, "/* c */ TOY_RETURN(context, 7);", ["TOY_RETURN"]))
        self.assertFalse(preserves_template(template, "TOY_RESULT(ctx, 7);", ["TOY_RETURN"]))
        self.assertFalse(preserves_template("a = f ( {{BLANK_0}} ) ; return 1 ;", "a = f(2); return 2;"))
        self.assertTrue(preserves_template("{{BLANK_0}}", "anything at all"))

    def test_03_fill_template(self):
        """Slots replace placeholders by index"""
        template = PrunedUnit("a = {{BLANK_0}} + {{BLANK_1}} ;", 2)
        self.assertEqual(fill_template(template, ["x", "y"]), "a = x + y ;")
        with self.assertRaises(ValueError):
            fill_template(template, ["x"])
        with self.assertRaises(ValueError):
            fill_template(template, ["x", "{{BLANK_0}}"])

    def test_04_self_consistency_merge(self):
        """The most frequent normalised variant wins; ties go to the earliest sample"""
        a0 = SynthesizedUnit("u", "src/funcs.c", "x = 1;")
        b1 = SynthesizedUnit("u", "src/funcs.c", "x = 2;")
        a2 = SynthesizedUnit("u", "src/funcs.c", "x  =  1 ; /* same */")
        w0 = SynthesizedUnit("w", "src/funcs.c", "y = 1;")
        w1 = SynthesizedUnit("w", "src/funcs.c", "y = 2;")
        merged = self_consistency_merge([[w0, a0], [b1, w1], [a2]])
        self.assertEqual([u.unit_name for u in merged], ["w", "u"])
        self.assertEqual(merged[1].code_text, "x = 1;")
        self.assertEqual(merged[1].sample_votes, 2)
        self.assertEqual(merged[0].code_text, "y = 1;")
        self.assertEqual(merged[0].sample_votes, 1)
        with self.assertRaises(ValueError):
            self_consistency_merge([])

    def test_05_synthesized_unit_checks(self):
        """Units need code and known origin and role"""
        for kwargs in ({"code_text": " "}, {"origin": "guessed"}, {"role": "helper"}):
            args = dict(unit_name="u", file_path="src/funcs.c", code_text="x;")
            args.update(kwargs)
            with self.assertRaises(ValueError):
                SynthesizedUnit(**args)


class SynthesisTests(unittest.TestCase):
    """Fill-in-the-blank, from-scratch and placement against toydb"""

    @classmethod
    def setUpClass(cls):
        """Index the toydb fixture"""
        cls.profile = load_profile("toydb")
        cls.index = scan_repo(TOYDB, cls.profile)

    def _ctx(self, plan=None):
        return FillContext(ONE, [REG_TEMPLATE], plan, [], {}, self.index, self.profile)

    def test_01_fill_blanks(self):
        """Shape-breaking samples are dropped and the rest vote"""
        llm = scripted_llm([fill_answer(), fill_answer(), fill_answer(code='{ "toy_one" ; 0 , toy_one } ,')])
        candidates, drops = fill_blanks(self._ctx(), llm, 3)
        self.assertEqual(len(candidates), 2)
        self.assertEqual(drops, [{"sample": 2, "reason": "template 0: fixed template tokens were altered"}])
        merged = self_consistency_merge(candidates)
        self.assertEqual([u.unit_name for u in merged], ["toy_one:registration", "toy_one"])
        self.assertEqual(merged[0].code_text, '{ "toy_one" , 0 , toy_one } ,')
        self.assertEqual(merged[0].role, "registration")
        self.assertEqual(merged[0].sample_votes, 2)
        self.assertEqual(llm.complete_many.call_args[0][0].tag, "code")

    def test_02_fill_validation(self):
        """Unknown templates, missing planned units and bad paths are rejected"""
        plan = CodingPlan("toy_one", [PlannedUnit("toy_one_helper", "src/funcs.c", [PlanBlock("Step 1")])])
        bad_template = json.dumps({"fills": [{"template": 4, "slots": []}]})
        bad_path = json.dumps({"units": [{"unit_name": "toy_one", "file_path": "../evil.c", "code": "x;"}]})
        empty = json.dumps({"fills": [{"template": 0, "skip": True}]})
        llm = scripted_llm([fill_answer(), bad_template, bad_path, empty, "prose only"])
        with self.assertRaises(FillFailedError):
            fill_blanks(self._ctx(plan), llm, 5)
        _, drops = fill_blanks(self._ctx(), llm, 5)
        reasons = [d["reason"] for d in drops]
        self.assertIn("fill refers to unknown template 4", reasons)
        self.assertIn("answer contains no unit", reasons)
        self.assertTrue(any("escapes the repository root" in r for r in reasons))
        with self.assertRaises(ValueError):
            fill_blanks(self._ctx(), llm, 0)

    def test_03_from_scratch(self):
        """From-scratch output becomes units; unusable output raises"""
        answer = json.dumps({"units": [
            {"unit_name": "toy_one", "file_path": "src/funcs.c", "code": ONE_IMPL},
            {"unit_name": "toy_one:registration", "file_path": "src/funcs.c", "role": "registration",
             "code": '{"toy_one", 0, toy_one},'},
        ]})
        ch = CharacterizationDocument()
        units = synthesize_from_scratch(ONE, ch, None, scripted_llm(single=answer), self.index, self.profile)
        self.assertEqual([u.origin for u in units], ["from_scratch", "from_scratch"])
        self.assertEqual(units[1].role, "registration")
        for text in ("", '{"units": []}', '{"units": [{"unit_name": "u", "file_path": "../x.c", "code": "x;"}]}'):
            with self.assertRaises(SynthesisError):
                synthesize_from_scratch(ONE, ch, None, scripted_llm(single=text), self.index, self.profile)

    def test_04_failed_attempt_counts(self):
        """A failed attempt raises the failure count; replay misses propagate"""
        state = ModeState(rng_seed=1)
        llm = scripted_llm()
        llm.complete_many.side_effect = LLMError("down")
        with self.assertLogs("synthesis", level="WARNING") as logs:
            attempt = synthesize(ONE, CharacterizationDocument(), None, state, llm, self.index, self.profile)
        self.assertEqual(attempt.mode, "fill_in_blank")
        self.assertEqual(attempt.probability, 1.0)
        self.assertIsNotNone(attempt.error)
        self.assertEqual(attempt.units, [])
        self.assertEqual(state.failure_count, 1)
        self.assertTrue(any("SYNTHESIS FAILED" in line for line in logs.output))
        llm.complete_many.side_effect = TranscriptMissError("abc", "code")
        with self.assertRaises(TranscriptMissError):
            synthesize(ONE, CharacterizationDocument(), None, ModeState(), llm, self.index, self.profile)

    def test_05_units_to_edits(self):
        """Registrations go to the table, units before it, elsewhere appended or created"""
        units = [
            SynthesizedUnit("toy_one:registration", "src/funcs.c", '{"toy_one",  0,\n toy_one},', role="registration"),
            SynthesizedUnit("toy_one", "src/funcs.c", ONE_IMPL),
            SynthesizedUnit("toy_two_helper", "src/mathx.c", "toy_int toy_two_helper(void){\n  return 2;\n}"),
            SynthesizedUnit("toy_new", "src/new.c", "int toy_new;"),
        ]
        edits = units_to_edits(units, self.index, self.profile)
        self.assertEqual(edits, [
            CodeEdit("src/funcs.c", 67, "insert_before", '  {"toy_one", 0, toy_one},'),
            CodeEdit("src/funcs.c", 58, "insert_before", ONE_IMPL + "\n\n"),
            CodeEdit("src/mathx.c", 53, "insert_before", "\ntoy_int toy_two_helper(void){\n  return 2;\n}"),
            CodeEdit("src/new.c", 0, "create_file", "int toy_new;"),
        ])
        bare = self.profile.model_copy(update={"registration_patterns": []})
        with self.assertRaises(SynthesisError):
            units_to_edits(units[:1], self.index, bare)

    def test_06_edits_apply(self):
        """Placement edits apply cleanly to a copy of the repository"""
        workdir = tempfile.mkdtemp(prefix="dbforge-synth-")
        self.addCleanup(shutil.rmtree, workdir, True)
        repo = os.path.join(workdir, "repo")
        shutil.copytree(TOYDB, repo)
        index = scan_repo(repo, self.profile)
        units = [
            SynthesizedUnit("toy_one:registration", "src/funcs.c", '{"toy_one", 0, toy_one},', role="registration"),
            SynthesizedUnit("toy_one", "src/funcs.c", ONE_IMPL),
        ]
        apply_edits(repo, units_to_edits(units, index, self.profile))
        with open(os.path.join(repo, "src", "funcs.c"), "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[-2:], ['  {"toy_one", 0, toy_one},', "};"])
        start = lines.index("static void toy_one(ToyContext *ctx, int argc, ToyValue **argv){")
        self.assertEqual(lines[start + 3], "")
        self.assertEqual(lines[start + 4], "static const ToyBuiltin aBuiltin[] = {")


if __name__ == "__main__":
    unittest.main()
