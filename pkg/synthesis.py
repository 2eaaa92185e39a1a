"""
Code synthesis for new function units.

Two modes: fill-in-the-blank against retrieved templates, merged by
self-consistency over several samples, and from-scratch generation. The
template mode is chosen with probability decay**n after n failures; once
that probability drops below the floor, synthesis stays in from-scratch
mode.
"""

import logging
import os
import re
from dataclasses import asdict, dataclass, field, replace
from fnmatch import fnmatch
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from characterization import CharacterizationDocument, FunctionDeclaration, PrunedUnit, ReferenceUnit
from codebase_index import CodeEdit, SymbolIndex, insertion_mode, locate_insertion_point, source_lines
from config import DbProfile
from errors import AnchorNotFoundError, FillFailedError, LLMError, SynthesisError, TranscriptMissError
from lexer import BLANK_RE, fixed_runs, local_mask, strip_comments, token_values
from llm_gateway import LLMGateway, extract_json
from planning import CodingPlan, describe_declaration, describe_plan, describe_references, location_error

logger = logging.getLogger(__name__)

MODES = ("fill_in_blank", "from_scratch")
ORIGINS = ("blank_filled", "from_scratch")
ROLES = ("implementation", "registration")

CODE_SYSTEM = (
    "You are a database kernel engineer implementing a native SQL function inside an existing "
    "database codebase. Follow the conventions of the surrounding code. Answer with a single JSON "
    "object and nothing else."
)

_RENAMED_LOCAL = re.compile(r"v\d+")


@dataclass
class SynthesizedUnit:
    unit_name: str
    file_path: str
    code_text: str
    origin: str = "blank_filled"
    sample_votes: int = 1
    role: str = "implementation"

    def __post_init__(self):
        if not self.code_text.strip():
            raise ValueError(f"unit {self.unit_name} has no code")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown unit origin '{self.origin}'")
        if self.role not in ROLES:
            raise ValueError(f"unknown unit role '{self.role}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SynthesizedUnit":
        return cls(**data)


@dataclass
class FillContext:
    declaration: FunctionDeclaration
    templates: List[PrunedUnit] = field(default_factory=list)
    plan: Optional[CodingPlan] = None
    references: List[ReferenceUnit] = field(default_factory=list)
    expanded: Dict[str, str] = field(default_factory=dict)
    index: Optional[SymbolIndex] = None
    profile: Optional[DbProfile] = None


class _FillSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    template: int = Field(ge=0)
    slots: Optional[List[str]] = None
    code: Optional[str] = None
    skip: bool = False
    unit_name: Optional[str] = None


class _UnitSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    unit_name: str = Field(min_length=1)
    file_path: str = Field(min_length=1)
    role: str = "implementation"
    code: str = Field(min_length=1)


class _AnswerSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    fills: List[_FillSchema] = Field(default_factory=list)
    units: List[_UnitSchema] = Field(default_factory=list)


# -- templates ----------------------------------------------------------------

def retrieve_templates(decl: FunctionDeclaration, ch: CharacterizationDocument, k: int) -> List[PrunedUnit]:
    """
    Top-k templates of decl's category.

    Templates of decl's exact declaration group come first; within that,
    higher support, then longer text, then lexical order.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    same_category = [p for p in ch.pruned_units if p.origin_group.split("|", 1)[0] == decl.category]
    ranked = sorted(same_category, key=lambda p: (p.origin_group != decl.group_key, -p.support,
                                                   -len(p.template_text), p.template_text))
    out, seen = [], set()
    for unit in ranked:
        key = (unit.template_text, unit.file, unit.role)
        if key not in seen:
            seen.add(key)
            out.append(unit)
    return out[:k]


def _token_match(template_value: str, code_value: str, code_is_local: bool) -> bool:
    return template_value == code_value or (code_is_local and bool(_RENAMED_LOCAL.fullmatch(template_value)))


def preserves_template(template_text: str, code: str, globals_: Sequence[str] = ()) -> bool:
    """
    True when code contains every fixed template token, in order.

    Renamed locals of the template (v1, v2, ...) match any local identifier
    of the code.
    """
    runs = fixed_runs(token_values(template_text))
    values = token_values(code)
    mask = local_mask(values, globals_)
    pos = 0
    for run in runs:
        found = None
        for i in range(pos, len(values) - len(run) + 1):
            if all(_token_match(t, values[i + j], mask[i + j]) for j, t in enumerate(run)):
                found = i
                break
        if found is None:
            return False
        pos = found + len(run)
    return True


def fill_template(template: PrunedUnit, slots: Sequence[str]) -> str:
    """
    Substitute slot texts for the placeholders of a template.

    Raises:
        ValueError: wrong slot count or a slot that is itself a placeholder
    """
    if len(slots) != template.placeholder_count:
        raise ValueError(f"template has {template.placeholder_count} placeholder(s), got {len(slots)} slot(s)")
    for slot in slots:
        if BLANK_RE.search(slot):
            raise ValueError("slot text still contains a placeholder")
    code = BLANK_RE.sub(lambda m: slots[int(m.group(1))], template.template_text)
    if BLANK_RE.search(code):
        raise ValueError("placeholder left unfilled")
    return code


# -- prompts ------------------------------------------------------------------

def _expanded_text(expanded: Dict[str, str]) -> str:
    if not expanded:
        return "(none)"
    return "\n".join(f"--- {name}\n{text}" for name, text in sorted(expanded.items()))


def fill_prompt_text(ctx: FillContext) -> str:
    lines = [
        "Mode: fill_in_blank",
        describe_declaration(ctx.declaration),
        "",
        "Coding plan:",
        describe_plan(ctx.plan),
        "",
        "Reference units:",
        describe_references(ctx.references),
        "",
        "Expanded references:",
        _expanded_text(ctx.expanded),
        "",
        "Templates shared by existing functions of this category. {{BLANK_i}} marks a slot; every",
        "other token must be kept exactly.",
    ]
    if not ctx.templates:
        lines.append("(none)")
    for i, template in enumerate(ctx.templates):
        lines.append(f"### Template {i} [role={template.role}, file={template.file}, "
                     f"placeholders={template.placeholder_count}]")
        lines.append(template.template_text)
    lines.extend([
        "",
        "For each template either fill its slots, rewrite it keeping every fixed token, or skip it.",
        "Write any remaining unit (and every unit named in the plan) in full.",
        'Answer with JSON: {"fills": [{"template": 0, "slots": ["..."]}, {"template": 1, "skip": true}],',
        '"units": [{"unit_name": "...", "file_path": "...", "role": "implementation", "code": "..."}]}',
    ])
    return "\n".join(lines)


def _category_examples(decl: FunctionDeclaration, ch: CharacterizationDocument, limit: int = 3) -> str:
    peers = [d for d in ch.implemented() if d.category == decl.category and d.name != decl.name]
    parts = []
    for peer in peers[:limit]:
        for node in ch.graphs[peer.name].nodes:
            parts.append(f"--- {node.role} unit {node.name} ({node.file})\n{node.text}")
    return "\n".join(parts) if parts else "(none)"


def scratch_prompt_text(decl: FunctionDeclaration, ch: CharacterizationDocument, plan: Optional[CodingPlan],
                        references: Sequence[ReferenceUnit], expanded: Dict[str, str]) -> str:
    return "\n".join([
        "Mode: from_scratch",
        describe_declaration(decl),
        "",
        "Coding plan:",
        describe_plan(plan),
        "",
        "Reference units:",
        describe_references(references),
        "",
        "Expanded references:",
        _expanded_text(expanded),
        "",
        "Existing functions of the same category:",
        _category_examples(decl, ch),
        "",
        "Identify and implement every unit the function needs, including its registration entry.",
        'Answer with JSON: {"units": [{"unit_name": "...", "file_path": "...", "role": "implementation|registration",',
        '"code": "..."}]}',
    ])


# -- fill-in-the-blank --------------------------------------------------------

def _check_unit(unit: _UnitSchema, ctx: FillContext, origin: str) -> SynthesizedUnit:
    if unit.role not in ROLES:
        raise ValueError(f"unit {unit.unit_name} has unknown role '{unit.role}'")
    if ctx.index is not None and ctx.profile is not None:
        problem = location_error(unit.file_path, ctx.index.root, ctx.profile, create_ok=True)
        if problem:
            raise ValueError(problem)
    return SynthesizedUnit(unit.unit_name, os.path.normpath(unit.file_path).replace(os.sep, "/"), unit.code,
                           origin, 1, unit.role)


def _parse_fill(text: str, ctx: FillContext) -> List[SynthesizedUnit]:
    try:
        answer = _AnswerSchema.model_validate(extract_json(text))
    except ValidationError as e:
        raise ValueError(f"answer schema violation: {e.errors()[0]['msg']}")
    globals_ = ctx.index.global_names() if ctx.index is not None else set()
    units: List[SynthesizedUnit] = []
    for fill in answer.fills:
        if fill.skip:
            continue
        if fill.template >= len(ctx.templates):
            raise ValueError(f"fill refers to unknown template {fill.template}")
        template = ctx.templates[fill.template]
        if fill.code is not None:
            if BLANK_RE.search(fill.code):
                raise ValueError(f"template {fill.template}: placeholder left unfilled")
            if not preserves_template(template.template_text, fill.code, globals_):
                raise ValueError(f"template {fill.template}: fixed template tokens were altered")
            code = fill.code
        else:
            code = fill_template(template, fill.slots or [])
        name = fill.unit_name or f"{ctx.declaration.name}:template{fill.template}"
        units.append(SynthesizedUnit(name, template.file, code, "blank_filled", 1, template.role))
    units.extend(_check_unit(u, ctx, "blank_filled") for u in answer.units)
    if not units:
        raise ValueError("answer contains no unit")
    names = [u.unit_name for u in units]
    if len(names) != len(set(names)):
        raise ValueError("answer repeats a unit name")
    if ctx.plan is not None:
        missing = [u.unit_name for u in ctx.plan.units if u.unit_name not in names]
        if missing:
            raise ValueError(f"planned unit(s) {missing} not written")
    return units


def fill_blanks(ctx: FillContext, llm: LLMGateway, samples: int) -> Tuple[List[List[SynthesizedUnit]], List[Dict[str, Any]]]:
    """
    Sample template fills in parallel.

    Args:
        ctx: Declaration, templates, plan and references for the prompt
        llm: Gateway issuing the samples
        samples: Number of independent samples

    Returns:
        (candidate unit sets in sample order, drop records)

    Raises:
        FillFailedError: no sample passed template-shape validation
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    prompt = llm.prompt(CODE_SYSTEM, fill_prompt_text(ctx), "code")
    try:
        batch = llm.complete_many(prompt, samples)
    except TranscriptMissError:
        raise
    except LLMError as e:
        raise FillFailedError(f"no fill samples for {ctx.declaration.name}: {e}") from e
    drops = [{"sample": s, "reason": f"LLM error: {err}"} for s, err in sorted(batch.errors.items())]
    candidates = []
    for sample, text in zip(batch.samples, batch.texts):
        try:
            candidates.append(_parse_fill(text, ctx))
        except ValueError as e:
            logger.info(f"FILL DROPPED: {ctx.declaration.name} sample {sample}: {e}")
            drops.append({"sample": sample, "reason": str(e)})
    drops.sort(key=lambda d: d["sample"])
    if not candidates:
        raise FillFailedError(f"all {samples} fill samples for {ctx.declaration.name} failed validation")
    return candidates, drops


def normalized_code(code: str) -> str:
    """Comment-free, whitespace-collapsed form used for voting"""
    return " ".join(token_values(code))


def self_consistency_merge(candidates: Sequence[Sequence[SynthesizedUnit]]) -> List[SynthesizedUnit]:
    """
    Pick the most frequent variant of every unit across candidate sets.

    Ties go to the variant seen in the earliest sample. Units keep the
    order in which they first appear.
    """
    if not candidates:
        raise ValueError("nothing to merge")
    order: List[str] = []
    variants: Dict[str, Dict[Tuple[str, str], List[SynthesizedUnit]]] = {}
    for units in candidates:
        for unit in units:
            if unit.unit_name not in variants:
                order.append(unit.unit_name)
                variants[unit.unit_name] = {}
            key = (unit.file_path, normalized_code(unit.code_text))
            variants[unit.unit_name].setdefault(key, []).append(unit)
    merged = []
    for name in order:
        best = max(variants[name].values(), key=len)
        merged.append(replace(best[0], sample_votes=len(best)))
    return merged


# -- mode adaptation ----------------------------------------------------------

def adaptation_probability(n: int, decay: float) -> float:
    """Probability of template mode after n failures: decay**n"""
    if n < 0:
        raise ValueError("failure count must be non-negative")
    if not 0 < decay < 1:
        raise ValueError("decay must lie in (0, 1)")
    return decay ** n


@dataclass
class ModeState:
    failure_count: int = 0
    decay: float = 0.5
    floor: float = 0.05
    mode: str = "fill_in_blank"
    rng_seed: int = 0
    absorbed: bool = False
    draws: List[Dict[str, Any]] = field(default_factory=list)
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 < self.decay < 1 or not 0 < self.floor < 1:
            raise ValueError("decay and floor must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'")
        self._rng = np.random.default_rng(self.rng_seed)

    @property
    def probability(self) -> float:
        return adaptation_probability(self.failure_count, self.decay)

    def record_failure(self) -> None:
        self.failure_count += 1
        logger.debug(f"synthesis failure {self.failure_count}: template probability now {self.probability:.4f}")


def decide_mode(state: ModeState) -> str:
    """
    Choose the mode of the next synthesis attempt.

    Below the floor the choice is from_scratch for good; otherwise a seeded
    uniform draw picks fill_in_blank with the current probability.
    """
    p = state.probability
    u = None
    if state.absorbed or p < state.floor:
        state.absorbed = True
        mode = "from_scratch"
    else:
        u = float(state._rng.random())
        mode = "fill_in_blank" if u < p else "from_scratch"
    if mode != state.mode:
        logger.info(f"MODE SWITCH: {state.mode} -> {mode} (n={state.failure_count}, p={p:.4f})")
    state.mode = mode
    state.draws.append({"n": state.failure_count, "p": p, "u": u, "mode": mode})
    return mode


# -- from scratch -------------------------------------------------------------

def synthesize_from_scratch(decl: FunctionDeclaration, ch: CharacterizationDocument, plan: Optional[CodingPlan],
                            llm: LLMGateway, index: SymbolIndex, profile: Optional[DbProfile] = None,
                            references: Sequence[ReferenceUnit] = (),
                            expanded: Optional[Dict[str, str]] = None) -> List[SynthesizedUnit]:
    """
    Write every unit of a function in one completion.

    Raises:
        SynthesisError: empty or unparseable output
    """
    prompt = llm.prompt(CODE_SYSTEM, scratch_prompt_text(decl, ch, plan, references, expanded or {}), "code")
    try:
        text = llm.complete(prompt)
    except TranscriptMissError:
        raise
    except LLMError as e:
        raise SynthesisError(f"from-scratch synthesis for {decl.name} got no completion: {e}") from e
    if not text.strip():
        raise SynthesisError(f"from-scratch synthesis for {decl.name} returned nothing")
    ctx = FillContext(decl, index=index, profile=profile)
    try:
        answer = _AnswerSchema.model_validate(extract_json(text))
        units = [_check_unit(u, ctx, "from_scratch") for u in answer.units]
    except (ValueError, ValidationError) as e:
        raise SynthesisError(f"from-scratch output for {decl.name} is unusable: {e}") from e
    if not units:
        raise SynthesisError(f"from-scratch output for {decl.name} has no unit")
    return units


# -- one attempt --------------------------------------------------------------

@dataclass
class SynthesisAttempt:
    function_name: str
    mode: str
    probability: float
    draw: Optional[float]
    candidates: List[List[Dict[str, Any]]] = field(default_factory=list)
    drops: List[Dict[str, Any]] = field(default_factory=list)
    units: List[SynthesizedUnit] = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "function_name": self.function_name,
            "mode": self.mode,
            "probability": self.probability,
            "draw": self.draw,
            "candidates": self.candidates,
            "drops": self.drops,
            "units": [u.to_dict() for u in self.units],
            "error": self.error,
        }


def synthesize(decl: FunctionDeclaration, ch: CharacterizationDocument, plan: Optional[CodingPlan],
               state: ModeState, llm: LLMGateway, index: SymbolIndex, profile: DbProfile, samples: int = 3,
               k: int = 3, references: Sequence[ReferenceUnit] = (), expanded: Optional[Dict[str, str]] = None,
               use_templates: bool = True) -> SynthesisAttempt:
    """One synthesis attempt; a failure is recorded on state and in the attempt"""
    mode = decide_mode(state)
    draw = state.draws[-1]
    attempt = SynthesisAttempt(decl.name, mode, draw["p"], draw["u"])
    try:
        if mode == "fill_in_blank":
            templates = retrieve_templates(decl, ch, k) if use_templates else []
            ctx = FillContext(decl, templates, plan, list(references), dict(expanded or {}), index, profile)
            candidates, attempt.drops = fill_blanks(ctx, llm, samples)
            attempt.candidates = [[u.to_dict() for u in units] for units in candidates]
            attempt.units = self_consistency_merge(candidates)
        else:
            attempt.units = synthesize_from_scratch(decl, ch, plan, llm, index, profile, references, expanded)
            attempt.candidates = [[u.to_dict() for u in attempt.units]]
    except TranscriptMissError:
        raise
    except (FillFailedError, SynthesisError) as e:
        state.record_failure()
        attempt.error = str(e)
        logger.warning(f"SYNTHESIS FAILED: {decl.name} ({mode}): {e}")
        return attempt
    logger.info(f"SYNTHESIZED: {decl.name} ({mode}) -> {', '.join(u.unit_name for u in attempt.units)}")
    return attempt


# -- placement ----------------------------------------------------------------

def _one_line(code: str) -> str:
    return " ".join(strip_comments(code).split())


def units_to_edits(units: Sequence[SynthesizedUnit], index: SymbolIndex, profile: DbProfile) -> List[CodeEdit]:
    """
    Place synthesized units in the repository.

    Registration units go to the registration rule matching their file (the
    first rule otherwise). Implementation units go before the profile's unit
    anchor when their file contains it, are appended to other existing files,
    and create missing files.

    Raises:
        SynthesisError: a registration unit but no registration rule
        AnchorNotFoundError: a registration rule matches no line
    """
    edits: List[CodeEdit] = []
    created: Dict[str, List[str]] = {}
    appended: Dict[str, List[str]] = {}
    for unit in units:
        if unit.role == "registration":
            if not profile.registration_patterns:
                raise SynthesisError(f"profile '{profile.name}' has no registration rule for {unit.unit_name}")
            rule = next((r for r in profile.registration_patterns if fnmatch(unit.file_path, r.file_glob)),
                        profile.registration_patterns[0])
            rel, line = locate_insertion_point(index, rule)
            text = unit.code_text
            if rule.position == "before_close":
                text = "  " + _one_line(text)
            edits.append(CodeEdit(rel, line, insertion_mode(rule), text))
            continue
        path = unit.file_path
        if not os.path.isfile(os.path.join(index.root, path)):
            created.setdefault(path, []).append(unit.code_text.strip("\n"))
            continue
        anchor = profile.unit_anchor
        if anchor is not None and fnmatch(path, anchor.file_glob):
            try:
                rel, line = locate_insertion_point(index, anchor)
            except AnchorNotFoundError:
                rel = None
            if rel == path:
                edits.append(CodeEdit(rel, line, insertion_mode(anchor), unit.code_text.strip("\n") + "\n\n"))
                continue
        appended.setdefault(path, []).append(unit.code_text.strip("\n"))
    for path, codes in appended.items():
        with open(os.path.join(index.root, path), "rb") as f:
            count = len(source_lines(f.read().decode("utf-8", errors="replace")))
        edits.append(CodeEdit(path, count + 1, "insert_before", "\n" + "\n\n".join(codes)))
    for path, codes in created.items():
        edits.append(CodeEdit(path, 0, "create_file", "\n\n".join(codes)))
    return edits
