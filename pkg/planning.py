"""
Coding plans for a new native function.

Candidate plans are sampled from the LLM with the references of existing
functions of the same category, scored by a weighted min-max normalised
penalty (fabricated references, bad file locations, unit count), then
sanitized and filtered against a threshold.
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from artifacts import write_document
from characterization import REFERENCE_KINDS, CharacterizationDocument, FunctionDeclaration, ReferenceUnit
from codebase_index import SymbolIndex
from config import DbProfile
from errors import LLMError, PlanGenerationError, TranscriptMissError
from llm_gateway import LLMGateway, extract_json

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.4, 0.4, 0.2)

PLAN_SYSTEM = (
    "You are a database kernel engineer. You plan how a new native SQL function is implemented "
    "inside an existing database codebase. Answer with a single JSON object and nothing else."
)


@dataclass
class PlanBlock:
    description: str
    candidate_refs: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError("plan block needs a description")


@dataclass
class PlannedUnit:
    unit_name: str
    file_path: str
    blocks: List[PlanBlock]
    create_file: bool = False

    def __post_init__(self):
        if not self.blocks:
            raise ValueError(f"planned unit {self.unit_name} has no blocks")

    def refs(self) -> List[str]:
        return [ref for block in self.blocks for ref in block.candidate_refs]


@dataclass
class CodingPlan:
    function_name: str
    units: List[PlannedUnit]
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.units:
            raise ValueError(f"plan for {self.function_name} has no units")
        names = [u.unit_name for u in self.units]
        if len(names) != len(set(names)):
            raise ValueError(f"plan for {self.function_name} repeats a unit name")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CodingPlan":
        units = [
            PlannedUnit(
                u["unit_name"],
                u["file_path"],
                [PlanBlock(b["description"], list(b.get("candidate_refs", []))) for b in u["blocks"]],
                bool(u.get("create_file", False)),
            )
            for u in data["units"]
        ]
        return cls(data["function_name"], units, dict(data.get("provenance", {})))


@dataclass
class PlanScore:
    v1: int
    v2: int
    v3: int
    n1: float
    n2: float
    n3: float
    r: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# -- LLM output schema --------------------------------------------------------

class _BlockSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    description: str = Field(min_length=1)
    candidate_refs: List[str] = Field(default_factory=list)


class _UnitSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    unit_name: str = Field(min_length=1)
    file_path: str = Field(min_length=1)
    create_file: bool = False
    blocks: List[_BlockSchema] = Field(min_length=1)


class _PlanSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    function_name: str = Field(min_length=1)
    units: List[_UnitSchema] = Field(min_length=1)

    @model_validator(mode="after")
    def check_unique_units(self):
        names = [u.unit_name for u in self.units]
        if len(names) != len(set(names)):
            raise ValueError("unit names must be unique within a plan")
        return self


# -- references ---------------------------------------------------------------

def gather_category_references(decl: FunctionDeclaration, ch: CharacterizationDocument) -> List[ReferenceUnit]:
    """
    Reference units used by the existing functions of decl's category.

    Returns:
        Units deduplicated by name, grouped by kind, names sorted within a kind.
        Unresolved references are left out.
    """
    peers = [d for d in ch.implemented() if d.category == decl.category and d.name != decl.name]
    if not decl.category or not peers:
        logger.warning(f"UNKNOWN CATEGORY: no implemented functions in category '{decl.category}' "
                       f"for {decl.name}; planning without references")
        return []
    found: Dict[str, ReferenceUnit] = {}
    for peer in peers:
        for ref in ch.reference_units.get(peer.name, []):
            if ref.full_content_available:
                found.setdefault(ref.name, ref)
    return sorted(found.values(), key=lambda r: (REFERENCE_KINDS.index(r.kind), r.name))


def describe_declaration(decl: FunctionDeclaration) -> str:
    """Prompt lines describing a declaration"""
    lines = [
        f"Function: {decl.name}",
        f"Category: {decl.category or 'unknown'}",
        f"Signature: {decl.name}({', '.join(decl.arg_types)}) -> {decl.return_type or 'unknown'}",
    ]
    if decl.description:
        lines.append(f"Description: {decl.description}")
    if decl.sql_examples:
        lines.append("Examples:")
        lines.extend(f"  {sql} -> {expected}" for sql, expected in decl.sql_examples)
    return "\n".join(lines)


def describe_references(refs: Sequence[ReferenceUnit]) -> str:
    if not refs:
        return "(none)"
    return "\n".join(f"[{r.kind}] {r.name}\n{r.pruned_content}" for r in refs)


def describe_plan(plan: Optional[CodingPlan]) -> str:
    if plan is None:
        return "(none)"
    lines = []
    for unit in plan.units:
        created = " (new file)" if unit.create_file else ""
        lines.append(f"unit {unit.unit_name} in {unit.file_path}{created}")
        for block in unit.blocks:
            refs = f" [refs: {', '.join(block.candidate_refs)}]" if block.candidate_refs else ""
            lines.append(f"  - {block.description}{refs}")
    return "\n".join(lines)


# -- generation ---------------------------------------------------------------

def plan_prompt_text(decl: FunctionDeclaration, refs: Sequence[ReferenceUnit]) -> str:
    return "\n".join([
        describe_declaration(decl),
        "",
        "Reference units already in the repository (macros, helpers, types used by functions of the same category):",
        describe_references(refs),
        "",
        "Write a coding plan. List every function unit that must be written, with its repository-relative",
        "file path, and break each unit into steps. For each step name the reference units it relies on.",
        "Use only reference names that exist in the repository.",
        'Answer with JSON: {"function_name": "...", "units": [{"unit_name": "...", "file_path": "...",',
        '"create_file": false, "blocks": [{"description": "Step 1: ...", "candidate_refs": ["..."]}]}]}',
    ])


def parse_plan(text: str, decl: FunctionDeclaration, provenance: Dict[str, Any]) -> CodingPlan:
    """
    Parse one completion into a plan.

    Raises:
        ValueError: no JSON, schema violation, or a plan for another function
    """
    try:
        schema = _PlanSchema.model_validate(extract_json(text))
    except ValidationError as e:
        raise ValueError(f"plan schema violation: {e.error_count()} error(s), first: {e.errors()[0]['msg']}")
    if schema.function_name != decl.name:
        raise ValueError(f"plan is for {schema.function_name}, not {decl.name}")
    units = [
        PlannedUnit(u.unit_name, u.file_path, [PlanBlock(b.description, list(b.candidate_refs)) for b in u.blocks],
                    u.create_file)
        for u in schema.units
    ]
    return CodingPlan(decl.name, units, provenance)


def generate_candidate_plans(decl: FunctionDeclaration, refs: Sequence[ReferenceUnit], n: int,
                             llm: LLMGateway) -> Tuple[List[CodingPlan], List[Dict[str, Any]]]:
    """
    Sample n independent candidate plans.

    Args:
        decl: Declaration of the function to plan
        refs: Category reference units shown to the model
        n: Ensemble size
        llm: Gateway issuing the samples concurrently

    Returns:
        (plans, drops); each drop records the sample index and the reason

    Raises:
        PlanGenerationError: every sample was unusable
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    prompt = llm.prompt(PLAN_SYSTEM, plan_prompt_text(decl, refs), "plan")
    try:
        batch = llm.complete_many(prompt, n)
    except TranscriptMissError:
        raise
    except LLMError as e:
        raise PlanGenerationError(f"no plan samples for {decl.name}: {e}") from e
    drops = [{"sample": sample, "reason": f"LLM error: {error}"} for sample, error in sorted(batch.errors.items())]
    plans = []
    for sample, text in zip(batch.samples, batch.texts):
        try:
            plans.append(parse_plan(text, decl, {"sample": sample, "model": llm.settings.model}))
        except ValueError as e:
            logger.warning(f"PLAN DROPPED: {decl.name} sample {sample}: {e}")
            drops.append({"sample": sample, "reason": str(e)})
    drops.sort(key=lambda d: d["sample"])
    if not plans:
        raise PlanGenerationError(f"all {n} plan samples for {decl.name} were unusable")
    logger.info(f"PLANS GENERATED: {len(plans)}/{n} for {decl.name}")
    return plans, drops


# -- scoring ------------------------------------------------------------------

def location_error(file_path: str, root: str, profile: DbProfile, create_ok: bool = False) -> Optional[str]:
    """Why a unit's file path is unusable, or None"""
    norm = os.path.normpath(file_path).replace(os.sep, "/")
    if os.path.isabs(file_path) or norm == ".." or norm.startswith("../"):
        return f"{file_path} escapes the repository root"
    if not profile.matches_sources(norm):
        return f"{file_path} is outside the source directories of profile '{profile.name}'"
    if not create_ok and not os.path.isfile(os.path.join(root, norm)):
        return f"{file_path} does not exist and is not marked create_file"
    return None


def penalty_vector(plan: CodingPlan, index: SymbolIndex, root: str, profile: DbProfile) -> Tuple[int, int, int]:
    """(unresolvable references, mislocated units, listed units) of a raw plan"""
    v1 = sum(1 for unit in plan.units for ref in unit.refs() if ref not in index)
    v2 = sum(1 for unit in plan.units if location_error(unit.file_path, root, profile, unit.create_file))
    return v1, v2, len(plan.units)


def score_vectors(vectors: Sequence[Sequence[float]], weights: Sequence[float] = DEFAULT_WEIGHTS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Min-max normalise penalty vectors over a batch and weight them.

    Each column becomes 1 - (v - min) / (max - min), or 1.0 where the batch
    minimum equals its maximum. The total is the weighted mean of the
    normalised columns.

    Returns:
        (normalised matrix of shape (k, 3), totals of shape (k,))
    """
    v = np.asarray(vectors, dtype=float)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("score_vectors needs a non-empty (k, 3) batch")
    w = np.asarray(weights, dtype=float)
    if w.shape != (v.shape[1],) or np.any(w <= 0):
        raise ValueError("one positive weight per penalty column is required")
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = hi - lo
    flat = span == 0
    normalized = np.where(flat, 1.0, 1.0 - (v - lo) / np.where(flat, 1.0, span))
    return normalized, normalized @ w / w.sum()


def score_plans(plans: Sequence[CodingPlan], index: SymbolIndex, root: str, profile: DbProfile,
                weights: Sequence[float] = DEFAULT_WEIGHTS) -> List[PlanScore]:
    """
    Score a batch of plans; normalisation is relative to the batch.

    Raises:
        ValueError: empty batch
    """
    if not plans:
        raise ValueError("score_plans needs at least one plan")
    raw = [penalty_vector(plan, index, root, profile) for plan in plans]
    normalized, totals = score_vectors(raw, weights)
    return [
        PlanScore(v[0], v[1], v[2], float(n[0]), float(n[1]), float(n[2]), float(r))
        for v, n, r in zip(raw, normalized, totals)
    ]


def _sanitized(plan: CodingPlan, index: SymbolIndex, root: str, profile: DbProfile,
               keep_units: bool) -> Optional[CodingPlan]:
    units = []
    for unit in plan.units:
        problem = location_error(unit.file_path, root, profile, unit.create_file)
        if problem and not keep_units:
            logger.info(f"PLAN SANITIZED: sample {plan.provenance.get('sample')} unit {unit.unit_name} removed ({problem})")
            continue
        blocks = []
        for block in unit.blocks:
            kept = [ref for ref in block.candidate_refs if ref in index]
            for ref in block.candidate_refs:
                if ref not in index:
                    logger.info(f"PLAN SANITIZED: sample {plan.provenance.get('sample')} reference {ref} "
                                f"does not resolve; removed")
            blocks.append(PlanBlock(block.description, kept))
        units.append(PlannedUnit(unit.unit_name, unit.file_path, blocks, unit.create_file))
    if not units:
        return None
    return CodingPlan(plan.function_name, units, dict(plan.provenance))


def sanitize_and_filter(plans: Sequence[CodingPlan], scores: Sequence[PlanScore], index: SymbolIndex, root: str,
                        profile: DbProfile, threshold: float = 0.5) -> List[CodingPlan]:
    """
    Drop plans scoring below threshold and strip their invalid elements.

    Unresolvable references and mislocated units are removed from every
    surviving plan. When no plan would survive, the best-scoring one is kept
    after the same sanitation; its mislocated units stay only when dropping
    them would leave the plan empty.

    Returns:
        Plans ordered by score, best first
    """
    if len(plans) != len(scores):
        raise ValueError("plans and scores are not aligned")
    if not plans:
        return []
    order = sorted(range(len(plans)), key=lambda i: -scores[i].r)
    survivors = []
    for i in order:
        if scores[i].r < threshold:
            logger.info(f"PLAN DROPPED: sample {plans[i].provenance.get('sample')} scored "
                        f"r={scores[i].r:.2f} < {threshold:.2f}")
            continue
        plan = _sanitized(plans[i], index, root, profile, keep_units=False)
        if plan is None:
            logger.info(f"PLAN DROPPED: sample {plans[i].provenance.get('sample')} has no valid unit left")
            continue
        survivors.append(plan)
    if not survivors:
        best = order[0]
        logger.warning(f"PLAN FALLBACK: no plan reached {threshold:.2f}; keeping sample "
                       f"{plans[best].provenance.get('sample')} (r={scores[best].r:.2f})")
        fallback = _sanitized(plans[best], index, root, profile, keep_units=False)
        survivors.append(fallback or _sanitized(plans[best], index, root, profile, keep_units=True))
    return survivors


def plans_payload(kept: Sequence[CodingPlan], scores: Sequence[PlanScore], drops: Sequence[Dict[str, Any]],
                  candidates: Sequence[CodingPlan]) -> Dict[str, Any]:
    return {
        "plans": [p.to_dict() for p in kept],
        "candidates": [p.to_dict() for p in candidates],
        "scores": [s.to_dict() for s in scores],
        "dropped": list(drops),
    }


def save_plans(path: str, payload: Dict[str, Any]) -> str:
    return write_document(path, "plans", payload)
