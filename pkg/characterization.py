"""
Function characterization.

Collects SQL-level declarations from documentation and catalog dumps, builds
the reference graph of each implemented function, intersects paired graphs
of one declaration group into placeholder templates, and extracts the
reference units (macros, helpers, classes) those graphs depend on.
"""

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from difflib import SequenceMatcher
from fnmatch import fnmatch
from itertools import combinations
from collections import deque
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from artifacts import read_document, write_document
from codebase_index import (
    SymbolEntry,
    SymbolIndex,
    classify_edges,
    lookup_symbol,
    parse_source,
    registration_entries,
    scan_repo,
)
from config import DbProfile
from errors import CharacterizationError, StaleIndexError, StaleReferenceError
from lexer import KEYWORDS, alpha_rename, format_tokens, placeholder, token_values, tokenize

logger = logging.getLogger(__name__)

REFERENCE_KINDS = ("macro", "function", "class_or_struct", "type_alias")
_KIND_OF_SYMBOL = {
    "macro": "macro",
    "function": "function",
    "struct_or_class": "class_or_struct",
    "type_alias": "type_alias",
}
_COMMENT_LINE = re.compile(r"^\s*(//|/\*|\*|\*/)")


@dataclass
class FunctionDeclaration:
    """SQL-level signature and metadata of one native function"""

    name: str
    category: str = ""
    description: str = ""
    arg_types: List[str] = field(default_factory=list)
    return_type: str = ""
    sql_examples: List[Tuple[str, str]] = field(default_factory=list)
    sources: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.name:
            raise ValueError("function declaration needs a name")

    @property
    def arity(self) -> int:
        return len(self.arg_types)

    @property
    def group_key(self) -> str:
        return group_key(self.category, self.arg_types)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["sql_examples"] = [list(e) for e in self.sql_examples]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FunctionDeclaration":
        return cls(
            name=data["name"],
            category=data.get("category", ""),
            description=data.get("description", ""),
            arg_types=list(data.get("arg_types", [])),
            return_type=data.get("return_type", ""),
            sql_examples=[tuple(e) for e in data.get("sql_examples", [])],
            sources=list(data.get("sources", [])),
        )


def group_key(category: str, arg_types: Iterable[str]) -> str:
    """Declaration-group key: category plus the unordered multiset of argument types"""
    return f"{category}|{','.join(sorted(arg_types))}"


@dataclass
class CodeBlock:
    span: Tuple[int, int]
    text: str
    tag: Optional[str] = None


@dataclass
class FunctionUnit:
    name: str
    file: str
    span: Tuple[int, int]
    blocks: List[CodeBlock]
    role: str = "implementation"

    @property
    def text(self) -> str:
        return "\n".join(b.text for b in self.blocks)

    @classmethod
    def from_entry(cls, index: SymbolIndex, entry: SymbolEntry) -> "FunctionUnit":
        """Unit for an index entry, split into blocks at blank lines"""
        lines = index.entry_text(entry).split("\n")
        start = entry.span[0]
        blocks = []
        block_start = 0
        for i, line in enumerate(lines):
            ends_block = i + 1 < len(lines) and not line.strip() and lines[i + 1].strip()
            if ends_block or i == len(lines) - 1:
                blocks.append(CodeBlock((start + block_start, start + i), "\n".join(lines[block_start:i + 1])))
                block_start = i + 1
        role = "registration" if entry.kind == "registration_entry" else "implementation"
        return cls(entry.name, entry.file, entry.span, blocks, role)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "file": self.file,
            "span": list(self.span),
            "role": self.role,
            "blocks": [{"span": list(b.span), "text": b.text, "tag": b.tag} for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FunctionUnit":
        blocks = [CodeBlock(tuple(b["span"]), b["text"], b.get("tag")) for b in data["blocks"]]
        return cls(data["name"], data["file"], tuple(data["span"]), blocks, data.get("role", "implementation"))


@dataclass
class ReferenceGraph:
    """Units of one function, rooted at its registration entry, in BFS order"""

    root: FunctionUnit
    nodes: List[FunctionUnit]
    edges: List[Tuple[str, str, str]] = field(default_factory=list)
    truncated: bool = False
    reason: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "root": self.root.name,
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "truncated": self.truncated,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ReferenceGraph":
        nodes = [FunctionUnit.from_dict(n) for n in data["nodes"]]
        root = next(n for n in nodes if n.name == data["root"])
        return cls(root, nodes, [tuple(e) for e in data["edges"]], data["truncated"], data["reason"])


@dataclass
class PrunedUnit:
    template_text: str
    placeholder_count: int
    support: int = 1
    origin_group: str = ""
    file: str = ""
    role: str = "implementation"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PrunedUnit":
        return cls(**data)


@dataclass
class ReferenceUnit:
    name: str
    kind: str
    pruned_content: str
    full_content_available: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ReferenceUnit":
        return cls(**data)


@dataclass
class GraphCaps:
    max_units: int = 50
    max_hops: int = 2

    def __post_init__(self):
        if self.max_units < 1 or self.max_hops < 1:
            raise ValueError("graph caps must be positive")


# -- declarations -------------------------------------------------------------

def _split_types(value: Union[str, Sequence[str], None]) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [t for t in re.split(r"[\s,]+", value.strip()) if t]
    return [str(t) for t in value]


def _examples_for(name: str, examples: List[Tuple[str, str]], where: str) -> List[Tuple[str, str]]:
    kept = []
    for sql, expected in examples:
        if re.search(rf"\b{re.escape(name)}\b", sql):
            kept.append((sql, expected))
        else:
            logger.warning(f"{where}: example '{sql}' does not mention {name}; dropped")
    return kept


def _parse_doc(doc_id: str, text: str, profile: DbProfile) -> List[FunctionDeclaration]:
    found = []
    for rule in profile.doc_extractor_rules:
        headers = list(re.finditer(rule.section_pattern, text, re.MULTILINE))
        for n, header in enumerate(headers):
            end = headers[n + 1].start() if n + 1 < len(headers) else len(text)
            body = text[header.end():end]
            groups = header.groupdict()
            name = groups["name"].strip()
            fields: Dict[str, Any] = {"description": "", "category": rule.category, "examples": []}
            for key, pattern in rule.field_patterns.items():
                if key == "example":
                    for m in re.finditer(pattern, body, re.MULTILINE):
                        fields["examples"].append((m.group("sql").strip(), m.group("expected").strip()))
                else:
                    m = re.search(pattern, body, re.MULTILINE)
                    if m:
                        fields[key] = m.group(key).strip()
            if not fields["description"]:
                first = next((l.strip() for l in body.splitlines() if l.strip()), "")
                fields["description"] = first
            if not fields["description"]:
                logger.warning(f"{doc_id}: section for {name} has no description; skipped")
                continue
            found.append(FunctionDeclaration(
                name=name,
                category=fields["category"],
                description=fields["description"],
                arg_types=_split_types(groups.get("args")),
                return_type=(groups.get("return_type") or "").strip(),
                sql_examples=_examples_for(name, fields["examples"], doc_id),
                sources=["documentation"],
            ))
    return found


def collect_doc_declarations(docs: Mapping[str, Union[str, bytes]], profile: DbProfile) -> List[FunctionDeclaration]:
    """
    Declarations from a documentation corpus.

    Args:
        docs: Document id mapped to its text
        profile: Supplies the extraction rules

    Returns:
        Declarations ordered by name; malformed documents are skipped with a warning
    """
    if not profile.doc_extractor_rules:
        raise ValueError(f"profile '{profile.name}' has no documentation extractor rules")
    declarations = []
    for doc_id in sorted(docs):
        content = docs[doc_id]
        try:
            text = content.decode("utf-8") if isinstance(content, bytes) else content
            declarations.extend(_parse_doc(doc_id, text, profile))
        except (UnicodeDecodeError, IndexError, KeyError, re.error) as e:
            logger.warning(f"MALFORMED DOCUMENT: {doc_id} skipped ({e})")
    return sorted(declarations, key=lambda d: d.name)


def collect_catalog_declarations(catalog_dump: Sequence[Mapping[str, Any]], profile: DbProfile) -> List[FunctionDeclaration]:
    """Declarations from catalog rows; rows missing a mapped column are skipped"""
    spec = profile.catalog_query_spec
    declarations = []
    for n, row in enumerate(catalog_dump):
        missing = [col for col in (spec.name, spec.arg_types, spec.return_type) if col not in row]
        if missing:
            logger.warning(f"catalog row {n} lacks {missing}; skipped")
            continue
        declarations.append(FunctionDeclaration(
            name=str(row[spec.name]),
            category=str(row.get(spec.category, "")) if spec.category else "",
            description=str(row.get(spec.description, "")) if spec.description else "",
            arg_types=_split_types(row[spec.arg_types]),
            return_type=str(row[spec.return_type]),
            sources=["catalog"],
        ))
    return declarations


def merge_declarations(doc: List[FunctionDeclaration], catalog: List[FunctionDeclaration]) -> List[FunctionDeclaration]:
    """
    Fuse documentation and catalog declarations matched on (name, arity).

    The catalog wins on types, documentation on description and examples.
    """
    unused = list(catalog)
    merged = []
    for d in doc:
        match = next((c for c in unused if c.name == d.name and c.arity == d.arity), None)
        if match is None:
            merged.append(d)
            continue
        unused.remove(match)
        if d.return_type and d.return_type != match.return_type:
            logger.warning(f"MERGE CONFLICT: {d.name} returns {d.return_type} in docs, "
                           f"{match.return_type} in catalog; catalog kept")
        merged.append(FunctionDeclaration(
            name=d.name,
            category=d.category or match.category,
            description=d.description or match.description,
            arg_types=list(match.arg_types),
            return_type=match.return_type,
            sql_examples=list(d.sql_examples),
            sources=sorted(set(d.sources) | set(match.sources)),
        ))
    merged.extend(unused)
    return sorted(merged, key=lambda d: d.name)


def group_by_declaration(decls: List[FunctionDeclaration]) -> Dict[str, List[FunctionDeclaration]]:
    groups: Dict[str, List[FunctionDeclaration]] = {}
    for decl in decls:
        groups.setdefault(decl.group_key, []).append(decl)
    return dict(sorted(groups.items()))


# -- reference graphs ---------------------------------------------------------

def _entry_for_unit(index: SymbolIndex, unit: FunctionUnit) -> SymbolEntry:
    for entry in index.entries.get(unit.name, []):
        if entry.file == unit.file and entry.span == unit.span:
            return entry
    raise StaleIndexError(f"unit {unit.name} ({unit.file}:{unit.span[0]}) is not in the index")


def build_reference_graph(decl: FunctionDeclaration, index: SymbolIndex, caps: GraphCaps,
                          exclude: Set[str] = frozenset()) -> ReferenceGraph:
    """
    Breadth-first graph of the units behind one SQL function.

    Args:
        decl: The declaration whose registration entry roots the graph
        index: Symbol index of the repository
        caps: Unit and hop limits
        exclude: Function names kept out of the graph (shared hubs)

    Raises:
        CharacterizationError: no registration entry declares decl.name
    """
    roots = registration_entries(index, decl.name)
    if not roots:
        raise CharacterizationError(f"no registration entry found for {decl.name}")
    root_entry = roots[0]
    root = FunctionUnit.from_entry(index, root_entry)
    nodes = [root]
    seen = {(root_entry.name, root_entry.file, root_entry.span)}
    edges: List[Tuple[str, str, str]] = []
    queue = deque([(root_entry, 0)])
    truncated, reason = False, ""
    while queue and not truncated:
        entry, depth = queue.popleft()
        if depth >= caps.max_hops:
            continue
        for name, relation in classify_edges(index, entry):
            if relation not in ("call", "inherit") or name in exclude:
                continue
            wanted = "function" if relation == "call" else "struct_or_class"
            kind = "invocation" if relation == "call" else "inheritance"
            for target in lookup_symbol(index, name):
                if target.kind != wanted:
                    continue
                key = (target.name, target.file, target.span)
                if key in seen:
                    edges.append((entry.name, target.name, kind))
                    continue
                if len(nodes) + 1 > caps.max_units:
                    truncated, reason = True, f"max_units={caps.max_units} reached"
                    break
                seen.add(key)
                nodes.append(FunctionUnit.from_entry(index, target))
                edges.append((entry.name, target.name, kind))
                queue.append((target, depth + 1))
            if truncated:
                break
    if truncated:
        logger.info(f"GRAPH TRUNCATED: {decl.name} ({reason})")
    return ReferenceGraph(root, nodes, sorted(set(edges)), truncated, reason)


# -- pruning ------------------------------------------------------------------

def prune_tokens(a: List[str], b: List[str]) -> Optional[Tuple[List[str], int]]:
    """
    Intersect two renamed token sequences.

    Returns:
        (template tokens, matched token count), or None when nothing matches
    """
    blocks = SequenceMatcher(None, a, b, autojunk=False).get_matching_blocks()
    out: List[str] = []
    ia = ib = 0
    matched = 0
    for i, j, size in blocks:
        if i > ia or j > ib:
            out.append(placeholder(sum(1 for t in out if t.startswith("{{BLANK_"))))
        out.extend(a[i:i + size])
        matched += size
        ia, ib = i + size, j + size
    if matched == 0:
        return None
    return out, matched


def _renamed(unit: FunctionUnit, globals_: Set[str]) -> List[str]:
    return alpha_rename(token_values(unit.text), globals_)


def _prune_pair(ua: FunctionUnit, ub: FunctionUnit, globals_: Set[str], origin_group: str) -> Tuple[Optional[PrunedUnit], int, int]:
    ta, tb = _renamed(ua, globals_), _renamed(ub, globals_)
    if tuple(ta) > tuple(tb):
        ta, tb = tb, ta
    result = prune_tokens(ta, tb)
    total = len(ta) + len(tb)
    if result is None:
        return None, 0, total
    template, matched = result
    count = sum(1 for t in template if t.startswith("{{BLANK_"))
    files = sorted({ua.file, ub.file})
    unit = PrunedUnit(format_tokens(template), count, 1, origin_group, files[0], ua.role)
    return unit, 2 * matched, total


def pairwise_prune(a: List[FunctionUnit], b: List[FunctionUnit], globals_: Iterable[str] = (),
                   origin_group: str = "") -> List[PrunedUnit]:
    """
    Templates shared by two aligned graph paths.

    Units are paired by position; locals are alpha-renamed before a
    token-level longest-common-blocks intersection, and divergent regions
    become {{BLANK_i}} slots. Templates without a fixed token are dropped.
    """
    templates, _, _ = _compare_paths(a, b, set(globals_), origin_group)
    return templates


def _compare_paths(a: List[FunctionUnit], b: List[FunctionUnit], globals_: Set[str],
                   origin_group: str) -> Tuple[List[PrunedUnit], int, int]:
    templates = []
    matched = total = 0
    for ua, ub in zip(a, b):
        if ua.role != ub.role:
            continue
        unit, m, t = _prune_pair(ua, ub, globals_, origin_group)
        matched += m
        total += t
        if unit is not None and unit.template_text not in {p.template_text for p in templates}:
            templates.append(unit)
    return templates, matched, total


def _rank(units: Iterable[PrunedUnit]) -> List[PrunedUnit]:
    return sorted(units, key=lambda p: (-p.support, -len(p.template_text), p.template_text))


def refine_paths(paths: List[List[FunctionUnit]], globals_: Iterable[str], k: int, seed: int = 0,
                 origin_group: str = "") -> List[PrunedUnit]:
    """
    Multi-round template refinement over the graph paths of one group.

    Each round compares max(1, n // 2) fresh random pairs; refinement ends
    after n rounds, when pairs run out, or after the first round whose
    pruned-token proportion falls below the previous round's.
    """
    n = len(paths)
    if n < 2 or k < 1:
        return []
    globals_ = set(globals_)
    pairs = list(combinations(range(n), 2))
    order = np.random.default_rng(seed).permutation(len(pairs))
    per_round = max(1, n // 2)
    found: Dict[Tuple[str, str, str], PrunedUnit] = {}
    previous = None
    cursor = 0
    for round_no in range(n):
        batch = order[cursor:cursor + per_round]
        if len(batch) == 0:
            break
        cursor += per_round
        matched = total = 0
        for pick in batch:
            i, j = pairs[int(pick)]
            templates, m, t = _compare_paths(paths[i], paths[j], globals_, origin_group)
            matched += m
            total += t
            for unit in templates:
                key = (unit.template_text, unit.file, unit.role)
                if key in found:
                    found[key].support += 1
                else:
                    found[key] = unit
        proportion = matched / total if total else 0.0
        logger.debug(f"refine round {round_no + 1}: proportion {proportion:.4f}")
        if previous is not None and proportion < previous:
            break
        previous = proportion
    return _rank(found.values())[:k]


def multi_round_refine(group: List[FunctionDeclaration], index: SymbolIndex, k: int, seed: int = 0,
                       caps: Optional[GraphCaps] = None, exclude: Set[str] = frozenset()) -> List[PrunedUnit]:
    """
    Top-k templates for one declaration group.

    Args:
        group: Declarations sharing a group key
        index: Symbol index
        k: Number of templates to return
        seed: Seed of the pair sampler

    Returns:
        Templates ranked by support, then longer text, then lexical order
    """
    if len(group) < 2:
        return []
    caps = caps or GraphCaps()
    paths = []
    seen = set()
    for decl in group:
        if decl.name in seen:
            continue
        seen.add(decl.name)
        try:
            paths.append(build_reference_graph(decl, index, caps, exclude).nodes)
        except CharacterizationError:
            continue
    return refine_paths(paths, index.global_names(), k, seed, group[0].group_key)


# -- references ---------------------------------------------------------------

def _full_text(index: SymbolIndex, entry: SymbolEntry) -> str:
    """Entry text preceded by its leading comment block"""
    lines = index.read_lines(entry.file)
    start, end = entry.span
    first = start - 1
    while first > 0 and _COMMENT_LINE.match(lines[first - 1]):
        first -= 1
    return "\n".join(lines[first:end])


def _pick_entry(index: SymbolIndex, name: str, relation: str) -> Optional[SymbolEntry]:
    preferred = {"macro": "macro", "call": "function", "scope": "struct_or_class", "inherit": "struct_or_class"}
    entries = [e for e in lookup_symbol(index, name) if e.kind in _KIND_OF_SYMBOL]
    for entry in entries:
        if entry.kind == preferred.get(relation):
            return entry
    return entries[0] if entries else None


@dataclass
class PruneRules:
    """Pruning action per reference kind: keep, declarations_only or signature_only"""

    language: str = "c"
    actions: Dict[str, str] = field(default_factory=lambda: {
        "macro": "keep",
        "type_alias": "keep",
        "class_or_struct": "declarations_only",
        "function": "signature_only",
    })


def _method_bodies(node, inside_class: bool, out: List[Tuple[int, int]]) -> None:
    if node.type == "function_definition" and inside_class:
        body = node.child_by_field_name("body")
        if body is not None:
            out.append((body.start_byte, body.end_byte))
            return
    for child in node.children:
        _method_bodies(child, inside_class or node.type == "field_declaration_list", out)


def _declarations_only(content: str, language: str) -> str:
    data = content.encode("utf-8")
    spans: List[Tuple[int, int]] = []
    _method_bodies(parse_source(data, language).root_node, False, spans)
    for start, end in sorted(spans, reverse=True):
        data = data[:start].rstrip() + b";" + data[end:]
    return data.decode("utf-8")


def _signature_only(content: str, language: str) -> str:
    data = content.encode("utf-8")
    stack = [parse_source(data, language).root_node]
    while stack:
        node = stack.pop(0)
        if node.type == "function_definition":
            body = node.child_by_field_name("body")
            if body is not None:
                return data[:body.start_byte].decode("utf-8").rstrip() + ";"
        stack.extend(node.children)
    brace = content.find("{")
    return content[:brace].rstrip() + ";" if brace > 0 else content


def prune_reference(r: ReferenceUnit, rules: PruneRules) -> ReferenceUnit:
    """Apply the type-specific pruning rule for r.kind"""
    if r.kind not in rules.actions:
        raise ValueError(f"pruning rules do not cover kind '{r.kind}'")
    if not r.full_content_available:
        return r
    action = rules.actions[r.kind]
    content = r.pruned_content
    if action == "declarations_only":
        content = _declarations_only(content, rules.language)
    elif action == "signature_only":
        content = _signature_only(content, rules.language)
    if not content.strip():
        content = r.pruned_content
    return ReferenceUnit(r.name, r.kind, content, r.full_content_available)


def _unresolved_calls(index: SymbolIndex, entry: SymbolEntry, known: Set[str]) -> List[str]:
    values = [t.value for t in tokenize(index.entry_text(entry)) if t.kind in ("ident", "op")]
    names = []
    for i, value in enumerate(values[:-1]):
        if values[i + 1] != "(" or value in KEYWORDS or value in known or value in index:
            continue
        if i > 0 and values[i - 1] in (".", "->", "::"):
            continue
        if value not in names and value != entry.bare_name and re.match(r"[A-Za-z_]", value):
            names.append(value)
    return names


def extract_references(graph: ReferenceGraph, index: SymbolIndex, rules: Optional[PruneRules] = None,
                       known_externals: Iterable[str] = ()) -> List[ReferenceUnit]:
    """
    Reference units used by the nodes of a graph.

    Unresolvable call targets are carried as units with
    full_content_available unset so validation can report them.
    """
    if not graph.nodes:
        raise ValueError("graph has no nodes")
    rules = rules or PruneRules()
    in_graph = {n.name for n in graph.nodes}
    known = set(known_externals)
    found: Dict[str, ReferenceUnit] = {}
    for node in graph.nodes:
        entry = _entry_for_unit(index, node)
        for name, relation in classify_edges(index, entry):
            if name in found or (relation in ("call", "inherit") and name in in_graph):
                continue
            target = _pick_entry(index, name, relation)
            if target is None:
                continue
            raw = ReferenceUnit(name, _KIND_OF_SYMBOL[target.kind], _full_text(index, target))
            found[name] = prune_reference(raw, rules)
        for name in _unresolved_calls(index, entry, known):
            if name not in found:
                kind = "macro" if name.isupper() else "function"
                found[name] = ReferenceUnit(name, kind, f"/* unresolved reference: {name} */", False)
    return [found[name] for name in sorted(found)]


def expand_reference(r: ReferenceUnit, index: SymbolIndex) -> str:
    """
    Full source text of a reference unit.

    Raises:
        StaleReferenceError: unresolved reference or symbol gone from the index
    """
    if not r.full_content_available:
        raise StaleReferenceError(f"{r.name} was never resolved in the repository")
    wanted = {k for k, v in _KIND_OF_SYMBOL.items() if v == r.kind}
    for entry in lookup_symbol(index, r.name):
        if entry.kind in wanted:
            try:
                return _full_text(index, entry)
            except StaleIndexError as e:
                raise StaleReferenceError(f"{r.name}: {e}") from e
    raise StaleReferenceError(f"{r.name} is no longer in the index")


# -- whole-repository characterization ----------------------------------------

@dataclass
class CharacterizationDocument:
    declarations: List[FunctionDeclaration] = field(default_factory=list)
    graphs: Dict[str, ReferenceGraph] = field(default_factory=dict)
    pruned_units: List[PrunedUnit] = field(default_factory=list)
    reference_units: Dict[str, List[ReferenceUnit]] = field(default_factory=dict)
    difficulty: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def declaration(self, name: str) -> Optional[FunctionDeclaration]:
        return next((d for d in self.declarations if d.name == name), None)

    def implemented(self) -> List[FunctionDeclaration]:
        """Declarations with a characterized graph, one per name"""
        seen = set()
        out = []
        for decl in self.declarations:
            if decl.name in self.graphs and decl.name not in seen:
                seen.add(decl.name)
                out.append(decl)
        return out

    def to_payload(self) -> Dict[str, Any]:
        return {
            "declarations": [d.to_dict() for d in self.declarations],
            "graphs": [dict(function=name, **g.to_dict()) for name, g in sorted(self.graphs.items())],
            "pruned_units": [p.to_dict() for p in self.pruned_units],
            "reference_units": [
                {"function": name, "units": [r.to_dict() for r in refs]}
                for name, refs in sorted(self.reference_units.items())
            ],
            "difficulty": [dict(function=name, **stats) for name, stats in sorted(self.difficulty.items())],
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "CharacterizationDocument":
        graphs = {}
        for data in payload.get("graphs", []):
            data = dict(data)
            graphs[data.pop("function")] = ReferenceGraph.from_dict(data)
        difficulty = {}
        for data in payload.get("difficulty", []):
            data = dict(data)
            difficulty[data.pop("function")] = data
        return cls(
            declarations=[FunctionDeclaration.from_dict(d) for d in payload.get("declarations", [])],
            graphs=graphs,
            pruned_units=[PrunedUnit.from_dict(p) for p in payload.get("pruned_units", [])],
            reference_units={
                item["function"]: [ReferenceUnit.from_dict(r) for r in item["units"]]
                for item in payload.get("reference_units", [])
            },
            difficulty=difficulty,
        )


def save_characterization(doc: CharacterizationDocument, path: str) -> str:
    return write_document(path, "characterization", doc.to_payload())


def load_characterization(path: str) -> CharacterizationDocument:
    return CharacterizationDocument.from_payload(read_document(path, "characterization"))


def load_doc_corpus(root: str, profile: DbProfile) -> Dict[str, bytes]:
    """Documentation files under root matching the profile's doc globs"""
    corpus = {}
    for dirpath, _, filenames in os.walk(root):
        for filename in filenames:
            rel = os.path.relpath(os.path.join(dirpath, filename), root).replace(os.sep, "/")
            if any(fnmatch(rel, g) for g in profile.doc_globs):
                with open(os.path.join(root, rel), "rb") as f:
                    corpus[rel] = f.read()
    return corpus


def load_catalog(path: Optional[str]) -> List[Dict[str, Any]]:
    if not path or not os.path.isfile(path):
        return []
    with open(path, "r", encoding="utf-8") as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise CharacterizationError(f"catalog dump {path} must be a list of rows")
    return rows


def _hub_names(graphs: Dict[str, ReferenceGraph], threshold: int) -> Set[str]:
    counts: Dict[str, int] = {}
    for graph in graphs.values():
        for node in graph.nodes[1:]:
            counts[node.name] = counts.get(node.name, 0) + 1
    return {name for name, count in counts.items() if count > threshold}


def characterize_repo(root: str, profile: DbProfile, docs: Mapping[str, Union[str, bytes]],
                      catalog: Sequence[Mapping[str, Any]], caps: Optional[GraphCaps] = None, top_k: int = 3,
                      seed: int = 0, index: Optional[SymbolIndex] = None) -> Tuple[CharacterizationDocument, SymbolIndex]:
    """
    Characterize every declared function of a repository.

    Returns:
        The characterization document and the index it was built from
    """
    caps = caps or GraphCaps()
    index = index or scan_repo(root, profile)
    doc_decls = collect_doc_declarations(docs, profile) if profile.doc_extractor_rules else []
    declarations = merge_declarations(doc_decls, collect_catalog_declarations(catalog, profile))
    result = CharacterizationDocument(declarations=declarations)
    if len(index) == 0:
        return result, index

    def build_all(exclude: Set[str]) -> Dict[str, ReferenceGraph]:
        graphs = {}
        for decl in declarations:
            if decl.name in graphs:
                continue
            try:
                graphs[decl.name] = build_reference_graph(decl, index, caps, exclude)
            except CharacterizationError:
                logger.info(f"NOT IMPLEMENTED: {decl.name} is declared but has no registration entry")
        return graphs

    graphs = build_all(set())
    hubs: Set[str] = set()
    if profile.hub_threshold > 0:
        hubs = _hub_names(graphs, profile.hub_threshold)
        if hubs:
            logger.info(f"HUB UNITS EXCLUDED: {sorted(hubs)}")
            graphs = build_all(hubs)
    result.graphs = graphs

    rules = PruneRules(language=profile.language)
    for name, graph in graphs.items():
        refs = extract_references(graph, index, rules, profile.known_externals)
        result.reference_units[name] = refs
        result.difficulty[name] = {
            "units": len(graph.nodes),
            "lines": sum(n.span[1] - n.span[0] + 1 for n in graph.nodes),
            "references": len(refs),
        }

    for key, group in group_by_declaration(result.implemented()).items():
        if len(group) >= 2:
            result.pruned_units.extend(multi_round_refine(group, index, top_k, seed, caps, hubs))
    logger.info(f"CHARACTERIZED: {len(graphs)} functions, {len(result.pruned_units)} templates")
    return result, index
