"""
Symbol index over a target database repository.

Definitions come from a tree-sitter pass per file; registration entries come
from the profile's anchor rules; reference edges come from a lexical pass
over each entry's text. Edits are applied as full-file rewrites with a
byte-exact rollback token.
"""

import hashlib
import logging
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fnmatch import fnmatch
from typing import Dict, List, Optional, Tuple, Union

import tree_sitter_c
import tree_sitter_cpp
from tree_sitter import Language, Node, Parser, Tree

from artifacts import read_document, write_document
from config import AnchorRule, DbProfile
from errors import (
    AnchorNotFoundError,
    EditApplyError,
    EditCollisionError,
    StaleIndexError,
)
from lexer import KEYWORDS, tokenize

logger = logging.getLogger(__name__)

SYMBOL_KINDS = ("function", "macro", "struct_or_class", "registration_entry", "type_alias")
EDIT_MODES = ("insert_before", "insert_after", "create_file")

LANGUAGES = {
    "c": Language(tree_sitter_c.language()),
    "cpp": Language(tree_sitter_cpp.language()),
}

_SKIP_DIRS = {".git", "__pycache__", ".venv", "node_modules"}


def parse_source(source: bytes, grammar: str) -> Tree:
    """Parse source bytes with a fresh parser (parsers are not shared across threads)"""
    parser = Parser(LANGUAGES[grammar])
    return parser.parse(source)


def node_text(node: Node) -> str:
    return node.text.decode("utf-8", errors="replace")


def node_lines(node: Node) -> Tuple[int, int]:
    """1-based inclusive line span of a node"""
    start = node.start_point[0] + 1
    end_row, end_col = node.end_point
    if end_col == 0 and end_row > node.start_point[0]:
        end_row -= 1
    return start, end_row + 1


def content_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def source_lines(text: str) -> List[str]:
    """Split on line feeds only, so line numbers agree with tree-sitter rows"""
    lines = [line[:-1] if line.endswith("\r") else line for line in text.split("\n")]
    if lines[-1] == "":
        lines.pop()
    return lines


def _byte_lines(data: bytes) -> List[bytes]:
    parts = data.split(b"\n")
    lines = [part + b"\n" for part in parts[:-1]]
    if parts[-1]:
        lines.append(parts[-1] + b"\n")
    return lines


@dataclass(frozen=True)
class SymbolEntry:
    name: str
    kind: str
    file: str
    span: Tuple[int, int]
    signature_text: str

    @property
    def bare_name(self) -> str:
        return self.name.rsplit("::", 1)[-1]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["span"] = list(self.span)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "SymbolEntry":
        return cls(data["name"], data["kind"], data["file"], tuple(data["span"]), data["signature_text"])


@dataclass
class SymbolIndex:
    """Exact-name multimap of the symbols of one repository"""

    root: str
    entries: Dict[str, List[SymbolEntry]] = field(default_factory=dict)
    file_digests: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def all_entries(self) -> List[SymbolEntry]:
        return sorted((e for group in self.entries.values() for e in group),
                      key=lambda e: (e.file, e.span[0], e.name))

    def kinds_of(self, name: str) -> List[str]:
        return [e.kind for e in self.entries.get(name, [])]

    def global_names(self) -> set:
        """Bare names of every indexed symbol"""
        return {e.bare_name for group in self.entries.values() for e in group}

    def read_lines(self, rel_path: str) -> List[str]:
        """Lines of an indexed file, checked against its recorded digest"""
        path = os.path.join(self.root, rel_path)
        try:
            with open(path, "rb") as f:
                data = f.read()
        except FileNotFoundError:
            raise StaleIndexError(f"{rel_path} is indexed but no longer exists")
        if rel_path in self.file_digests and self.file_digests[rel_path] != content_digest(data):
            raise StaleIndexError(f"{rel_path} changed since it was indexed")
        return source_lines(data.decode("utf-8", errors="replace"))

    def entry_text(self, entry: SymbolEntry) -> str:
        lines = self.read_lines(entry.file)
        start, end = entry.span
        if end > len(lines):
            raise StaleIndexError(f"{entry.name} spans past the end of {entry.file}")
        return "\n".join(lines[start - 1:end])

    def to_payload(self) -> Dict:
        return {
            "entries": [e.to_dict() for e in sorted(self.all_entries(), key=lambda e: (e.name, e.file, e.span))],
            "file_digests": dict(sorted(self.file_digests.items())),
        }

    @classmethod
    def from_payload(cls, root: str, payload: Dict) -> "SymbolIndex":
        index = cls(root=root, file_digests=dict(payload["file_digests"]))
        for data in payload["entries"]:
            entry = SymbolEntry.from_dict(data)
            index.entries.setdefault(entry.name, []).append(entry)
        for group in index.entries.values():
            group.sort(key=lambda e: (e.file, e.span[0]))
        return index


def save_index(index: SymbolIndex, path: str) -> str:
    return write_document(path, "symbol_index", index.to_payload())


def load_index(path: str, root: str) -> SymbolIndex:
    return SymbolIndex.from_payload(root, read_document(path, "symbol_index"))


# -- scanning ---------------------------------------------------------------

def declarator_name(node: Optional[Node]) -> Optional[str]:
    while node is not None:
        if node.type in ("identifier", "field_identifier", "type_identifier", "destructor_name",
                         "operator_name"):
            return node_text(node)
        if node.type == "qualified_identifier":
            node = node.child_by_field_name("name")
            continue
        if node.type == "template_function":
            node = node.child_by_field_name("name")
            continue
        inner = node.child_by_field_name("declarator")
        if inner is None:
            named = [c for c in node.named_children if c.type not in ("type_qualifier", "ms_pointer_modifier")]
            inner = named[0] if named else None
        node = inner
    return None


def _signature(node: Node) -> str:
    body = node.child_by_field_name("body")
    end = body.start_byte if body is not None else node.end_byte
    text = node.text[: end - node.start_byte].decode("utf-8", errors="replace")
    return " ".join(text.split())


def _record_type(node: Node, rel: str, out: List[SymbolEntry], span_node: Optional[Node] = None) -> Optional[str]:
    if node.type not in ("struct_specifier", "class_specifier", "union_specifier"):
        return None
    name = node.child_by_field_name("name")
    if name is None or node.child_by_field_name("body") is None:
        return None
    label = node_text(name)
    keyword = node.type.split("_")[0]
    out.append(SymbolEntry(label, "struct_or_class", rel, node_lines(span_node or node), f"{keyword} {label}"))
    return label


def _walk_definitions(node: Node, rel: str, out: List[SymbolEntry]) -> None:
    for child in node.named_children:
        t = child.type
        if t == "function_definition":
            name = declarator_name(child.child_by_field_name("declarator"))
            if name:
                out.append(SymbolEntry(name, "function", rel, node_lines(child), _signature(child)))
        elif t in ("preproc_def", "preproc_function_def"):
            name = child.child_by_field_name("name")
            if name is not None:
                first = node_text(child).splitlines()[0].strip()
                out.append(SymbolEntry(node_text(name), "macro", rel, node_lines(child), first))
        elif t in ("struct_specifier", "class_specifier", "union_specifier"):
            _record_type(child, rel, out)
        elif t == "declaration":
            type_node = child.child_by_field_name("type")
            if type_node is not None:
                _record_type(type_node, rel, out, span_node=child)
        elif t == "type_definition":
            type_node = child.child_by_field_name("type")
            record = _record_type(type_node, rel, out, span_node=child) if type_node is not None else None
            for declarator in child.children_by_field_name("declarator"):
                alias = declarator_name(declarator)
                if alias and alias != record:
                    first = " ".join(node_text(child).split())
                    out.append(SymbolEntry(alias, "type_alias", rel, node_lines(child), first))
        elif t in ("namespace_definition", "linkage_specification"):
            body = child.child_by_field_name("body")
            if body is not None:
                _walk_definitions(body, rel, out)
        elif t in ("template_declaration", "preproc_ifdef", "preproc_if", "preproc_else", "preproc_elif",
                   "declaration_list"):
            _walk_definitions(child, rel, out)


def _registration_entries(lines: List[str], rel: str, profile: DbProfile) -> List[SymbolEntry]:
    out = []
    for rule in profile.registration_patterns:
        if not rule.entry_pattern or not fnmatch(rel, rule.file_glob):
            continue
        anchor_re = re.compile(rule.anchor_pattern)
        close_re = re.compile(rule.close_pattern) if rule.close_pattern else None
        entry_re = re.compile(rule.entry_pattern)
        i = 0
        while i < len(lines):
            if not anchor_re.search(lines[i]):
                i += 1
                continue
            j = i + 1
            while j < len(lines) and not (close_re and close_re.search(lines[j])):
                match = entry_re.search(lines[j])
                if match:
                    owner = rule.owner or rule.id
                    out.append(SymbolEntry(f"{owner}::{match.group('name')}", "registration_entry", rel,
                                           (j + 1, j + 1), lines[j].strip()))
                j += 1
            i = j + 1
    return out


def _scan_file(root: str, rel: str, profile: DbProfile) -> Tuple[str, str, List[SymbolEntry]]:
    with open(os.path.join(root, rel), "rb") as f:
        data = f.read()
    entries: List[SymbolEntry] = []
    # catalog data files (e.g. pg_proc.dat) carry registration entries only
    if os.path.splitext(rel)[1] in profile.parsers:
        _walk_definitions(parse_source(data, profile.grammar_for(rel)).root_node, rel, entries)
    lines = source_lines(data.decode("utf-8", errors="replace"))
    entries.extend(_registration_entries(lines, rel, profile))
    return rel, content_digest(data), entries


def list_source_files(root: str, profile: DbProfile) -> List[str]:
    """Repo-relative paths matching the profile's source globs, sorted"""
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _SKIP_DIRS)
        for filename in filenames:
            rel = os.path.relpath(os.path.join(dirpath, filename), root).replace(os.sep, "/")
            if profile.matches_sources(rel):
                found.append(rel)
    return sorted(found)


def scan_repo(root: str, profile: DbProfile, workers: int = 8) -> SymbolIndex:
    """
    Scan a repository into a symbol index.

    Args:
        root: Repository root
        profile: Database profile naming source globs and anchor rules
        workers: Files parsed in parallel

    Returns:
        The index; identical file contents always give an identical index

    Raises:
        OSError: root is missing or unreadable
    """
    if not os.path.isdir(root):
        raise NotADirectoryError(f"repository root {root} is not a directory")
    os.listdir(root)
    files = list_source_files(root, profile)
    index = SymbolIndex(root=root)
    if not files:
        logger.warning(f"EMPTY INDEX: no files under {root} match {profile.source_globs}")
        return index
    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(files)))) as pool:
        results = list(pool.map(lambda rel: _scan_file(root, rel, profile), files))
    for rel, digest, entries in results:
        index.file_digests[rel] = digest
        for entry in entries:
            index.entries.setdefault(entry.name, []).append(entry)
    for group in index.entries.values():
        group.sort(key=lambda e: (e.file, e.span[0]))
    logger.info(f"INDEXED: {len(index)} symbols in {len(files)} files under {root}")
    return index


def lookup_symbol(index: SymbolIndex, name: str) -> List[SymbolEntry]:
    """Exact-name matches ordered by (file, line)"""
    return sorted(index.entries.get(name, []), key=lambda e: (e.file, e.span[0]))


def registration_entries(index: SymbolIndex, sql_name: str) -> List[SymbolEntry]:
    """Registration entries declaring an SQL function name, in (file, line) order"""
    suffix = f"::{sql_name}"
    found = [e for name, group in index.entries.items() if name.endswith(suffix)
             for e in group if e.kind == "registration_entry"]
    return sorted(found, key=lambda e: (e.file, e.span[0]))


# -- edges ------------------------------------------------------------------

def _base_clause(values: List[str], entry: SymbolEntry) -> set:
    """Identifiers between a class head's ':' and its opening brace"""
    bases = set()
    try:
        brace = values.index("{")
    except ValueError:
        return bases
    head = values[:brace]
    if ":" in head:
        for value in head[head.index(":") + 1:]:
            if value not in KEYWORDS and value not in (",", "<", ">", "::"):
                bases.add(value)
    return bases


def classify_edges(index: SymbolIndex, entry: SymbolEntry) -> List[Tuple[str, str]]:
    """
    Referenced names of an entry with their relation.

    Relations: call (functions, including function pointers in registration
    tables), macro, inherit (C++ base clause) and scope (Name:: qualifiers).
    Type usage is not a relation.
    """
    values = [t.value for t in tokenize(index.entry_text(entry)) if t.kind in ("ident", "op")]
    bases = _base_clause(values, entry) if entry.kind == "struct_or_class" else set()
    own = None if entry.kind == "registration_entry" else entry.bare_name
    seen = set()
    out = []
    for i, value in enumerate(values):
        if value in KEYWORDS or value == own or value in seen or value not in index:
            continue
        prev = values[i - 1] if i > 0 else None
        nxt = values[i + 1] if i + 1 < len(values) else None
        if prev in (".", "->", "::"):
            continue
        kinds = index.kinds_of(value)
        relation = None
        if value in bases and "struct_or_class" in kinds:
            relation = "inherit"
        elif nxt == "::" and "struct_or_class" in kinds:
            relation = "scope"
        elif "macro" in kinds and (nxt == "(" or "function" not in kinds):
            relation = "macro"
        elif "function" in kinds:
            relation = "call"
        if relation:
            seen.add(value)
            out.append((value, relation))
    return out


def extract_edges(index: SymbolIndex, entry: SymbolEntry) -> List[str]:
    """
    Names referenced by an entry that resolve in the index.

    Raises:
        StaleIndexError: the entry's file is gone or changed
    """
    return [name for name, _ in classify_edges(index, entry)]


# -- insertion points and edits ---------------------------------------------

def locate_insertion_point(index: SymbolIndex, rule: AnchorRule) -> Tuple[str, int]:
    """
    First (file, line) matching an anchor rule.

    For position "before_close" the returned line is the closing line of the
    anchored region; otherwise it is the anchor line itself.
    """
    anchor_re = re.compile(rule.anchor_pattern)
    close_re = re.compile(rule.close_pattern) if rule.close_pattern else None
    for rel in sorted(index.file_digests):
        if not fnmatch(rel, rule.file_glob):
            continue
        lines = index.read_lines(rel)
        for i, line in enumerate(lines):
            if not anchor_re.search(line):
                continue
            if rule.position != "before_close":
                return rel, i + 1
            for j in range(i + 1, len(lines)):
                if close_re.search(lines[j]):
                    return rel, j + 1
    raise AnchorNotFoundError(rule.id)


def insertion_mode(rule: AnchorRule) -> str:
    return "insert_after" if rule.position == "after_anchor" else "insert_before"


@dataclass
class CodeEdit:
    file: str
    anchor: Union[int, str]
    mode: str
    text: str

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class RollbackToken:
    """Exact prior bytes of every file an edit touched (None: did not exist)"""

    root: str
    snapshots: Dict[str, Optional[bytes]] = field(default_factory=dict)
    rolled_back: bool = False

    @property
    def files(self) -> List[str]:
        return sorted(self.snapshots)

    def rollback(self) -> None:
        if self.rolled_back:
            return
        for rel, data in sorted(self.snapshots.items()):
            path = os.path.join(self.root, rel)
            if data is None:
                if os.path.exists(path):
                    os.remove(path)
            else:
                with open(path, "wb") as f:
                    f.write(data)
        self.rolled_back = True
        logger.info(f"ROLLED BACK: {len(self.snapshots)} file(s) under {self.root}")


def _safe_path(root: str, rel: str) -> str:
    root_abs = os.path.realpath(root)
    path = os.path.realpath(os.path.join(root_abs, rel))
    if os.path.isabs(rel) or not (path == root_abs or path.startswith(root_abs + os.sep)):
        raise EditApplyError(f"edit target {rel} escapes the repository root")
    return path


def _write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(path)
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".dbforge-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _rewrite(root: str, contents: Dict[str, bytes], snapshots: Dict[str, Optional[bytes]]) -> RollbackToken:
    token = RollbackToken(root=root, snapshots=snapshots)
    try:
        for rel in sorted(contents):
            _write_atomic(os.path.join(root, rel), contents[rel])
    except OSError as e:
        token.rollback()
        raise EditApplyError(f"writing edits failed, repository restored: {e}") from e
    return token


def _with_newline(text: str) -> str:
    return text if text.endswith("\n") else text + "\n"


def _resolve_anchor(edit: CodeEdit, index: Optional[SymbolIndex], profile: Optional[DbProfile]) -> CodeEdit:
    if edit.mode == "create_file" or isinstance(edit.anchor, int):
        return edit
    if index is None or profile is None:
        raise EditApplyError(f"edit anchored on rule '{edit.anchor}' needs an index and profile")
    rel, line = locate_insertion_point(index, profile.rule(edit.anchor))
    if edit.file and edit.file != rel:
        raise EditApplyError(f"anchor rule '{edit.anchor}' resolves to {rel}, not {edit.file}")
    return CodeEdit(rel, line, edit.mode, edit.text)


def _check_collisions(edits: List[CodeEdit]) -> None:
    modes: Dict[Tuple[str, int], set] = {}
    created: Dict[str, int] = {}
    inserted = set()
    for edit in edits:
        if edit.mode == "create_file":
            created[edit.file] = created.get(edit.file, 0) + 1
        else:
            inserted.add(edit.file)
            modes.setdefault((edit.file, edit.anchor), set()).add(edit.mode)
    for (rel, line), found in modes.items():
        if len(found) > 1:
            raise EditCollisionError(f"{rel}:{line} is targeted with conflicting modes {sorted(found)}")
    for rel, count in created.items():
        if count > 1 or rel in inserted:
            raise EditCollisionError(f"{rel} is created and edited by more than one edit")


def apply_edits(root: str, edits: List[CodeEdit], index: Optional[SymbolIndex] = None,
                profile: Optional[DbProfile] = None) -> RollbackToken:
    """
    Apply edits all-or-nothing.

    Line anchors refer to the files as they are before any edit of the list;
    inserts at the same line and mode land in list order.

    Args:
        root: Repository root
        edits: Edits to apply
        index: Needed only for edits anchored on a rule id
        profile: Needed only for edits anchored on a rule id

    Returns:
        Token restoring the exact prior bytes

    Raises:
        EditCollisionError: conflicting edits, rejected before any write
        EditApplyError: invalid edit or failed write (already rolled back)
    """
    edits = [_resolve_anchor(e, index, profile) for e in edits]
    for edit in edits:
        if edit.mode not in EDIT_MODES:
            raise EditApplyError(f"unknown edit mode '{edit.mode}'")
        path = _safe_path(root, edit.file)
        if edit.mode == "create_file" and os.path.exists(path):
            raise EditApplyError(f"create_file target {edit.file} already exists")
        if edit.mode != "create_file" and not os.path.isfile(path):
            raise EditApplyError(f"insert target {edit.file} does not exist")
    _check_collisions(edits)

    snapshots: Dict[str, Optional[bytes]] = {}
    contents: Dict[str, bytes] = {}
    by_file: Dict[str, List[CodeEdit]] = {}
    for edit in edits:
        by_file.setdefault(edit.file, []).append(edit)
    for rel, file_edits in by_file.items():
        path = os.path.join(root, rel)
        if file_edits[0].mode == "create_file":
            snapshots[rel] = None
            contents[rel] = _with_newline(file_edits[0].text).encode("utf-8")
            continue
        with open(path, "rb") as f:
            original = f.read()
        snapshots[rel] = original
        lines = _byte_lines(original)
        before: Dict[int, List[bytes]] = {}
        after: Dict[int, List[bytes]] = {}
        for edit in file_edits:
            if not 1 <= edit.anchor <= max(1, len(lines)) + (1 if edit.mode == "insert_before" else 0):
                raise EditApplyError(f"{rel}: line {edit.anchor} is outside the file")
            target = before if edit.mode == "insert_before" else after
            target.setdefault(edit.anchor, []).append(_with_newline(edit.text).encode("utf-8"))
        out = []
        for number in range(1, len(lines) + 2):
            out.extend(before.get(number, []))
            if number <= len(lines):
                out.append(lines[number - 1])
            out.extend(after.get(number, []))
        contents[rel] = b"".join(out)
    if not edits:
        return RollbackToken(root=root)
    token = _rewrite(root, contents, snapshots)
    logger.info(f"EDITS APPLIED: {len(edits)} edit(s) across {len(contents)} file(s)")
    return token


def withhold_entries(root: str, index: SymbolIndex, entries: List[SymbolEntry]) -> RollbackToken:
    """
    Remove the line spans of existing entries so they can be re-synthesized.

    Returns:
        Token restoring the withheld code
    """
    by_file: Dict[str, List[Tuple[int, int]]] = {}
    for entry in entries:
        by_file.setdefault(entry.file, []).append(entry.span)
    snapshots: Dict[str, Optional[bytes]] = {}
    contents: Dict[str, bytes] = {}
    for rel, spans in by_file.items():
        with open(_safe_path(root, rel), "rb") as f:
            original = f.read()
        snapshots[rel] = original
        lines = _byte_lines(original)
        drop = {n for start, end in spans for n in range(start, end + 1)}
        contents[rel] = b"".join(l for n, l in enumerate(lines, 1) if n not in drop)
    token = _rewrite(root, contents, snapshots)
    logger.info(f"WITHHELD: {', '.join(e.name for e in entries)}")
    return token


def repo_digest(root: str) -> str:
    """Digest over every regular file (path and bytes) under root"""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for filename in sorted(filenames):
            path = os.path.join(dirpath, filename)
            rel = os.path.relpath(path, root).replace(os.sep, "/")
            digest.update(rel.encode("utf-8") + b"\0")
            with open(path, "rb") as f:
                digest.update(content_digest(f.read()).encode("ascii"))
    return digest.hexdigest()
