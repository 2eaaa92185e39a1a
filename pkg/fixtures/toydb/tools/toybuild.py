"""
Build check for toydb.

Parses every source file, then links the builtin table: each registered
implementation must be defined above the table, SQL names must be unique,
functions must not be defined twice, and every call must resolve to a
function or macro. Diagnostics go to stderr in compiler format.
"""

import glob
import os
import re
import sys
from typing import Dict, List, Tuple

from toyinterp import ROOT, TABLE_END, TABLE_START, declarator_name, parse, read_registry, text


def first_error(node):
    if node.type == "ERROR" or node.is_missing:
        return node
    for child in node.children:
        found = first_error(child)
        if found is not None:
            return found
    return None


def calls_in(node, out: List[Tuple[str, int]]) -> None:
    if node.type == "call_expression":
        function = node.child_by_field_name("function")
        if function is not None and function.type == "identifier":
            out.append((text(function), node.start_point[0] + 1))
    for child in node.children:
        calls_in(child, out)


def main() -> int:
    errors: List[str] = []
    files = sorted(glob.glob(os.path.join(ROOT, "src", "*.[ch]"))) + sorted(glob.glob(os.path.join(ROOT, "ext", "*.c")))
    macros = set()
    # name -> [(rel, line, static)]
    defined: Dict[str, List[Tuple[str, int, bool]]] = {}
    calls: List[Tuple[str, str, int]] = []
    for path in files:
        rel = os.path.relpath(path, ROOT).replace(os.sep, "/")
        with open(path, "rb") as f:
            data = f.read()
        for m in re.finditer(rb"^\s*#\s*define\s+(\w+)", data, re.MULTILINE):
            macros.add(m.group(1).decode())
        tree = parse(data)
        bad = first_error(tree)
        if bad is not None:
            kind = f"expected '{bad.type}'" if bad.is_missing else "syntax error"
            errors.append(f"{rel}:{bad.start_point[0] + 1}: error: {kind}")
            continue
        for child in tree.named_children:
            if child.type != "function_definition":
                continue
            name = declarator_name(child.child_by_field_name("declarator"))
            is_static = any(text(c) == "static" for c in child.children if c.type == "storage_class_specifier")
            line = child.start_point[0] + 1
            for other_rel, other_line, other_static in defined.get(name, []):
                if other_rel == rel or not (is_static or other_static):
                    errors.append(f"{rel}:{line}: error: redefinition of '{name}' "
                                  f"(previous definition at {other_rel}:{other_line})")
            defined.setdefault(name, []).append((rel, line, is_static))
            if rel.startswith("src/"):
                found: List[Tuple[str, int]] = []
                calls_in(child.child_by_field_name("body"), found)
                calls.extend((rel, call, call_line) for call, call_line in found)

    if errors:
        print("\n".join(errors), file=sys.stderr)
        return 1

    funcs_path = os.path.join(ROOT, "src", "funcs.c")
    with open(funcs_path, "r", encoding="utf-8") as f:
        funcs_lines = f.read().splitlines()
    table_line = next((n for n, l in enumerate(funcs_lines, 1) if TABLE_START.search(l)), None)
    if table_line is None:
        errors.append("src/funcs.c:1: error: builtin table aBuiltin not found")
    registry = read_registry(ROOT)
    seen_sql: Dict[str, int] = {}
    for line_no in range((table_line or len(funcs_lines)) + 1, len(funcs_lines) + 1):
        line = funcs_lines[line_no - 1]
        if TABLE_END.search(line):
            break
        for m in re.finditer(r'"(\w+)"', line):
            if m.group(1) in seen_sql:
                errors.append(f"src/funcs.c:{line_no}: error: redefinition of SQL function '{m.group(1)}'")
            seen_sql.setdefault(m.group(1), line_no)
    for sql_name, (_, impl, line_no) in sorted(registry.items(), key=lambda item: item[1][2]):
        above = [d for d in defined.get(impl, []) if d[0] == "src/funcs.c" and d[1] < line_no]
        if not above:
            errors.append(f"src/funcs.c:{line_no}: error: '{impl}' undeclared here (not in a function)")

    for rel, name, line in calls:
        if name in macros:
            continue
        targets = defined.get(name, [])
        visible = [d for d in targets if d[0].startswith("src/") and (d[0] == rel or not d[2])]
        if not visible:
            errors.append(f"{rel}:{line}: undefined reference to `{name}'")

    if errors:
        print("\n".join(errors), file=sys.stderr)
        return 1
    print(f"toybuild: {len(files)} files, {len(defined)} functions, {len(registry)} builtins")
    return 0


if __name__ == "__main__":
    sys.exit(main())
