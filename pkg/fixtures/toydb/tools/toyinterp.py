"""
Interpreter for the C subset toydb builtins are written in.

Only what the builtin functions need is supported: integer locals, the
usual statements and operators, calls between functions, and the
TOY_GETARG / TOY_RETURN / TOY_RETURN_NULL macros of toydb.h.
"""

import glob
import os
import re
from typing import Dict, List, Optional, Tuple

import tree_sitter_c
from tree_sitter import Language, Node, Parser

C_LANGUAGE = Language(tree_sitter_c.language())

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

STEP_LIMIT = 1_000_000

TABLE_START = re.compile(r"^static const ToyBuiltin aBuiltin\[\] = \{")
TABLE_END = re.compile(r"^\};")
PLAIN_ENTRY = re.compile(r'\{\s*"(\w+)"\s*,\s*(\d+)\s*,\s*(\w+)\s*\}')
DATE_ENTRY = re.compile(r'TOY_DATE_FUNCTION\s*\(\s*"(\w+)"\s*,\s*(\w+)\s*\)')
SELECT_RE = re.compile(r"^\s*SELECT\s+(\w+)\s*\((.*)\)\s*;?\s*$", re.IGNORECASE | re.DOTALL)


class InterpError(Exception):
    pass


class _Return(Exception):
    def __init__(self, value):
        self.value = value


class _Break(Exception):
    pass


class _Continue(Exception):
    pass


def parse(data: bytes) -> Node:
    return Parser(C_LANGUAGE).parse(data).root_node


def text(node: Node) -> str:
    return node.text.decode("utf-8")


def wrap(value: int) -> int:
    """Two's-complement 64-bit overflow"""
    return ((value + 2 ** 63) % 2 ** 64) - 2 ** 63


def c_div(a: int, b: int) -> int:
    if b == 0:
        raise InterpError("division by zero")
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def c_mod(a: int, b: int) -> int:
    return a - b * c_div(a, b)


def declarator_name(node: Optional[Node]) -> Optional[str]:
    while node is not None:
        if node.type == "identifier":
            return text(node)
        inner = node.child_by_field_name("declarator")
        if inner is None:
            named = [c for c in node.named_children if c.type != "type_qualifier"]
            inner = named[0] if named else None
        node = inner
    return None


def read_registry(root: str) -> Dict[str, Tuple[int, str, int]]:
    """SQL name -> (argument count, implementing function, table line)"""
    path = os.path.join(root, "src", "funcs.c")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    registry: Dict[str, Tuple[int, str, int]] = {}
    inside = False
    for number, line in enumerate(lines, 1):
        if not inside:
            inside = bool(TABLE_START.search(line))
            continue
        if TABLE_END.search(line):
            break
        for m in PLAIN_ENTRY.finditer(line):
            registry.setdefault(m.group(1), (int(m.group(2)), m.group(3), number))
        for m in DATE_ENTRY.finditer(line):
            registry.setdefault(m.group(1), (1, m.group(2), number))
    return registry


def parse_select(sql: str) -> Tuple[str, List[Optional[int]]]:
    m = SELECT_RE.match(sql)
    if not m:
        raise InterpError(f"unsupported statement: {sql.strip()}")
    args: List[Optional[int]] = []
    raw = m.group(2).strip()
    if raw:
        for part in raw.split(","):
            part = part.strip()
            if part.upper() == "NULL":
                args.append(None)
            elif re.fullmatch(r"[+-]?\d+", part):
                args.append(int(part))
            else:
                raise InterpError(f"unsupported argument: {part}")
    return m.group(1), args


class Interpreter:
    def __init__(self, root: str = ROOT):
        self.functions: Dict[str, Node] = {}
        for path in sorted(glob.glob(os.path.join(root, "src", "*.c"))):
            with open(path, "rb") as f:
                tree = parse(f.read())
            for child in tree.named_children:
                if child.type == "function_definition":
                    name = declarator_name(child.child_by_field_name("declarator"))
                    if name:
                        self.functions.setdefault(name, child)
        self.registry = read_registry(root)
        self.steps = 0

    # -- entry points ------------------------------------------------------

    def call_sql(self, name: str, args: List[Optional[int]]) -> Optional[int]:
        if name not in self.registry:
            raise InterpError(f"no such function: {name}")
        nargs, impl, _ = self.registry[name]
        if len(args) != nargs:
            raise InterpError(f"wrong number of arguments to function {name}()")
        if any(a is None for a in args):
            return None
        ctx = {"result": 0, "null": False}
        self.call(impl, [ctx, len(args), list(args)])
        return None if ctx["null"] else ctx["result"]

    def call(self, name: str, values: list):
        node = self.functions.get(name)
        if node is None:
            raise InterpError(f"undefined function {name}")
        declarator = node.child_by_field_name("declarator")
        while declarator is not None and declarator.type != "function_declarator":
            declarator = declarator.child_by_field_name("declarator")
        params = []
        if declarator is not None:
            for p in declarator.child_by_field_name("parameters").named_children:
                if p.type == "parameter_declaration":
                    pname = declarator_name(p.child_by_field_name("declarator"))
                    if pname:
                        params.append(pname)
        if len(params) != len(values):
            raise InterpError(f"{name} expects {len(params)} arguments, got {len(values)}")
        scopes = [dict(zip(params, values))]
        try:
            self.execute(node.child_by_field_name("body"), scopes)
        except _Return as r:
            return r.value
        return None

    # -- statements --------------------------------------------------------

    def tick(self):
        self.steps += 1
        if self.steps > STEP_LIMIT:
            raise InterpError("step limit exceeded")

    def execute(self, node: Node, scopes: List[dict]) -> None:
        self.tick()
        t = node.type
        if t == "compound_statement":
            scopes.append({})
            try:
                for child in node.named_children:
                    self.execute(child, scopes)
            finally:
                scopes.pop()
        elif t == "declaration":
            for d in node.children_by_field_name("declarator"):
                if d.type == "init_declarator":
                    name = declarator_name(d.child_by_field_name("declarator"))
                    scopes[-1][name] = self.evaluate(d.child_by_field_name("value"), scopes)
                else:
                    scopes[-1][declarator_name(d)] = 0
        elif t == "expression_statement":
            if node.named_children:
                self.evaluate(node.named_children[0], scopes)
        elif t == "if_statement":
            if self.truth(node.child_by_field_name("condition"), scopes):
                self.execute(node.child_by_field_name("consequence"), scopes)
            else:
                alt = node.child_by_field_name("alternative")
                if alt is not None:
                    if alt.type == "else_clause":
                        alt = alt.named_children[0]
                    self.execute(alt, scopes)
        elif t == "while_statement":
            while self.truth(node.child_by_field_name("condition"), scopes):
                try:
                    self.execute(node.child_by_field_name("body"), scopes)
                except _Break:
                    break
                except _Continue:
                    continue
        elif t == "do_statement":
            while True:
                try:
                    self.execute(node.child_by_field_name("body"), scopes)
                except _Break:
                    break
                except _Continue:
                    pass
                if not self.truth(node.child_by_field_name("condition"), scopes):
                    break
        elif t == "for_statement":
            self.run_for(node, scopes)
        elif t == "return_statement":
            value = self.evaluate(node.named_children[0], scopes) if node.named_children else None
            raise _Return(value)
        elif t == "break_statement":
            raise _Break()
        elif t == "continue_statement":
            raise _Continue()
        elif t == "comment":
            pass
        else:
            raise InterpError(f"unsupported statement '{t}' at line {node.start_point[0] + 1}")

    def run_for(self, node: Node, scopes: List[dict]) -> None:
        scopes.append({})
        try:
            init = node.child_by_field_name("initializer")
            if init is not None:
                if init.type == "declaration":
                    self.execute(init, scopes)
                else:
                    self.evaluate(init, scopes)
            condition = node.child_by_field_name("condition")
            update = node.child_by_field_name("update")
            while condition is None or self.truth(condition, scopes):
                try:
                    self.execute(node.child_by_field_name("body"), scopes)
                except _Break:
                    break
                except _Continue:
                    pass
                if update is not None:
                    self.evaluate(update, scopes)
        finally:
            scopes.pop()

    # -- expressions -------------------------------------------------------

    def truth(self, node: Node, scopes: List[dict]) -> bool:
        return self.evaluate(node, scopes) != 0

    def lookup(self, name: str, scopes: List[dict]) -> dict:
        for scope in reversed(scopes):
            if name in scope:
                return scope
        raise InterpError(f"'{name}' undeclared")

    def evaluate(self, node: Node, scopes: List[dict]):
        self.tick()
        t = node.type
        if t == "number_literal":
            literal = text(node).rstrip("uUlL")
            return int(literal, 16) if literal.lower().startswith("0x") else int(literal)
        if t == "char_literal":
            return ord(text(node)[1:-1].encode().decode("unicode_escape"))
        if t in ("true", "false"):
            return 1 if t == "true" else 0
        if t == "null":
            return 0
        if t == "identifier":
            name = text(node)
            return self.lookup(name, scopes)[name]
        if t == "parenthesized_expression":
            return self.evaluate(node.named_children[0], scopes)
        if t == "binary_expression":
            return self.binary(node, scopes)
        if t == "unary_expression":
            op = text(node.child_by_field_name("operator"))
            value = self.evaluate(node.child_by_field_name("argument"), scopes)
            if op == "-":
                return wrap(-value)
            if op == "+":
                return value
            if op == "!":
                return 0 if value else 1
            if op == "~":
                return ~value
            raise InterpError(f"unsupported unary operator {op}")
        if t == "update_expression":
            target = node.child_by_field_name("argument")
            if target.type != "identifier":
                raise InterpError("only variables can be incremented")
            name = text(target)
            scope = self.lookup(name, scopes)
            old = scope[name]
            op = text(node.child_by_field_name("operator"))
            scope[name] = wrap(old + 1 if op == "++" else old - 1)
            prefix = node.children[0].type in ("++", "--")
            return scope[name] if prefix else old
        if t == "assignment_expression":
            return self.assign(node, scopes)
        if t == "conditional_expression":
            if self.truth(node.child_by_field_name("condition"), scopes):
                return self.evaluate(node.child_by_field_name("consequence"), scopes)
            return self.evaluate(node.child_by_field_name("alternative"), scopes)
        if t == "comma_expression":
            self.evaluate(node.child_by_field_name("left"), scopes)
            return self.evaluate(node.child_by_field_name("right"), scopes)
        if t == "cast_expression":
            return self.evaluate(node.child_by_field_name("value"), scopes)
        if t == "subscript_expression":
            array = self.evaluate(node.child_by_field_name("argument"), scopes)
            index = self.evaluate(node.child_by_field_name("index"), scopes)
            return array[index]
        if t == "call_expression":
            return self.invoke(node, scopes)
        raise InterpError(f"unsupported expression '{t}' at line {node.start_point[0] + 1}")

    def binary(self, node: Node, scopes: List[dict]):
        op = text(node.child_by_field_name("operator"))
        left = node.child_by_field_name("left")
        right = node.child_by_field_name("right")
        if op == "&&":
            return 1 if self.truth(left, scopes) and self.truth(right, scopes) else 0
        if op == "||":
            return 1 if self.truth(left, scopes) or self.truth(right, scopes) else 0
        return self.arith(op, self.evaluate(left, scopes), self.evaluate(right, scopes))

    @staticmethod
    def arith(op: str, a: int, b: int) -> int:
        if op == "+":
            return wrap(a + b)
        if op == "-":
            return wrap(a - b)
        if op == "*":
            return wrap(a * b)
        if op == "/":
            return wrap(c_div(a, b))
        if op == "%":
            return c_mod(a, b)
        if op == "<<":
            return wrap(a << b)
        if op == ">>":
            return a >> b
        if op == "&":
            return a & b
        if op == "|":
            return a | b
        if op == "^":
            return a ^ b
        comparisons = {
            "<": a < b, ">": a > b, "<=": a <= b, ">=": a >= b, "==": a == b, "!=": a != b,
        }
        if op in comparisons:
            return 1 if comparisons[op] else 0
        raise InterpError(f"unsupported operator {op}")

    def assign(self, node: Node, scopes: List[dict]):
        target = node.child_by_field_name("left")
        if target.type != "identifier":
            raise InterpError("only variables can be assigned")
        name = text(target)
        scope = self.lookup(name, scopes)
        op = text(node.child_by_field_name("operator"))
        value = self.evaluate(node.child_by_field_name("right"), scopes)
        if op != "=":
            value = self.arith(op[:-1], scope[name], value)
        scope[name] = value
        return value

    def invoke(self, node: Node, scopes: List[dict]):
        function = node.child_by_field_name("function")
        if function.type != "identifier":
            raise InterpError("only direct calls are supported")
        name = text(function)
        args = node.child_by_field_name("arguments").named_children
        if name == "TOY_GETARG":
            return self.evaluate(args[0], scopes)[self.evaluate(args[1], scopes)]
        if name == "TOY_RETURN":
            ctx = self.evaluate(args[0], scopes)
            ctx["result"] = self.evaluate(args[1], scopes)
            ctx["null"] = False
            return ctx["result"]
        if name == "TOY_RETURN_NULL":
            ctx = self.evaluate(args[0], scopes)
            ctx["null"] = True
            return 1
        return self.call(name, [self.evaluate(a, scopes) for a in args])
