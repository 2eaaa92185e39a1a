"""
Token streams for C-like source text.

The grammar pass (tree-sitter) finds definitions; this lexical pass is what
reference edges, template pruning and shape checks work on.
"""

import re
from typing import Iterable, List, NamedTuple, Optional, Set

BLANK_RE = re.compile(r"\{\{BLANK_(\d+)\}\}")

_TOKEN_RE = re.compile(
    r"""
    (?P<blank>\{\{BLANK_\d+\}\})
  | (?P<string>"(?:\\.|[^"\\\n])*")
  | (?P<char>'(?:\\.|[^'\\\n])*')
  | (?P<number>(?:0[xX][0-9a-fA-F]+|\d+\.?\d*(?:[eE][+-]?\d+)?)[uUlLfF]*)
  | (?P<ident>[A-Za-z_]\w*)
  | (?P<op>>>=|<<=|->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||::|\+=|-=|\*=|/=|%=|&=|\|=|\^=|\.\.\.
         |[{}()\[\];,.<>+\-*/%&|^!~?:=\#\\])
  | (?P<other>\S)
    """,
    re.VERBOSE,
)

_COMMENT_RE = re.compile(
    r"""("(?:\\.|[^"\\\n])*"|'(?:\\.|[^'\\\n])*')|(/\*.*?\*/|//[^\n]*)""",
    re.DOTALL,
)

KEYWORDS: Set[str] = {
    # C
    "auto", "break", "case", "char", "const", "continue", "default", "do", "double", "else", "enum",
    "extern", "float", "for", "goto", "if", "inline", "int", "long", "register", "restrict", "return",
    "short", "signed", "sizeof", "static", "struct", "switch", "typedef", "union", "unsigned", "void",
    "volatile", "while", "_Bool", "bool", "true", "false", "NULL",
    # C++
    "class", "namespace", "template", "typename", "public", "private", "protected", "virtual",
    "override", "final", "new", "delete", "this", "using", "operator", "friend", "constexpr",
    "nullptr", "static_cast", "dynamic_cast", "reinterpret_cast", "const_cast", "noexcept",
    "explicit", "mutable", "try", "catch", "throw", "decltype", "auto",
    # preprocessor words after '#'
    "define", "include", "ifdef", "ifndef", "endif", "elif", "undef", "pragma",
}

_LINE_BREAK_AFTER = {";", "{", "}"}


class Token(NamedTuple):
    kind: str
    value: str
    line: int


def strip_comments(text: str) -> str:
    """Replace comments with whitespace, keeping string literals and line numbers"""

    def _sub(match: re.Match) -> str:
        if match.group(1) is not None:
            return match.group(1)
        return "\n" * match.group(2).count("\n") or " "

    return _COMMENT_RE.sub(_sub, text)


def tokenize(text: str, first_line: int = 1, keep_comments: bool = False) -> List[Token]:
    """
    Split source text into tokens.

    Args:
        text: Source text
        first_line: Line number of the first line of text
        keep_comments: Tokenize comment text instead of dropping it

    Returns:
        Tokens in source order
    """
    if not keep_comments:
        text = strip_comments(text)
    tokens = []
    line = first_line
    pos = 0
    for match in _TOKEN_RE.finditer(text):
        line += text.count("\n", pos, match.start())
        pos = match.start()
        tokens.append(Token(match.lastgroup, match.group(), line))
    return tokens


def token_values(text: str) -> List[str]:
    return [t.value for t in tokenize(text)]


def is_identifier(value: str) -> bool:
    return bool(re.fullmatch(r"[A-Za-z_]\w*", value)) and value not in KEYWORDS


def _renamable(values: List[str], i: int, globals_: Set[str]) -> bool:
    value = values[i]
    if not is_identifier(value) or value in globals_:
        return False
    prev = values[i - 1] if i > 0 else None
    nxt = values[i + 1] if i + 1 < len(values) else None
    if prev in (".", "->", "::", "#"):
        return False
    if nxt in ("(", "::"):
        return False
    return True


def alpha_rename(values: List[str], globals_: Iterable[str] = ()) -> List[str]:
    """
    Rename local identifiers to v1, v2, ... in first-occurrence order.

    Names in globals_, called names, member names and scope qualifiers are
    kept verbatim.
    """
    globals_ = set(globals_)
    mapping = {}
    renamed = []
    for i, value in enumerate(values):
        if _renamable(values, i, globals_):
            if value not in mapping:
                mapping[value] = f"v{len(mapping) + 1}"
            renamed.append(mapping[value])
        else:
            renamed.append(value)
    return renamed


def local_mask(values: List[str], globals_: Iterable[str] = ()) -> List[bool]:
    """Flag the positions alpha_rename would rename"""
    globals_ = set(globals_)
    return [_renamable(values, i, globals_) for i in range(len(values))]


def format_tokens(values: List[str]) -> str:
    """Join tokens into readable text that tokenizes back to the same values"""
    parts = []
    for value in values:
        parts.append(value)
        parts.append("\n" if value in _LINE_BREAK_AFTER else " ")
    text = "".join(parts).rstrip()
    return "\n".join(line.strip() for line in text.split("\n"))


def placeholder(index: int) -> str:
    return "{{BLANK_%d}}" % index


def is_placeholder(value: str) -> bool:
    return bool(BLANK_RE.fullmatch(value))


def fixed_runs(values: List[str]) -> List[List[str]]:
    """Maximal runs of non-placeholder tokens, in order"""
    runs: List[List[str]] = []
    current: List[str] = []
    for value in values:
        if is_placeholder(value):
            if current:
                runs.append(current)
            current = []
        else:
            current.append(value)
    if current:
        runs.append(current)
    return runs


def find_run(haystack: List[str], needle: List[str], start: int = 0) -> Optional[int]:
    """Index of the first contiguous occurrence of needle at or after start"""
    n = len(needle)
    for i in range(start, len(haystack) - n + 1):
        if haystack[i:i + n] == needle:
            return i
    return None


def contains_runs_in_order(haystack: List[str], runs: List[List[str]]) -> bool:
    pos = 0
    for run in runs:
        found = find_run(haystack, run, pos)
        if found is None:
            return False
        pos = found + len(run)
    return True
