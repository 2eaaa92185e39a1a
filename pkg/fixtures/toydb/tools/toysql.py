"""
Run one SQL statement against the toydb builtins.

Usage: toysql.py "SELECT toy_abs(-3);"

Prints the result (or NULL) and exits 0; prints "ERROR: ..." and exits 1
when the statement cannot be evaluated.
"""

import sys

from toyinterp import InterpError, Interpreter, parse_select


def main(argv) -> int:
    if len(argv) != 2:
        print("usage: toysql.py <sql>", file=sys.stderr)
        return 2
    try:
        name, args = parse_select(argv[1])
        value = Interpreter().call_sql(name, args)
    except InterpError as e:
        print(f"ERROR: {e}")
        return 1
    print("NULL" if value is None else value)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
