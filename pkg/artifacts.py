"""Versioned JSON documents written by every pipeline stage."""

import json
import os
from typing import Any, Dict

from errors import ConfigurationError

SCHEMA_VERSION = 1


def render_document(kind: str, payload: Dict[str, Any]) -> str:
    """
    Render a document with a schema header and stable key order.

    Args:
        kind: Document kind, e.g. "symbol_index" or "validation_report"
        payload: JSON-compatible body

    Returns:
        The serialized text, newline terminated
    """
    body = {"schema_version": SCHEMA_VERSION, "kind": kind}
    body.update(payload)
    return json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_document(path: str, kind: str, payload: Dict[str, Any]) -> str:
    """Write a versioned document and return its path"""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_document(kind, payload))
    return path


def read_document(path: str, kind: str) -> Dict[str, Any]:
    """Read a document written by write_document and check its header"""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected a '{kind}' document, found '{data.get('kind')}'")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: unsupported schema version {data.get('schema_version')}")
    return data
