"""
Database profiles and run configuration.

Profiles live under profiles/<name>.json and describe one target database
codebase. Run settings resolve as defaults < JSON config file < environment
< command-line flags.
"""

import json
import logging
import os
import re
import shlex
import sys
from fnmatch import fnmatch
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigurationError

logger = logging.getLogger(__name__)

PROFILES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "profiles")

ERROR_CLASSES = (
    "incorrect_declaration",
    "incorrect_reference",
    "build_failure",
    "testcase_mismatch",
    "timeout",
    "other",
)


def _check_regex(value: Optional[str]) -> Optional[str]:
    if value is None:
        return value
    try:
        re.compile(value)
    except re.error as e:
        raise ValueError(f"invalid regular expression {value!r}: {e}")
    return value


class AnchorRule(BaseModel):
    """A textual anchor marking where functions are declared or placed"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str = Field(min_length=1)
    file_glob: str = Field(min_length=1)
    anchor_pattern: str = Field(min_length=1)
    close_pattern: Optional[str] = None
    entry_pattern: Optional[str] = None
    owner: str = ""
    position: Literal["before_anchor", "after_anchor", "before_close"] = "before_anchor"

    @field_validator("anchor_pattern", "close_pattern", "entry_pattern")
    @classmethod
    def check_patterns(cls, value: Optional[str]) -> Optional[str]:
        return _check_regex(value)

    @model_validator(mode="after")
    def check_close_pattern(self):
        if self.position == "before_close" and not self.close_pattern:
            raise ValueError(f"anchor rule '{self.id}' places before the close line but has no close_pattern")
        return self


class DocExtractorRule(BaseModel):
    """
    Extraction rule for one documentation layout.

    section_pattern matches the first line of a function section and must
    capture `name`; it may capture `args` and `return_type`. Each entry of
    field_patterns maps a declaration field (description, category, example) to a
    regex applied to the section body; example patterns capture `sql` and
    `expected`.
    """

    model_config = ConfigDict(extra="forbid")

    section_pattern: str
    field_patterns: Dict[str, str] = Field(default_factory=dict)
    category: str = ""

    @field_validator("section_pattern")
    @classmethod
    def check_section(cls, value: str) -> str:
        _check_regex(value)
        if "(?P<name>" not in value:
            raise ValueError("section_pattern must capture a 'name' group")
        return value

    @field_validator("field_patterns")
    @classmethod
    def check_field_patterns(cls, value: Dict[str, str]) -> Dict[str, str]:
        for pattern in value.values():
            _check_regex(pattern)
        return value


class CatalogSpec(BaseModel):
    """Column names of a catalog dump mapped to declaration fields"""

    model_config = ConfigDict(extra="forbid")

    name: str = "name"
    arg_types: str = "arg_types"
    return_type: str = "return_type"
    category: Optional[str] = None
    description: Optional[str] = None


class DbProfile(BaseModel):
    """Everything dbforge needs to know about one database codebase"""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    language: Literal["c", "cpp"] = "c"
    source_globs: List[str] = Field(min_length=1)
    parsers: Dict[str, Literal["c", "cpp"]] = Field(default_factory=lambda: {".c": "c", ".h": "c"})
    registration_patterns: List[AnchorRule] = Field(default_factory=list)
    unit_anchor: Optional[AnchorRule] = None
    build_command: str = ""
    build_timeout: float = Field(default=300.0, gt=0)
    test_command: str = ""
    sql_runner_command: str = ""
    doc_extractor_rules: List[DocExtractorRule] = Field(default_factory=list)
    catalog_query_spec: CatalogSpec = Field(default_factory=CatalogSpec)
    error_patterns: List[Tuple[str, str]] = Field(default_factory=list)
    test_suite_globs: List[str] = Field(default_factory=list)
    doc_globs: List[str] = Field(default_factory=list)
    catalog_path: Optional[str] = None
    known_externals: List[str] = Field(default_factory=list)
    numeric_tolerance: Optional[float] = Field(default=None, ge=0)
    runner_reentrant: bool = False
    runner_error_codes: List[int] = Field(default_factory=lambda: [1])
    hub_threshold: int = Field(default=0, ge=0)

    @field_validator("runner_error_codes")
    @classmethod
    def check_runner_error_codes(cls, value: List[int]) -> List[int]:
        if any(code <= 0 for code in value):
            raise ValueError("runner error codes must be positive exit statuses")
        return value

    @field_validator("error_patterns")
    @classmethod
    def check_error_patterns(cls, value: List[Tuple[str, str]]) -> List[Tuple[str, str]]:
        for pattern, error_class in value:
            _check_regex(pattern)
            if error_class not in ERROR_CLASSES:
                raise ValueError(f"unknown error class '{error_class}'")
        return value

    @model_validator(mode="after")
    def check_unique_rule_ids(self):
        ids = [r.id for r in self.registration_patterns]
        if self.unit_anchor is not None:
            ids.append(self.unit_anchor.id)
        if len(ids) != len(set(ids)):
            raise ValueError("anchor rule ids must be unique within a profile")
        return self

    def rule(self, rule_id: str) -> AnchorRule:
        """Look up an anchor rule by id"""
        for rule in self.registration_patterns:
            if rule.id == rule_id:
                return rule
        if self.unit_anchor is not None and self.unit_anchor.id == rule_id:
            return self.unit_anchor
        raise ConfigurationError(f"profile '{self.name}' has no anchor rule '{rule_id}'")

    def grammar_for(self, path: str) -> str:
        """Grammar name for a source file, by extension"""
        ext = os.path.splitext(path)[1]
        if ext not in self.parsers:
            raise ConfigurationError(f"profile '{self.name}' has no parser for '{ext}' files ({path})")
        return self.parsers[ext]

    def matches_sources(self, rel_path: str) -> bool:
        return any(fnmatch(rel_path, g) for g in self.source_globs)

    def render_command(self, template: str, root: str, sql: Optional[str] = None) -> List[str]:
        """
        Split a command template and substitute its placeholders.

        The template is tokenized before substitution so an SQL string is
        always passed as a single argument.
        """
        if not template:
            raise ConfigurationError(f"profile '{self.name}' defines no command for this step")
        argv = []
        for part in shlex.split(template):
            part = part.replace("{python}", sys.executable).replace("{root}", root)
            if sql is not None:
                part = part.replace("{sql}", sql)
            argv.append(part)
        return argv


def load_profile(name_or_path: str, profiles_dir: str = PROFILES_DIR) -> DbProfile:
    """
    Load a profile by name (profiles/<name>.json) or by explicit path.

    Raises:
        ConfigurationError: missing file or invalid contents
    """
    path = name_or_path
    if not os.path.isfile(path):
        path = os.path.join(profiles_dir, f"{name_or_path}.json")
    if not os.path.isfile(path):
        raise ConfigurationError(f"profile '{name_or_path}' not found")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return DbProfile.model_validate(json.load(f))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"profile {path} is not valid JSON: {e}")
    except ValidationError as e:
        raise ConfigurationError(f"profile {path} is invalid: {e}")


class LLMSettings(BaseModel):
    """Provider settings for the chat-completion gateway"""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["live", "record", "replay"] = "replay"
    base_url: str = ""
    api_key: str = Field(default="", repr=False)
    model: str = ""
    temperature: float = Field(default=0.1, ge=0)
    max_tokens: int = Field(default=2048, ge=1)
    timeout: float = Field(default=120.0, gt=0)
    retry_attempts: int = Field(default=3, ge=1)
    retry_wait: float = Field(default=1.0, ge=0)


ABLATIONS = ("no_characterization", "no_plan", "no_validation", "fixed_pipeline")


class RunConfig(BaseModel):
    """Settings for one dbforge invocation"""

    model_config = ConfigDict(extra="forbid")

    profile: str = "toydb"
    repo_root: str = "."
    out_dir: str = "out"
    llm: LLMSettings = Field(default_factory=LLMSettings)
    seed: int = 0

    # characterization
    max_units: int = Field(default=50, ge=1)
    max_hops: int = Field(default=2, ge=1)
    top_k: int = Field(default=3, ge=1)

    # planning
    num_plans: int = Field(default=3, ge=1)
    weights: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    threshold: float = Field(default=0.5, ge=0, le=1)

    # synthesis
    samples: int = Field(default=3, ge=1)
    decay: float = Field(default=0.5, gt=0, lt=1)
    floor: float = Field(default=0.05, gt=0, lt=1)

    # orchestration
    max_steps: int = Field(default=30, ge=1)
    memory_path: str = "memory_pool.json"
    memory_cap: int = Field(default=16, ge=3)
    initial_tool: str = "code_agent"
    llm_summaries: bool = False
    keep_failed: bool = False
    ablations: List[Literal["no_characterization", "no_plan", "no_validation", "fixed_pipeline"]] = Field(
        default_factory=list
    )

    # bookkeeping
    run_id: str = "default"
    transcripts_dir: str = "transcripts"
    jobs: int = Field(default=1, ge=1)

    @field_validator("weights")
    @classmethod
    def check_weights(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(w <= 0 for w in value):
            raise ValueError("plan score weights must be positive")
        return value

    def ablated(self, name: str) -> bool:
        return name in self.ablations


def _env_settings() -> Dict[str, Any]:
    """LLM settings from the environment, after .env.local and .env are loaded"""
    load_dotenv(".env.local")
    load_dotenv()
    llm = {}
    for var, key in (("LLM_API_KEY", "api_key"), ("LLM_BASE_URL", "base_url"), ("LLM_MODEL", "model")):
        value = os.getenv(var)
        if value:
            llm[key] = value
    return {"llm": llm} if llm else {}


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                    use_env: bool = True) -> RunConfig:
    """
    Resolve the run configuration.

    Args:
        config_path: Optional JSON config file
        overrides: Values from command-line flags (nested dict for llm settings)
        use_env: Read LLM_* variables from the environment

    Returns:
        The validated RunConfig
    """
    data: Dict[str, Any] = {}
    if config_path:
        if not os.path.isfile(config_path):
            raise ConfigurationError(f"config file {config_path} not found")
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {config_path} is not valid JSON: {e}")
    if use_env:
        data = _merge(data, _env_settings())
    if overrides:
        data = _merge(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration: {e}")
