"""Exception hierarchy shared by every dbforge module."""

from typing import Optional


class DbforgeError(Exception):
    """Base class for all dbforge errors"""


class ConfigurationError(DbforgeError):
    """Invalid profile, run configuration, or missing external command"""


class StaleIndexError(DbforgeError):
    """An index entry no longer matches the files on disk"""


class AnchorNotFoundError(DbforgeError):
    """No line in the repository matches an anchor rule"""

    def __init__(self, rule_id: str):
        super().__init__(f"anchor rule '{rule_id}' matched no line")
        self.rule_id = rule_id


class EditCollisionError(DbforgeError):
    """Two edits target the same location with conflicting modes"""


class EditApplyError(DbforgeError):
    """Writing an edit failed; the repository has been restored"""


class CharacterizationError(DbforgeError):
    """A declared function could not be characterized"""


class StaleReferenceError(DbforgeError):
    """A reference unit cannot be expanded from the index"""


class PlanGenerationError(DbforgeError):
    """Every plan sample was unusable"""


class FillFailedError(DbforgeError):
    """Every fill-in-the-blank sample failed template-shape validation"""


class SynthesisError(DbforgeError):
    """From-scratch synthesis produced no usable unit"""


class SemanticGenerationError(DbforgeError):
    """No parseable semantic test was generated"""


class ToolRegistrationError(DbforgeError):
    """A tool name is already registered"""


class LLMError(DbforgeError):
    """The chat-completion provider returned no usable completion"""


class RetriableLLMError(LLMError):
    """Transient wire failure; the call may be retried"""


class TranscriptMissError(LLMError):
    """Replay mode found no stored completion for a prompt"""

    def __init__(self, digest: str, tag: str, sample: Optional[int] = None):
        where = f" sample {sample}" if sample is not None else ""
        super().__init__(f"no recorded completion for tag '{tag}'{where} (digest {digest})")
        self.digest = digest
        self.tag = tag
