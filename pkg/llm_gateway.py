"""
Chat-completion gateway with record/replay transcripts.

Every LLM call in dbforge goes through LLMGateway. In replay mode completions
come from transcripts/<run-id>/transcript.jsonl and no HTTP client is ever
built; record mode performs the wire call and appends what it got.
"""

import hashlib
import json
import logging
import os
import re
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Tuple

import httpx
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from config import LLMSettings
from errors import ConfigurationError, LLMError, RetriableLLMError, TranscriptMissError

logger = logging.getLogger(__name__)

logging.getLogger("httpx").setLevel(logging.WARNING)

PROMPT_TAGS = ("plan", "code", "test", "controller", "summary")

_FENCE_RE = re.compile(r"```[\w+-]*[ \t]*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """
    First JSON object or array in a completion.

    Markdown code fences are unwrapped first; prose before or after the
    document is ignored.

    Raises:
        ValueError: the completion holds no JSON document
    """
    fenced = _FENCE_RE.search(text or "")
    if fenced:
        text = fenced.group(1)
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text or ""):
        if ch not in "{[":
            continue
        try:
            value, _ = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            continue
        return value
    raise ValueError("completion contains no JSON document")


@dataclass
class Prompt:
    system: str
    messages: List[Tuple[str, str]]
    temperature: float = 0.1
    max_tokens: int = 2048
    tag: str = "code"

    def __post_init__(self):
        if not self.messages:
            raise ValueError("prompt needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    def digest(self, n: int = 1) -> str:
        """Stable digest of (system, messages, temperature, n, tag)"""
        canonical = json.dumps(
            {
                "system": self.system,
                "messages": [[role, text] for role, text in self.messages],
                "temperature": float(self.temperature),
                "n": n,
                "tag": self.tag,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def chat_messages(self) -> List[Dict[str, str]]:
        out = [{"role": "system", "content": self.system}] if self.system else []
        out.extend({"role": role, "content": text} for role, text in self.messages)
        return out


@dataclass
class SampleBatch:
    """Completions of one multi-sample call; failed slots are listed in errors"""

    texts: List[str] = field(default_factory=list)
    samples: List[int] = field(default_factory=list)
    errors: Dict[int, str] = field(default_factory=dict)


class TranscriptStore:
    """
    Append-only JSONL transcript.

    Each line is one sample slot: {digest, tag, n, sample, completion, error}.
    Replay serves the slots of a digest batch by batch, in recorded order.
    """

    def __init__(self, mode: str, path: Optional[str] = None):
        if mode not in ("live", "record", "replay"):
            raise ConfigurationError(f"unknown LLM mode '{mode}'")
        self.mode = mode
        self.path = path
        self._lock = threading.Lock()
        self._pending: Dict[str, Deque[Dict[str, Any]]] = {}
        if mode == "replay" and path and os.path.isfile(path):
            with open(path, "r", encoding="utf-8") as f:
                for number, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        slot = json.loads(line)
                    except json.JSONDecodeError as e:
                        raise ConfigurationError(f"{path}:{number}: corrupt transcript line ({e})")
                    self._pending.setdefault(slot["digest"], deque()).append(slot)
        if mode == "replay":
            logger.debug(f"TRANSCRIPT LOADED: {sum(len(q) for q in self._pending.values())} slots from {path}")

    @classmethod
    def for_run(cls, transcripts_dir: str, run_id: str, mode: str) -> "TranscriptStore":
        return cls(mode, os.path.join(transcripts_dir, run_id, "transcript.jsonl"))

    def next_batch(self, digest: str, tag: str, n: int) -> List[Dict[str, Any]]:
        """Pop the next n recorded slots of a digest"""
        with self._lock:
            queue = self._pending.get(digest)
            if not queue or len(queue) < n:
                raise TranscriptMissError(digest, tag)
            return [queue.popleft() for _ in range(n)]

    def append_batch(self, digest: str, tag: str, n: int, slots: List[Dict[str, Any]]) -> None:
        if self.mode != "record" or not self.path:
            return
        lines = []
        for sample, slot in enumerate(slots):
            lines.append(json.dumps({
                "digest": digest,
                "tag": tag,
                "n": n,
                "sample": sample,
                "completion": slot.get("completion"),
                "error": slot.get("error"),
            }, sort_keys=True, ensure_ascii=False))
        with self._lock:
            os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write("\n".join(lines) + "\n")


class ChatCompletionsAdapter:
    """OpenAI-style /chat/completions request and response shapes"""

    def __init__(self, settings: LLMSettings):
        self.settings = settings

    def url(self) -> str:
        return self.settings.base_url.rstrip("/") + "/chat/completions"

    def headers(self) -> Dict[str, str]:
        return {"Authorization": f"Bearer {self.settings.api_key}"}

    def payload(self, prompt: Prompt, sample: int) -> Dict[str, Any]:
        return {
            "model": self.settings.model,
            "messages": prompt.chat_messages(),
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_tokens,
            "seed": sample,
            "user": f"dbforge:{prompt.tag}",
        }

    def parse(self, data: Dict[str, Any]) -> str:
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise LLMError(f"malformed chat-completion response: {str(data)[:200]}")
        if content is None:
            raise LLMError("chat-completion response has no content")
        return content


class LLMGateway:
    """
    Uniform completion access in live, record and replay modes.

    Args:
        settings: Provider settings (mode, endpoint, credential, sampling)
        store: Transcript store matching settings.mode
        transport: Optional httpx transport, used by tests and offline recording
    """

    def __init__(self, settings: LLMSettings, store: Optional[TranscriptStore] = None,
                 transport: Optional[httpx.BaseTransport] = None):
        self.settings = settings
        self.store = store or TranscriptStore(settings.mode)
        if self.store.mode != settings.mode:
            raise ConfigurationError(f"transcript store is in {self.store.mode} mode, gateway in {settings.mode}")
        if settings.mode in ("live", "record") and not (settings.base_url and settings.api_key):
            raise ConfigurationError(f"{settings.mode} mode needs LLM_BASE_URL and LLM_API_KEY")
        self.adapter = ChatCompletionsAdapter(settings)
        self._transport = transport
        self._client: Optional[httpx.Client] = None
        self._client_lock = threading.Lock()

    @property
    def mode(self) -> str:
        return self.settings.mode

    def prompt(self, system: str, user: str, tag: str) -> Prompt:
        """Single-turn prompt with the configured sampling settings"""
        return Prompt(system, [("user", user)], self.settings.temperature, self.settings.max_tokens, tag)

    def _http(self) -> httpx.Client:
        with self._client_lock:
            if self._client is None:
                self._client = httpx.Client(transport=self._transport, timeout=self.settings.timeout)
            return self._client

    def _post_once(self, prompt: Prompt, sample: int) -> str:
        try:
            response = self._http().post(self.adapter.url(), json=self.adapter.payload(prompt, sample),
                                         headers=self.adapter.headers())
        except (httpx.TransportError, httpx.TimeoutException) as e:
            raise RetriableLLMError(f"{prompt.tag} request failed: {e}") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise RetriableLLMError(f"{prompt.tag} request returned HTTP {response.status_code}")
        if response.status_code >= 400:
            raise LLMError(f"{prompt.tag} request rejected with HTTP {response.status_code}: {response.text[:200]}")
        try:
            data = response.json()
        except ValueError as e:
            raise LLMError(f"{prompt.tag} response is not JSON: {e}")
        return self.adapter.parse(data)

    def _wire_call(self, prompt: Prompt, sample: int) -> str:
        retrying = Retrying(
            stop=stop_after_attempt(self.settings.retry_attempts),
            wait=wait_exponential(multiplier=self.settings.retry_wait, max=10),
            retry=retry_if_exception_type(RetriableLLMError),
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                return self._post_once(prompt, sample)

    def _slot(self, prompt: Prompt, sample: int) -> Dict[str, Any]:
        try:
            return {"completion": self._wire_call(prompt, sample), "error": None}
        except LLMError as e:
            logger.warning(f"LLM SAMPLE FAILED: {prompt.tag} sample {sample}: {e}")
            return {"completion": None, "error": str(e)}

    def complete_many(self, prompt: Prompt, n: int) -> SampleBatch:
        """
        n independent completions of one prompt, in stable sample order.

        Raises:
            TranscriptMissError: replay mode has no recorded batch for the prompt
            LLMError: every sample failed
        """
        if n < 1:
            raise ValueError("n must be at least 1")
        digest = prompt.digest(n)
        if self.mode == "replay":
            slots = self.store.next_batch(digest, prompt.tag, n)
        else:
            if n == 1:
                slots = [self._slot(prompt, 0)]
            else:
                with ThreadPoolExecutor(max_workers=n) as pool:
                    slots = list(pool.map(lambda i: self._slot(prompt, i), range(n)))
            self.store.append_batch(digest, prompt.tag, n, slots)
        batch = SampleBatch()
        for sample, slot in enumerate(slots):
            if slot.get("completion") is None:
                batch.errors[sample] = slot.get("error") or "no completion"
            else:
                batch.texts.append(slot["completion"])
                batch.samples.append(sample)
        logger.debug(f"LLM {prompt.tag}: {len(batch.texts)}/{n} completions ({self.mode}, {digest[:12]})")
        if not batch.texts:
            raise LLMError(f"all {n} {prompt.tag} samples failed: {batch.errors}")
        return batch

    def complete(self, prompt: Prompt) -> str:
        return self.complete_many(prompt, 1).texts[0]

    def close(self) -> None:
        with self._client_lock:
            if self._client is not None:
                self._client.close()
                self._client = None
