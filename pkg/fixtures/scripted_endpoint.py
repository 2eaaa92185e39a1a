"""
Deterministic chat-completion endpoint for offline tests.

Answers OpenAI-style /chat/completions requests from a responses document
keyed by function name. The purpose tag comes from the request's "user"
field (dbforge:<tag>) and the sample index from its "seed", so repeated
runs produce the same completions.
"""

import json
import os
import re
import threading
from typing import Any, Dict, List, Optional, Sequence, Union

import httpx

RESPONSES_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "toydb", "responses.json")

_FUNCTION_RE = re.compile(r"^Function: (\S+)", re.MULTILINE)
_TEMPLATE_RE = re.compile(r"^### Template (\d+) \[role=(\w+), file=([^,\]]+), placeholders=(\d+)\]", re.MULTILINE)


def load_responses(path: str = RESPONSES_PATH) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


class ScriptedEndpoint:
    """
    Args:
        responses: Responses document, or a path to one
        controller_cycle: Controller replies repeated forever for every
            function, replacing the per-function scripts
    """

    def __init__(self, responses: Union[str, Dict[str, Any], None] = None,
                 controller_cycle: Optional[Sequence[Any]] = None):
        if responses is None or isinstance(responses, str):
            responses = load_responses(responses or RESPONSES_PATH)
        self.functions: Dict[str, Dict[str, Any]] = responses["functions"]
        self.controller_cycle = list(controller_cycle) if controller_cycle else None
        self.requests: List[Dict[str, Any]] = []
        self._controller_calls: Dict[str, int] = {}
        self._lock = threading.Lock()

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)

    def handle(self, request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content)
        tag = payload.get("user", "dbforge:code").split(":", 1)[1]
        sample = payload.get("seed", 0)
        user = next(m["content"] for m in payload["messages"] if m["role"] == "user")
        m = _FUNCTION_RE.search(user)
        name = m.group(1) if m else None
        with self._lock:
            self.requests.append({"tag": tag, "function": name, "sample": sample})
        if tag == "summary":
            return self._reply("The session synthesized the function and validated it.")
        if name not in self.functions:
            return httpx.Response(400, json={"error": {"message": f"no script for {name}"}})
        spec = self.functions[name]
        content = getattr(self, f"_{tag}")(name, spec, sample, user)
        return self._reply(content)

    @staticmethod
    def _reply(content: str) -> httpx.Response:
        return httpx.Response(200, json={"choices": [{"index": 0, "message": {"role": "assistant",
                                                                              "content": content}}]})

    # -- per-tag answers ---------------------------------------------------

    def _plan(self, name: str, spec: Dict[str, Any], sample: int, user: str) -> str:
        plans = spec.get("plans") or [{
            "function_name": name,
            "units": [{
                "unit_name": name,
                "file_path": "src/funcs.c",
                "blocks": [{"description": "Step 1: read the arguments and set the result",
                            "candidate_refs": ["TOY_GETARG", "TOY_RETURN"]}],
            }],
        }]
        plan = plans[sample % len(plans)]
        if isinstance(plan, str):
            return plan
        text = json.dumps(plan, indent=2)
        return f"```json\n{text}\n```" if sample == 0 else text

    def _implementation(self, name: str, spec: Dict[str, Any], sample: int) -> Dict[str, Any]:
        code = spec["impl"]
        if "impl_alt" in spec and sample == spec.get("alter_sample"):
            code = spec["impl_alt"]
        return {"unit_name": name, "file_path": "src/funcs.c", "role": "implementation", "code": code}

    def _code(self, name: str, spec: Dict[str, Any], sample: int, user: str) -> str:
        registration = {"unit_name": f"{name}_registration", "file_path": "src/funcs.c", "role": "registration",
                        "code": spec["registration"]}
        units = [self._implementation(name, spec, sample)]
        if "Mode: from_scratch" in user:
            return json.dumps({"units": units + [registration]})
        fills, chosen = [], None
        for m in _TEMPLATE_RE.finditer(user):
            i, role, placeholders = int(m.group(1)), m.group(2), int(m.group(4))
            if chosen is None and role == "registration" and placeholders == 2:
                chosen = i
                fills.append({"template": i, "slots": [f'"{name}"', name]})
            else:
                fills.append({"template": i, "skip": True})
        if chosen is None:
            units.append(registration)
        return json.dumps({"fills": fills, "units": units})

    def _test(self, name: str, spec: Dict[str, Any], sample: int, user: str) -> str:
        return json.dumps({"tests": spec.get("tests", [])})

    def _controller(self, name: str, spec: Dict[str, Any], sample: int, user: str) -> str:
        with self._lock:
            n = self._controller_calls.get(name, 0)
            self._controller_calls[name] = n + 1
        if self.controller_cycle:
            reply = self.controller_cycle[n % len(self.controller_cycle)]
        else:
            script = spec.get("controller", [])
            reply = script[n] if n < len(script) else "stop"
        return reply if isinstance(reply, str) else json.dumps(reply)
