"""Chat-completion backend: HTTP client with retries and an in-flight limit, plus a
policy adapter that drives the three role prompts.

Evaluation only -- nothing here is differentiable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx
import numpy as np

from ..errors import AuthError, BackendProtocolError, BackendTimeout, ConfigError, HTTPStatusError
from ..trajectory import SolverContext, Step
from ..verification import VerificationTuple
from .base import Generation, RoleMode, ToolEvidence, load_prompt, parse_solver_action, PROMPT_VERSION
from ..tools import TOOL_OUTPUT_PREFIX

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    repetition_penalty: float = 1.05
    max_tokens: int = 1024

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "repetition_penalty": self.repetition_penalty, "max_tokens": self.max_tokens}


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    api_key: str | None = None
    timeout_ms: int = 30_000
    max_inflight: int = 4
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    model: str = "default"

    def __post_init__(self):
        if not self.endpoint:
            raise ConfigError("remote endpoint is not configured")
        if self.timeout_ms <= 0 or self.max_inflight < 1 or self.max_retries < 0:
            raise ConfigError("timeout_ms and max_inflight must be positive, max_retries non-negative")

    @classmethod
    def from_env(cls, env=None, **overrides) -> "RemoteConfig":
        env = os.environ if env is None else env
        kw = {
            "endpoint": env.get("SERC_ENDPOINT", ""),
            "api_key": env.get("SERC_API_KEY") or None,
        }
        try:
            if "SERC_TIMEOUT_MS" in env:
                kw["timeout_ms"] = int(env["SERC_TIMEOUT_MS"])
            if "SERC_MAX_INFLIGHT" in env:
                kw["max_inflight"] = int(env["SERC_MAX_INFLIGHT"])
        except ValueError as exc:
            raise ConfigError(f"bad remote environment setting: {exc}") from None
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class Completion:
    text: str
    truncated: bool = False


def request_key(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class RemoteClient:
    """Blocking chat client; safe to share across threads."""

    def __init__(
        self,
        cfg: RemoteConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_inflight)
        headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
        self._http = httpx.Client(timeout=cfg.timeout_ms / 1000.0, headers=headers, transport=transport)

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def payload(self, messages: Sequence[dict], sampling: SamplingParams) -> dict:
        return {"model": self.cfg.model, "messages": list(messages), **sampling.to_dict()}

    def _backoff(self, attempt: int) -> float:
        return min(self.cfg.backoff_base * 2**attempt, self.cfg.backoff_max)

    def remote_complete(self, messages: Sequence[dict], sampling: SamplingParams = SamplingParams()) -> Completion:
        body = self.payload(messages, sampling)
        last_exc: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self._backoff(attempt - 1))
            try:
                with self._slots:
                    resp = self._http.post(self.cfg.endpoint, json=body)
            except httpx.TimeoutException as exc:
                last_exc = exc
                log.warning("remote timeout (attempt %d)", attempt + 1)
                continue
            except httpx.TransportError as exc:
                last_exc = exc
                log.warning("remote transport error (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(resp.status_code, resp.text)
            if resp.status_code in RETRYABLE_STATUS:
                last_exc = HTTPStatusError(resp.status_code, resp.text)
                continue
            if resp.status_code >= 400:
                raise HTTPStatusError(resp.status_code, resp.text)
            return self._parse(resp, sampling.max_tokens)
        if isinstance(last_exc, HTTPStatusError):
            raise last_exc
        raise BackendTimeout(f"no response after {self.cfg.max_retries + 1} attempts: {last_exc}")

    @staticmethod
    def _parse(resp: httpx.Response, max_tokens: int) -> Completion:
        try:
            choice = resp.json()["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"unexpected response shape: {exc}") from None
        if not isinstance(text, str):
            raise BackendProtocolError("completion content is not text")
        truncated = choice.get("finish_reason") == "length"
        # budget is enforced client-side too, counting whitespace-delimited tokens
        tokens = text.split()
        if len(tokens) > max_tokens:
            text, truncated = " ".join(tokens[:max_tokens]), True
        return Completion(text, truncated)


# -- fixtures -----------------------------------------------------------------------


def fixture_transport(records: Sequence[dict]) -> httpx.MockTransport:
    """Replay recorded exchanges keyed by request body; unknown requests get a 404."""
    table = {r["key"]: r["response"] for r in records}

    def handler(request: httpx.Request) -> httpx.Response:
        key = request_key(json.loads(request.content))
        if key not in table:
            return httpx.Response(404, json={"error": "no recorded response"})
        return httpx.Response(200, json=table[key])

    return httpx.MockTransport(handler)


def load_fixture(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def record_exchange(payload: dict, text: str, finish_reason: str = "stop") -> dict:
    return {
        "key": request_key(payload),
        "request": payload,
        "response": {"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": finish_reason}]},
    }


# -- policy adapter ---------------------------------------------------------------------


def _render_step(step: Step) -> str:
    lines = [f"Step {step.index} ({step.action.kind}):", step.action.content]
    if step.observation is not None:
        lines.append(f"{TOOL_OUTPUT_PREFIX} {step.observation.payload}")
    return "\n".join(lines)


@dataclass
class RemotePolicy:
    """Drives a chat endpoint with the versioned role prompts."""

    client: RemoteClient
    sampling: SamplingParams = field(default_factory=SamplingParams)
    prompt_version: str = PROMPT_VERSION

    differentiable = False

    def messages(self, context, mode, *, step=None, evidence=None, verification=None) -> list[dict]:
        msgs = [{"role": "system", "content": load_prompt(mode, self.prompt_version)}]
        if mode is RoleMode.SOLVER:
            msgs.append({"role": "user", "content": context.render()})
            if context.patch is not None:
                msgs.append({
                    "role": "user",
                    "content": f"Revise step {context.patch.target_step} as follows and continue:\n{context.patch.new_content}",
                })
        elif mode is RoleMode.VERIFIER:
            msgs.append({"role": "user", "content": f"{context.render()}\n{_render_step(step)}"})
            if evidence is not None:
                msgs.append({"role": "assistant", "content": evidence.call.to_json()})
                msgs.append({"role": "user", "content": f"{TOOL_OUTPUT_PREFIX} {evidence.observation.payload}"})
        elif mode is RoleMode.SELF_REPAIR:
            msgs.append({
                "role": "user",
                "content": f"{context.render()}\n{_render_step(step)}\nVerification: {json.dumps(verification.to_dict())}",
            })
        else:
            raise ValueError(f"unsupported mode {mode}")
        return msgs

    def generate(
        self,
        context: SolverContext,
        mode: RoleMode,
        rng: np.random.Generator,
        *,
        step: Step | None = None,
        evidence: ToolEvidence | None = None,
        verification: VerificationTuple | None = None,
    ) -> Generation:
        done = self.client.remote_complete(
            self.messages(context, mode, step=step, evidence=evidence, verification=verification), self.sampling
        )
        solver_conf = None
        if mode is RoleMode.SOLVER:
            try:
                action, _ = parse_solver_action(done.text)
                solver_conf = action.declared_confidence
            except BackendProtocolError:
                pass
        return Generation(done.text, solver_conf=solver_conf, truncated=done.truncated)
