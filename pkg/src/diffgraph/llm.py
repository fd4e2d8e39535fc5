"""LLM client interface used by both agents, with a deterministic stub."""
from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Any, Protocol, Sequence

from .errors import LlmUnavailableError

SKILL_TOKEN = re.compile(r"[A-Za-z0-9_-]+:[A-Za-z0-9_-]+")
_GRAMMAR = re.compile(
    r"^\s*subject:([A-Za-z0-9_-]+)\s*(?:;\s*attrs:([A-Za-z0-9_-]+(?:\s*,\s*[A-Za-z0-9_-]+)*))?\s*$")
_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


@dataclass(frozen=True)
class Candidate:
    id: str
    kind: str
    description: str


class LlmClient(Protocol):
    def summarize_prompt(self, prompt: str) -> str: ...

    def extract_attributes(self, prompt: str) -> list[str]: ...

    def filter_experts(self, needs: dict, candidates: Sequence[Candidate]) -> list[str]: ...

    def summarize_expert(self, homepage: str) -> str: ...


def skill_tokens(text: str) -> list[str]:
    """``key:value`` tokens in order of first appearance, lowercased."""
    seen: dict[str, None] = {}
    for tok in SKILL_TOKEN.findall(text):
        seen.setdefault(tok.lower(), None)
    return list(seen)


def stub_parse(prompt: str) -> tuple[str, list[str]]:
    """Parse ``subject:<tok>[; attrs:<tok>(,<tok>)*]``; anything else is free text."""
    m = _GRAMMAR.match(prompt)
    if not m:
        return prompt, []
    attrs = [a.strip() for a in m.group(2).split(",")] if m.group(2) else []
    return f"subject:{m.group(1)}", attrs


def first_sentence(text: str) -> str:
    text = text.strip()
    m = _SENTENCE_END.search(text)
    return text[: m.end()] if m else text


def attribute_token(attribute: str) -> str:
    return attribute.lower() if ":" in attribute else f"attr:{attribute.lower()}"


class StubLlm:
    """Rule-based stand-in for the agents' language model. Pure functions only."""

    def summarize_prompt(self, prompt: str) -> str:
        return stub_parse(prompt)[0]

    def extract_attributes(self, prompt: str) -> list[str]:
        return stub_parse(prompt)[1]

    def summarize_expert(self, homepage: str) -> str:
        parts = [first_sentence(homepage)] + skill_tokens(homepage)
        return " ".join(p for p in parts if p)

    def filter_experts(self, needs: dict, candidates: Sequence[Candidate]) -> list[str]:
        """Keep candidates sharing a skill token with the parsed needs.

        The first CKPT candidate is always kept so a base model exists.
        """
        wanted = set(skill_tokens(needs.get("summary", "")))
        wanted.update(attribute_token(a) for a in needs.get("attributes", []))
        kept = []
        top_ckpt_seen = False
        for c in candidates:
            is_top_ckpt = c.kind == "CKPT" and not top_ckpt_seen
            if c.kind == "CKPT":
                top_ckpt_seen = True
            if is_top_ckpt or wanted.intersection(skill_tokens(c.description)):
                kept.append(c.id)
        return kept


@dataclass
class HttpLlm:
    """Remote client: POST {"op": ..., "payload": {...}} -> {"result": ...}."""

    url: str
    timeout: float = 60.0

    def _call(self, op: str, payload: dict[str, Any]) -> Any:
        body = json.dumps({"op": op, "payload": payload}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read())["result"]
        except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
            raise LlmUnavailableError(f"LLM endpoint {self.url} failed on {op}: {exc}") from exc

    def summarize_prompt(self, prompt: str) -> str:
        return str(self._call("summarize_prompt", {"prompt": prompt}))

    def extract_attributes(self, prompt: str) -> list[str]:
        return [str(a) for a in self._call("extract_attributes", {"prompt": prompt})]

    def summarize_expert(self, homepage: str) -> str:
        return str(self._call("summarize_expert", {"homepage": homepage}))

    def filter_experts(self, needs: dict, candidates: Sequence[Candidate]) -> list[str]:
        payload = {"needs": needs,
                   "candidates": [{"id": c.id, "kind": c.kind, "description": c.description}
                                  for c in candidates]}
        return [str(i) for i in self._call("filter_experts", payload)]


def llm_from_env(value: str | None = None) -> LlmClient:
    """Resolve ``DIFFGRAPH_LLM=stub|http:<url>``."""
    value = value if value is not None else os.environ.get("DIFFGRAPH_LLM", "stub")
    if value in ("", "stub"):
        return StubLlm()
    if value.startswith("http:"):
        rest = value[len("http:"):]
        return HttpLlm(value if rest.startswith("//") else rest)
    raise ValueError(f"unknown LLM backend {value!r}")
