"""Factor lists, prompt rendering, and knowledge generation.

Prompt rendering is a pure function of its inputs and the template version.
Rendered prompts embed machine-parseable markers (``Factors:``,
``Description:``, ``- title [liked]``, ``* member``) that the deterministic
mock client also understands, so the whole generation path runs offline.

The knowledge cache is an append-only JSON-lines file plus an adjacent
index file mapping (key_kind, key, prompt_hash) to the line offset. A cache
hit never triggers a client call; misses are retried with exponential
backoff and hard failures are reported back instead of aborting the run.
"""

from __future__ import annotations

import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .errors import ClientError, PromptError
from .ioutil import stable_hash64

TEMPLATE_VERSION = "v1"

# Scenario factor lists confirmed by domain experts; used as overrides so
# tests never depend on a live model.
EXPERT_FACTORS: Mapping[str, tuple[str, ...]] = {
    "movie": ("genre", "actors", "directors", "theme", "mood",
              "production quality", "critical acclaim"),
    "news": ("topic", "source", "region", "style", "freshness", "clarity", "impact"),
}

FACTOR_ELICITATION_TEMPLATE = (
    "List the important factors or features that determine whether a user "
    "will be interested in a {scenario}. Answer with a short comma-separated list."
)

_USER_TEMPLATE = """Scenario: {scenario}
Profile: {profile}
Rated history (most recent last):
{history}
Factors: {factors}
Analyze the user's preferences for each factor above, citing the rated history."""

_ITEM_TEMPLATE = """Scenario: {scenario}
Description: {description}
Factors: {factors}
Introduce this item and provide relevant background for each factor above."""

_SET_TEMPLATE = """Scenario: {scenario}
The following items form one group:
{members}
Factors: {factors}
Describe the commonalities this set shares for each factor above."""


@dataclass(frozen=True)
class FactorSet:
    scenario: str
    factors: tuple[str, ...]

    def __post_init__(self):
        cleaned = tuple(f.strip().lower() for f in self.factors)
        if any(not f for f in cleaned):
            raise PromptError("factor names must be non-empty")
        if len(set(cleaned)) != len(cleaned):
            raise PromptError(f"duplicate factors in {cleaned}")
        if not 3 <= len(cleaned) <= 12:
            raise PromptError(f"need 3..12 factors, got {len(cleaned)}")
        object.__setattr__(self, "factors", cleaned)

    def to_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "factors": list(self.factors)})

    @classmethod
    def from_json(cls, text: str) -> "FactorSet":
        data = json.loads(text)
        return cls(data["scenario"], tuple(data["factors"]))


@dataclass(frozen=True)
class PromptText:
    kind: str              # user | item | set | factor_elicitation
    rendered: str
    key: str | None        # entity or cluster id; None only for factor_elicitation
    key_kind: str | None   # storage kind: user | item | user_cluster | item_cluster
    template_version: str
    content_hash: int      # 64-bit digest of the rendered text, salted with the
                           # template version so template bumps invalidate caches


def _finish_prompt(kind: str, rendered: str, key: str | None, key_kind: str | None) -> PromptText:
    if not rendered:
        raise PromptError("rendered prompt is empty")
    digest = stable_hash64(TEMPLATE_VERSION + "\n" + rendered)
    return PromptText(kind, rendered, key, key_kind, TEMPLATE_VERSION, digest)


def build_user_prompt(profile: str, history: Sequence[tuple[str, int]],
                      factors: FactorSet, key: str, max_history: int = 20) -> PromptText:
    """Profile sentence, enumerated liked/disliked history (most recent
    `max_history` entries), then the per-factor analysis instruction."""
    if not history:
        raise PromptError(f"insufficient behavior evidence for user {key!r}")
    lines = []
    for title, label in list(history)[-max_history:]:
        marker = "liked" if label == 1 else "disliked"
        lines.append(f"- {title} [{marker}]")
    rendered = _USER_TEMPLATE.format(scenario=factors.scenario,
                                     profile=profile or "(no profile)",
                                     history="\n".join(lines),
                                     factors="; ".join(factors.factors))
    return _finish_prompt("user", rendered, key, "user")


def build_item_prompt(item_description: str, factors: FactorSet, key: str) -> PromptText:
    if not item_description or not item_description.strip():
        raise PromptError(f"item {key!r} has no description")
    rendered = _ITEM_TEMPLATE.format(scenario=factors.scenario,
                                     description=item_description.strip(),
                                     factors="; ".join(factors.factors))
    return _finish_prompt("item", rendered, key, "item")


def build_set_prompt(item_titles: Sequence[str], factors: FactorSet, key: str,
                     key_kind: str = "item_cluster", max_items: int = 80) -> PromptText:
    """Commonality prompt over a canonical (lexicographically sorted) item set."""
    titles = sorted(item_titles)
    if len(titles) < 2:
        raise PromptError(f"set prompt needs at least 2 items, got {len(titles)}")
    if len(titles) > max_items:
        raise PromptError(f"set prompt capped at {max_items} items, got {len(titles)}")
    members = "\n".join(f"* {t}" for t in titles)
    rendered = _SET_TEMPLATE.format(scenario=factors.scenario, members=members,
                                    factors="; ".join(factors.factors))
    return _finish_prompt("set", rendered, key, key_kind)


def build_factor_elicitation_prompt(scenario: str) -> PromptText:
    rendered = FACTOR_ELICITATION_TEMPLATE.format(scenario=scenario)
    return _finish_prompt("factor_elicitation", rendered, None, None)


def elicit_factors(scenario: str, client: "LLMClient | None",
                   expert_overrides: Sequence[str] | None = None) -> FactorSet:
    """Ask the client for scenario factors, or take the expert list verbatim."""
    if expert_overrides:
        return FactorSet(scenario, tuple(expert_overrides))
    if client is None:
        raise PromptError("factor elicitation needs a client or expert overrides")
    raw = client.complete(build_factor_elicitation_prompt(scenario).rendered)
    parts = [p.strip().lower() for p in re.split(r"[,\n;]+", raw)]
    seen: list[str] = []
    for p in parts:
        p = p.strip(" .-*0123456789")
        if p and p not in seen:
            seen.append(p)
    if not seen:
        raise PromptError(f"could not parse factors from response: {raw!r}")
    try:
        return FactorSet(scenario, tuple(seen[:12]))
    except PromptError as exc:
        raise PromptError(f"{exc}; raw response: {raw!r}") from None


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------

class LLMClient(Protocol):
    model_id: str

    def complete(self, prompt: str) -> str:
        ...


_FILLER_LEXICON = (
    "overall notably widely generally audiences viewers repeatedly strongly "
    "moderately subtly clearly balance pacing texture tone craft detail "
    "distinct familiar fresh classic modern ambitious restrained vivid "
    "memorable engaging polished layered earnest playful somber warm cool"
).split()


class MockLLM:
    """Deterministic template-driven pseudo-knowledge generator.

    For every factor in the prompt it emits one sentence echoing the salient
    content tokens (liked history titles, the item description, or the set
    members), then pads with seeded filler to roughly `target_tokens` words.
    Deterministic in (prompt, seed).
    """

    def __init__(self, seed: int = 0, target_tokens: int = 550):
        self.seed = seed
        self.target_tokens = target_tokens
        self.model_id = f"mock-llm-s{seed}"

    def complete(self, prompt: str) -> str:
        import numpy as np

        factors = []
        liked, disliked, content = [], [], []
        for line in prompt.splitlines():
            line = line.strip()
            if line.startswith("Factors:"):
                factors = [f.strip() for f in line[len("Factors:"):].split(";") if f.strip()]
            elif line.startswith("- ") and line.endswith("[liked]"):
                liked.append(line[2:-len("[liked]")].strip())
            elif line.startswith("- ") and line.endswith("[disliked]"):
                disliked.append(line[2:-len("[disliked]")].strip())
            elif line.startswith("Description:"):
                content.append(line[len("Description:"):].strip())
            elif line.startswith("* "):
                content.append(line[2:].strip())
        if not factors:
            factors = ["relevance"]
        core = liked + content
        rng = np.random.default_rng((stable_hash64(prompt) ^ self.seed) & 0xFFFFFFFF)

        sentences = []
        for factor in factors:
            if core:
                picks = " and ".join(core) if len(core) <= 4 else " and ".join(
                    core[i] for i in sorted(rng.choice(len(core), size=4, replace=False)))
                sentences.append(f"Regarding {factor}, the focus centers on {picks}.")
            else:
                sentences.append(f"Regarding {factor}, little evidence is available.")
        if disliked:
            sentences.append("Less appealing were " + ", ".join(disliked) + ".")
        text = " ".join(sentences)
        target = int(self.target_tokens * rng.uniform(0.9, 1.1))
        words = text.split()
        filler_needed = max(target - len(words), 0)
        if filler_needed:
            filler = rng.choice(_FILLER_LEXICON, size=filler_needed)
            text = text + " " + " ".join(filler.tolist())
        return text


class RemoteChatClient:
    """Chat-completion endpoint driven by a config-named environment variable
    for its key (the key itself never lives in config files)."""

    def __init__(self, endpoint: str, model: str, api_key_env: str = "REKI_LLM_API_KEY",
                 temperature: float = 0.0, timeout: float = 120.0, post=None):
        self.endpoint = endpoint
        self.model = model
        self.model_id = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout = timeout
        if post is None:
            import requests

            post = requests.post
        self._post = post

    def complete(self, prompt: str) -> str:
        import os

        key = os.environ.get(self.api_key_env)
        if not key:
            raise ClientError(f"environment variable {self.api_key_env} is not set")
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        resp = self._post(self.endpoint, json=payload,
                          headers={"Authorization": f"Bearer {key}",
                                   "Content-Type": "application/json"},
                          timeout=self.timeout)
        body = resp.json() if not isinstance(resp, dict) else resp
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ClientError(f"malformed completion response: {exc}") from None


# ---------------------------------------------------------------------------
# knowledge cache + generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KnowledgeText:
    key_kind: str
    key: str
    text: str
    prompt_hash: int
    model_id: str
    created_at: float

    def to_json(self) -> str:
        return json.dumps({
            "key_kind": self.key_kind, "key": self.key, "text": self.text,
            "prompt_hash": self.prompt_hash, "model_id": self.model_id,
            "created_at": self.created_at,
        })

    @classmethod
    def from_json(cls, line: str) -> "KnowledgeText":
        d = json.loads(line)
        return cls(d["key_kind"], d["key"], d["text"], d["prompt_hash"],
                   d["model_id"], d["created_at"])


class KnowledgeCache:
    """Append-only JSONL of KnowledgeText records with a single-writer lock."""

    def __init__(self, path):
        self.path = Path(path)
        self._index: dict[tuple[str, str, int], int] = {}
        self._entries: dict[tuple[str, str, int], KnowledgeText] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            offset = 0
            for line in self.path.read_text(encoding="utf-8").splitlines(keepends=True):
                if line.strip():
                    entry = KnowledgeText.from_json(line)
                    cache_key = (entry.key_kind, entry.key, entry.prompt_hash)
                    self._index[cache_key] = offset
                    self._entries[cache_key] = entry
                offset += len(line.encode("utf-8"))
        self._fh = open(self.path, "a", encoding="utf-8")

    def get(self, key_kind: str, key: str, prompt_hash: int) -> KnowledgeText | None:
        return self._entries.get((key_kind, key, prompt_hash))

    def entries(self) -> list[KnowledgeText]:
        return list(self._entries.values())

    def put(self, entry: KnowledgeText) -> None:
        with self._lock:
            offset = self._fh.tell()
            self._fh.write(entry.to_json() + "\n")
            self._fh.flush()
            cache_key = (entry.key_kind, entry.key, entry.prompt_hash)
            self._index[cache_key] = offset
            self._entries[cache_key] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def flush_index(self) -> None:
        index_path = Path(str(self.path) + ".idx.json")
        serializable = {f"{k[0]}|{k[1]}|{k[2]}": off for k, off in self._index.items()}
        index_path.write_text(json.dumps(serializable, indent=0), encoding="utf-8")

    def close(self) -> None:
        self.flush_index()
        self._fh.close()

    def __enter__(self) -> "KnowledgeCache":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class GenerationResult:
    texts: list[KnowledgeText]
    call_count: int
    cache_hits: int
    failures: list[tuple[str, str, str]]  # (key_kind, key, error)


def generate_knowledge(prompts: Sequence[PromptText], client: LLMClient,
                       cache: KnowledgeCache, max_retries: int = 3,
                       backoff: float = 0.5, parallel: int = 4,
                       clock: Callable[[], float] = time.time) -> GenerationResult:
    """Resolve prompts through the cache, calling the client only on misses.

    call_count is the number of actual client invocations (retries
    included); failed prompts are reported, not fatal. Responses are
    consumed in submission order so cache files are reproducible.
    """
    call_lock = threading.Lock()
    calls = [0]

    def fetch(prompt: PromptText) -> str:
        last: Exception | None = None
        for attempt in range(max_retries):
            with call_lock:
                calls[0] += 1
            try:
                text = client.complete(prompt.rendered)
                if not text or not text.strip():
                    raise ClientError("empty completion")
                return text
            except Exception as exc:
                last = exc
                if attempt + 1 < max_retries and backoff > 0:
                    time.sleep(backoff * (2 ** attempt))
        raise ClientError(f"generation failed after {max_retries} attempts: {last}")

    texts: list[KnowledgeText] = []
    failures: list[tuple[str, str, str]] = []
    hits = 0
    misses: list[PromptText] = []
    for prompt in prompts:
        if prompt.key is None or prompt.key_kind is None:
            raise PromptError(f"prompt of kind {prompt.kind!r} has no storage key")
        cached = cache.get(prompt.key_kind, prompt.key, prompt.content_hash)
        if cached is not None:
            hits += 1
            texts.append(cached)
        else:
            misses.append(prompt)

    if misses:
        with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
            futures = [(p, pool.submit(fetch, p)) for p in misses]
            for prompt, future in futures:
                try:
                    raw = future.result()
                except ClientError as exc:
                    failures.append((prompt.key_kind, prompt.key, str(exc)))
                    continue
                entry = KnowledgeText(prompt.key_kind, prompt.key, raw,
                                      prompt.content_hash, client.model_id, clock())
                cache.put(entry)
                texts.append(entry)
    return GenerationResult(texts, calls[0], hits, failures)
