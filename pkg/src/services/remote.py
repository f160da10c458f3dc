"""Optional adapter that scores next predicates with a remote language model.

Wire contract: ``POST {endpoint}`` with JSON ``{"prompt": str, "candidates": [str, ...]}``
answered by ``{"logprobs": [float, ...]}``, one entry per candidate (the
summed token log-probabilities of that candidate's name after the prompt).
The adapter renormalizes over the candidates and caches answers by a stable
hash of (endpoint, prompt, candidates).
"""

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional

import httpx
import numpy as np
from scipy.special import logsumexp

from .errors import RemoteAdapterError
from .events import EventSequence
from .logic_tree import TreeSpace
from .policy import AutoregressivePolicy, PolicyContext, TokenDistribution
from .utils import write_json_atomic

logger = logging.getLogger(__name__)

STOP_MARKER = "<stop>"

PROMPT_TEMPLATE = """You are reasoning about which events cause other events.
Event types: {event_types}
Observed events (time: event): {history}
Event to explain: {target}
We are explaining event {parent} at depth {depth} of a rule tree.
Causes already listed at this level: {siblings}
Name one more event type that happens before {parent} and makes it more likely, or answer {stop} if none is left.
Answer:"""


def render_context(
    space: TreeSpace,
    ctx: PolicyContext,
    history: Optional[EventSequence] = None,
    target: Optional[int] = None,
) -> str:
    vocab = space.vocabulary
    events = (
        ", ".join(f"{t:.3g}: {vocab.name_of(int(k))}" for t, k in zip(history.times, history.types))
        if history is not None and len(history)
        else "none"
    )
    return PROMPT_TEMPLATE.format(
        event_types=", ".join(vocab.names),
        history=events,
        target=vocab.name_of(target) if target is not None else "unknown",
        parent=vocab.name_of(ctx.parent),
        depth=ctx.depth,
        siblings=", ".join(vocab.name_of(s) for s in sorted(ctx.chosen_siblings)) or "none",
        stop=STOP_MARKER,
    )


class RemoteLogprobClient:
    """HTTP client for the log-probability endpoint, with retries and a disk cache.

    Args:
        endpoint: URL of the scoring endpoint; defaults to ``$LOGIC_LM_ENDPOINT``
        token: Bearer token; defaults to ``$LOGIC_LM_TOKEN``
        cache_path: Optional JSON file holding previously fetched answers
        retries: Attempts after the first failure before giving up
        backoff: Initial sleep between attempts in seconds, doubled each retry
        timeout: Per-request timeout in seconds
        transport: Optional httpx transport (tests inject a mock)
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        token: Optional[str] = None,
        cache_path: Optional[str | Path] = None,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint or os.environ.get("LOGIC_LM_ENDPOINT")
        if not self.endpoint:
            raise RemoteAdapterError("no endpoint configured (set LOGIC_LM_ENDPOINT)")
        token = token or os.environ.get("LOGIC_LM_TOKEN")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.retries = retries
        self.backoff = backoff
        self.cache_path = Path(cache_path) if cache_path is not None else None
        self.network_calls = 0
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._lock = threading.Lock()
        self._cache: Dict[str, List[float]] = self._load_cache()

    def _load_cache(self) -> Dict[str, List[float]]:
        if self.cache_path is None:
            return {}
        try:
            with open(self.cache_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (json.JSONDecodeError, FileNotFoundError):
            return {}

    def cache_key(self, prompt: str, candidates: List[str]) -> str:
        blob = json.dumps([self.endpoint, prompt, candidates], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _post(self, prompt: str, candidates: List[str]) -> List[float]:
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                self.network_calls += 1
                response = self._client.post(self.endpoint, json={"prompt": prompt, "candidates": candidates})
                response.raise_for_status()
                return response.json()["logprobs"]
            except (httpx.HTTPError, KeyError, ValueError) as e:
                last_error = e
                logger.warning(f"Remote scoring attempt {attempt + 1} failed: {e}")
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise RemoteAdapterError(
            f"remote scoring failed after {self.retries + 1} attempts: {last_error}"
        ) from last_error

    def remote_logprobs(self, prompt: str, candidates: List[str]) -> np.ndarray:
        """Log-probabilities renormalized over ``candidates``.

        Raises:
            RemoteAdapterError: On transport failure after retries, a response
                whose length does not match the candidates, or non-finite values
        """
        key = self.cache_key(prompt, candidates)
        with self._lock:
            cached = self._cache.get(key)
        if cached is None:
            raw = self._post(prompt, candidates)
            if len(raw) != len(candidates):
                raise RemoteAdapterError(
                    f"candidate-name tokenization mismatch: {len(raw)} scores for {len(candidates)} candidates"
                )
            values = np.asarray(raw, dtype=np.float64)
            if not np.all(np.isfinite(values)):
                raise RemoteAdapterError("remote returned non-finite log-probabilities")
            with self._lock:
                self._cache[key] = values.tolist()
                if self.cache_path is not None:
                    write_json_atomic(self.cache_path, self._cache)
            cached = values.tolist()
        values = np.asarray(cached, dtype=np.float64)
        return values - logsumexp(values)

    def close(self):
        self._client.close()


class RemotePolicy(AutoregressivePolicy):
    """Frozen policy whose next-token scores come from the remote model.

    Usable anywhere an ``AutoregressivePolicy`` is read (tree log-probabilities,
    sampling) but never trained.
    """

    def __init__(
        self,
        space: TreeSpace,
        client: RemoteLogprobClient,
        history: Optional[EventSequence] = None,
        target: Optional[int] = None,
    ):
        super().__init__(space)
        self.client = client
        self.history = history
        self.target = target

    def next_token_dist(self, ctx: PolicyContext) -> TokenDistribution:
        mask = self.token_mask(ctx)
        ids = [i for i in range(self.n_tokens) if mask[i]]
        names = [
            STOP_MARKER if i == self.n_tokens - 1 else self.space.vocabulary.name_of(i) for i in ids
        ]
        scores = self.client.remote_logprobs(render_context(self.space, ctx, self.history, self.target), names)
        logprobs = np.full(self.n_tokens, -np.inf)
        logprobs[ids] = scores
        return TokenDistribution(logprobs)
