"""Description generation and text embedding clients, with offline mocks.

The HTTP clients speak the common chat-completions / embeddings JSON shapes,
so any compatible hosted or local model server works.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .summarizer import BehaviorProfile, split_prompt

log = logging.getLogger(__name__)

EMBEDDINGS_MAGIC = b"LTTE"
EMBEDDINGS_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class ClientError(RuntimeError):
    pass


class EndpointConfigError(ClientError):
    """4xx responses and other problems retrying will not fix."""


class TransportError(ClientError):
    pass


class ContentError(ClientError):
    pass


class ConsistencyError(ClientError):
    pass


@dataclass(frozen=True)
class Description:
    client_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ContentError(f"client {self.client_id}: empty description")


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    client_id: str
    vector: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ContentError(f"client {self.client_id}: non-finite embedding")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    timeout: float = 60.0
    max_retries: int = 4
    max_parallel: int = 4
    token_env: str | None = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_tokens: int = 512
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")

    def headers(self) -> dict[str, str]:
        token = os.environ.get(self.token_env, "") if self.token_env else ""
        return {"Authorization": f"Bearer {token}"} if token else {}


class _HTTPEndpoint:
    def __init__(self, cfg: EndpointConfig, http: httpx.Client | None = None, sleep: Callable = time.sleep):
        self.cfg = cfg
        self.http = http or httpx.Client(timeout=cfg.timeout)
        self.sleep = sleep
        self.requests = 0
        self.retries = 0
        self._lock = threading.Lock()

    def _post(self, path: str, payload: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + path
        for attempt in range(self.cfg.max_retries + 1):
            with self._lock:
                self.requests += 1
            try:
                resp = self.http.post(url, json=payload, headers=self.cfg.headers(), timeout=self.cfg.timeout)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                problem = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ContentError(f"{url}: invalid JSON response: {exc}") from None
                if resp.status_code < 500:
                    raise EndpointConfigError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
                problem = f"HTTP {resp.status_code}"
            if attempt == self.cfg.max_retries:
                raise TransportError(f"{url}: giving up after {attempt + 1} attempts ({problem})")
            delay = self.cfg.backoff_base * 2**attempt
            with self._lock:
                self.retries += 1
            log.warning("%s: %s, retry %d in %.1fs", url, problem, attempt + 1, delay)
            self.sleep(delay)
        raise AssertionError("unreachable")


class ChatClient(_HTTPEndpoint):
    def generate(self, prompt: str, client_id: str = "") -> Description:
        if not prompt.strip():
            raise ValueError("prompt must be nonempty")
        system, user = split_prompt(prompt)
        messages = ([{"role": "system", "content": system}] if system else []) + [{"role": "user", "content": user}]
        body = self._post(
            "/chat/completions",
            {
                "model": self.cfg.model,
                "messages": messages,
                "temperature": self.cfg.temperature,
                "max_tokens": self.cfg.max_tokens,
            },
        )
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ContentError(f"client {client_id}: malformed completion response") from None
        if not text or not text.strip():
            raise ContentError(f"client {client_id}: empty completion")
        return Description(client_id, text.strip())


class EmbeddingClient(_HTTPEndpoint):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.dim: int | None = None

    def embed(self, text: str, client_id: str = "") -> TextEmbedding:
        if not text.strip():
            raise ValueError("text must be nonempty")
        body = self._post("/embeddings", {"model": self.cfg.model, "input": text})
        try:
            vector = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError):
            raise ContentError(f"client {client_id}: malformed embedding response") from None
        with self._lock:
            if self.dim is None:
                self.dim = len(vector)
            elif len(vector) != self.dim:
                raise ConsistencyError(f"embedding dimension {len(vector)} differs from first call ({self.dim})")
        return TextEmbedding(client_id, vector)


def generate_description(prompt: str, cfg: EndpointConfig, client_id: str = "", http: httpx.Client | None = None) -> Description:
    return ChatClient(cfg, http).generate(prompt, client_id)


def embed_text(text: str, cfg: EndpointConfig, client_id: str = "", http: httpx.Client | None = None) -> TextEmbedding:
    return EmbeddingClient(cfg, http).embed(text, client_id)


# --- offline mocks ---------------------------------------------------------

_OPENERS = (
    "This user demonstrates a {freq} spending pattern over {span}.",
    "The client shows a {freq} transaction profile across {span}.",
    "Activity follows a {freq} pattern spanning {span}.",
)


def frequency_bucket(avg_tx_per_day: float) -> str:
    if avg_tx_per_day < 0.2:
        return "very low-frequency"
    if avg_tx_per_day < 1.0:
        return "low-frequency"
    return "high-frequency"


def duration_bucket(days: int) -> str:
    # raw day counts would hash to tokens no held-out client shares
    if days < 30:
        return "under a month"
    if days < 120:
        return "a few months"
    if days < 365:
        return "most of a year"
    return "more than a year"


def amount_bucket(avg_outgoing: float) -> str:
    for limit, word in ((250, "tiny"), (500, "small"), (1000, "moderate"), (2000, "sizeable")):
        if avg_outgoing < limit:
            return word
    return "large"


def mock_generate(profile: BehaviorProfile, seed: int = 0, client_id: str = "") -> Description:
    """Template-filled stand-in for an LLM description of a profile."""
    opener = _OPENERS[seed % len(_OPENERS)].format(
        freq=frequency_bucket(profile.avg_tx_per_day), span=duration_bucket(profile.active_period_days)
    )
    names = list(profile.top_mccs)
    if len(names) > 1:
        cats = ", ".join(names[:-1]) + f" and {names[-1]}"
    else:
        cats = names[0]
    if profile.total_expenses > profile.total_income:
        balance = "Overall, expenses exceed income, implying reliance on savings or credit."
    else:
        balance = "Overall, income covers expenses, leaving a positive balance."
    share = profile.share_active_days
    if share >= 0.5:
        regular = "Transactions occur on most days, indicating routine payments."
    elif share >= 0.2:
        regular = "Transactions occur intermittently, with irregular gaps between active days."
    else:
        regular = "Transactions come in sporadic bursts separated by long idle periods."
    amounts = f"Typical purchases are {amount_bucket(profile.avg_outgoing)} in size."
    text = f"{opener} Spending is concentrated in {cats}. {amounts} {balance} {regular}"
    return Description(client_id, text)


_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_slot(token: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode(), digest_size=8, salt=seed.to_bytes(8, "little")).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


def mock_embed(text: str, dim: int = 256, seed: int = 0, client_id: str = "") -> TextEmbedding:
    """Signed feature hashing of lowercase word tokens, L2-normalised."""
    if dim < 8:
        raise ValueError("dim must be >= 8")
    tokens = tokenize(text)
    if not tokens:
        raise ContentError(f"client {client_id}: no tokens to embed")
    v = np.zeros(dim)
    for tok in tokens:
        i, sign = token_slot(tok, dim, seed)
        v[i] += sign
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ContentError(f"client {client_id}: hashed tokens cancel out")
    return TextEmbedding(client_id, v / norm)


class MockGenerator:
    """Counts calls so tests can check the cache short-circuits them."""

    def __init__(self, profiles: dict[str, BehaviorProfile], seed: int = 0):
        self.profiles = profiles
        self.seed = seed
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, prompt: str, client_id: str = "") -> Description:
        with self._lock:
            self.calls += 1
        return mock_generate(self.profiles[client_id], self.seed, client_id)


class MockEmbedder:
    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.calls = 0
        self._lock = threading.Lock()

    def embed(self, text: str, client_id: str = "") -> TextEmbedding:
        with self._lock:
            self.calls += 1
        return mock_embed(text, self.dim, self.seed, client_id)


# --- caching and batch driver ----------------------------------------------


def content_hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode())
        h.update(b"\0")
    return h.hexdigest()


class DiskCache:
    """JSON blobs on disk keyed by a content hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        path = self._path(key)
        if path.exists():
            return json.loads(path.read_text())
        return None

    def put(self, key: str, value) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_text(json.dumps(value))
        tmp.replace(path)


def run_batch(
    items: Sequence[tuple[str, str]],
    fn: Callable[[str, str], object],
    max_parallel: int = 1,
    cache: DiskCache | None = None,
    namespace: str = "",
    encode: Callable[[object], object] = lambda x: x,
    decode: Callable[[str, object], object] = lambda cid, x: x,
) -> dict[str, object]:
    """Apply ``fn(text, client_id)`` to every item, at most ``max_parallel`` at once.

    Returns results keyed by client id, in input order. Failed items are
    logged and left out.
    """
    results: dict[str, object] = {}
    todo = []
    for cid, text in items:
        key = content_hash(namespace, text)
        hit = cache.get(key) if cache else None
        if hit is not None:
            results[cid] = decode(cid, hit)
        else:
            todo.append((cid, text, key))

    def work(item):
        cid, text, key = item
        try:
            out = fn(text, cid)
        except ClientError as exc:
            log.warning("client %s excluded: %s", cid, exc)
            return cid, None
        if cache:
            cache.put(key, encode(out))
        return cid, out

    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        done = dict(pool.map(work, todo))
    ordered = {}
    for cid, _ in items:
        value = results.get(cid, done.get(cid))
        if value is not None:
            ordered[cid] = value
    return ordered


# --- file formats ----------------------------------------------------------


def write_jsonl(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def index_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".index.json")


def write_embeddings(path: str | Path, client_ids: Sequence[str], matrix: np.ndarray) -> None:
    """Binary float32 matrix with an ``LTTE`` header plus a JSON id index."""
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(client_ids):
        raise ValueError("matrix rows must match client ids")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes(order="C"))
    index = {cid: i for i, cid in enumerate(client_ids)}
    index_path(path).write_text(json.dumps(index, indent=0, sort_keys=True) + "\n")


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    raw = Path(path).read_bytes()
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != EMBEDDINGS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != EMBEDDINGS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    matrix = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=_HEADER.size).reshape(count, dim)
    index = json.loads(index_path(path).read_text())
    ids = sorted(index, key=index.__getitem__)
    return ids, matrix.astype(np.float64)
