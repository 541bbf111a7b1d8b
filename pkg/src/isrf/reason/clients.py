"""Reasoner / encoder clients (file-backed and HTTP) and the description pipeline."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from ..io import append_jsonl, read_embedding, read_jsonl
from .prompts import render_item_prompt, render_user_prompt

log = logging.getLogger(__name__)

Transport = Callable[[str, dict, dict], dict]


class MissingEntry(KeyError):
    pass


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class SemanticRecord:
    entity_type: str
    index: int
    positive: str
    negative: str
    fused: str

    def to_json(self) -> dict:
        return {"entity_type": self.entity_type, "index": self.index, "positive": self.positive,
                "negative": self.negative, "fused": self.fused}

    def text(self, field_name: str = "fused") -> str:
        return getattr(self, field_name)


def load_store(path: str | Path) -> dict[tuple[str, int], SemanticRecord]:
    if not Path(path).exists():
        return {}
    out = {}
    for r in read_jsonl(path):
        out[(r["entity_type"], r["index"])] = SemanticRecord(r["entity_type"], r["index"], r["positive"],
                                                             r["negative"], r["fused"])
    return out


class ReasonerClient(Protocol):
    def complete(self, prompt: str, *, entity: tuple[str, int] | None = None,
                 stage: str | None = None) -> str: ...


class EncoderClient(Protocol):
    dim: int

    def encode(self, texts: Sequence[str], indices: Sequence[int] | None = None) -> np.ndarray: ...


class FileReasoner:
    """Serves pre-generated stage outputs from a semantic store; never touches the network."""

    _FIELDS = {"forward": "positive", "backward": "negative", "fuse": "fused"}

    def __init__(self, store: str | Path):
        self.records = load_store(store)

    def complete(self, prompt, *, entity=None, stage=None):
        rec = self.records.get(tuple(entity) if entity else None)
        if rec is None:
            raise MissingEntry(f"no stored record for {entity}")
        return getattr(rec, self._FIELDS[stage])


def urllib_transport(url: str, payload: dict, headers: dict, timeout: float = 60.0) -> dict:
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST",
                                 headers={"Content-Type": "application/json", **headers})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read())
    except OSError as exc:
        raise TransportError(str(exc)) from exc


class HttpReasoner:
    """Chat-completion client.

    Request: ``POST {base}/chat/completions`` with
    ``{"model": m, "messages": [{"role": "user", "content": prompt}], "temperature": 0}``;
    reply text is ``choices[0].message.content``.
    """

    def __init__(self, base_url: str | None = None, model: str = "reasoner", token: str | None = None,
                 transport: Transport = urllib_transport):
        self.base_url = (base_url or os.environ.get("REASONER_URL", "")).rstrip("/")
        if not self.base_url:
            raise ValueError("reasoner URL missing (set REASONER_URL)")
        self.model = model
        self.token = token if token is not None else os.environ.get("REASONER_TOKEN")
        self.transport = transport

    def request(self, prompt: str) -> dict:
        return {"model": self.model, "messages": [{"role": "user", "content": prompt}], "temperature": 0}

    def complete(self, prompt, *, entity=None, stage=None):
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        resp = self.transport(f"{self.base_url}/chat/completions", self.request(prompt), headers)
        return resp["choices"][0]["message"]["content"]


class FileEncoder:
    def __init__(self, path: str | Path):
        self.matrix, self.header = read_embedding(path)
        self.dim = self.matrix.shape[1]

    def encode(self, texts, indices=None):
        if indices is None:
            raise ValueError("file-backed encoder needs entity indices")
        return self.matrix[np.asarray(indices, dtype=np.int64)]


class HttpEncoder:
    """``POST {url}`` with ``{"model": m, "input": [...]}``; reads ``data[i].embedding``."""

    def __init__(self, url: str | None = None, model: str = "encoder", transport: Transport = urllib_transport,
                 batch_size: int = 32):
        self.url = url or os.environ.get("ENCODER_URL", "")
        if not self.url:
            raise ValueError("encoder URL missing (set ENCODER_URL)")
        self.model, self.transport, self.batch_size = model, transport, batch_size
        self.dim: int | None = None

    def encode(self, texts, indices=None):
        rows = []
        for i in range(0, len(texts), self.batch_size):
            resp = self.transport(self.url, {"model": self.model, "input": list(texts[i:i + self.batch_size])}, {})
            rows.extend(item["embedding"] for item in resp["data"])
        widths = {len(r) for r in rows}
        if len(widths) > 1 or (self.dim is not None and widths != {self.dim}):
            raise ValueError(f"encoder returned inconsistent dimensions {sorted(widths)}")
        out = np.asarray(rows, dtype=np.float64)
        self.dim = out.shape[1]
        return out


@dataclass(frozen=True)
class EntitySpec:
    """An item (``payload`` = attribute mapping) or user (``payload`` = sampled fused item texts)."""

    entity_type: str
    index: int
    payload: Mapping[str, str] | Sequence[str]


@dataclass
class GenerationReport:
    records: list[SemanticRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    gaps: list[tuple[str, int]] = field(default_factory=list)
    skipped: int = 0


def with_retry(fn: Callable[[], str], attempts: int = 3, backoff: float = 0.5,
               sleep: Callable[[float], None] = time.sleep) -> str:
    for attempt in range(attempts):
        try:
            return fn()
        except TransportError:
            if attempt == attempts - 1:
                raise
            sleep(backoff * 2 ** attempt)
    raise AssertionError("unreachable")


def _describe(client: ReasonerClient, spec: EntitySpec, attempts, backoff, sleep) -> SemanticRecord:
    render = render_item_prompt if spec.entity_type == "item" else render_user_prompt
    key = (spec.entity_type, spec.index)

    def ask(stage, context=None):
        prompt = render(spec.payload, stage, context)
        return with_retry(lambda: client.complete(prompt, entity=key, stage=stage), attempts, backoff, sleep)

    pos = ask("forward")
    neg = ask("backward", pos)
    fused = ask("fuse", (pos, neg))
    return SemanticRecord(spec.entity_type, spec.index, pos, neg, fused)


def generate_descriptions(client: ReasonerClient, entities: Sequence[EntitySpec], store: str | Path,
                          max_in_flight: int = 4, attempts: int = 3, backoff: float = 0.5,
                          sleep: Callable[[float], None] = time.sleep,
                          limit: int | None = None) -> GenerationReport:
    """Run forward -> backward -> fuse for every entity missing from ``store``.

    Records are appended in entity order, so an interrupted run resumed later
    leaves the same store as one uninterrupted run.  ``limit`` caps how many new
    entities are processed in this call.
    """
    done = load_store(store)
    todo = [e for e in entities if (e.entity_type, e.index) not in done]
    report = GenerationReport(skipped=len(entities) - len(todo))
    if limit is not None:
        todo = todo[:limit]
    lock = threading.Lock()

    def work(spec):
        try:
            return spec, _describe(client, spec, attempts, backoff, sleep), None
        except MissingEntry:
            return spec, None, "gap"
        except TransportError as exc:
            return spec, None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        for spec, rec, err in pool.map(work, todo):
            if rec is not None:
                with lock:
                    append_jsonl(store, rec.to_json())
                report.records.append(rec)
            elif err == "gap":
                report.gaps.append((spec.entity_type, spec.index))
            else:
                report.failures.append({"entity_type": spec.entity_type, "index": spec.index, "error": err})
    if report.gaps:
        log.warning("%d entities missing from the file-backed store", len(report.gaps))
    return report


def encode_texts(client: EncoderClient, records: Sequence[SemanticRecord], field_name: str = "fused") -> np.ndarray:
    """Row ``i`` of the result embeds the record with index ``i``."""
    recs = sorted(records, key=lambda r: r.index)
    if [r.index for r in recs] != list(range(len(recs))):
        raise ValueError("records must cover indices 0..n-1 exactly once")
    texts = [r.text(field_name) for r in recs]
    if any(not t for t in texts):
        raise ValueError(f"every record needs a non-empty {field_name} text")
    out = client.encode(texts, [r.index for r in recs])
    if out.shape[0] != len(recs):
        raise ValueError("encoder returned the wrong number of rows")
    return out
