import numpy as np
import pytest

from isrf.io import write_embedding
from isrf.reason import (EntitySpec, SemanticRecord, FileEncoder, FileReasoner, HttpEncoder, HttpReasoner, PromptError,
                         TransportError, encode_texts, generate_descriptions, load_store, render_item_prompt,
                         render_user_prompt, sample_history, template_version, with_retry)

ATTRS = {"title": "Wooden train set", "category": "Toys", "brand": "Acme"}


class EchoReasoner:
    """Deterministic stand-in: echoes stage, entity and prompt length."""

    def __init__(self):
        self.calls = []

    def complete(self, prompt, *, entity=None, stage=None):
        self.calls.append((entity, stage, prompt))
        return f"{stage}:{entity[0]}:{entity[1]}:{len(prompt)}"


def items(n):
    return [EntitySpec("item", i, {"title": f"thing {i}"}) for i in range(n)]


def test_item_prompts_golden():
    fwd = render_item_prompt(ATTRS, "forward")
    assert "title: Wooden train set\ncategory: Toys\nbrand: Acme" in fwd
    assert "forward" in fwd.lower()
    back = render_item_prompt(ATTRS, "backward", "kids who like trains")
    assert "kids who like trains" in back
    fuse = render_item_prompt(ATTRS, "fuse", ("POS TEXT", "NEG TEXT"))
    assert "POS TEXT" in fuse and "NEG TEXT" in fuse
    assert all("{" not in p for p in (fwd, back, fuse))
    assert template_version() == "1"


def test_user_prompts():
    fwd = render_user_prompt(["a red ball", "a kite"], "forward")
    assert "- a red ball\n- a kite" in fwd
    with pytest.raises(PromptError):
        render_user_prompt([], "forward")


@pytest.mark.parametrize("stage,context", [("backward", None), ("backward", ""), ("fuse", None),
                                           ("fuse", ("only",)), ("fuse", ("x", ""))])
def test_missing_context_rejected(stage, context):
    with pytest.raises(PromptError, match=stage):
        render_item_prompt(ATTRS, stage, context)


def test_bad_inputs():
    with pytest.raises(PromptError):
        render_item_prompt({}, "forward")
    with pytest.raises(PromptError):
        render_item_prompt(ATTRS, "sideways")


def test_sample_history():
    h = list(range(30))
    s = sample_history(h, 10, seed=1, user=4)
    assert len(s) == 10 and s == sorted(s) and len(set(s)) == 10
    assert s == sample_history(h, 10, seed=1, user=4)
    assert sample_history([5, 6], 10) == [5, 6]


def test_pipeline_stage_order_and_store(tmp_path):
    client = EchoReasoner()
    store = tmp_path / "sem.jsonl"
    rep = generate_descriptions(client, items(3), store, max_in_flight=1)
    assert len(rep.records) == 3 and not rep.failures
    stages = [c[1] for c in client.calls]
    assert stages == ["forward", "backward", "fuse"] * 3
    # backward prompt carries the forward answer, fuse carries both
    assert client.calls[0][2] != client.calls[1][2]
    assert rep.records[0].positive in client.calls[1][2]
    assert rep.records[0].negative in client.calls[2][2]
    assert set(load_store(store)) == {("item", 0), ("item", 1), ("item", 2)}


def test_resume_equals_uninterrupted(tmp_path):
    ents = items(7)
    full = tmp_path / "full.jsonl"
    generate_descriptions(EchoReasoner(), ents, full, max_in_flight=3)
    part = tmp_path / "part.jsonl"
    generate_descriptions(EchoReasoner(), ents, part, max_in_flight=3, limit=3)
    client = EchoReasoner()
    rep = generate_descriptions(client, ents, part, max_in_flight=3)
    assert rep.skipped == 3 and len(client.calls) == 4 * 3
    assert part.read_bytes() == full.read_bytes()


def test_retry_backoff():
    sleeps, calls = [], []

    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise TransportError("boom")
        return "ok"
    assert with_retry(flaky, attempts=3, backoff=0.5, sleep=sleeps.append) == "ok"
    assert sleeps == [0.5, 1.0]
    with pytest.raises(TransportError):
        with_retry(lambda: (_ for _ in ()).throw(TransportError("x")), attempts=2, sleep=lambda s: None)


def test_failures_reported_not_fatal(tmp_path):
    class Broken(EchoReasoner):
        def complete(self, prompt, *, entity=None, stage=None):
            if entity[1] == 1:
                raise TransportError("down")
            return super().complete(prompt, entity=entity, stage=stage)
    rep = generate_descriptions(Broken(), items(3), tmp_path / "s.jsonl", attempts=2, sleep=lambda s: None)
    assert [f["index"] for f in rep.failures] == [1]
    assert sorted(load_store(tmp_path / "s.jsonl")) == [("item", 0), ("item", 2)]


def test_file_reasoner_gaps(tmp_path):
    store = tmp_path / "s.jsonl"
    generate_descriptions(EchoReasoner(), items(2), store)
    fr = FileReasoner(store)
    out = tmp_path / "copy.jsonl"
    rep = generate_descriptions(fr, items(3), out)
    assert rep.gaps == [("item", 2)]
    assert out.read_bytes() == store.read_bytes()


def test_http_reasoner_request_shape():
    seen = {}

    def transport(url, payload, headers):
        seen.update(url=url, payload=payload, headers=headers)
        return {"choices": [{"message": {"content": "hello"}}]}
    r = HttpReasoner("http://x/v1/", model="m", token="t", transport=transport)
    assert r.complete("prompt") == "hello"
    assert seen["url"] == "http://x/v1/chat/completions"
    assert seen["payload"]["messages"] == [{"role": "user", "content": "prompt"}]
    assert seen["headers"]["Authorization"] == "Bearer t"


def test_http_reasoner_needs_url(monkeypatch):
    monkeypatch.delenv("REASONER_URL", raising=False)
    with pytest.raises(ValueError):
        HttpReasoner()


def test_http_encoder_and_encode_texts():
    def transport(url, payload, headers):
        return {"data": [{"embedding": [float(len(t)), 1.0]} for t in payload["input"]]}
    enc = HttpEncoder("http://e", transport=transport, batch_size=2)
    recs = [SemanticRecord("item", i, "p", "n", "x" * (i + 1)) for i in (2, 0, 1)]
    out = encode_texts(enc, recs)
    np.testing.assert_array_equal(out, [[1, 1], [2, 1], [3, 1]])
    with pytest.raises(ValueError):
        encode_texts(enc, recs[:2])

    def ragged(url, payload, headers):
        return {"data": [{"embedding": [0.0] * (2 + i)} for i, _ in enumerate(payload["input"])]}
    with pytest.raises(ValueError, match="dimension"):
        HttpEncoder("http://e", transport=ragged).encode(["a", "b"])


def test_file_encoder(tmp_path):
    m = np.arange(12, dtype=np.float64).reshape(4, 3)
    write_embedding(tmp_path / "e.bin", m)
    enc = FileEncoder(tmp_path / "e.bin")
    np.testing.assert_array_equal(enc.encode(["a", "b"], [3, 1]), m[[3, 1]])
    with pytest.raises(ValueError):
        enc.encode(["a"])
