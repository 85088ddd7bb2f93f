import base64
import io
import json
import logging

import httpx
import numpy as np
import pytest
from PIL import Image

from curbsight.clients import (HttpDetector, HttpEmbedder, HttpService, HttpVlm, MalformedResponseError,
                               MockDetector, MockEmbedder, MockVlm, ServiceEndpoint, ServiceRejected,
                               TransportError, VlmExchange)
from curbsight.numerics import cosine_similarity
from conftest import FIXTURES

IMG = np.zeros((8, 8, 3), dtype=np.uint8)


def _scripted(responses, seen=None):
    queue = list(responses)

    def handler(request):
        if seen is not None:
            seen.append(request)
        status, body = queue.pop(0)
        if isinstance(body, (dict, list)):
            return httpx.Response(status, json=body)
        return httpx.Response(status, text=body)

    return httpx.MockTransport(handler)


def _ep(**kw):
    return ServiceEndpoint(base_url="http://svc.test", model_name="m", jitter_seed=1, **kw)


def test_retries_then_succeeds():
    sleeps = []
    svc = HttpService(_ep(), _scripted([(429, "slow down"), (503, "busy"), (200, {"ok": 1})]), sleeps.append)
    assert svc.post("/x", {}) == {"ok": 1}
    assert len(sleeps) == 2 and sleeps[1] > sleeps[0] > 0


def test_retry_budget_exhausted():
    svc = HttpService(_ep(max_retries=2), _scripted([(500, "")] * 3), lambda s: None)
    with pytest.raises(TransportError, match="500"):
        svc.post("/x", {})


def test_network_errors_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("refused", request=request)
        return httpx.Response(200, json={"fine": True})

    svc = HttpService(_ep(), httpx.MockTransport(handler), lambda s: None)
    assert svc.post("", {}) == {"fine": True} and len(calls) == 2


def test_4xx_surfaces_body_verbatim():
    body = '{"error": "image too large for model m"}'
    svc = HttpService(_ep(), _scripted([(413, body)]), lambda s: None)
    with pytest.raises(ServiceRejected) as e:
        svc.post("", {})
    assert str(e.value) == body and e.value.status == 413


def test_non_json_answer():
    svc = HttpService(_ep(), _scripted([(200, "<html>")]), lambda s: None)
    with pytest.raises(MalformedResponseError):
        svc.post("", {})


def test_token_sent_but_never_logged(monkeypatch, caplog):
    monkeypatch.setenv("CS_TEST_TOKEN", "sekrit-value-42")
    seen = []
    svc = HttpService(_ep(token_env="CS_TEST_TOKEN"), _scripted([(503, ""), (200, {})], seen), lambda s: None)
    with caplog.at_level(logging.DEBUG, logger="curbsight"):
        svc.post("/p", {})
    assert seen[0].headers["authorization"] == "Bearer sekrit-value-42"
    assert "sekrit" not in caplog.text and "***" in caplog.text


def test_endpoint_validation():
    with pytest.raises(ValueError):
        ServiceEndpoint(timeout=0)
    with pytest.raises(ValueError):
        ServiceEndpoint(max_retries=-1)
    with pytest.raises(ValueError):
        ServiceEndpoint(concurrency=0)


def test_http_detector_wire_contract(schema):
    seen = []
    answer = {"boxes": [[1, 2, 5, 6], [0, 0, 3, 3], [2, 2, 4, 4]], "labels": ["bollard", "kite", "Fire Hydrant"],
              "scores": [0.9, 0.8, 0.1]}
    det = HttpDetector(_ep(), schema, _scripted([(200, answer)], seen))
    out = det.detect(IMG, ["bollard", "fire hydrant"], 0.3, view_id="v1")
    body = json.loads(seen[0].content)
    assert body["captions"] == ["bollard", "fire hydrant"] and body["box_threshold"] == 0.3
    assert Image.open(io.BytesIO(base64.b64decode(body["image"]))).size == (8, 8)
    assert [(d.label, d.confidence, d.view_id) for d in out] == [("Bollard", 0.9, "v1")]


def test_http_detector_malformed(schema):
    det = HttpDetector(_ep(), schema, _scripted([(200, {"boxes": [[0, 0, 1, 1]], "labels": [], "scores": []})]))
    with pytest.raises(MalformedResponseError):
        det.detect(IMG, ["bollard"])
    det = HttpDetector(_ep(), schema, _scripted([(200, {"boxes": [[5, 0, 1, 1]], "labels": ["bollard"],
                                                          "scores": [0.9]})]))
    with pytest.raises(MalformedResponseError):
        det.detect(IMG, ["bollard"])


def test_mock_detector_replays_fixture(schema):
    fx = json.loads((FIXTURES / "detector.json").read_text())
    det = MockDetector(fx)  # no schema: labels verbatim
    out = det.detect(IMG, ["x"], 0.0, "scene_a", "v0")
    assert [(d.label, d.confidence, [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max]) for d in out] == [
        (d["label"], d["score"], d["bbox"]) for d in fx["scene_a/v0"]]
    assert det.detect(IMG, ["x"], 1.01, "scene_a", "v0") == []
    with pytest.raises(ValueError):
        det.detect(IMG, [], 0.3, "scene_a", "v0")
    named = MockDetector(FIXTURES / "detector.json", schema).detect(IMG, ["x"], 0.3, "scene_a", "v0")
    assert named and all(schema.canonical_category(d.label) == d.label for d in named)
    assert MockDetector({}).detect(IMG, ["x"], 0.3, "nothing", "v0") == []


def test_http_embedder():
    seen = []
    emb = HttpEmbedder(_ep(), 3, _scripted([(200, {"data": [{"embedding": [3, 0, 4]}]}),
                                             (200, {"data": [{"embedding": [1, 2]}]})], seen))
    np.testing.assert_allclose(emb.embed_image(IMG), [0.6, 0, 0.8])
    assert json.loads(seen[0].content)["input"].startswith("data:image/png;base64,")
    with pytest.raises(MalformedResponseError):
        emb.embed_text("hello")


def test_mock_embedder_properties():
    e = MockEmbedder(64)
    a = e.embed_text("red circular sign")
    assert a.tolist() == MockEmbedder(64).embed_text("red circular sign").tolist()
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert cosine_similarity(a, e.embed_text("blue circular sign")) < 1.0
    assert cosine_similarity(a, e.embed_text("RED circular sign")) == 1.0
    img = np.random.default_rng(0).integers(0, 255, (20, 30, 3), dtype=np.uint8)
    assert e.embed_image(img).tolist() == e.embed_image(img.copy()).tolist()
    assert e.embed_image(img[:, :, 0]).shape == (64,)
    with pytest.raises(ValueError):
        e.embed_text("")
    with pytest.raises(ValueError):
        e.embed_image(np.zeros((0, 3, 3)))
    with pytest.raises(ValueError):
        MockEmbedder(0)


def test_http_vlm_message_layout():
    seen = []
    vlm = HttpVlm(_ep(), _scripted([(200, {"choices": [{"message": {"content": "{}"}}]})], seen))
    ex = VlmExchange([("crop", IMG), ("scene", IMG)], "describe", system="sys")
    assert vlm.complete_multimodal(ex) == "{}" and ex.response == "{}"
    msgs = json.loads(seen[0].content)["messages"]
    assert msgs[0] == {"role": "system", "content": "sys"}
    assert [p["type"] for p in msgs[1]["content"]] == ["image_url", "image_url", "text"]
    assert json.loads(seen[0].content)["temperature"] == 0.0


def test_http_vlm_bad_content():
    vlm = HttpVlm(_ep(), _scripted([(200, {"choices": []})]))
    with pytest.raises(MalformedResponseError):
        vlm.complete_multimodal(VlmExchange([("c", IMG)], "p"))


def test_mock_vlm_modes():
    fx = {"o1": {"category": "Bollard", "attributes": {"Color": {"value": "red", "confidence": 0.8}}}}
    ex = VlmExchange([("c", IMG)], "the prompt", metadata={"object_id": "o1"})
    out = MockVlm("fixture", fx, style="plain").complete_multimodal(ex)
    assert json.loads(out) == fx["o1"]
    assert "```json" in MockVlm("fixture", fx).complete_multimodal(ex)
    assert MockVlm("echo").complete_multimodal(ex) == "the prompt"
    assert "{" not in MockVlm("malformed").complete_multimodal(ex)
    ex2 = VlmExchange([("c", IMG)], "p", metadata={"object_id": "o2", "category": "Bollard",
                                                   "precedents": [[["Color", "black"]]]})
    assert json.loads(MockVlm("fixture", fx, style="plain").complete_multimodal(ex2))["attributes"] == {
        "Color": {"value": "black", "confidence": 0.5}}
    with pytest.raises(ValueError):
        MockVlm("echo").complete_multimodal(VlmExchange([("c", IMG)], "  "))
    with pytest.raises(ValueError):
        MockVlm("echo").complete_multimodal(VlmExchange([], "p"))
    with pytest.raises(ValueError):
        MockVlm("other")
