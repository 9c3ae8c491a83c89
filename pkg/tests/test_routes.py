import os

import pytest
from fastapi.testclient import TestClient

from svlb.app import create_app
from svlb.scene import SceneObject, SceneSpec, render, write_ppm


@pytest.fixture
def client(toy_run):
    _, run_dir = toy_run
    return TestClient(create_app(os.path.dirname(run_dir)))


def _scene():
    return SceneSpec(canvas=(32, 32), rows=2, cols=2, seed=0, objects=[
        SceneObject(shape="square", color="red", cell=(0, 0), size=10),
        SceneObject(shape="circle", color="blue", cell=(1, 1), size=8),
    ])


def test_health_and_index(tmp_path):
    client = TestClient(create_app(str(tmp_path)))
    body = client.get("/svlb/health").json()
    assert body == {"status": "ok", "component": "svlb", "storage": str(tmp_path)}
    assert client.get("/").status_code == 200


def test_run_listing(client):
    body = client.get("/svlb/runs/toy").json()
    assert body["name"] == "toy"
    assert set(body["manifests"]) == {"pretrain-encoder", "align"}
    assert body["manifests"]["align"]["command"] == "align"
    assert body["eval"]["variant"] == "LLaVA-CLIP-2D-RoPE"


def test_unknown_and_invalid_runs(client):
    assert client.get("/svlb/runs/nope").status_code == 404
    assert client.get("/svlb/runs/.hidden").status_code == 400
    assert client.post("/svlb/runs/nope/generate", json={"question": "is there a red square ?"}).status_code == 404


def test_report_formats(client, toy_run):
    body = client.get("/svlb/runs/toy/report").json()
    assert body["row"]["objective"] == "clip"
    assert "LLaVA-CLIP-2D-RoPE" in body["table"]
    html = client.get("/svlb/runs/toy/report", params={"format": "html"})
    assert html.status_code == 200 and "<table" in html.text
    assert client.get("/svlb/runs/toy/report", params={"format": "pdf"}).status_code == 400

    _, run_dir = toy_run
    os.makedirs(os.path.join(os.path.dirname(run_dir), "fresh"))
    assert client.get("/svlb/runs/fresh/report").status_code == 404


def test_generate_from_scene_and_image(client, tmp_path):
    scene = _scene()
    question = "is the red square left or right of the blue circle ?"
    by_scene = client.post("/svlb/runs/toy/generate",
                           json={"question": question, "scene": scene.model_dump(mode="json")})
    assert by_scene.status_code == 200
    assert by_scene.json()["run"] == "toy" and by_scene.json()["question"] == question

    path = str(tmp_path / "data" / "query.ppm")
    write_ppm(path, render(scene))
    by_image = client.post("/svlb/runs/toy/generate", json={"question": question, "image_path": path})
    assert by_image.status_code == 200
    assert by_image.json()["answer"] == by_scene.json()["answer"]


def test_generate_rejects_bad_requests(client, tmp_path):
    q = "is there a red square ?"
    assert client.post("/svlb/runs/toy/generate", json={"question": q}).status_code == 400
    bad = tmp_path / "data" / "bad.ppm"
    bad.write_bytes(b"P6\n2 2\n255\n\x00")
    assert client.post("/svlb/runs/toy/generate", json={"question": q, "image_path": str(bad)}).status_code == 422
    scene = _scene().model_dump(mode="json")
    assert client.post("/svlb/runs/toy/generate",
                       json={"question": "is there a hexagon ?", "scene": scene}).status_code == 422
    assert client.post("/svlb/runs/toy/generate",
                       json={"question": q, "scene": scene, "temperature": 1.0}).status_code == 422


def test_generate_needs_an_aligned_model(client, toy_run):
    _, run_dir = toy_run
    os.makedirs(os.path.join(os.path.dirname(run_dir), "empty"))
    r = client.post("/svlb/runs/empty/generate", json={"question": "is there a red square ?",
                                                       "scene": _scene().model_dump(mode="json")})
    assert r.status_code == 404


def test_generate_reads_images_only_under_runs_or_data(client, tmp_path):
    q = "is there a red square ?"
    image = render(_scene())
    outside = tmp_path / "elsewhere" / "query.ppm"
    outside.parent.mkdir()
    write_ppm(str(outside), image)
    r = client.post("/svlb/runs/toy/generate", json={"question": q, "image_path": str(outside)})
    assert r.status_code == 403

    link = tmp_path / "data" / "escape.ppm"
    os.symlink(outside, link)
    assert client.post("/svlb/runs/toy/generate", json={"question": q, "image_path": str(link)}).status_code == 403
    dotted = str(tmp_path / "data" / ".." / "elsewhere" / "query.ppm")
    assert client.post("/svlb/runs/toy/generate", json={"question": q, "image_path": dotted}).status_code == 403

    inside = tmp_path / "runs" / "toy" / "query.ppm"
    write_ppm(str(inside), image)
    assert client.post("/svlb/runs/toy/generate", json={"question": q, "image_path": str(inside)}).status_code == 200
