from __future__ import annotations

import io
import json
import math

import numpy as np
import pytest
from PIL import Image

from ambres import backend_spec, run_cli
from services.dataset_service import read_dataset
from services.reasoning_service import OracleReasoner, simulate_user_answer
from services.sim_world import render_scene, sample_scene


def _run(*argv: str, stdin: str = ""):
    out = io.StringIO()
    code = run_cli(list(argv), stdin=io.StringIO(stdin), stdout=out)
    return code, out.getvalue().splitlines()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    code, _ = _run("gen", "--scenes", "4", "--tasks-per-scene", "6", "--seed", "2", "--out", str(d))
    assert code == 0
    return str(d)


class TestBackendSpec:
    @pytest.mark.parametrize("text,expected", [
        ("oracle", ("oracle", "")),
        ("mock", ("mock", "")),
        ("mock:3", ("mock", "3")),
        ("noisy:0.2", ("noisy", "0.2")),
        ("http://localhost:8000", ("http", "http://localhost:8000")),
        ("http:http://scorer:8000", ("http", "http://scorer:8000")),
    ])
    def test_valid(self, text, expected):
        assert backend_spec(text) == expected

    @pytest.mark.parametrize("text", ["bogus", "mock:x", "noisy:1.5", "noisy:", "http", "oracle:1"])
    def test_invalid(self, text):
        with pytest.raises(Exception):
            backend_spec(text)


class TestGen:
    def test_same_seed_same_checksum(self, tmp_path):
        checksums = []
        for name in ("d", "d2"):
            code, lines = _run("gen", "--scenes", "3", "--tasks-per-scene", "4", "--out", str(tmp_path / name), "--seed", "7")
            assert code == 0
            assert lines[0] == "[seed] 7"
            checksums.append(read_dataset(str(tmp_path / name)).checksum)
            assert lines[-1] == f"[i] checksum {checksums[-1]}"
        assert checksums[0] == checksums[1]


class TestEval:
    def test_oracle_report(self, dataset_dir, tmp_path):
        report = tmp_path / "r.json"
        code, lines = _run("eval", "--dataset", dataset_dir, "--backend", "oracle", "--split", "test", "--report", str(report))
        assert code == 0
        cond = json.loads(report.read_text(encoding="utf-8"))["conditions"][0]
        assert cond["condition"] == "oracle"
        for key in ("grounding_iou_mean", "precision", "recall", "f1", "resolution_success_rate"):
            assert cond[key] == 1.0
        assert any(line.split()[:1] == ["oracle"] for line in lines)
        assert (tmp_path / "r.txt").is_file()

    def test_noisy_with_xlsx_and_transcripts(self, dataset_dir, tmp_path):
        code, _ = _run(
            "eval", "--dataset", dataset_dir, "--backend", "noisy:0.5", "--report", str(tmp_path / "n.json"),
            "--xlsx", str(tmp_path / "n.xlsx"), "--transcripts", str(tmp_path / "t.jsonl"), "--jobs", "2",
        )
        assert code == 0
        assert (tmp_path / "n.xlsx").is_file()
        assert len((tmp_path / "t.jsonl").read_text(encoding="utf-8").splitlines()) == 12

    def test_missing_dataset(self, tmp_path):
        code, lines = _run("eval", "--dataset", str(tmp_path / "nada"), "--backend", "oracle", "--report", str(tmp_path / "r.json"))
        assert code == 1
        assert lines[-1].startswith("[ERROR] MissingFile")


class TestDecode:
    def test_mock_grounding(self):
        code, lines = _run("decode", "--schema", "grounding", "--backend", "mock", "--seed", "3", "--max-tokens", "4096")
        assert code == 0
        assert lines[0] == "[seed] 3"
        value = json.loads(lines[1])
        assert isinstance(value, list) and all(isinstance(x, str) for x in value)

    def test_deterministic(self):
        argv = ("decode", "--schema", "ambiguity", "--backend", "mock:5", "--max-tokens", "4096")
        assert _run(*argv) == _run(*argv)

    def test_truncation_warning(self):
        code, lines = _run("decode", "--schema", "ambiguity", "--backend", "mock:1", "--max-tokens", "3")
        assert code == 0
        assert lines[-1].startswith("[WARN]")

    def test_schema_file(self, tmp_path):
        path = tmp_path / "bool.json"
        path.write_text('{"type": "boolean"}', encoding="utf-8")
        code, lines = _run("decode", "--schema", str(path), "--backend", "mock:2")
        assert code == 0
        assert lines[1] in ("true", "false")

    def test_oracle_cannot_decode(self):
        code, _ = _run("decode", "--schema", "grounding", "--backend", "oracle")
        assert code == 2


class TestUsage:
    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["gen"],
        ["gen", "--out", "x", "--bogus"],
        ["eval", "--dataset", "d", "--backend", "bogus", "--report", "r.json"],
        ["knowno", "--options", "a", "b", "--scores", "1", "2", "3", "4", "--threshold", "0.3"],
    ])
    def test_usage_errors(self, argv):
        code, _ = _run(*argv)
        assert code == 2


class TestKnowNo:
    def test_two_plausible_options(self):
        scores = [str(math.log(p)) for p in (0.50, 0.45, 0.04, 0.01)]
        code, lines = _run("knowno", "--options", "a", "b", "c", "d", "--scores", *scores, "--threshold", "0.3")
        assert code == 0
        assert lines[1].startswith("A) a  p=0.500")
        assert lines[-1] == "ambiguous: true"

    def test_one_plausible_option(self):
        code, lines = _run("knowno", "--options", "a", "b", "c", "d", "--scores", "5", "0", "0", "0", "--threshold", "0.3")
        assert code == 0
        assert lines[-1] == "ambiguous: false"

    def test_bad_threshold(self):
        code, lines = _run("knowno", "--options", "a", "b", "c", "d", "--scores", "1", "1", "1", "1", "--threshold", "2")
        assert code == 1
        assert lines[-1].startswith("[ERROR] PreconditionViolation")


class TestInteract:
    def test_full_loop(self, dataset_dir):
        ds = read_dataset(dataset_dir)
        task = next(t for t in ds.tasks if t.ambiguous)
        scene = ds.scene_by_id(task.scene_id)
        verdict = OracleReasoner(scene, task).verdict_output()
        answer = simulate_user_answer(task, scene, verdict)
        code, lines = _run("interact", "--dataset", dataset_dir, "--task", task.task_id, "--backend", "oracle", stdin=answer + "\n")
        assert code == 0
        texto = "\n".join(lines)
        assert f"[?] {verdict.clarifying_question}" in texto
        assert "[i] Tarea ambigua" in texto
        assert any("[+] Resuelto:" in line for line in lines)
        assert any(line.startswith("[+] Puntos: (") for line in lines)
        assert "[WARN]" not in texto

    def test_unknown_task(self, dataset_dir):
        code, lines = _run("interact", "--dataset", dataset_dir, "--task", "nope", "--backend", "oracle")
        assert code == 1


class TestRender:
    def test_render_scene_file(self, tmp_path):
        scene = sample_scene(seed=4)
        src = tmp_path / "scene.json"
        src.write_text(json.dumps(scene.to_json()), encoding="utf-8")
        code, _ = _run("render", "--scene", str(src), "--out", str(tmp_path / "scene.png"))
        assert code == 0
        with Image.open(tmp_path / "scene.png") as img:
            assert np.array_equal(np.asarray(img.convert("RGB")), np.asarray(render_scene(scene)))

    def test_malformed_scene_json(self, tmp_path):
        src = tmp_path / "scene.json"
        src.write_text('{"scene_id": "x", "grid": [6, 4', encoding="utf-8")
        code, lines = _run("render", "--scene", str(src), "--out", str(tmp_path / "scene.png"))
        assert code == 1
        assert lines[-1].startswith("[ERROR]")
        assert not (tmp_path / "scene.png").exists()

    def test_scene_missing_fields(self, tmp_path):
        src = tmp_path / "scene.json"
        src.write_text(json.dumps({"scene_id": "x"}), encoding="utf-8")
        code, lines = _run("render", "--scene", str(src), "--out", str(tmp_path / "scene.png"))
        assert code == 1
        assert lines[-1].startswith("[ERROR]") and "grid" in lines[-1]

    def test_scene_with_overlapping_objects(self, tmp_path):
        scene = sample_scene(seed=4).to_json()
        scene["objects"][1]["cell"] = scene["objects"][0]["cell"]
        src = tmp_path / "scene.json"
        src.write_text(json.dumps(scene), encoding="utf-8")
        code, lines = _run("render", "--scene", str(src), "--out", str(tmp_path / "scene.png"))
        assert code == 1
        assert lines[-1].startswith("[ERROR]")
