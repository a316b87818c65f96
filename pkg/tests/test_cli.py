import json

import numpy as np
import pytest
from PIL import Image

from cotseg.backend import ScriptedBackend
from cotseg.cli import main
from cotseg.datakit.synth import FIRE_PIT
from cotseg.segcore import PromptableSegmenter, save_checkpoint
from cotseg.training import freeze_policy


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, cache, run = root / "data", root / "cache", root / "run"
    assert _run("make-synth", "--out", data, "--count", 6, "--image-size", 32, "--embedding-width", 16, "--seed", 3) == 0
    assert _run("cache-traces", "--out", cache, "--manifest", data / "manifest.jsonl", "--backend", data / "backend.json") == 0
    assert _run(
        "train", "--out", run, "--manifest", data / "manifest.jsonl", "--cache", cache,
        "--iterations", 4, "--batch-size", 2, "--d-vis", 16, "--d-hidden", 32, "--checkpoint-every", 2,
    ) == 0
    return {"root": root, "data": data, "cache": cache, "run": run}


def test_make_synth_demo(tmp_path, capsys):
    assert _run("make-synth", "--demo", "--out", tmp_path) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["query"] == FIRE_PIT["query"]
    for name in ("fire_pit.png", "fire_pit_mask.png", "script.json", "backend.json", "run_manifest.json"):
        assert (tmp_path / name).is_file()


def test_cache_is_idempotent(trained, capsys, monkeypatch):
    calls = []
    original = ScriptedBackend.generate

    def counting(self, *a, **k):
        calls.append(1)
        return original(self, *a, **k)

    monkeypatch.setattr(ScriptedBackend, "generate", counting)
    before = sorted(p.name for p in (trained["cache"] / "records").iterdir())
    capsys.readouterr()
    assert _run("cache-traces", "--out", trained["cache"], "--manifest", trained["data"] / "manifest.jsonl", "--backend", trained["data"] / "backend.json") == 0
    report = json.loads(capsys.readouterr().out)
    assert calls == [] and report["written"] == 0 and report["skipped"] == 6
    assert sorted(p.name for p in (trained["cache"] / "records").iterdir()) == before


def test_cache_digest_is_stable(tmp_path, trained, capsys):
    capsys.readouterr()
    _run("cache-traces", "--out", tmp_path / "c", "--manifest", trained["data"] / "manifest.jsonl", "--backend", trained["data"] / "backend.json")
    fresh = json.loads(capsys.readouterr().out)["digest"]
    _run("cache-traces", "--out", trained["cache"], "--manifest", trained["data"] / "manifest.jsonl", "--backend", trained["data"] / "backend.json")
    assert json.loads(capsys.readouterr().out)["digest"] == fresh


def test_train_outputs(trained):
    run = trained["run"]
    names = sorted(p.name for p in run.glob("ckpt_*.npz"))
    assert names == ["ckpt_000000.npz", "ckpt_000002.npz", "ckpt_000004.npz"]
    assert (run / "latest.txt").read_text().strip() == "ckpt_000004.npz"
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["train_config"]["lambda_dice"] == 0.5
    assert len(manifest["inputs_sha256"]) == 64


def test_train_is_deterministic(trained, tmp_path):
    args = ["--manifest", trained["data"] / "manifest.jsonl", "--cache", trained["cache"], "--iterations", 4, "--batch-size", 2, "--d-vis", 16, "--d-hidden", 32, "--checkpoint-every", 2]
    assert _run("train", "--out", tmp_path / "again", *args) == 0
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_clock"} for l in p.read_text().splitlines()]
    assert strip(tmp_path / "again" / "loss_log.jsonl") == strip(trained["run"] / "loss_log.jsonl")
    assert _run("train", "--out", tmp_path / "resumed", *args[:-2], "--resume", trained["run"] / "ckpt_000002.npz") == 0
    resumed = np.load(tmp_path / "resumed" / "ckpt_000004.npz")
    original = np.load(trained["run"] / "ckpt_000004.npz")
    assert all(np.array_equal(resumed[k], original[k]) for k in original.files if k.startswith("param/"))


def test_eval_report(trained, tmp_path, capsys):
    capsys.readouterr()
    assert _run("eval", "--out", tmp_path, "--manifest", trained["data"] / "manifest.jsonl", "--cache", trained["cache"], "--checkpoint", trained["run"] / "ckpt_000004.npz") == 0
    agg = json.loads(capsys.readouterr().out)
    assert set(agg) == {"gIoU", "cIoU", "ROUGE-L", "CIDEr"}
    lines = (tmp_path / "eval_report.csv").read_text().splitlines()
    assert lines[0] == "sample_id,iou,rouge_l,cider" and len([l for l in lines[1:] if l.startswith("syn")]) == 6


def _demo_with_checkpoint(tmp_path):
    demo = tmp_path / "demo"
    _run("make-synth", "--demo", "--out", demo)
    model = PromptableSegmenter(d_llm=64, d_vis=16, d_hidden=32, num_heads=2)
    ckpt = save_checkpoint(tmp_path / "demo.npz", model, freeze_policy(model))
    return demo, ckpt


def test_infer_demo_is_deterministic(tmp_path, capsys):
    demo, ckpt = _demo_with_checkpoint(tmp_path)
    outs = []
    for name in ("a", "b"):
        capsys.readouterr()
        code = _run("infer", "--out", tmp_path / name, "--image", demo / "fire_pit.png", "--query", FIRE_PIT["query"], "--checkpoint", ckpt, "--backend", demo / "backend.json")
        assert code == 0 and json.loads(capsys.readouterr().out)["target"] == "the fire"
        outs.append({f: (tmp_path / name / f).read_bytes() for f in ("mask.png", "overlay.png", "trace.jsonl")})
    assert outs[0] == outs[1]
    mask = np.asarray(Image.open(tmp_path / "a" / "mask.png"))
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}


def test_infer_chain_failure_exits_2_with_partial_trace(tmp_path):
    demo, ckpt = _demo_with_checkpoint(tmp_path)
    out = tmp_path / "fail"
    code = _run("infer", "--out", out, "--image", demo / "fire_pit.png", "--query", "a query the script never saw", "--checkpoint", ckpt, "--backend", demo / "backend.json")
    assert code == 2
    trace = json.loads((out / "trace.jsonl").read_text())
    assert trace["user_query"] == "a query the script never saw" and not trace["completed"]
    assert not (out / "mask.png").exists()


def test_infer_missing_checkpoint_writes_nothing(tmp_path):
    demo = tmp_path / "demo"
    _run("make-synth", "--demo", "--out", demo)
    out = tmp_path / "out"
    code = _run("infer", "--out", out, "--image", demo / "fire_pit.png", "--query", "hot", "--checkpoint", tmp_path / "nope.npz", "--backend", demo / "backend.json")
    assert code == 3 and not out.exists()


def test_usage_errors(tmp_path):
    assert _run("train") == 1
    assert _run("bogus") == 1
    assert _run("eval", "--out", tmp_path, "--manifest", tmp_path / "none.jsonl", "--cache", tmp_path, "--checkpoint", tmp_path / "c.npz") == 1
