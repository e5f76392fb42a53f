import hashlib
import json
import re

import numpy as np
import pytest
import torch

from mmflow.arrays import load_feature_array
from mmflow.batching import collate
from mmflow.checkpoint import load_checkpoint
from mmflow.cli import main
from mmflow.config import ModelConfig, dump_config
from mmflow.dataset import load_examples
from mmflow.flow import sample_noise
from mmflow.manifest import read_manifest
from mmflow.model import FlowNetwork, set_state

from conftest import TINY

CFG = ModelConfig(**{**TINY, "checkpoint_interval": 5})


def _digest(directory):
    h = hashlib.sha256()
    for f in sorted(directory.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(dump_config(CFG))
    assert main(["make-synthetic", "--out", str(root / "data"), "--pairs", "4", "--duration", "2",
                 "--seed", "3", "--config", str(root / "tiny.cfg")]) == 0
    assert main(["train", "--config", str(root / "tiny.cfg"), "--manifest",
                 str(root / "data" / "manifest.jsonl"), "--out", str(root / "m.ckpt"),
                 "--steps", "10"]) == 0
    return root


def test_make_synthetic_records_and_digest(workspace, tmp_path):
    assert len(read_manifest(workspace / "data" / "manifest.jsonl")) == 4
    args = ["--pairs", "4", "--duration", "2", "--seed", "3", "--config", str(workspace / "tiny.cfg")]
    assert main(["make-synthetic", "--out", str(tmp_path / "again"), *args]) == 0
    assert _digest(tmp_path / "again") == _digest(workspace / "data")


@pytest.mark.parametrize("argv", [
    ["make-synthetic", "--out", "x", "--pairs", "0"],
    ["make-synthetic", "--out", "x", "--pairs", "2", "--bogus"],
    ["make-synthetic", "--out", "x", "--pairs", "2", "--duration", "0.5"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_train_writes_step_and_log(workspace):
    assert load_checkpoint(workspace / "m.ckpt").step == 10
    lines = (workspace / "m.ckpt.metrics.log").read_text().splitlines()
    assert len(lines) == 10
    pattern = re.compile(r"^step=(\d+) loss=\S+ lr=\S+ gnorm=\S+ ms=\S+$")
    assert [int(pattern.match(line).group(1)) for line in lines] == list(range(1, 11))


def test_train_resume_matches_straight_run(workspace, tmp_path):
    common = ["--config", str(workspace / "tiny.cfg"), "--manifest",
              str(workspace / "data" / "manifest.jsonl")]
    assert main(["train", *common, "--out", str(tmp_path / "a.ckpt"), "--steps", "10",
                 "--resume", str(workspace / "m.ckpt")]) == 0
    assert main(["train", *common, "--out", str(tmp_path / "b.ckpt"), "--steps", "20"]) == 0
    a, b = load_checkpoint(tmp_path / "a.ckpt"), load_checkpoint(tmp_path / "b.ckpt")
    assert a.step == b.step == 20
    for table in ("params", "ema", "optim"):
        ta, tb = getattr(a, table), getattr(b, table)
        assert ta.keys() == tb.keys()
        assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


def test_train_input_errors(workspace, tmp_path):
    cfg = str(workspace / "tiny.cfg")
    assert main(["train", "--config", cfg, "--manifest", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "x.ckpt"), "--steps", "1"]) == 1
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["train", "--config", cfg, "--manifest", str(tmp_path / "empty.jsonl"),
                 "--out", str(tmp_path / "x.ckpt"), "--steps", "1"]) == 1
    other = tmp_path / "other.cfg"
    other.write_text(dump_config(CFG.replace(seed=9)))
    assert main(["train", "--config", str(other), "--manifest", str(workspace / "data" / "manifest.jsonl"),
                 "--out", str(tmp_path / "x.ckpt"), "--steps", "1", "--resume",
                 str(workspace / "m.ckpt")]) == 1


def _sample(workspace, out, *extra):
    return main(["sample", "--ckpt", str(workspace / "m.ckpt"), "--manifest",
                 str(workspace / "data" / "manifest.jsonl"), "--id", "pair_0001",
                 "--out", str(out), *extra])


def test_sample_unconditional_shape_and_determinism(workspace, tmp_path):
    assert _sample(workspace, tmp_path / "u.f32", "--no-video", "--no-text", "--no-lyrics") == 0
    assert load_feature_array(tmp_path / "u.f32", CFG.d_latent).shape == (86, CFG.d_latent)
    assert _sample(workspace, tmp_path / "a.f32", "--seed", "4") == 0
    assert _sample(workspace, tmp_path / "b.f32", "--seed", "4") == 0
    assert (tmp_path / "a.f32").read_bytes() == (tmp_path / "b.f32").read_bytes()
    assert _sample(workspace, tmp_path / "c.f32", "--seed", "5") == 0
    assert (tmp_path / "a.f32").read_bytes() != (tmp_path / "c.f32").read_bytes()


def test_sample_single_step_is_one_euler_step(workspace, tmp_path):
    assert _sample(workspace, tmp_path / "one.f32", "--steps", "1", "--seed", "2") == 0
    out = load_feature_array(tmp_path / "one.f32", CFG.d_latent)
    ckpt = load_checkpoint(workspace / "m.ckpt")
    net = FlowNetwork(ckpt.config)
    set_state(net, ckpt.ema)
    records = [r for r in read_manifest(workspace / "data" / "manifest.jsonl") if r.id == "pair_0001"]
    example = load_examples(records, CFG, workspace / "data", load_latents=False)[0]
    cond = collate([example.conditions], CFG)
    x0 = sample_noise((cond.n_frames, CFG.d_latent), 2)[None]
    with torch.no_grad():
        v_c, v_u = net(x0, 0.05, cond), net(x0, 0.05, cond.unconditional())
    v = v_u + CFG.cfg_scale * (v_c - v_u)
    assert np.allclose(out, (x0 + 0.95 * v)[0].numpy(), atol=1e-6)


def test_sample_record_errors(workspace, tmp_path):
    assert _sample(workspace, tmp_path / "x.f32", "--id", "nope") == 1
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["sample", "--ckpt", str(workspace / "m.ckpt"), "--manifest",
                 str(tmp_path / "empty.jsonl"), "--id", "a", "--out", str(tmp_path / "x.f32")]) == 1


def test_eval_alignment_report(workspace, tmp_path):
    assert main(["eval-alignment", "--ckpt", str(workspace / "m.ckpt"), "--manifest",
                 str(workspace / "data" / "manifest.jsonl"), "--out", str(tmp_path / "r.json"),
                 "--steps", "2"]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert [r["id"] for r in report["records"]] == [f"pair_{i:04d}" for i in range(4)]
    lags = np.abs([r["lag"] for r in report["records"]])
    assert report["median_abs_lag"] == float(np.median(lags))
    assert report["max_abs_lag"] == lags.max()
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["eval-alignment", "--ckpt", str(workspace / "m.ckpt"), "--manifest",
                 str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "r2.json")]) == 1


def test_inspect_counts_parameters(workspace, capsys):
    assert main(["inspect", "--ckpt", str(workspace / "m.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "step = 10" in out
    count = int(re.search(r"^parameters = (\d+)$", out, re.M).group(1))
    shapes = re.findall(r"^\S+\t([\dx]+)$", out, re.M)
    assert count == sum(int(np.prod([int(d) for d in s.split("x")])) for s in shapes)
    assert count == sum(p.numel() for p in FlowNetwork(CFG).parameters())


def test_runtime_failure_exit_two(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((workspace / "m.ckpt").read_bytes()[:100])
    assert main(["inspect", "--ckpt", str(bad)]) == 2
