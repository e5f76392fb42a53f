import json

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mmflow.arrays import (ArrayFormatError, decode_array, encode_array, load_feature_array,
                           save_array)
from mmflow.checkpoint import (Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint,
                               load_checkpoint, save_checkpoint)
from mmflow.config import ConfigError, ModelConfig, dump_config, load_config, parse_config
from mmflow.manifest import ManifestError, parse_manifest, read_manifest, write_manifest
from mmflow.model import FlowNetwork, get_state, parameter_shapes
from mmflow.rng import derive_key, stream

from conftest import TINY


# ---- config ---------------------------------------------------------------

def test_config_default_cfg_scale(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# toy\nd_model = 64\nn_heads = 4\n")
    cfg = load_config(path)
    assert cfg.cfg_scale == 4.5
    assert cfg.sample_steps == 25 and cfg.t_start == 0.05
    assert cfg.d_model == 64


def test_config_heads_must_divide_width():
    with pytest.raises(ConfigError, match="mod"):
        parse_config("d_model = 64\nn_heads = 3\n")


def test_config_frame_budget_bounded_by_positions():
    with pytest.raises(ConfigError, match="max_abs_positions"):
        parse_config("frame_budget = 5000\n")


@pytest.mark.parametrize("text, msg", [
    ("d_model 64", "expected"),
    ("d_model = sixty", "expects int"),
    ("bogus = 1", "unknown key"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("max_seconds = 20", "frame_budget"),
    ("d_model = 20\nn_heads = 4", "even"),
    ("audio_latent_rate = 44", "fixed"),
    ("t_start = 1.0", "t_start"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


@settings(max_examples=50, deadline=None)
@given(d_head=st.sampled_from([2, 4, 8]), heads=st.integers(1, 4),
       lr=st.floats(1e-7, 1e-2), seed=st.integers(0, 2 ** 32 - 1),
       vocab=st.sampled_from(["", "my vocab.txt"]))
def test_config_serialisation_is_idempotent(d_head, heads, lr, seed, vocab):
    cfg = ModelConfig(d_model=d_head * heads, n_heads=heads, lr_base=lr, seed=seed,
                      vocab_file=vocab)
    text = dump_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert dump_config(again) == text


# ---- arrays ----------------------------------------------------------------

def test_feature_array_shape(tmp_path):
    arr = np.random.default_rng(0).standard_normal((240, 768)).astype(np.float32)
    save_array(tmp_path / "v.f32", arr)
    out = load_feature_array(tmp_path / "v.f32", 768)
    assert out.shape == (240, 768)
    assert np.array_equal(out, arr)


def test_feature_array_rejects_nan(tmp_path):
    arr = np.zeros((3, 4), dtype=np.float32)
    arr[1, 2] = np.nan
    save_array(tmp_path / "x.f32", arr)
    with pytest.raises(ArrayFormatError, match="non-finite"):
        load_feature_array(tmp_path / "x.f32", 4)


def test_feature_array_dim_mismatch(tmp_path):
    save_array(tmp_path / "x.f32", np.zeros((5, 32), dtype=np.float32))
    with pytest.raises(ArrayFormatError, match="64"):
        load_feature_array(tmp_path / "x.f32", 64)


def test_array_header_layout():
    buf = encode_array(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"MMFA"
    assert int.from_bytes(buf[4:8], "little") == 2
    assert int.from_bytes(buf[8:12], "little") == 1
    assert int.from_bytes(buf[12:20], "little") == 2
    assert int.from_bytes(buf[20:28], "little") == 3
    assert np.frombuffer(buf[28:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    with pytest.raises(ArrayFormatError):
        decode_array(b"XXXX" + buf[4:])
    with pytest.raises(ArrayFormatError):
        decode_array(buf[:-4])


# ---- manifest ----------------------------------------------------------------

def _line(**kw):
    return json.dumps(kw)


def test_manifest_order_preserved():
    text = "\n".join([_line(id="b", duration_sec=2, audio_latents_path="b.f32", caption="x"),
                      _line(id="a", duration_sec=1, audio_latents_path="a.f32", caption="y")])
    recs = parse_manifest(text)
    assert [r.id for r in recs] == ["b", "a"]


def test_manifest_train_requires_latents():
    with pytest.raises(ManifestError, match="line 1.*audio_latents_path"):
        parse_manifest(_line(id="a", duration_sec=1, caption="x"), mode="train")
    assert parse_manifest(_line(id="a", duration_sec=1, caption="x"), mode="infer")[0].id == "a"


def test_manifest_optional_fields():
    rec = parse_manifest(_line(id="a", duration_sec=3, audio_latents_path="a.f32",
                               lyrics="la la"))[0]
    assert rec.caption is None
    assert rec.lyrics == "la la"
    assert rec.has_conditioning


@pytest.mark.parametrize("text, msg", [
    ('{"id": "a", "duration_sec": 1, "audio_latents_path": "x"}\n{"id": "a", "duration_sec": 1, '
     '"audio_latents_path": "y"}', "line 2: duplicate id"),
    ('{"id": "a", "duration_sec": 1, "audio_latents_path": "x"}\nnot json', "line 2"),
    ('{"id": "a", "duration_sec": -1, "audio_latents_path": "x"}', "duration_sec"),
    ('{"id": "a", "duration_sec": 1, "audio_latents_path": "x", "extra": 1}', "unknown fields"),
])
def test_manifest_errors(text, msg):
    with pytest.raises(ManifestError, match=msg):
        parse_manifest(text)


def test_manifest_round_trip(tmp_path):
    text = "\n".join(_line(id=f"r{i}", duration_sec=1 + i, audio_latents_path=f"{i}.f32",
                           caption="c", language="de") for i in range(4))
    recs = parse_manifest(text)
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs


# ---- rng -------------------------------------------------------------------------

def test_streams_are_keyed_by_purpose():
    a = stream(3, "train", "step").standard_normal(4)
    assert np.array_equal(a, stream(3, "train", "step").standard_normal(4))
    assert not np.array_equal(a, stream(3, "train", "order").standard_normal(4))
    assert not np.array_equal(a, stream(3, "sample", "step").standard_normal(4))
    assert not np.array_equal(a, stream(3, "train", "step", 1).standard_normal(4))
    assert derive_key(0, "a", "b") != derive_key(1, "a", "b")


# ---- checkpoint ------------------------------------------------------------------

def _fresh_checkpoint(cfg, seed=0):
    torch.manual_seed(seed)
    net = FlowNetwork(cfg)
    params = get_state(net)
    rng = np.random.default_rng(seed)
    ema = {k: v + rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
    optim = {f"m/{k}": rng.standard_normal(v.shape).astype(np.float32) for k, v in params.items()}
    return Checkpoint(config=cfg, params=params, ema=ema, optim=optim, step=int(rng.integers(1e6)),
                      rng_seed=cfg.seed, rng_counter=int(rng.integers(1e6)))


def _assert_same(a: Checkpoint, b: Checkpoint):
    assert a.config == b.config
    assert (a.step, a.rng_seed, a.rng_counter) == (b.step, b.rng_seed, b.rng_counter)
    for attr in ("params", "ema", "optim"):
        ta, tb = getattr(a, attr), getattr(b, attr)
        assert ta.keys() == tb.keys()
        for k in ta:
            assert ta[k].dtype == tb[k].dtype
            assert ta[k].tobytes() == tb[k].tobytes(), k


def test_checkpoint_round_trip_fresh_model(tmp_path, tiny_cfg):
    ckpt = _fresh_checkpoint(tiny_cfg)
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    _assert_same(ckpt, load_checkpoint(tmp_path / "m.ckpt"))


@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(heads=st.integers(1, 3), d_head=st.sampled_from([2, 4]), joint=st.integers(1, 2),
       single=st.integers(0, 2), d_latent=st.integers(1, 5), seed=st.integers(0, 2 ** 31))
def test_checkpoint_round_trip_random_models(heads, d_head, joint, single, d_latent, seed):
    cfg = ModelConfig(**{**TINY, "n_heads": heads, "d_model": heads * d_head,
                         "n_joint_layers": joint, "n_unimodal_layers": single,
                         "d_latent": d_latent, "n_convnext_blocks": 0, "seed": seed})
    ckpt = _fresh_checkpoint(cfg, seed % 1000)
    _assert_same(ckpt, decode_checkpoint(encode_checkpoint(ckpt)))


def test_checkpoint_version_mismatch(tiny_cfg):
    ckpt = _fresh_checkpoint(tiny_cfg)
    ckpt.format_version = 999
    with pytest.raises(CheckpointError, match="version mismatch"):
        decode_checkpoint(encode_checkpoint(ckpt))


def test_checkpoint_missing_parameter_named(tiny_cfg):
    ckpt = _fresh_checkpoint(tiny_cfg)
    victim = sorted(ckpt.params)[3]
    del ckpt.params[victim]
    ckpt.ema.pop(victim)
    ckpt.optim.pop(f"m/{victim}")
    with pytest.raises(CheckpointError, match=f"missing parameter '{victim}'"):
        decode_checkpoint(encode_checkpoint(ckpt))


def test_checkpoint_shape_mismatch(tiny_cfg):
    ckpt = _fresh_checkpoint(tiny_cfg)
    name = "final.head.weight"
    ckpt.params[name] = np.zeros((1, 1), dtype=np.float32)
    ckpt.ema.pop(name)
    ckpt.optim.pop(f"m/{name}")
    with pytest.raises(CheckpointError, match="shape mismatch"):
        decode_checkpoint(encode_checkpoint(ckpt))


def test_checkpoint_ema_must_match_params(tiny_cfg):
    ckpt = _fresh_checkpoint(tiny_cfg)
    ckpt.ema["ghost"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(CheckpointError, match="ghost"):
        decode_checkpoint(encode_checkpoint(ckpt), expected_shapes=parameter_shapes(tiny_cfg))


def test_checkpoint_truncated(tiny_cfg):
    buf = encode_checkpoint(_fresh_checkpoint(tiny_cfg))
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(buf[:len(buf) // 2])
