"""Model assembly: losses, decode/batch consistency, counting, checkpoints."""

import os

import numpy as np
import pytest

from rodimus.checkpoint import load_arrays, load_model, save_arrays, save_model
from rodimus.errors import ConfigError, DataError, IntegrityError
from rodimus.model import (
    InferenceSession,
    ModelConfig,
    build_model,
    forward_train,
    generate,
    memory_report,
    model_logits,
)
from rodimus.rng import Rng

SMALL = dict(num_layers=2, d=24, n=12, low_rank=6, h=4, window=4, vocab=40)


def randomize_outputs(params, seed=99):
    rng = Rng(seed, 0)
    for name, t, _ in params.named():
        if name.endswith(("w_down", "w_o", "w_out")):
            t.data = rng.normal(t.shape, 0.05)


def toks(shape, vocab=40, seed=5):
    return Rng(seed, 1).integers(0, vocab, shape)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(arch="mamba").validate()
    with pytest.raises(ConfigError):
        ModelConfig(arch="rodimus_plus", d=10, h=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(num_layers=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(exec_form="eager").validate()
    with pytest.raises(ConfigError, match="low_rank"):
        ModelConfig(d=8, low_rank=16).validate()


def test_fresh_model_loss_near_ln_vocab():
    for arch in ("rodimus", "rodimus_plus", "transformer_pp_baseline"):
        cfg = ModelConfig(arch=arch, **SMALL)
        params = build_model(cfg)
        _, loss = forward_train(toks((2, 10)), params)
        assert abs(float(loss.data) - np.log(cfg.vocab)) < 0.05 * np.log(cfg.vocab)


def test_token_range_checked():
    params = build_model(ModelConfig(**SMALL))
    with pytest.raises(DataError):
        forward_train(np.array([[1, 2, 40]]), params)
    sess = InferenceSession(params)
    with pytest.raises(DataError):
        sess.decode_step(40)


def test_exec_forms_agree_at_model_level():
    cfg = ModelConfig(arch="rodimus_plus", **SMALL, chunk_len=3)
    params = build_model(cfg)
    randomize_outputs(params)
    t = toks((2, 9))
    ref = model_logits(t, params).data
    for form in ("scan", "parallel"):
        params.cfg = ModelConfig(**{**cfg.to_dict(), "exec_form": form})
        assert np.abs(model_logits(t, params).data - ref).max() <= 1e-9


def test_decode_matches_batched_forward():
    for arch in ("rodimus", "rodimus_plus"):
        cfg = ModelConfig(arch=arch, **SMALL)
        params = build_model(cfg)
        randomize_outputs(params)
        t = toks((1, 12))[0]
        ref = model_logits(t, params).data
        sess = InferenceSession(params)
        dec = np.stack([sess.decode_step(int(x)) for x in t])
        assert np.abs(dec - ref).max() <= 1e-8


def test_decode_state_constant_in_length():
    cfg = ModelConfig(arch="rodimus_plus", **SMALL)
    params = build_model(cfg)
    sess = InferenceSession(params)
    sizes = []
    for x in toks((3 * cfg.window,)):
        sess.decode_step(int(x))
        sizes.append(sess.state_float_count())
    assert len(set(sizes[cfg.window :])) == 1


def test_tied_embeddings():
    cfg = ModelConfig(**SMALL, tie_embeddings=True)
    params = build_model(cfg)
    assert params.lm_head is None
    untied = build_model(ModelConfig(**SMALL, tie_embeddings=False))
    assert params.count() == untied.count() - 40 * 24
    _, loss = forward_train(toks((2, 6)), params)
    assert np.isfinite(float(loss.data))


def test_loss_mask():
    params = build_model(ModelConfig(**SMALL))
    randomize_outputs(params)
    t = toks((2, 8))
    mask = np.zeros((2, 7))
    mask[:, 3] = 1.0
    _, loss = forward_train(t, params, mask)
    # oracle: per-position nll at the masked positions only
    logits = model_logits(t, params).data
    z = logits[:, 3, :]
    lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) + z.max(-1)
    nll = lse - z[np.arange(2), t[:, 4]]
    np.testing.assert_allclose(float(loss.data), nll.mean(), rtol=1e-10)
    with pytest.raises(DataError):
        forward_train(t, params, np.zeros((2, 7)))


def test_generate_runs_and_is_deterministic():
    params = build_model(ModelConfig(**SMALL))
    randomize_outputs(params)
    a = generate(params, [1, 2, 3], 5, Rng(0, 500), temperature=1.0)
    b = generate(params, [1, 2, 3], 5, Rng(0, 500), temperature=1.0)
    assert a == b and len(a) == 8
    greedy = generate(params, [1, 2, 3], 4, Rng(0, 501), temperature=0.0)
    assert all(0 <= t < 40 for t in greedy)


def test_memory_report_closed_form():
    cfg = ModelConfig(arch="rodimus", num_layers=3, d=32, n=16, conv_width=4, expansion=2)
    rep = memory_report(cfg, context_len=100)
    assert rep["per_layer_floats"]["recurrent_state"] == 16 * 64
    assert rep["per_layer_floats"]["conv_tail"] == 3 * 64
    assert rep["total_floats"] == 3 * (16 * 64 + 3 * 64)
    assert not rep["grows_with_context"]
    # n=64 state is half of an n=128 state at equal m
    small = memory_report(ModelConfig(arch="rodimus", num_layers=1, d=32, n=64, conv_width=1), 10)
    big = memory_report(ModelConfig(arch="rodimus", num_layers=1, d=32, n=128, conv_width=1), 10)
    assert 2 * small["total_floats"] == big["total_floats"]
    tr = memory_report(ModelConfig(arch="transformer_pp_baseline", num_layers=2, d=32, h=4), 100)
    assert tr["grows_with_context"]
    assert tr["per_layer_floats"]["full_kv"] == 100 * 2 * 4 * 8


def test_decode_session_float_count_matches_report():
    cfg = ModelConfig(arch="rodimus", **SMALL)
    params = build_model(cfg)
    sess = InferenceSession(params)
    sess.decode_step(1)
    rep = memory_report(cfg, context_len=1)
    assert sess.state_float_count() == rep["total_floats"]


# -- checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = ModelConfig(**SMALL, seed=7)
    params = build_model(cfg)
    randomize_outputs(params)
    path = os.path.join(tmp_path, "m.ckpt")
    save_model(path, params, extra={"step": 3})
    loaded, extra = load_model(path)
    assert extra == {"step": 3}
    for (n1, t1, _), (n2, t2, _) in zip(params.named(), loaded.named()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data), n1


def test_checkpoint_truncation_detected(tmp_path):
    params = build_model(ModelConfig(**SMALL))
    path = os.path.join(tmp_path, "m.ckpt")
    save_model(path, params)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-1])
    with pytest.raises(IntegrityError, match="truncated"):
        load_model(path)


def test_checkpoint_magic_and_header_corruption(tmp_path):
    path = os.path.join(tmp_path, "bad.ckpt")
    open(path, "wb").write(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(IntegrityError, match="magic"):
        load_arrays(path)
    params = build_model(ModelConfig(**SMALL))
    good = os.path.join(tmp_path, "good.ckpt")
    save_model(good, params)
    blob = bytearray(open(good, "rb").read())
    blob[20] ^= 0xFF  # flip a byte inside the JSON header
    open(path, "wb").write(bytes(blob))
    with pytest.raises(IntegrityError):
        load_arrays(path)


def test_checkpoint_config_mismatch_names_field(tmp_path):
    cfg = ModelConfig(**SMALL)
    params = build_model(cfg)
    path = os.path.join(tmp_path, "m.ckpt")
    save_model(path, params)
    other = ModelConfig(**{**cfg.to_dict(), "d": 48})
    with pytest.raises(IntegrityError, match="'d'"):
        load_model(path, expect_config=other.to_dict())


def test_checkpoint_trailing_bytes_detected(tmp_path):
    params = build_model(ModelConfig(**SMALL))
    path = os.path.join(tmp_path, "m.ckpt")
    save_model(path, params)
    with open(path, "ab") as f:
        f.write(b"zz")
    with pytest.raises(IntegrityError, match="trailing"):
        load_arrays(path)


def test_save_arrays_preserves_dtypes(tmp_path):
    path = os.path.join(tmp_path, "a.ckpt")
    arrays = {"x": np.arange(6, dtype=np.float32).reshape(2, 3), "y": np.arange(4, dtype=np.int64)}
    save_arrays(path, {"k": 1}, arrays)
    cfg, out, _ = load_arrays(path)
    assert cfg == {"k": 1}
    for k in arrays:
        assert out[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(out[k], arrays[k])


def test_param_count_ratio_model_level():
    # per-layer parameter ratio at the published geometry
    d = 768
    rod = build_model(ModelConfig(arch="rodimus", num_layers=1, d=d, n=64, low_rank=16, vocab=11, h=12))
    plus = build_model(
        ModelConfig(arch="rodimus_plus", num_layers=1, d=d, n=64, low_rank=16, vocab=11, h=12)
    )
    embed_head = 2 * 11 * d + d  # embedding + head + final gain
    r1 = (rod.count() - embed_head) / d**2
    r2 = (plus.count() - embed_head) / d**2
    assert 5.4 <= r1 <= 6.6
    assert 11.7 <= r2 <= 14.3
