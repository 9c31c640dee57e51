"""MQAR generator (replay-scan oracle) and byte corpus loader."""

import numpy as np
import pytest

from rodimus.data import (
    FILLER_ID,
    MqarConfig,
    batch_iter,
    byte_corpus_load,
    byte_windows,
    mqar_accuracy,
    mqar_generate,
    synthetic_text,
)
from rodimus.errors import ConfigError, DataError
from rodimus.rng import Rng


def replay_scan_check(batch, cfg: MqarConfig):
    """Oracle: rebuild the key->value binding by scanning each sequence."""
    K = cfg.resolved_num_keys()
    key_lo, val_lo = 1, 1 + K
    for b in range(batch.tokens.shape[0]):
        seq = batch.tokens[b]
        binding = {}
        t = 0
        while t + 1 < len(seq) and key_lo <= seq[t] < val_lo and seq[t + 1] >= val_lo:
            binding[seq[t]] = seq[t + 1]
            t += 2
        assert len(binding) == cfg.num_pairs  # keys distinct
        for qpos, ans in zip(batch.answer_positions[b], batch.answer_ids[b]):
            key = seq[qpos]
            assert key in binding, "query key never bound"
            assert binding[key] == ans == seq[qpos + 1]


def test_mqar_replay_scan_oracle_large_set():
    cfg = MqarConfig(seq_len=64, num_pairs=4, vocab=256, seed=0)
    batch = mqar_generate(cfg, 10_000)
    replay_scan_check(batch, cfg)


def test_mqar_layout_pairs_filler_queries():
    cfg = MqarConfig(seq_len=20, num_pairs=3, vocab=30, seed=1)
    batch = mqar_generate(cfg, 50)
    P, T = cfg.num_pairs, cfg.seq_len
    filler = batch.tokens[:, 2 * P : T - 2 * P]
    assert np.all(filler == FILLER_ID)
    assert np.all(batch.tokens[:, : 2 * P] != FILLER_ID)
    assert np.all(batch.tokens[:, T - 2 * P :] != FILLER_ID)


def test_mqar_single_pair():
    cfg = MqarConfig(seq_len=8, num_pairs=1, vocab=10, seed=2)
    batch = mqar_generate(cfg, 20)
    replay_scan_check(batch, cfg)
    assert np.all(batch.answer_ids == batch.tokens[:, 1:2])  # the single bound value


def test_mqar_paper_style_instance():
    # "A 3 B 2 C 1" then queries: each query's answer is its pair's value
    cfg = MqarConfig(seq_len=16, num_pairs=3, vocab=20, seed=3)
    batch = mqar_generate(cfg, 1)
    seq = batch.tokens[0]
    pairs = {seq[0]: seq[1], seq[2]: seq[3], seq[4]: seq[5]}
    for qpos, ans in zip(batch.answer_positions[0], batch.answer_ids[0]):
        assert pairs[seq[qpos]] == ans


def test_mqar_infeasible_configs():
    with pytest.raises(ConfigError):
        mqar_generate(MqarConfig(seq_len=8, num_pairs=4, vocab=256), 1)  # 4*P > T
    with pytest.raises(ConfigError):
        mqar_generate(MqarConfig(seq_len=64, num_pairs=6, vocab=8), 1)  # not enough keys
    with pytest.raises(ConfigError):
        mqar_generate(MqarConfig(seq_len=64, num_pairs=1, vocab=256), 0)


def test_mqar_accuracy_metric():
    cfg = MqarConfig(seq_len=12, num_pairs=2, vocab=16, seed=4)
    batch = mqar_generate(cfg, 5)
    logits = np.zeros((5, 12, 16))
    # perfect predictor: at every position, put mass on the next token
    for b in range(5):
        for t in range(11):
            logits[b, t, batch.tokens[b, t + 1]] = 10.0
    assert mqar_accuracy(logits, batch) == 1.0
    assert mqar_accuracy(np.zeros((5, 12, 16)), batch) < 1.0


def test_mqar_loss_mask_marks_query_positions():
    cfg = MqarConfig(seq_len=12, num_pairs=2, vocab=16, seed=5)
    batch = mqar_generate(cfg, 4)
    mask = batch.loss_mask()
    assert mask.shape == (4, 11)
    assert np.all(mask.sum(axis=1) == cfg.num_pairs)
    rows = np.arange(4)[:, None]
    assert np.all(mask[rows, batch.answer_positions] == 1.0)


# -- byte corpus ----------------------------------------------------------------


def test_byte_windows_count_formula():
    for ln, T in ((101, 10), (100, 10), (11, 10), (257, 16)):
        rows = byte_windows(bytes(ln), T)
        assert len(rows) == (ln - 1) // T
        assert rows.shape[1] == T + 1


def test_byte_windows_content_and_short_file():
    data = bytes(range(50))
    rows = byte_windows(data, 7)
    np.testing.assert_array_equal(rows[0], np.arange(8))
    np.testing.assert_array_equal(rows[1], np.arange(7, 15))  # next-token overlap of 1
    with pytest.raises(DataError):
        byte_windows(bytes(5), 7)


def test_byte_corpus_load_split_and_determinism(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(synthetic_text(5000, seed=3))
    tr1, va1 = byte_corpus_load(str(path), 16, (0.8, 0.2), seed=9)
    tr2, va2 = byte_corpus_load(str(path), 16, (0.8, 0.2), seed=9)
    np.testing.assert_array_equal(tr1, tr2)
    np.testing.assert_array_equal(va1, va2)
    total = (5000 - 1) // 16
    assert len(tr1) + len(va1) == total
    assert len(tr1) == round(0.8 * total)
    with pytest.raises(ConfigError):
        byte_corpus_load(str(path), 16, (0.5, 0.4))
    with pytest.raises(DataError):
        byte_corpus_load(str(tmp_path / "missing.bin"), 16)


def test_synthetic_text_deterministic_and_ascii():
    a = synthetic_text(3000, seed=1)
    b = synthetic_text(3000, seed=1)
    c = synthetic_text(3000, seed=2)
    assert a == b and a != c and len(a) == 3000
    assert max(a) < 128  # ascii


def test_batch_iter_pure_in_seed_and_epoch():
    rows = np.arange(50)[:, None]
    o1 = [b.copy() for b in batch_iter(rows, 8, seed=4, epoch=2)]
    o2 = [b.copy() for b in batch_iter(rows, 8, seed=4, epoch=2)]
    o3 = [b.copy() for b in batch_iter(rows, 8, seed=4, epoch=3)]
    assert all(np.array_equal(x, y) for x, y in zip(o1, o2))
    assert any(not np.array_equal(x, y) for x, y in zip(o1, o3))
    seen = np.sort(np.concatenate([b[:, 0] for b in o1]))
    np.testing.assert_array_equal(seen, np.arange(50))
