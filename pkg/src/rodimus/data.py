"""Datasets: the MQAR synthetic recall task and byte-level LM corpora.

MQAR (multi-query associative recall) instances bind P distinct keys to
values, pad with a reserved filler token, then ask the queries at the end:

    [k1 v1 k2 v2 ... kP vP] [filler ... filler] [q1 a1 q2 a2 ... qP aP]

Each query q is one of the keys (order randomized) and the token after it is
the bound value, so next-token loss at the query positions trains recall.
Keys, values, and the filler come from disjoint alphabets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .rng import Rng

FILLER_ID = 0


@dataclass
class MqarConfig:
    seq_len: int = 64  # T
    num_pairs: int = 4  # P
    vocab: int = 256  # V, includes the filler id
    num_keys: int = 0  # key alphabet size; 0 = half the non-filler ids
    seed: int = 0

    def resolved_num_keys(self) -> int:
        return self.num_keys if self.num_keys > 0 else (self.vocab - 1) // 2

    def validate(self) -> None:
        K = self.resolved_num_keys()
        num_values = self.vocab - 1 - K
        if self.num_pairs < 1:
            raise ConfigError(f"num_pairs must be >= 1, got {self.num_pairs}")
        if K < self.num_pairs:
            raise ConfigError(
                f"key alphabet of {K} cannot supply {self.num_pairs} distinct keys"
            )
        if num_values < 1:
            raise ConfigError(f"value alphabet is empty (vocab {self.vocab}, keys {K})")
        if 4 * self.num_pairs > self.seq_len:
            raise ConfigError(
                f"seq_len {self.seq_len} too short for {self.num_pairs} pairs "
                f"plus interleaved queries (needs >= {4 * self.num_pairs})"
            )


@dataclass
class MqarBatch:
    tokens: np.ndarray  # [count, T] int64
    answer_positions: np.ndarray  # [count, P] query positions; target index t predicts tokens[t+1]
    answer_ids: np.ndarray  # [count, P]

    def loss_mask(self) -> np.ndarray:
        """[count, T-1] 0/1 mask over target positions (answers only)."""
        count, T = self.tokens.shape
        mask = np.zeros((count, T - 1), dtype=np.float64)
        np.put_along_axis(mask, self.answer_positions, 1.0, axis=1)
        return mask


def mqar_generate(cfg: MqarConfig, count: int, rng: Rng | None = None) -> MqarBatch:
    cfg.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if rng is None:
        rng = Rng(cfg.seed, stream=100)
    T, P = cfg.seq_len, cfg.num_pairs
    K = cfg.resolved_num_keys()
    key_lo, val_lo = 1, 1 + K
    num_values = cfg.vocab - 1 - K
    tokens = np.full((count, T), FILLER_ID, dtype=np.int64)
    answer_positions = np.zeros((count, P), dtype=np.int64)
    answer_ids = np.zeros((count, P), dtype=np.int64)
    for b in range(count):
        keys = key_lo + rng.choice(K, P, replace=False)
        values = val_lo + rng.integers(0, num_values, P)
        pairs = np.empty(2 * P, dtype=np.int64)
        pairs[0::2] = keys
        pairs[1::2] = values
        tokens[b, : 2 * P] = pairs
        order = rng.permutation(P)
        q_start = T - 2 * P
        for j, idx in enumerate(order):
            qpos = q_start + 2 * j
            tokens[b, qpos] = keys[idx]
            tokens[b, qpos + 1] = values[idx]
            answer_positions[b, j] = qpos
            answer_ids[b, j] = values[idx]
    return MqarBatch(tokens, answer_positions, answer_ids)


def mqar_accuracy(logits: np.ndarray, batch: MqarBatch) -> float:
    """Fraction of queries whose argmax prediction equals the bound value."""
    pred = np.argmax(logits, axis=-1)  # [count, T]
    at_queries = np.take_along_axis(pred, batch.answer_positions, axis=1)
    return float(np.mean(at_queries == batch.answer_ids))


# -- byte corpus --------------------------------------------------------------


def byte_windows(data: bytes, T: int) -> np.ndarray:
    """Non-overlapping next-token windows: ⌊(len−1)/T⌋ rows of T+1 byte tokens."""
    if T < 1:
        raise ConfigError(f"window length must be >= 1, got {T}")
    if len(data) < T + 1:
        raise DataError(f"corpus of {len(data)} bytes is shorter than T+1 = {T + 1}")
    count = (len(data) - 1) // T
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    rows = [arr[i * T : i * T + T + 1] for i in range(count)]
    return np.stack(rows)


def byte_corpus_load(
    path: str, T: int, fractions: tuple[float, float] = (0.9, 0.1), seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Train/valid windows ([*, T+1] int64 byte tokens), seeded shuffle then split."""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be two non-negatives summing to 1, got {fractions}")
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read corpus {path!r}: {e}") from e
    rows = byte_windows(data, T)
    perm = Rng(seed, stream=200).permutation(len(rows))
    rows = rows[perm]
    n_train = int(round(fractions[0] * len(rows)))
    train, valid = rows[:n_train], rows[n_train:]
    if len(train) == 0 or len(valid) == 0 and fractions[1] > 0:
        raise DataError(
            f"corpus too small: {len(rows)} windows cannot satisfy split {fractions}"
        )
    return train, valid


_WORDS = (
    "the quick brown fox jumps over a lazy dog while rivers run down from "
    "high stone hills and small birds sing in green trees near old wooden "
    "houses where people tell long stories about bright stars cold winters "
    "warm summers silent roads distant ships deep water hidden paths golden "
    "fields heavy rain soft wind broken clocks paper maps iron gates glass "
    "windows quiet mornings busy markets simple meals strong coffee"
).split()


def synthetic_text(nbytes: int, seed: int = 0) -> bytes:
    """Deterministic ~nbytes of Zipf-weighted word salad for byte-LM drills."""
    rng = Rng(seed, stream=300)
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    probs = (1.0 / ranks) / np.sum(1.0 / ranks)
    cum = np.cumsum(probs)
    parts: list[str] = []
    size = 0
    sentence_len = 0
    while size < nbytes:
        u = float(rng.uniform(()))
        word = _WORDS[min(int(np.searchsorted(cum, u)), len(_WORDS) - 1)]
        sentence_len += 1
        if sentence_len >= 8 and float(rng.uniform(())) < 0.25:
            word += "."
            sentence_len = 0
        parts.append(word)
        size += len(word) + 1
    return " ".join(parts).encode("ascii")[:nbytes]


def batch_iter(rows: np.ndarray, batch_size: int, seed: int, epoch: int):
    """Yield shuffled batches; order is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    perm = Rng(seed, stream=400 + epoch).permutation(len(rows))
    for i in range(0, len(rows), batch_size):
        idx = perm[i : i + batch_size]
        yield rows[idx]
