"""Byte-level tokens, synthetic corpora, seeded RNG streams, preference pairs."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

BOS = 256
EOS = 257
VOCAB_SIZE = 258

_LETTERS = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("corpus", "init", "data", ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def encode(text: str) -> list:
    return list(text.encode("utf-8"))


def decode(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def markov_corpus(n_tokens: int, seed: int, alphabet: int = 12, concentration: float = 0.15) -> np.ndarray:
    """Order-2 Markov chain over the first ``alphabet`` lowercase letters.

    Each (prev2, prev1) context gets its own sparse Dirichlet next-symbol law.
    """
    if n_tokens <= 0:
        raise DataError("corpus length must be positive")
    if not 2 <= alphabet <= 26:
        raise DataError("alphabet must be in [2, 26]")
    rng = rng_stream(seed, "corpus")
    table = rng.dirichlet(np.full(alphabet, concentration), size=(alphabet, alphabet))
    cdf = np.cumsum(table, axis=-1)
    u = rng.random(n_tokens)
    out = np.empty(n_tokens, dtype=np.int64)
    a, b = rng.integers(alphabet, size=2)
    for i in range(n_tokens):
        c = min(int(np.searchsorted(cdf[a, b], u[i], side="right")), alphabet - 1)
        out[i] = c
        a, b = b, c
    return _LETTERS[out]


def pattern_corpus(n_tokens: int, seed: int) -> np.ndarray:
    """Copy/repeat tasks: ``word=word word;`` style records, truncated to length."""
    if n_tokens <= 0:
        raise DataError("corpus length must be positive")
    rng = rng_stream(seed, "corpus")
    parts = []
    total = 0
    while total < n_tokens:
        word = bytes(_LETTERS[rng.integers(0, 8, size=int(rng.integers(2, 5)))])
        reps = int(rng.integers(2, 4))
        rec = word + b"=" + b" ".join([word] * reps) + b";"
        parts.append(rec)
        total += len(rec)
    return np.frombuffer(b"".join(parts)[:n_tokens], dtype=np.uint8).copy()


CORPUS_KINDS = {"markov": markov_corpus, "pattern": pattern_corpus}


def make_corpus(kind: str, n_tokens: int, seed: int) -> np.ndarray:
    try:
        fn = CORPUS_KINDS[kind]
    except KeyError:
        raise DataError(f"unknown corpus kind {kind!r}") from None
    return fn(n_tokens, seed)


def load_corpus(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data:
        raise DataError(f"corpus {path} is empty")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def split_corpus(tokens: np.ndarray, held_out: float = 0.1):
    cut = int(len(tokens) * (1.0 - held_out))
    return tokens[:cut], tokens[cut:]


def sample_windows(tokens: np.ndarray, batch: int, length: int, rng: np.random.Generator):
    """Random (inputs, targets) windows of shape (batch, length)."""
    tokens = np.asarray(tokens)
    if len(tokens) < length + 1:
        raise DataError(f"corpus of {len(tokens)} tokens is shorter than a {length + 1}-token window")
    starts = rng.integers(0, len(tokens) - length, size=batch)
    win = tokens[starts[:, None] + np.arange(length + 1)[None, :]].astype(np.int64)
    return win[:, :-1], win[:, 1:]


@dataclass(frozen=True)
class PrefPair:
    prompt: tuple
    chosen: tuple
    rejected: tuple

    def __post_init__(self):
        if not self.chosen or not self.rejected:
            raise DataError("continuations must be nonempty")
        if tuple(self.chosen) == tuple(self.rejected):
            raise DataError("chosen and rejected continuations must differ")
        if not self.prompt:
            raise DataError("prompt must be nonempty")

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt), "chosen": list(self.chosen), "rejected": list(self.rejected)}

    @classmethod
    def from_dict(cls, d: dict) -> "PrefPair":
        unknown = set(d) - {"prompt", "chosen", "rejected"}
        if unknown:
            raise DataError(f"unknown preference keys {sorted(unknown)}")
        return cls(tuple(d["prompt"]), tuple(d["chosen"]), tuple(d["rejected"]))


def corrupt(seq: Sequence[int], rng: np.random.Generator, frac: float = 0.5, alphabet=None) -> tuple:
    """Replace about ``frac`` of the tokens with different random symbols."""
    seq = list(seq)
    pool = np.asarray(alphabet if alphabet is not None else _LETTERS, dtype=np.int64)
    n = max(1, int(round(frac * len(seq))))
    for i in rng.choice(len(seq), size=n, replace=False):
        choices = pool[pool != seq[i]]
        seq[i] = int(rng.choice(choices))
    return tuple(seq)


def synth_pref_pairs(model, tokens: np.ndarray, n_pairs: int, prompt_len: int, cont_len: int,
                     seed: int) -> list:
    """chosen = model's greedy continuation of a corpus prompt; rejected = corrupted copy."""
    from .model import generate

    rng = rng_stream(seed, "prefs")
    tokens = np.asarray(tokens)
    if len(tokens) <= prompt_len:
        raise DataError("corpus shorter than the prompt length")
    pairs = []
    for s in rng.integers(0, len(tokens) - prompt_len, size=n_pairs):
        prompt = tuple(int(t) for t in tokens[s:s + prompt_len])
        chosen = tuple(generate(model, prompt, cont_len)[prompt_len:])
        pairs.append(PrefPair(prompt, chosen, corrupt(chosen, rng)))
    return pairs


def save_pref_pairs(pairs: Sequence[PrefPair], path) -> None:
    from .checkpoint import atomic_write

    text = "".join(json.dumps(p.to_dict()) + "\n" for p in pairs).encode("utf-8")
    atomic_write(path, lambda fh: fh.write(text))


def load_pref_pairs(path) -> list:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pairs.append(PrefPair.from_dict(json.loads(line)))
    if not pairs:
        raise DataError(f"no preference pairs in {path}")
    return pairs
