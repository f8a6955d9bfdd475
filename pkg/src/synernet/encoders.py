"""Frozen visual/text feature providers, tokenization and prompt templates.

The backbone here is synthetic: ``E_v(z) = tanh(W_v z)`` and
``E_t(tokens) = normalize(W_t mean(tokens))``. Both maps are frozen; the text
map is linear-then-normalize so its Jacobian is exact and cheap.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_PUNCT = re.compile(r"[^\w\s]")


class Modality(str, Enum):
    VISUAL = "VISUAL"
    TEXT = "TEXT"


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    modality: Modality
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("embedding values must be a vector")
        if self.normalized and abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("embedding flagged normalized but norm != 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "modality", Modality(self.modality))

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.normalized == other.normalized
            and np.array_equal(self.values, other.values)
        )

    def to_json(self) -> dict:
        return {
            "values": [float(x) for x in self.values],
            "modality": self.modality.value,
            "normalized": self.normalized,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Embedding":
        return cls(np.array(d["values"], dtype=np.float64), Modality(d["modality"]), d["normalized"])


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    owner_concept: str | None = None

    def __post_init__(self):
        if self.text.count("{}") != 1:
            raise ValueError(f"template must contain exactly one '{{}}' placeholder: {self.text!r}")


def render_prompt(template: PromptTemplate | str, name: str) -> str:
    if isinstance(template, str):
        template = PromptTemplate(template)
    return template.text.replace("{}", name)


@dataclass(eq=False)
class PretrainedVocab:
    """Token table of the frozen text encoder; unknown tokens share ``unk``."""

    tokens: dict[str, np.ndarray]
    unk: np.ndarray
    seed: int

    def __contains__(self, token: str) -> bool:
        return token in self.tokens

    @property
    def d_tok(self) -> int:
        return int(self.unk.shape[0])

    def lookup(self, token: str) -> np.ndarray:
        return self.tokens.get(token, self.unk)

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.d_tok))
        return np.stack([self.lookup(t) for t in tokens])

    def is_unknown(self, text: str) -> bool:
        return all(t not in self.tokens for t in tokenize(text))

    def __eq__(self, other):
        if not isinstance(other, PretrainedVocab):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.unk, other.unk)
            and list(self.tokens) == list(other.tokens)
            and all(np.array_equal(self.tokens[k], other.tokens[k]) for k in self.tokens)
        )


class FrozenVisualEncoder:
    """``E_v(z) = tanh(W_v z)`` with a fixed, seed-determined ``W_v``."""

    def __init__(self, weight: np.ndarray):
        self._w = np.array(weight, dtype=np.float64)
        self._w.setflags(write=False)

    @property
    def weight(self) -> np.ndarray:
        return self._w

    @property
    def d_raw(self) -> int:
        return self._w.shape[1]

    @property
    def d_embed(self) -> int:
        return self._w.shape[0]

    def encode_batch(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.d_raw:
            raise ValueError(f"expected (n, {self.d_raw}) raw samples, got {raw.shape}")
        return np.tanh(raw @ self._w.T)

    def encode_image(self, raw: np.ndarray) -> Embedding:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (self.d_raw,):
            raise ValueError(f"raw sample must have dimension {self.d_raw}, got {raw.shape}")
        return Embedding(np.tanh(self._w @ raw), Modality.VISUAL, normalized=False)


class PrecomputedVisualFeatures:
    """Visual provider backed by a feature file instead of the encoder.

    Layout: ``<stem>.f32`` holds an (n, d_embed) little-endian float32 array,
    ``<stem>.json`` holds ``{"n": .., "d_embed": .., "sample_ids": [...]}``.
    """

    def __init__(self, features: np.ndarray, sample_ids: Sequence[int]):
        self.features = np.asarray(features, dtype=np.float64)
        self._row = {int(s): i for i, s in enumerate(sample_ids)}

    @classmethod
    def load(cls, stem: str | Path) -> "PrecomputedVisualFeatures":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        arr = np.fromfile(stem.with_suffix(".f32"), dtype="<f4").reshape(meta["n"], meta["d_embed"])
        return cls(arr.astype(np.float64), meta["sample_ids"])

    @staticmethod
    def save(stem: str | Path, features: np.ndarray, sample_ids: Sequence[int]) -> None:
        stem = Path(stem)
        feats = np.asarray(features, dtype="<f4")
        feats.tofile(stem.with_suffix(".f32"))
        meta = {"n": int(feats.shape[0]), "d_embed": int(feats.shape[1]), "sample_ids": [int(s) for s in sample_ids]}
        stem.with_suffix(".json").write_text(json.dumps(meta))

    def encode_samples(self, sample_ids: Iterable[int]) -> np.ndarray:
        return self.features[[self._row[int(s)] for s in sample_ids]]


@dataclass
class TextCache:
    """Intermediates kept by ``FrozenTextEncoder.forward`` for the backward pass."""

    lengths: np.ndarray
    pre: np.ndarray
    norms: np.ndarray
    out: np.ndarray


class FrozenTextEncoder:
    """``E_t(tokens) = normalize(W_t mean(tokens))`` with frozen ``W_t``."""

    def __init__(self, weight: np.ndarray):
        self._w = np.array(weight, dtype=np.float64)
        self._w.setflags(write=False)

    @property
    def weight(self) -> np.ndarray:
        return self._w

    @property
    def d_tok(self) -> int:
        return self._w.shape[1]

    def encode_text(self, token_vectors: Sequence[np.ndarray] | np.ndarray) -> Embedding:
        tv = np.asarray(token_vectors, dtype=np.float64)
        if tv.ndim != 2 or tv.shape[0] == 0:
            raise ValueError("encode_text needs a non-empty list of token vectors")
        y = self._w @ tv.mean(axis=0)
        return Embedding(y / np.linalg.norm(y), Modality.TEXT, normalized=True)

    def forward(self, sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, TextCache]:
        """Encode many token sequences at once; returns (P, d_embed) unit rows."""
        if any(len(s) == 0 for s in sequences):
            raise ValueError("encode_text needs a non-empty list of token vectors")
        lengths = np.array([len(s) for s in sequences], dtype=np.float64)
        means = np.stack([np.asarray(s, dtype=np.float64).mean(axis=0) for s in sequences])
        pre = means @ self._w.T
        norms = np.linalg.norm(pre, axis=1)
        out = pre / norms[:, None]
        return out, TextCache(lengths, pre, norms, out)

    def backward(self, cache: TextCache, d_out: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. each sequence's mean token vector, scaled per token.

        Row ``p`` of the result is the gradient carried by *every* token of
        sequence ``p`` (the mean spreads it evenly).
        """
        t = cache.out
        d_pre = (d_out - t * np.sum(t * d_out, axis=1, keepdims=True)) / cache.norms[:, None]
        d_mean = d_pre @ self._w
        return d_mean / cache.lengths[:, None]

    def jacobian(self, token_vectors: np.ndarray, position: int) -> np.ndarray:
        """d E_t / d token_vectors[position], shape (d_embed, d_tok)."""
        tv = np.asarray(token_vectors, dtype=np.float64)
        y = self._w @ tv.mean(axis=0)
        n = np.linalg.norm(y)
        t = y / n
        proj = (np.eye(len(t)) - np.outer(t, t)) / n
        return proj @ self._w / tv.shape[0]


def backbone_hash(visual: FrozenVisualEncoder, text: FrozenTextEncoder, vocab: PretrainedVocab) -> str:
    h = hashlib.sha256()
    for arr in (visual.weight, text.weight, vocab.unk):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for tok in sorted(vocab.tokens):
        h.update(tok.encode())
        h.update(np.ascontiguousarray(vocab.tokens[tok], dtype="<f8").tobytes())
    return h.hexdigest()
