"""Deterministic toy text embedder: frozen hashed token features with a
single trainable linear head, mean pooling, and L2 normalization."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import EmptyTextError

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    tokens = [t for t in _TOKEN_SPLIT.split(text.lower()) if t]
    if not tokens:
        raise EmptyTextError(f"no tokens in {text!r}")
    return tokens


def token_bucket(token: str, vocab_hash_dim: int) -> int:
    """Stable 64-bit hash of the token, reduced to a table row."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_hash_dim


@dataclass
class EncodeCache:
    """Intermediates needed to backpropagate through encode_texts."""

    mean_features: np.ndarray  # (n_texts, base_dim)
    pooled: np.ndarray  # pre-normalization head outputs (n_texts, embed_dim)
    norms: np.ndarray  # (n_texts,)
    unit: np.ndarray  # normalized outputs (n_texts, embed_dim)


class Embedder:
    """Frozen random base table keyed by token hash; trainable head W, b.

    The base table is immutable after construction; only ``head_w`` and
    ``head_b`` ever receive gradients.
    """

    def __init__(
        self,
        vocab_hash_dim: int = 256,
        base_dim: int = 64,
        embed_dim: int = 32,
        seed: int = 0,
    ):
        self.vocab_hash_dim = vocab_hash_dim
        self.base_dim = base_dim
        self.embed_dim = embed_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.base_table = rng.normal(0.0, 1.0, size=(vocab_hash_dim, base_dim))
        self.base_table.setflags(write=False)
        self.head_w = rng.normal(0.0, 1.0 / np.sqrt(base_dim), size=(base_dim, embed_dim))
        self.head_b = np.zeros(embed_dim)

    # --- parameter plumbing -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return {"head_w": self.head_w, "head_b": self.head_b}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.head_w = np.array(params["head_w"], dtype=np.float64)
        self.head_b = np.array(params["head_b"], dtype=np.float64)

    def copy(self) -> "Embedder":
        clone = Embedder(self.vocab_hash_dim, self.base_dim, self.embed_dim, self.seed)
        clone.head_w = self.head_w.copy()
        clone.head_b = self.head_b.copy()
        return clone

    # --- forward ------------------------------------------------------------

    def token_features(self, tokens: list[str]) -> np.ndarray:
        rows = [self.base_table[token_bucket(t, self.vocab_hash_dim)] for t in tokens]
        return np.stack(rows)

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        """Per-token embeddings (n_tokens, embed_dim), unnormalized."""
        if not tokens:
            raise EmptyTextError("empty token sequence")
        return self.token_features(tokens) @ self.head_w + self.head_b

    def embed_text(self, text: str) -> np.ndarray:
        """Mean-pooled, L2-normalized sentence vector."""
        vecs = self.embed_tokens(tokenize(text))
        pooled = vecs.mean(axis=0)
        return pooled / np.linalg.norm(pooled)

    def features_of_texts(self, texts: list[str]) -> np.ndarray:
        """Head-independent mean token features, safe to precompute and reuse."""
        return np.stack([self.token_features(tokenize(t)).mean(axis=0) for t in texts])

    def encode_features(self, mean_feats: np.ndarray) -> tuple[np.ndarray, EncodeCache]:
        """Apply the trainable head to precomputed mean features and normalize."""
        pooled = mean_feats @ self.head_w + self.head_b
        norms = np.linalg.norm(pooled, axis=1)
        unit = pooled / norms[:, None]
        return unit, EncodeCache(mean_feats, pooled, norms, unit)

    def encode_texts(self, texts: list[str]) -> tuple[np.ndarray, EncodeCache]:
        """Embed a batch of texts; returns unit vectors plus a backward cache."""
        return self.encode_features(self.features_of_texts(texts))

    # --- backward -----------------------------------------------------------

    def backward_texts(self, cache: EncodeCache, d_unit: np.ndarray) -> dict[str, np.ndarray]:
        """Gradient of a loss w.r.t. head params, given d(loss)/d(unit rows).

        Normalization backward: du = (dv - (v . dv) v) / ||u||.
        """
        v = cache.unit
        inner = np.sum(v * d_unit, axis=1, keepdims=True)
        d_pooled = (d_unit - inner * v) / cache.norms[:, None]
        return {
            "head_w": cache.mean_features.T @ d_pooled,
            "head_b": d_pooled.sum(axis=0),
        }

    # --- checkpoints ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        tensorio.save_params(
            directory,
            {"base_table": self.base_table, "head_w": self.head_w, "head_b": self.head_b},
            meta={
                "kind": "embedder",
                "vocab_hash_dim": self.vocab_hash_dim,
                "base_dim": self.base_dim,
                "embed_dim": self.embed_dim,
                "seed": self.seed,
            },
        )

    @classmethod
    def load(cls, directory: str | Path) -> "Embedder":
        params, meta = tensorio.load_params(directory)
        emb = cls(meta["vocab_hash_dim"], meta["base_dim"], meta["embed_dim"], meta["seed"])
        emb.head_w = params["head_w"]
        emb.head_b = params["head_b"]
        return emb
