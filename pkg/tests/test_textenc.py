"""Tokenizer rules and the hashed-feature embedder contracts."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eviground import textenc
from eviground.errors import EmptyTextError


class TestTokenize:
    def test_measurement_string(self):
        assert textenc.tokenize("Hippocampal volume 4,724 mm3") == [
            "hippocampal",
            "volume",
            "4",
            "724",
            "mm3",
        ]

    def test_single_label(self):
        assert textenc.tokenize("CN") == ["cn"]

    def test_empty_raises(self):
        with pytest.raises(EmptyTextError):
            textenc.tokenize("!!! ---")

    @given(st.text(alphabet=st.characters(categories=["Ll", "Lu", "Nd", "Po", "Zs"]), min_size=1))
    def test_idempotent(self, text):
        try:
            tokens = textenc.tokenize(text)
        except EmptyTextError:
            return
        assert textenc.tokenize(" ".join(tokens)) == tokens


class TestEmbedder:
    def test_same_token_same_vector(self):
        emb = textenc.Embedder(seed=3)
        vecs = emb.embed_tokens(["tau", "tau"])
        np.testing.assert_array_equal(vecs[0], vecs[1])

    def test_equal_seeds_equal_outputs(self):
        a = textenc.Embedder(seed=9)
        b = textenc.Embedder(seed=9)
        np.testing.assert_array_equal(a.embed_text("memory decline"), b.embed_text("memory decline"))

    def test_unit_norm_output(self):
        emb = textenc.Embedder(seed=0)
        for text in ("tau", "memory is impaired", "a b c d e f"):
            assert np.linalg.norm(emb.embed_text(text)) == pytest.approx(1.0, abs=1e-9)

    def test_token_order_invariance(self):
        emb = textenc.Embedder(seed=0)
        np.testing.assert_allclose(
            emb.embed_text("amyloid tau memory"), emb.embed_text("memory amyloid tau"), atol=1e-12
        )

    def test_single_token_equals_normalized_token_vector(self):
        emb = textenc.Embedder(seed=5)
        tok = emb.embed_tokens(["hippocampus"])[0]
        np.testing.assert_allclose(
            emb.embed_text("hippocampus"), tok / np.linalg.norm(tok), atol=1e-12
        )

    def test_base_table_immutable_and_only_head_grads(self):
        from eviground.grounding import GroundingBatch, multi_positive_infonce
        from eviground.records import EvidenceItem

        emb = textenc.Embedder(vocab_hash_dim=16, base_dim=8, embed_dim=4, seed=1)
        before = emb.base_table.copy()
        batch = GroundingBatch(
            ["memory is down", "tau is up"],
            [
                EvidenceItem("a", "memory score low", "f", "cognition"),
                EvidenceItem("b", "tau level high", "f", "biomarker"),
            ],
            {(0, 0), (1, 1)},
        )
        lw = multi_positive_infonce(batch, emb, tau=0.5)
        assert set(lw.grads) == {"head_w", "head_b"}
        emb.head_w -= 0.1 * lw.grads["head_w"]
        emb.head_b -= 0.1 * lw.grads["head_b"]
        np.testing.assert_array_equal(emb.base_table, before)
        with pytest.raises((ValueError, RuntimeError)):
            emb.base_table[0, 0] = 1.0

    def test_checkpoint_roundtrip(self, tmp_path):
        emb = textenc.Embedder(seed=2)
        emb.head_w += 0.5
        emb.save(tmp_path / "emb")
        back = textenc.Embedder.load(tmp_path / "emb")
        assert back.vocab_hash_dim == emb.vocab_hash_dim
        # weights serialize at single precision
        np.testing.assert_allclose(back.head_w, emb.head_w, atol=1e-6)
        np.testing.assert_array_equal(back.base_table, emb.base_table)
