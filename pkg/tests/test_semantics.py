import numpy as np
import pytest

from orderlab.errors import FormatError, InvalidArgument
from orderlab.numkit import SeededRng
from orderlab.semantics import (
    SemanticTable,
    load_semantic_tsv,
    reduce,
    save_semantic_tsv,
    synth_semantics,
)

from conftest import toy_corpus


class TestLoadTsv:
    def test_two_item_fixture(self, tmp_path):
        corpus = toy_corpus([[0, 1, 0, 1, 0]], n_items=2)
        p = tmp_path / "sem.tsv"
        p.write_text("i0\t1,2,3,4\ni1\t5,6,7,8\n")
        table = load_semantic_tsv(str(p), corpus)
        assert table.embeddings.shape == (2, 4)
        np.testing.assert_allclose(table.embeddings[1], [5, 6, 7, 8])

    def test_missing_item_named(self, tmp_path):
        corpus = toy_corpus([[0, 1, 0, 1, 0]], n_items=2)
        p = tmp_path / "sem.tsv"
        p.write_text("i0\t1,2,3,4,5,6,7,8\n")
        with pytest.raises(FormatError, match="i1"):
            load_semantic_tsv(str(p), corpus)

    def test_ragged_dims(self, tmp_path):
        corpus = toy_corpus([[0, 1, 0, 1, 0]], n_items=2)
        p = tmp_path / "sem.tsv"
        p.write_text("i0\t1,2,3,4,5,6,7,8\ni1\t1,2\n")
        with pytest.raises(FormatError):
            load_semantic_tsv(str(p), corpus)

    def test_roundtrip_within_1e6(self, tmp_path, small_synth):
        corpus, cats, table = small_synth
        p = str(tmp_path / "sem.tsv")
        save_semantic_tsv(table, corpus, p)
        loaded = load_semantic_tsv(p, corpus)
        assert np.abs(loaded.embeddings - table.embeddings).max() < 1e-6

    def test_insertion_order_independent(self, tmp_path, small_synth):
        corpus, _, table = small_synth
        p1 = str(tmp_path / "a.tsv")
        save_semantic_tsv(table, corpus, p1)
        lines = open(p1).read().splitlines()
        p2 = str(tmp_path / "b.tsv")
        with open(p2, "w") as fh:
            fh.write("\n".join(reversed(lines)) + "\n")
        a = load_semantic_tsv(p1, corpus)
        b = load_semantic_tsv(p2, corpus)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)


class TestSynthSemantics:
    def test_zero_noise_identical_within_category(self):
        cats = np.array([0, 0, 1, 1])
        table = synth_semantics(cats, 16, 0.0, SeededRng(3))
        unit = table.unit_rows()
        assert unit[0] @ unit[1] == pytest.approx(1.0, abs=1e-12)
        assert unit[2] @ unit[3] == pytest.approx(1.0, abs=1e-12)

    def test_intra_vs_inter_cosine(self):
        cats = np.repeat(np.arange(4), 50)
        table = synth_semantics(cats, 32, 0.1, SeededRng(5))
        unit = table.unit_rows()
        sims = unit @ unit.T
        intra, inter = [], []
        for i in range(0, 200, 7):
            for j in range(i + 1, 200, 11):
                (intra if cats[i] == cats[j] else inter).append(sims[i, j])
        assert np.mean(intra) > 0.9
        assert np.mean(inter) < 0.3

    def test_unit_norm(self):
        cats = np.array([0, 1, 2] * 10)
        table = synth_semantics(cats, 12, 0.2, SeededRng(7))
        norms = np.linalg.norm(table.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)


class TestReduce:
    def test_full_rank_keeps_distances(self):
        gen = SeededRng(9).gen
        rows = gen.standard_normal((30, 12))
        table = SemanticTable(rows, "fixture")
        proj = reduce(table, 12)
        centered = rows - rows.mean(0)
        d_in = np.linalg.norm(centered[:, None] - centered[None, :], axis=-1)
        d_out = np.linalg.norm(proj[:, None] - proj[None, :], axis=-1)
        np.testing.assert_allclose(d_in, d_out, atol=1e-8)

    def test_categories_separable_in_two_dims(self):
        cats = np.repeat(np.arange(2), 40)
        table = synth_semantics(cats, 24, 0.05, SeededRng(11))
        proj = reduce(table, 2)
        c0 = proj[cats == 0].mean(axis=0)
        c1 = proj[cats == 1].mean(axis=0)
        axis = c1 - c0
        scores = proj @ axis
        threshold = (c0 @ axis + c1 @ axis) / 2
        pred = scores > threshold
        assert (pred == (cats == 1)).mean() == 1.0

    def test_deterministic(self, small_synth):
        _, _, table = small_synth
        a = reduce(table, 8)
        b = reduce(table, 8)
        np.testing.assert_array_equal(a, b)

    def test_rank_guard(self):
        table = SemanticTable(np.ones((5, 8)), "fixture")
        with pytest.raises(InvalidArgument):
            reduce(table, 8)  # needs d_h <= items-1
