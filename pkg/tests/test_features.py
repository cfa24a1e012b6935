import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from ddifuse.exceptions import FormatError, MissingDrugError
from ddifuse.features import (EmbeddingTable, PairFeaturizer, PairMode, concat_tables, feature_width,
                              l2_normalize, load_embedding_table, pair_features, save_embedding_table)


@pytest.fixture
def table():
    return EmbeddingTable([2, 0, 5], [[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]])


def test_table_sorted_and_lookup(table):
    assert table.drugs.tolist() == [0, 2, 5]
    assert table.vector(2).tolist() == [3.0, 4.0]
    assert 5 in table and 1 not in table
    with pytest.raises(MissingDrugError):
        table.lookup([0, 1])


def test_table_rejects_duplicates():
    with pytest.raises(ValueError):
        EmbeddingTable([1, 1], np.zeros((2, 3)))


def test_dense_fills_zero_rows(table):
    F, present = table.dense(6)
    assert F.shape == (6, 2)
    assert present.tolist() == [True, False, True, False, False, True]
    assert F[1].tolist() == [0.0, 0.0]


def test_l2_normalize_counts_zero_rows(table, caplog):
    out = l2_normalize(table)
    assert out.normalized and out.zero_rows == 1
    assert np.allclose(out.vector(2), [0.6, 0.8])
    assert out.vector(5).tolist() == [0.0, 0.0]
    assert "zero vector" in caplog.text


def test_pair_feature_oracles(table):
    assert pair_features(table, 2, 0).tolist() == [3.0, 4.0, 1.0, 0.0]
    ext = pair_features(table, 2, 0, PairMode.EXTENDED)
    assert ext.tolist() == [3.0, 4.0, 1.0, 0.0, 2.0, 4.0, 3.0, 0.0]
    assert feature_width(64) == 128 and feature_width(64, "extended") == 256


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-10, 10)))
def test_pair_symmetries(m):
    t = EmbeddingTable([0, 1], m)
    ab, ba = pair_features(t, 0, 1), pair_features(t, 1, 0)
    assert np.array_equal(ab[:5], ba[5:]) and np.array_equal(ab[5:], ba[:5])
    eab, eba = pair_features(t, 0, 1, "extended"), pair_features(t, 1, 0, "extended")
    assert np.array_equal(eab[10:], eba[10:])


def test_load_embedding_table_errors(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("#dim 2\n0 1 2\n1 1 2 3\n")
    with pytest.raises(FormatError) as exc:
        load_embedding_table(p)
    assert exc.value.line == 3
    p.write_text("0 1 2\n0 3 4\n")
    with pytest.raises(FormatError) as exc:
        load_embedding_table(p)
    assert exc.value.line == 2
    p.write_text("#dim 3\n0 1 2 3\n")
    with pytest.raises(FormatError):
        load_embedding_table(p, expected_dim=2)


def test_save_load_roundtrip(tmp_path, table):
    save_embedding_table(table, tmp_path / "e.txt")
    back = load_embedding_table(tmp_path / "e.txt")
    assert np.array_equal(back.drugs, table.drugs) and np.array_equal(back.matrix, table.matrix)


def test_concat_tables_uses_common_drugs():
    a = EmbeddingTable([0, 1, 2], np.arange(3.0)[:, None])
    b = EmbeddingTable([1, 2, 3], 10 + np.arange(3.0)[:, None])
    c = concat_tables(a, b)
    assert c.drugs.tolist() == [1, 2]
    assert c.matrix.tolist() == [[1.0, 10.0], [2.0, 11.0]]


def test_featurizer_estimator_api(table):
    f = PairFeaturizer(table, mode="concat", normalize=True)
    assert f.get_params()["mode"] == "concat"
    g = clone(f).set_params(mode="extended")
    X = g.fit_transform(np.array([[2, 0], [0, 2]]))
    assert X.shape == (2, 8) and g.n_features_out_ == 8
    assert np.allclose(X[0, :2], [0.6, 0.8])
    with pytest.raises(ValueError):
        f.fit().transform(np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        PairFeaturizer().fit()
