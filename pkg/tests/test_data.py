import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.data import (
    DataError, Dataset, ForgetSpec, TypicalityScores, build_bundle, bundle_from_manifest, corrupt,
    load_idx, load_manifest, make_synthetic, read_idx, save_manifest, select_forget, write_idx,
)
from unlearnlab.nn import mlp_tiny
from unlearnlab.train import TrainConfig
from unlearnlab.typicality import holdout_gap, score_typicality_holdout


@pytest.fixture(scope="module")
def synth():
    return make_synthetic(10, 500, 0.04, 32, seed=0)


# -- synthetic generator ---------------------------------------------------------

def test_synthetic_counts(synth):
    ds, scores = synth
    assert len(ds) == 5000
    assert int((scores.scores == 0).sum()) == 200
    assert set(np.unique(scores.scores)) == {0.0, 1.0}
    assert np.bincount(ds.labels).tolist() == [500] * 10


def test_synthetic_is_seeded():
    a, sa = make_synthetic(3, 300, 0.05, 8, seed=5)
    b, sb = make_synthetic(3, 300, 0.05, 8, seed=5)
    c, _ = make_synthetic(3, 300, 0.05, 8, seed=6)
    assert a.examples.tobytes() == b.examples.tobytes()
    np.testing.assert_array_equal(sa.scores, sb.scores)
    assert a.examples.tobytes() != c.examples.tobytes()


def test_streams_share_distribution_but_not_ids():
    train, _ = make_synthetic(3, 300, 0.05, 8, seed=5)
    test, _ = make_synthetic(3, 100, 0.05, 8, seed=5, stream="test")
    assert not set(train.ids.tolist()) & set(test.ids.tolist())
    for c in range(3):
        mu_tr = train.examples[train.labels == c].mean(axis=0)
        mu_te = test.examples[test.labels == c].mean(axis=0)
        assert np.linalg.norm(mu_tr - mu_te) < 1.0


@pytest.mark.parametrize("kw", [dict(atypical_fraction=0.3), dict(atypical_fraction=0.0),
                                dict(per_class=100, atypical_fraction=0.05), dict(classes=1)])
def test_synthetic_rejects_infeasible_parameters(kw):
    args = dict(classes=3, per_class=300, atypical_fraction=0.05, input_dim=8, seed=0) | kw
    with pytest.raises(DataError):
        make_synthetic(**args)


def test_atypical_examples_need_memorization(synth):
    ds, scores = synth
    cfg = TrainConfig(lr=1e-3, weight_decay=1e-4, epochs=30, batch_size=64, seed=0)
    atyp, typ = holdout_gap(ds, scores, mlp_tiny(32, 10, 64), cfg)
    assert typ - atyp >= 0.30


def test_dataset_invariants():
    x = np.zeros((4, 2), np.float32)
    with pytest.raises(DataError):
        Dataset(x, np.array([0, 1, 1, 0]), np.array([1, 1, 2, 3]), 2)
    with pytest.raises(DataError):
        Dataset(x, np.array([0, 1, 2, 0]), np.arange(4), 2)
    with pytest.raises(DataError):
        Dataset(x, np.array([0, 0, 0, 0]), np.arange(4), 2)
    with pytest.raises(DataError):
        TypicalityScores(np.arange(2), np.array([0.5, 1.5]))


def test_corrupt_keeps_labels_and_adds_noise(synth):
    ds, _ = synth
    split = ds.split("pool", np.arange(200))
    noisy = corrupt(split, 0.5, seed=1)
    np.testing.assert_array_equal(noisy.y, split.y)
    assert 0.4 < float((noisy.x - split.x).std()) < 0.6


# -- IDX files ----------------------------------------------------------------------

def _write_pair(tmp_path, n=10, h=4, w=3, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, h, w)).astype(np.uint8)
    labels = (np.arange(n) % classes).astype(np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", labels)
    return images, labels


def test_idx_round_trip(tmp_path):
    images, labels = _write_pair(tmp_path)
    np.testing.assert_array_equal(read_idx(tmp_path / "img.idx"), images)
    ds = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    assert ds.provenance == "idx-file" and ds.n_classes == 10
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_allclose(ds.examples[:, 0], images / 255.0)
    assert ds.examples.min() >= 0 and ds.examples.max() <= 1


def test_idx_count_comes_from_header(tmp_path):
    write_idx(tmp_path / "big.idx", np.zeros((60000, 2, 2), np.uint8))
    raw = (tmp_path / "big.idx").read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert int.from_bytes(raw[4:8], "big") == 60000
    assert read_idx(tmp_path / "big.idx").shape[0] == 60000


def test_idx_bad_magic_names_offset(tmp_path):
    _write_pair(tmp_path)
    raw = bytearray((tmp_path / "img.idx").read_bytes())
    raw[0] = 7
    (tmp_path / "bad.idx").write_bytes(bytes(raw))
    with pytest.raises(DataError, match="offset 0"):
        read_idx(tmp_path / "bad.idx")
    raw[0], raw[2] = 0, 0x42
    (tmp_path / "bad.idx").write_bytes(bytes(raw))
    with pytest.raises(DataError, match="offset 2"):
        read_idx(tmp_path / "bad.idx")


def test_idx_truncated_payload(tmp_path):
    _write_pair(tmp_path)
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "short.idx").write_bytes(raw[:-5])
    with pytest.raises(DataError, match="truncated"):
        read_idx(tmp_path / "short.idx")


def test_idx_label_out_of_range_and_kind_mismatch(tmp_path):
    _write_pair(tmp_path)
    with pytest.raises(DataError, match="out of range"):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx", n_classes=5)
    with pytest.raises(DataError, match="0x00000803"):
        load_idx(tmp_path / "lab.idx", tmp_path / "lab.idx")


# -- typicality estimator ---------------------------------------------------------------

def _blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-3, 0.5, (n, 2)), rng.normal(3, 0.5, (n, 2))]).astype(np.float32)
    y = np.r_[np.zeros(n, int), np.ones(n, int)]
    return x, y


def test_holdout_scores_on_separable_data():
    x, y = _blobs()
    # one mislabeled point deep inside the class-1 blob
    x = np.concatenate([x, [[3.0, 3.0]]]).astype(np.float32)
    y = np.r_[y, 0]
    ds = Dataset(x, y, np.arange(len(y)), 2)
    cfg = TrainConfig(lr=1e-2, epochs=15, batch_size=16, seed=0)
    sc = score_typicality_holdout(ds, mlp_tiny(2, 2, 8), cfg, folds=3, seed=0)
    assert sc.method == "holdout-consistency"
    assert np.median(sc.scores) >= 0.9
    assert sc.scores[-1] == 0.0
    np.testing.assert_allclose(sc.scores * 3, np.round(sc.scores * 3))


def test_holdout_needs_three_folds():
    x, y = _blobs(10)
    with pytest.raises(DataError):
        score_typicality_holdout(Dataset(x, y, np.arange(20), 2), mlp_tiny(2, 2, 4),
                                 TrainConfig(), folds=2)


# -- forget sets and bundles ---------------------------------------------------------------

def test_subclass_forget_size(synth):
    ds, scores = synth
    f = select_forget(ds, scores, ForgetSpec(scope="sub-class", class_id=3, fraction=0.10))
    assert len(f) == 50
    assert np.all(ds.labels[f] == 3)


def test_class_agnostic_matches_subclass_size(synth):
    ds, scores = synth
    agn = select_forget(ds, scores, ForgetSpec(fraction=0.01))
    sub = select_forget(ds, scores, ForgetSpec(scope="sub-class", class_id=0, fraction=0.10))
    assert len(agn) == len(sub) == 50
    assert np.all(scores.for_ids(ds.ids[agn]) == 0.0)


def test_typical_and_random_selection(synth):
    ds, scores = synth
    typ = select_forget(ds, scores, ForgetSpec(typicality="typical", count=40))
    assert np.all(scores.for_ids(ds.ids[typ]) == 1.0)
    assert np.array_equal(ds.ids[typ], np.sort(ds.ids[typ]))
    r1 = select_forget(ds, scores, ForgetSpec(typicality="random", count=40, seed=1))
    r2 = select_forget(ds, scores, ForgetSpec(typicality="random", count=40, seed=1))
    np.testing.assert_array_equal(r1, r2)


def test_ties_broken_by_ascending_id(synth):
    ds, scores = synth
    f = select_forget(ds, scores, ForgetSpec(count=10))
    atyp_ids = np.sort(ds.ids[scores.for_ids(ds.ids) == 0])
    np.testing.assert_array_equal(ds.ids[f], atyp_ids[:10])


def test_forget_count_exceeding_pool_fails(synth):
    ds, scores = synth
    with pytest.raises(DataError):
        select_forget(ds, scores, ForgetSpec(scope="sub-class", class_id=0, count=501))
    with pytest.raises(DataError):
        ForgetSpec(fraction=0.1, count=3)
    with pytest.raises(DataError):
        ForgetSpec(scope="sub-class")


def test_zero_relearn_keeps_whole_forget_set_as_holdout(synth):
    ds, scores = synth
    test, _ = make_synthetic(10, 20, 0.04, 32, seed=0, stream="test")
    b = build_bundle(ds, scores, ForgetSpec(), 0, 0, test=test)
    np.testing.assert_array_equal(b.holdout.ids, b.forget.ids)
    assert len(b.relearn) == 0
    with pytest.raises(DataError):
        b.with_relearn(51)


def _small_dataset(n_per=40, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    n = n_per * classes
    ids = rng.permutation(10_000)[:n]
    ds = Dataset(rng.normal(size=(n, 2)).astype(np.float32), np.arange(n) % classes, ids, classes)
    scores = TypicalityScores(ids.copy(), rng.uniform(0, 1, n))
    test = Dataset(rng.normal(size=(9, 2)).astype(np.float32), np.arange(9) % 3,
                   np.arange(20_000, 20_009), classes)
    return ds, scores, test


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), count=st.integers(1, 40), frac=st.floats(0, 1),
       scope=st.sampled_from(["class-agnostic", "sub-class"]),
       typ=st.sampled_from(["typical", "random", "atypical"]))
def test_partition_laws(seed, count, frac, scope, typ):
    ds, scores, test = _small_dataset(seed=seed)
    spec = ForgetSpec(scope=scope, typicality=typ, fraction=None, count=count,
                      class_id=1 if scope == "sub-class" else None, seed=seed)
    n_re = int(frac * count)
    b = build_bundle(ds, scores, spec, n_re, seed, test=test)
    r, f, re, ho = (set(s.ids.tolist()) for s in (b.retain, b.forget, b.relearn, b.holdout))
    assert not r & f
    assert r | f == set(ds.ids.tolist())
    assert re | ho == f and not re & ho
    assert len(re) == n_re
    again = build_bundle(ds, scores, spec, n_re, seed, test=test)
    assert again.manifest() == b.manifest()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), k=st.integers(1, 60),
       transform=st.sampled_from([np.square, np.sqrt, lambda s: (s + s ** 3) / 2]))
def test_atypical_selection_is_k_lowest_and_rank_invariant(seed, k, transform):
    ds, scores, _ = _small_dataset(seed=seed)
    spec = ForgetSpec(fraction=None, count=k)
    chosen = select_forget(ds, scores, spec)
    s = scores.for_ids(ds.ids)
    assert set(s[chosen]) <= set(np.sort(s)[:k])
    moved = TypicalityScores(scores.ids, transform(scores.scores))
    np.testing.assert_array_equal(np.sort(ds.ids[select_forget(ds, moved, spec)]),
                                  np.sort(ds.ids[chosen]))


def test_bundle_rebuilds_from_manifest(tmp_path, synth):
    ds, scores = synth
    test, tscores = make_synthetic(10, 20, 0.04, 32, seed=0, stream="test")
    b = build_bundle(ds, scores, ForgetSpec(), 20, 7, test=test, test_scores=tscores)
    save_manifest(b, tmp_path / "m.json")
    back = bundle_from_manifest(ds, load_manifest(tmp_path / "m.json"), test=test,
                                test_scores=tscores)
    for a, c in ((b.retain, back.retain), (b.forget, back.forget), (b.relearn, back.relearn),
                 (b.holdout, back.holdout)):
        np.testing.assert_array_equal(a.ids, c.ids)
        assert a.x.tobytes() == c.x.tobytes()
    assert back.manifest() == b.manifest()
    np.testing.assert_array_equal(back.test_scores, b.test_scores)
