import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import logistic_probe_accuracy
from taskdisc.data import (
    Dataset, SplitSpec, SyntheticSpec, generate_synthetic, load_features, load_tds, save_tds,
    split_dataset,
)
from taskdisc.errors import CorruptionError, DegenerateSplitError, FormatError, ParseError, SpecError
from taskdisc.seeding import derive_seed, make_rng
from taskdisc.tasks import planted_task


def test_derive_seed_matches_blake2b_definition():
    from hashlib import blake2b
    want = int.from_bytes(blake2b(b"5:split", digest_size=8).digest(), "little")
    assert derive_seed(5, "split") == want
    assert derive_seed(5, "a", "b") == derive_seed(derive_seed(5, "a"), "b")
    assert make_rng(1, "x").random() == make_rng(1, "x").random()


def test_generate_is_deterministic():
    spec = SyntheticSpec(64, 6, 3, 0.2)
    a, b = generate_synthetic(spec, 3), generate_synthetic(spec, 3)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.planted, b.planted)
    assert generate_synthetic(spec, 4).features.tobytes() != a.features.tobytes()


def test_f_greater_than_d_rejected():
    with pytest.raises(SpecError):
        SyntheticSpec(10, 2, 3)


def test_planted_factors_are_exactly_balanced():
    ds = generate_synthetic(SyntheticSpec(100, 5, 3), 0)
    assert ds.planted.sum(axis=1).tolist() == [50, 50, 50]


@pytest.mark.parametrize("mixing", ["linear", "linear+tanh"])
def test_noiseless_factors_are_linearly_recoverable(mixing):
    ds = generate_synthetic(SyntheticSpec(200, 8, 4, 0.0, mixing), 1)
    for f in range(4):
        assert logistic_probe_accuracy(ds.features.astype(np.float64), ds.planted[f]) == 1.0


def test_split_sizes_and_determinism(small_ds):
    ds = generate_synthetic(SyntheticSpec(5000, 4, 2), 0)
    s = split_dataset(ds, 0.1, 3)
    assert s.n_test == 500 and s.n_train == 4500
    assert np.array_equal(s.test_ids, split_dataset(ds, 0.1, 3).test_ids)
    assert np.intersect1d(s.train_ids, s.test_ids).size == 0


def test_split_balance_monte_carlo():
    ds = generate_synthetic(SyntheticSpec(1000, 4, 1), 0)
    t = planted_task(ds, 0)
    for seed in range(100):
        s = split_dataset(ds, 0.5, seed, task=t)
        for side in ("train", "test"):
            c = s.balance[side]
            assert 0.45 <= c[1] / sum(c) <= 0.55


def test_split_empty_side_and_bad_fraction(small_ds):
    with pytest.raises(DegenerateSplitError):
        split_dataset(small_ds, 0.001, 0)
    with pytest.raises(ValueError):
        split_dataset(small_ds, 1.0, 0)
    with pytest.raises(DegenerateSplitError):
        SplitSpec([1, 2], [2, 3])


def test_split_dict_round_trip(small_ds, small_split):
    s = SplitSpec.from_dict(json.loads(json.dumps(small_split.to_dict())))
    assert np.array_equal(s.train_ids, small_split.train_ids)
    assert np.array_equal(s.test_ids, small_split.test_ids)


def test_tds_round_trip(tmp_path, small_ds):
    p = tmp_path / "d.tds"
    save_tds(small_ds, p)
    back = load_tds(p)
    assert back.features.tobytes() == small_ds.features.tobytes()
    assert np.array_equal(back.planted, small_ds.planted)
    assert np.array_equal(back.ids, small_ds.ids)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 20), d=st.integers(1, 5), f=st.integers(0, 3), custom_ids=st.booleans(),
       seed=st.integers(0, 99))
def test_tds_round_trip_property(n, d, f, custom_ids, seed, tmp_path_factory):
    r = np.random.default_rng(seed)
    ids = r.permutation(1000)[:n] if custom_ids else None
    planted = r.integers(0, 2, size=(f, n)) if f else None
    ds = Dataset(r.normal(size=(n, d)), ids, planted)
    p = tmp_path_factory.mktemp("tds") / "x.tds"
    save_tds(ds, p)
    back = load_tds(p)
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.ids, ds.ids)
    assert back.F == ds.F and (f == 0 or np.array_equal(back.planted, ds.planted))


def test_tds_file_size_counts_bytes(tmp_path):
    ds = Dataset(np.ones((3, 2)), None, np.array([[1, 0, 1]]))
    p = tmp_path / "s.tds"
    save_tds(ds, p)
    raw = p.read_bytes()
    header_len = raw.index(b"\n") + 1
    # magic+header, 3*2 float32, one packed factor row of ceil(3/8) bytes
    assert len(raw) == header_len + 3 * 2 * 4 + 1


def test_tds_wrong_magic_and_truncation(tmp_path, small_ds):
    p = tmp_path / "d.tds"
    save_tds(small_ds, p)
    raw = p.read_bytes()
    (tmp_path / "bad.tds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_tds(tmp_path / "bad.tds")
    (tmp_path / "cut.tds").write_bytes(raw[:-5])
    with pytest.raises(CorruptionError):
        load_tds(tmp_path / "cut.tds")


def test_load_csv_basic_and_standardized(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("1,2\n3,4")
    assert load_features(p).features.tolist() == [[1, 2], [3, 4]]
    r = np.random.default_rng(0)
    q = tmp_path / "g.csv"
    q.write_text("a,b,c\n" + "\n".join(",".join(f"{v:.6f}" for v in row) for row in r.normal(3, 2, (50, 3))))
    X = load_features(q, standardize=True, header=True).features.astype(np.float64)
    np.testing.assert_allclose(X.mean(0), 0, atol=1e-5)
    np.testing.assert_allclose(X.var(0), 1, atol=1e-4)


def test_load_ragged_csv_reports_line(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,2\n3,4\n5\n")
    with pytest.raises(ParseError) as info:
        load_features(p)
    assert info.value.line == 3


def test_load_tds_through_load_features(tmp_path, small_ds):
    p = tmp_path / "d.tds"
    save_tds(small_ds, p)
    assert load_features(p).features.tobytes() == load_tds(p).features.tobytes()
