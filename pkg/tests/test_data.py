import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uast.data import apply_shift, draw_domain, gen_synthetic, load_csv, load_splits, write_csv
from uast.errors import ConsistencyError, ParameterError, ParseError
from uast.model import UNLABELED, Dataset
from uast.numerics import SeededRng


def test_zero_shift_target_is_fresh_source_draw():
    lab, unl, _ = gen_synthetic("two_moons", 50, 50, rotation=0, noise=0.0, seed=1)
    # noise-free two-moons points lie on the generator curves
    for pts in (lab.features, unl.features):
        c = pts + np.array([0.5, 0.25])
        outer = np.isclose(np.hypot(c[:, 0], c[:, 1]), 1.0)
        inner = np.isclose(np.hypot(c[:, 0] - 1.0, c[:, 1] - 0.5), 1.0)
        assert np.all(outer | inner)
    assert not np.array_equal(lab.features, unl.features)


def test_rotation_180_reflects_through_origin():
    raw, _ = draw_domain("two_moons", 40, 0.1, SeededRng(3).split(1))
    _, unl, _ = gen_synthetic("two_moons", 40, 40, rotation=180, noise=0.1, seed=3)
    assert np.allclose(unl.features, -raw, atol=1e-12)


def test_splits_hide_and_keep_labels():
    lab, unl, test = gen_synthetic("blobs", 30, 20, rotation=30, seed=0, n_classes=3, dim=2)
    assert np.all(lab.labels >= 0)
    assert np.all(unl.labels == UNLABELED)
    assert np.all(test.labels >= 0) and len(test) == 20


def test_translation_shift():
    pts = apply_shift(np.zeros((3, 2)), 0.0, [1.0, -2.0])
    assert np.array_equal(pts, np.tile([1.0, -2.0], (3, 1)))
    with pytest.raises(ParameterError):
        apply_shift(np.zeros((3, 2)), 0.0, [1.0])


@pytest.mark.parametrize("kw", [{"kind": "spirals"}, {"n_source": 3}, {"noise": -0.1}])
def test_gen_rejects_bad_arguments(kw):
    with pytest.raises(ParameterError):
        gen_synthetic(**kw)


def test_gen_is_deterministic_bytes(tmp_path):
    for name in ("a", "b"):
        lab, unl, test = gen_synthetic("two_moons", 30, 30, rotation=30, noise=0.1, seed=4)
        write_csv(lab, tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# -- CSV ------------------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    lab, unl, _ = gen_synthetic("two_moons", 25, 25, rotation=30, noise=0.1, seed=5)
    write_csv(lab, tmp_path / "l.csv")
    write_csv(unl, tmp_path / "u.csv", include_labels=False)
    back = load_csv(tmp_path / "l.csv")
    assert np.max(np.abs(back.features - lab.features)) <= 1e-12
    assert np.array_equal(back.labels, lab.labels) and back.class_count == 2
    u = load_csv(tmp_path / "u.csv")
    assert np.all(u.labels == UNLABELED)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=20))
def test_csv_round_trip_property(tmp_path_factory, values):
    x = np.array(values[: len(values) // 2 * 2]).reshape(-1, 2)
    path = tmp_path_factory.mktemp("csv") / "x.csv"
    write_csv(Dataset(x, np.zeros(len(x), int), 1), path)
    assert np.max(np.abs(load_csv(path).features - x), initial=0.0) <= 1e-12


def test_csv_small_examples(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("f0,f1,label\n1,2,0\n3,4,1\n")
    d = load_csv(p)
    assert d.class_count == 2 and len(d.labeled()) == 2
    q = tmp_path / "unl.csv"
    q.write_text("f0,label\n1,-1\n2,-1\n")
    assert len(load_csv(q).unlabeled()) == 2


@pytest.mark.parametrize(
    "body,line",
    [("f0,f1\n1,2\n3\n", 3), ("f0,f1\n1,x\n", 2), ("f0,f1,label\n1,2,a\n", 2), ("a,b\n1,2\n", 1)],
)
def test_csv_parse_errors_carry_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_csv_label_beyond_declared_count(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("f0,label\n1,0\n2,3\n")
    with pytest.raises(ConsistencyError):
        load_csv(p, class_count=2)


def test_load_splits_shares_class_count(tmp_path):
    lab, unl, test = gen_synthetic("blobs", 12, 12, seed=1, n_classes=3)
    write_csv(lab, tmp_path / "l.csv")
    write_csv(unl, tmp_path / "u.csv", include_labels=False)
    write_csv(test, tmp_path / "t.csv")
    data = load_splits(tmp_path / "l.csv", tmp_path / "u.csv", tmp_path / "t.csv")
    assert data.class_count == 3 and data.unlabeled.class_count == 3
    (tmp_path / "w.csv").write_text("f0,f1,f2\n1,2,3\n")
    with pytest.raises(ConsistencyError):
        load_splits(tmp_path / "l.csv", tmp_path / "w.csv")
