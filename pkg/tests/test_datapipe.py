import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from arrul.datapipe import (BearingRecord, Fpt3SigmaConfig, assemble_batch, canonical_bearing_id,
                            detect_fpt, padded_length, fpt_table, load_native_bearing,
                            load_phm2012_bearing, lookup_fpt_seconds, make_labels, normalize,
                            pad_and_window, prepare, window_bearings, write_native_bearing)
from arrul.errors import ContractViolation, FormatError, IngestionError


def record(l, S=8, seed=0, rid="b"):
    return BearingRecord(rid, np.random.default_rng(seed).standard_normal((l, 2, S)))


def step_record(seed, onset=300, l=400, factor=5.0, S=64):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((l, 2, S))
    x[onset:] *= factor
    return BearingRecord(f"step{seed}", x)


# -- ingestion ----------------------------------------------------------------

def write_acc(path, rows, bad=None):
    with open(path, "w") as fh:
        for r in range(rows):
            h, v = (f"{0.01 * r:.3f}", f"{-0.02 * r:.3f}")
            if bad == r:
                v = "oops"
            fh.write(f"9,39,39,65438,{h},{v}\n")


def test_phm2012_loader_orders_by_index(tmp_path):
    for idx in (3, 1, 2):
        write_acc(tmp_path / f"acc_{idx:05d}.csv", 16)
    (tmp_path / "temp_00001.csv").write_text("ignored")
    rec = load_phm2012_bearing(tmp_path, points=16)
    assert rec.acquisitions.shape == (3, 2, 16)
    assert rec.labels is None and rec.sample_period_s == 10
    npt.assert_allclose(rec.acquisitions[0, 0, :3], [0.0, 0.01, 0.02])


def test_phm2012_loader_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_phm2012_bearing(tmp_path)
    write_acc(tmp_path / "acc_00001.csv", 2559)
    with pytest.raises(IngestionError, match="acc_00001"):
        load_phm2012_bearing(tmp_path)
    write_acc(tmp_path / "acc_00001.csv", 10, bad=4)
    with pytest.raises(FormatError, match="row 5, column 6"):
        load_phm2012_bearing(tmp_path, points=10)


def test_native_round_trip_bit_exact(tmp_path):
    rec = make_labels(record(5, S=4, seed=3, rid="x1"), 2)
    rec.acquisitions[0, 0, 0] = 1 / 3
    path = write_native_bearing(rec, tmp_path / "x1.csv")
    back = load_native_bearing(path)
    assert back.id == "x1" and back.fpt_index == 2
    npt.assert_array_equal(back.acquisitions, rec.acquisitions)
    npt.assert_array_equal(back.labels, rec.labels)


def test_native_two_acquisitions(tmp_path):
    rec = record(2, S=4)
    path = write_native_bearing(rec, tmp_path / "a.csv")
    assert len(path.read_text().splitlines()) == 1 + 8
    assert len(load_native_bearing(path)) == 2


def test_native_format_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2\n3,4\n")
    with pytest.raises(FormatError):
        load_native_bearing(p)
    write_native_bearing(record(2, S=4), p)
    p.write_text(p.read_text() + "1,1\n")
    with pytest.raises(FormatError, match="multiple"):
        load_native_bearing(p)
    with pytest.raises(IngestionError):
        load_native_bearing(tmp_path / "missing.csv")


# -- normalisation -------------------------------------------------------------

def test_normalize_constant_and_symmetric():
    x = np.zeros((2, 2, 3))
    x[..., :] = 4.0
    x[0, 1] = [-2.0, 2.0, -2.0]
    x[1, 1] = [2.0, -2.0, 2.0]
    out = normalize(BearingRecord("c", x)).acquisitions
    npt.assert_array_equal(out[:, 0], 0.0)
    npt.assert_array_equal(np.abs(out[:, 1]), 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100), shift=st.floats(-50, 50))
def test_normalize_moments(seed, scale, shift):
    rec = BearingRecord("r", np.random.default_rng(seed).standard_normal((6, 2, 16)) * scale + shift)
    out = normalize(rec).acquisitions
    npt.assert_allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-9)
    npt.assert_allclose(out.var(axis=(0, 2)), 1.0, atol=1e-9)


# -- FPT detection and labels -----------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_detect_fpt_step_change(seed):
    assert 298 <= detect_fpt(step_record(seed)) <= 302


def test_detect_fpt_stationary_noise():
    assert detect_fpt(record(300, S=2560, seed=1)) == 299


def test_detect_fpt_affine_invariance():
    rec = step_record(7)
    base = detect_fpt(rec)
    for a in (0.01, 3.0, 1e4):
        assert detect_fpt(BearingRecord("s", rec.acquisitions * a)) == base


def test_detect_fpt_baseline_too_long():
    with pytest.raises(ContractViolation):
        detect_fpt(record(50), Fpt3SigmaConfig(baseline_count=50))
    with pytest.raises(ContractViolation):
        Fpt3SigmaConfig(baseline_count=1)


def test_make_labels_examples():
    npt.assert_allclose(make_labels(record(5), 2).labels, [1, 1, 1, 0.5, 0])
    npt.assert_allclose(make_labels(record(5), 0).labels, [1, 0.75, 0.5, 0.25, 0])
    npt.assert_array_equal(make_labels(record(4), 3).labels, [1, 1, 1, 0])
    for bad in (-1, 5):
        with pytest.raises(ContractViolation):
            make_labels(record(5), bad)


@settings(max_examples=50, deadline=None)
@given(l=st.integers(2, 300), data=st.data())
def test_label_monotonicity(l, data):
    fpt = data.draw(st.integers(0, l - 1))
    lab = make_labels(record(l, S=1), fpt).labels
    assert lab[0] == 1.0 and lab[-1] == 0.0
    assert np.all(np.diff(lab) <= 0)
    assert np.all(lab[: min(fpt + 1, l - 1)] == 1.0)  # last label is always 0
    assert np.all((lab >= 0) & (lab <= 1))


def test_fpt_table_values():
    table = fpt_table()
    assert table["B1-1"] == 11420 and table["B1-3"] == 9600
    assert lookup_fpt_seconds("Bearing1_3") == 9600
    assert canonical_bearing_id("Bearing2-4") == "B2-4"
    with pytest.raises(KeyError):
        lookup_fpt_seconds("B9-9")


# -- padding and windowing ------------------------------------------------------------

def test_padded_length_headline_geometry():
    assert padded_length(2803, 45, 15) == (2758, 3000, 242)
    wb = pad_and_window(record(2803, S=2), 45, 15)
    assert (wb.l_f, wb.l_pad, wb.m, wb.n) == (3000, 242, 200, 15)


def test_padded_length_small_examples():
    assert padded_length(151, 11, 2) == (140, 200, 60)
    wb = pad_and_window(record(151), 11, 2)
    assert (wb.n, wb.m) == (2, 100)
    assert padded_length(110, 10, 1)[2] == 0
    with pytest.raises(ContractViolation):
        padded_length(10, 10, 1)


@settings(max_examples=1000, deadline=None)
@given(l=st.integers(2, 20_000), data=st.data(), n=st.sampled_from([1, 2, 5, 15]))
def test_padded_length_closure(l, data, n):
    k = data.draw(st.integers(1, l - 1))
    length, l_f, l_pad = padded_length(l, k, n)
    lcm = math.lcm(100, n)
    assert l_f % lcm == 0 and l_f % n == 0
    assert length + l_pad == l_f and 0 <= l_pad < lcm
    starts = [w for j in range(n) for w in range(j * (l_f // n), (j + 1) * (l_f // n))]
    assert starts == list(range(l_f))


def test_window_contents_and_padding():
    rec = make_labels(record(151), 100)
    wb = pad_and_window(rec, 11, 2)
    npt.assert_array_equal(wb.window_input(0), rec.acquisitions[:11].reshape(22, 8))
    assert wb.target(0) == rec.labels[11]
    assert wb.target(139) == rec.labels[150] == 0.0
    npt.assert_array_equal(wb.label_window(5), rec.labels[5:16])
    for w in range(140, 200):
        assert wb.is_padding(w) and wb.target(w) == 0.0
        assert np.all(wb.window_input(w) == 1.0)


def test_assemble_batch_single_bearing():
    rec = make_labels(record(151, seed=2), 60)
    wb = pad_and_window(rec, 11, 2)
    b = assemble_batch([wb], 0)
    assert b.x.shape == (2, 22, 8)
    npt.assert_array_equal(b.y, [rec.labels[11], rec.labels[111]])
    npt.assert_array_equal(b.label_windows[1], rec.labels[100:111])
    with pytest.raises(ContractViolation):
        assemble_batch([wb], wb.m)


def test_assemble_batch_headline_size():
    recs = [make_labels(record(l, S=2, seed=l), l // 2) for l in (2803, 2500, 2000)]
    ds = window_bearings(recs, 45, 15)
    b = assemble_batch(ds, 0)
    assert b.x.shape == (45, 90, 2)
    assert b.is_padding.dtype == bool


def test_assemble_batch_geometry_mismatch():
    a = pad_and_window(make_labels(record(151), 50), 11, 2)
    b = pad_and_window(make_labels(record(151), 50), 11, 5)
    with pytest.raises(ContractViolation):
        assemble_batch([a, b], 0)


def test_prepare_shares_geometry():
    recs = [make_labels(record(l, seed=l), 10) for l in (120, 260)]
    ds = prepare(recs, 10, 2)
    assert ds[0].l_f == ds[1].l_f == 300
    assert ds[0].length == 110 and ds[1].length == 250
