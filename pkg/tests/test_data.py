import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bioformer import data as D


def make_rec(T, subject=1, session=1, ch=2, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    lab = labels if labels is not None else rng.integers(0, 8, T).astype(np.uint8)
    return D.Recording(subject, session, rng.normal(size=(T, ch)).astype(np.float32), lab)


# --- windowing ------------------------------------------------------------

def test_391_windows_for_six_seconds():
    ds = D.extract_windows(make_rec(12000))
    assert len(ds) == 391
    assert ds.starts[-1] == 11700


@given(st.integers(0, 3000), st.integers(1, 400), st.integers(1, 100))
def test_windows_match_progression(T, win, slide):
    rec = make_rec(T, labels=np.zeros(T, np.uint8))
    ds = D.extract_windows(rec, win, slide)
    expect = list(range(0, T - win + 1, slide)) if T >= win else []
    assert ds.starts.tolist() == expect
    covered = set()
    for s in ds.starts:
        covered.update(range(s, s + win))
    oracle = set()
    for k in range(len(expect)):
        oracle.update(range(k * slide, k * slide + win))
    assert covered == oracle


def test_window_contents(rng):
    rec = make_rec(1000, seed=3)
    ds = D.extract_windows(rec)
    for i in (0, 5, len(ds) - 1):
        s = ds.starts[i]
        assert np.array_equal(ds.get(i)[0], rec.samples[s:s + 300])


def test_short_recording_warns(caplog):
    with caplog.at_level(logging.WARNING):
        ds = D.extract_windows(make_rec(299))
    assert len(ds) == 0 and "no windows" in caplog.text


def test_window_label_majority_and_centre_tie():
    assert D.window_label(np.array([3, 3, 3, 0], np.uint8)) == 3
    assert D.window_label(np.array([2, 2, 5, 5], np.uint8)) == 5  # centre index 2
    assert D.window_label(np.array([5, 5, 2, 2], np.uint8)) == 2
    assert D.window_label(np.array([1, 1, 4, 4, 6, 6], np.uint8)) == 4


def test_build_dataset_sorted_by_subject_session():
    recs = [make_rec(600, s, se) for s, se in [(2, 3), (1, 7), (1, 2), (2, 1)]]
    ds = D.build_dataset(recs)
    keys = list(zip(ds.subjects, ds.sessions, ds.starts))
    assert keys == sorted(keys)


# --- splits ---------------------------------------------------------------

@given(st.lists(st.integers(1, 10), min_size=1, max_size=10), st.sets(st.integers(1, 10)))
def test_split_is_partition(sessions, train_set):
    recs = [make_rec(400, 1, s, seed=i) for i, s in enumerate(sessions)]
    ds = D.build_dataset(recs)
    test_set = set(range(1, 11)) - train_set
    tr, te = D.split_sessions(ds, train_set, test_set)
    assert len(tr) + len(te) == len(ds)
    assert not (tr.id_hashes() & te.id_hashes()) or len(set(ds.window_ids())) < len(ds)
    assert set(tr.sessions.tolist()) <= train_set and set(te.sessions.tolist()) <= test_set


def test_split_overlap_rejected():
    ds = D.build_dataset([make_rec(400)])
    with pytest.raises(D.SplitError):
        D.split_sessions(ds, [1, 2], [2, 3])


def test_audit_detects_leak():
    ds = D.build_dataset([make_rec(700)])
    with pytest.raises(D.SplitError):
        D.audit_split(ds, ds.subset([0]))


# --- synthetic generator --------------------------------------------------

@pytest.fixture(scope="module")
def synth():
    return D.generate_synthetic(2, 3, 1, gesture_s=0.5, rest_s=0.5)


def test_generator_deterministic(synth):
    again = D.generate_synthetic(2, 3, 1, gesture_s=0.5, rest_s=0.5)
    assert all(D.encode_bin(a) == D.encode_bin(b) for a, b in zip(synth, again))
    other = D.generate_synthetic(2, 3, 1, seed=1, gesture_s=0.5, rest_s=0.5)
    assert D.encode_bin(synth[0]) != D.encode_bin(other[0])


def test_generator_timing_and_labels(synth):
    r = synth[0]
    assert r.n_channels == 14 and r.n_samples == 7 * (1000 + 1000)
    assert r.labels[:1000].tolist() == [1] * 1000 and r.labels[1000:2000].tolist() == [0] * 1000
    assert sorted(set(r.labels.tolist())) == list(range(8))


def test_default_segment_lengths():
    r = D.generate_synthetic(1, 1)[0]
    assert r.n_samples == 7 * (6 + 2) * 2000


def test_rest_power_at_least_10x_lower(synth):
    for r in synth:
        p = (r.samples.astype(np.float64) ** 2).mean(axis=1)
        assert p[r.labels > 0].mean() >= 10 * p[r.labels == 0].mean()


def _features(ds):
    return np.log((ds.windows.astype(np.float64) ** 2).mean(axis=1) + 1e-8)


def test_linear_probe_separates_gestures():
    recs = D.generate_synthetic(1, 10, 1, gesture_s=0.6, rest_s=0.3)
    tr, te = D.split_sessions(D.build_dataset(recs))
    xtr, xte = _features(tr), _features(te)
    mu, sd = xtr.mean(0), xtr.std(0)
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    W, b = np.zeros((14, 8)), np.zeros(8)
    onehot = np.eye(8)[tr.labels]
    for _ in range(500):  # full-batch softmax regression
        z = xtr @ W + b
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / len(xtr)
        W -= 0.5 * xtr.T @ g
        b -= 0.5 * g.sum(0)
    acc = np.mean(np.argmax(xte @ W + b, 1) == te.labels)
    assert acc >= 0.90


# --- file formats ---------------------------------------------------------

def test_bin_round_trip(tmp_path, synth):
    p = tmp_path / "r.semg"
    D.export_recording(synth[1], p)
    back = D.import_recording(p)
    assert D.encode_bin(back) == D.encode_bin(synth[1]) and p.read_bytes() == D.encode_bin(synth[1])


def test_bin_int16_round_trip(tmp_path):
    rec = D.Recording(3, 4, np.arange(-50, 50, dtype=np.float32).reshape(50, 2), np.zeros(50, np.uint8))
    p = tmp_path / "r.semg"
    D.export_recording(rec, p, dtype="int16")
    back = D.import_recording(p)
    assert np.array_equal(back.samples, rec.samples) and (back.subject, back.session) == (3, 4)
    with pytest.raises(ValueError):
        D.encode_bin(D.Recording(1, 1, np.full((2, 1), 0.5, np.float32), np.zeros(2, np.uint8)), "int16")


def test_header_layout(synth):
    raw = D.encode_bin(synth[0])
    assert raw[:4] == b"SEMG"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[14:22], "little") == synth[0].n_samples


@pytest.mark.parametrize("cut", [0, 10, 23, 100, -1])
def test_truncated_file_rejected(tmp_path, synth, cut):
    p = tmp_path / "t.semg"
    p.write_bytes(D.encode_bin(synth[0])[:cut])
    with pytest.raises(D.FormatError):
        D.import_recording(p)


def test_bad_magic_and_label_offsets(synth):
    raw = bytearray(D.encode_bin(synth[0]))
    with pytest.raises(D.FormatError) as e:
        D.decode_bin(b"XXXX" + bytes(raw[4:]))
    assert e.value.offset == 0
    raw[-5] = 9
    with pytest.raises(D.FormatError) as e:
        D.decode_bin(bytes(raw))
    assert e.value.offset == len(raw) - 5


def test_load_recordings_is_all_or_nothing(tmp_path, synth):
    D.save_recordings(synth, tmp_path)
    (tmp_path / "zz.semg").write_bytes(b"SEMG\x01")
    with pytest.raises(D.FormatError):
        D.load_recordings(tmp_path)


def test_csv_line_count(tmp_path):
    rec = make_rec(123, ch=3)
    p = tmp_path / "r.csv"
    D.export_recording(rec, p, "csv")
    n_lines = len(p.read_text().splitlines()) - 1
    back = D.import_recording(p, subject=1, session=1)
    assert back.n_samples == n_lines == 123
    assert np.array_equal(back.samples, rec.samples) and np.array_equal(back.labels, rec.labels)


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,label\n1,2,0\n1,2\n")
    with pytest.raises(D.FormatError) as e:
        D.import_recording(p)
    assert e.value.offset == len("a,b,label\n1,2,0\n")
    p.write_text("a,label\n1,8\n")
    with pytest.raises(D.FormatError):
        D.import_recording(p)


def test_recording_validation():
    with pytest.raises(ValueError):
        D.Recording(1, 11, np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        D.Recording(1, 1, np.zeros((2, 1)), np.zeros(3))
