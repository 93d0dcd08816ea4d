"""sEMG recordings, sliding windows, session splits and a synthetic generator.

Binary layout ``bin-v1`` (all little-endian)::

    magic      4s   b"SEMG"
    version    u16  1
    subject    u16
    session    u8
    n_channels u8
    sample_rate u32
    T          u64
    dtype      u8   0 = int16, 1 = fp32
    samples    T * n_channels values of ``dtype``
    labels     T * u8

CSV: a header row, then one sample per line with the label in the last column.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

MAGIC = b"SEMG"
VERSION = 1
_HEADER = struct.Struct("<4sHHBBIQB")
DTYPE_INT16, DTYPE_FP32 = 0, 1

N_CHANNELS = 14
SAMPLE_RATE = 2000
N_CLASSES = 8
WINDOW = 300
SLIDE = 30


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Recording:
    subject: int
    session: int
    samples: np.ndarray  # [T, channels] float32
    labels: np.ndarray  # [T] uint8
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if samples.ndim != 2:
            raise ValueError(f"samples must be [T, channels], got {samples.shape}")
        if labels.shape != (samples.shape[0],):
            raise ValueError(f"labels length {labels.shape} != T={samples.shape[0]}")
        if not 1 <= self.session <= 10:
            raise ValueError(f"session must be in [1, 10], got {self.session}")
        if labels.size and labels.max() >= N_CLASSES:
            raise ValueError(f"label {labels.max()} out of range [0, {N_CLASSES})")
        samples.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]


@dataclass
class WindowDataset:
    """Windows referenced lazily into their source recordings.

    ``rec_index[i]``/``starts[i]`` locate window ``i``; ``windows`` (or
    :meth:`get`) materializes the ``[K, win, channels]`` array on demand.
    """

    recordings: list[Recording]
    rec_index: np.ndarray
    starts: np.ndarray
    labels: np.ndarray
    win: int = WINDOW
    subjects: np.ndarray = field(init=False)
    sessions: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rec_index = np.asarray(self.rec_index, dtype=np.int64)
        self.starts = np.asarray(self.starts, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        subj = np.array([r.subject for r in self.recordings], dtype=np.int64)
        sess = np.array([r.session for r in self.recordings], dtype=np.int64)
        self.subjects = subj[self.rec_index] if len(self.rec_index) else np.zeros(0, np.int64)
        self.sessions = sess[self.rec_index] if len(self.rec_index) else np.zeros(0, np.int64)

    def __len__(self) -> int:
        return len(self.starts)

    def get(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        ch = self.recordings[0].n_channels if self.recordings else N_CHANNELS
        out = np.empty((len(idx), self.win, ch), np.float32)
        for j, i in enumerate(idx):
            s = self.starts[i]
            out[j] = self.recordings[self.rec_index[i]].samples[s:s + self.win]
        return out

    @property
    def windows(self) -> np.ndarray:
        return self.get(np.arange(len(self)))

    def subset(self, mask_or_idx) -> "WindowDataset":
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return WindowDataset(self.recordings, self.rec_index[idx], self.starts[idx], self.labels[idx], self.win)

    def window_ids(self) -> list[str]:
        """Stable identifiers ``subject:session:start`` for split audits."""
        return [f"{a}:{b}:{c}" for a, b, c in zip(self.subjects, self.sessions, self.starts)]

    def id_hashes(self) -> set[str]:
        return {hashlib.sha1(s.encode()).hexdigest() for s in self.window_ids()}

    @classmethod
    def concat(cls, parts: list["WindowDataset"]) -> "WindowDataset":
        parts = [p for p in parts if p.recordings]
        if not parts:
            return cls([], [], [], [])
        recs, ri, st, lb = [], [], [], []
        for p in parts:
            ri.append(p.rec_index + len(recs))
            recs.extend(p.recordings)
            st.append(p.starts)
            lb.append(p.labels)
        return cls(recs, np.concatenate(ri), np.concatenate(st), np.concatenate(lb), parts[0].win)


def window_label(labels: np.ndarray) -> int:
    """Majority label; ties resolved by the label at the window centre."""
    counts = np.bincount(labels, minlength=N_CLASSES)
    best = np.flatnonzero(counts == counts.max())
    if len(best) == 1:
        return int(best[0])
    centre = int(labels[len(labels) // 2])
    return centre if centre in best else int(best[0])


def extract_windows(rec: Recording, win: int = WINDOW, slide: int = SLIDE) -> WindowDataset:
    if win <= 0 or slide <= 0:
        raise ValueError("win and slide must be positive")
    T = rec.n_samples
    if T < win:
        log.warning("recording subject=%s session=%s has %d samples < window %d; no windows",
                    rec.subject, rec.session, T, win)
        return WindowDataset([rec], [], [], [], win)
    starts = np.arange(0, T - win + 1, slide, dtype=np.int64)
    labels = np.array([window_label(rec.labels[s:s + win]) for s in starts], dtype=np.int64)
    return WindowDataset([rec], np.zeros(len(starts), np.int64), starts, labels, win)


def build_dataset(recordings: list[Recording], win: int = WINDOW, slide: int = SLIDE) -> WindowDataset:
    recs = sorted(recordings, key=lambda r: (r.subject, r.session))
    return WindowDataset.concat([extract_windows(r, win, slide) for r in recs])


def split_sessions(ds: WindowDataset, train_sessions=range(1, 6), test_sessions=range(6, 11)):
    train_sessions, test_sessions = set(train_sessions), set(test_sessions)
    overlap = train_sessions & test_sessions
    if overlap:
        raise SplitError(f"train and test sessions overlap: {sorted(overlap)}")
    train = ds.subset(np.isin(ds.sessions, sorted(train_sessions)))
    test = ds.subset(np.isin(ds.sessions, sorted(test_sessions)))
    return train, test


def audit_split(train: WindowDataset, test: WindowDataset) -> None:
    leaked = train.id_hashes() & test.id_hashes()
    if leaked:
        raise SplitError(f"{len(leaked)} windows appear in both train and test")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


def generate_synthetic(subjects=4, sessions=10, reps_per_gesture=1, seed=0xB10F0, *,
                       gesture_s: float = 6.0, rest_s: float = 2.0, channels: int = N_CHANNELS,
                       sample_rate: int = SAMPLE_RATE, drift: float = 0.1, subject_mix: float = 0.15,
                       rest_level: float = 0.1) -> list[Recording]:
    """sEMG-like recordings with gesture-specific channel activation patterns.

    Each session cycles through gestures 1..7, ``reps_per_gesture`` times:
    ``gesture_s`` seconds of activity then ``rest_s`` seconds of rest (label 0).
    Signals are band-limited noise (20-450 Hz) whose per-channel amplitude is
    the gesture pattern, mixed per subject and scaled by a per-session gain
    drift. Rest amplitude is ``rest_level`` times the grasp floor.
    """
    if isinstance(subjects, int):
        subjects = list(range(1, subjects + 1))
    if isinstance(sessions, int):
        sessions = list(range(1, sessions + 1))
    rng = np.random.default_rng(seed)
    n_grasps = N_CLASSES - 1
    patterns = 0.3 + 2.0 * rng.uniform(0.0, 1.0, (n_grasps, channels)) ** 4
    b, a = signal.butter(4, [20.0, 450.0], btype="bandpass", fs=sample_rate)
    g_len, r_len = int(round(gesture_s * sample_rate)), int(round(rest_s * sample_rate))
    out = []
    for subj in subjects:
        srng = np.random.default_rng([seed, subj])
        mix = np.eye(channels) + subject_mix * srng.normal(size=(channels, channels))
        mixed = np.abs(patterns @ mix.T)
        for sess in sessions:
            rrng = np.random.default_rng([seed, subj, sess])
            gain = np.exp(drift * rrng.normal(size=channels))
            amp_parts, lab_parts = [], []
            for _ in range(reps_per_gesture):
                for g in range(1, n_grasps + 1):
                    amp_parts.append(np.broadcast_to(mixed[g - 1] * gain, (g_len, channels)))
                    lab_parts.append(np.full(g_len, g, np.uint8))
                    amp_parts.append(np.broadcast_to(rest_level * 0.5 * gain, (r_len, channels)))
                    lab_parts.append(np.zeros(r_len, np.uint8))
            amp = np.concatenate(amp_parts)
            noise = signal.lfilter(b, a, rrng.normal(size=amp.shape), axis=0)
            noise /= noise.std()
            out.append(Recording(subj, sess, (noise * amp).astype(np.float32),
                                 np.concatenate(lab_parts), sample_rate))
    return out


# ---------------------------------------------------------------------------
# import / export
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def encode_bin(rec: Recording, dtype: str = "fp32") -> bytes:
    if dtype == "int16":
        vals = rec.samples
        if not np.array_equal(vals, np.round(vals)) or np.abs(vals).max(initial=0) > 32767:
            raise ValueError("samples are not representable as int16")
        tag, payload = DTYPE_INT16, vals.astype("<i2").tobytes()
    elif dtype == "fp32":
        tag, payload = DTYPE_FP32, rec.samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown sample dtype {dtype!r}")
    head = _HEADER.pack(MAGIC, VERSION, rec.subject, rec.session, rec.n_channels,
                        rec.sample_rate, rec.n_samples, tag)
    return head + payload + rec.labels.tobytes()


def decode_bin(buf: bytes) -> Recording:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} < {_HEADER.size} bytes", len(buf))
    magic, version, subject, session, nch, rate, T, tag = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if not 1 <= session <= 10:
        raise FormatError(f"session {session} out of range", 8)
    if nch == 0:
        raise FormatError("zero channels", 9)
    if tag not in (DTYPE_INT16, DTYPE_FP32):
        raise FormatError(f"unknown dtype tag {tag}", _HEADER.size - 1)
    itemsize = 2 if tag == DTYPE_INT16 else 4
    off = _HEADER.size
    need = off + T * nch * itemsize + T
    if len(buf) < need:
        raise FormatError(f"truncated body: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need)
    samples = np.frombuffer(buf, "<i2" if tag == DTYPE_INT16 else "<f4", T * nch, off).reshape(T, nch)
    off += T * nch * itemsize
    labels = np.frombuffer(buf, np.uint8, T, off)
    bad = np.flatnonzero(labels >= N_CLASSES)
    if len(bad):
        raise FormatError(f"label {labels[bad[0]]} out of range", off + int(bad[0]))
    return Recording(subject, session, samples.astype(np.float32), labels.copy(), rate)


def export_recording(rec: Recording, path, fmt: str = "bin-v1", dtype: str = "fp32") -> None:
    if fmt == "bin-v1":
        _atomic_write(path, encode_bin(rec, dtype))
    elif fmt == "csv":
        sio = io.StringIO()
        w = csv.writer(sio, lineterminator="\n")
        w.writerow([f"ch{i}" for i in range(rec.n_channels)] + ["label"])
        for row, lab in zip(rec.samples, rec.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
        _atomic_write(path, sio.getvalue().encode())
    else:
        raise ValueError(f"unknown format {fmt!r}")


def import_recording(path, fmt: str | None = None, subject: int = 1, session: int = 1,
                     sample_rate: int = SAMPLE_RATE) -> Recording:
    """Read a recording. CSV files carry no metadata, so it is passed in."""
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "bin-v1"
    raw = path.read_bytes()
    if fmt == "bin-v1":
        return decode_bin(raw)
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    text = raw.decode()
    lines = text.splitlines(keepends=True)
    if not lines:
        raise FormatError("empty CSV", 0)
    ncol = len(lines[0].rstrip("\r\n").split(","))
    if ncol < 2:
        raise FormatError("CSV header needs at least one channel and a label column", 0)
    rows, labels = [], []
    offset = len(lines[0].encode())
    for line in lines[1:]:
        stripped = line.rstrip("\r\n")
        if stripped:
            cells = stripped.split(",")
            if len(cells) != ncol:
                raise FormatError(f"expected {ncol} columns, got {len(cells)}", offset)
            try:
                rows.append([float(c) for c in cells[:-1]])
                lab = int(cells[-1])
            except ValueError as e:
                raise FormatError(f"unparsable value: {e}", offset) from None
            if not 0 <= lab < N_CLASSES:
                raise FormatError(f"label {lab} out of range", offset)
            labels.append(lab)
        offset += len(line.encode())
    samples = np.array(rows, dtype=np.float32).reshape(len(rows), ncol - 1)
    return Recording(subject, session, samples, np.array(labels, np.uint8), sample_rate)


def save_recordings(recs: list[Recording], directory, fmt: str = "bin-v1") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "csv" if fmt == "csv" else "semg"
    paths = []
    for r in recs:
        p = directory / f"s{r.subject:02d}_sess{r.session:02d}.{ext}"
        export_recording(r, p, fmt)
        paths.append(p)
    return paths


def load_recordings(directory) -> list[Recording]:
    directory = Path(directory)
    recs = [import_recording(p) for p in sorted(directory.glob("*.semg"))]
    if not recs:
        raise FileNotFoundError(f"no .semg recordings in {directory}")
    return sorted(recs, key=lambda r: (r.subject, r.session))
