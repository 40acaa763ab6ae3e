"""Sensor-to-network preprocessing.

DVS events are binned into constant-count 36x36 histograms (5000 events, one
gray step of 1/200 per event around a 0.5 zero level) and normalized by
clipping deviations at three standard deviations. APS frames are resized with
nearest-neighbor sampling and min-max normalized to [0, 1]. Exposure
augmentation, thirds labeling, and the temporally split train/test assembly
live here too, together with the on-disk formats for events, labels, raw APS
frames, and assembled datasets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from evsteer.nnet import Decision

SENSOR_WIDTH = 240
SENSOR_HEIGHT = 180
FRAME_SIZE = 36
GRAY_LEVELS = 200
DEFAULT_CAPACITY = 5000
REGION_WIDTH = FRAME_SIZE // 3  # 12 columns per steering third

# Class balance of the hand-labeled field recordings this synthetic corpus
# mirrors; reported next to the generated mix for comparison.
FIELD_REFERENCE_MIX = {"L": 0.11, "C": 0.18, "R": 0.15, "N": 0.56}

EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("polarity", "u1")])

EVENT_MAGIC = b"evsteer-evt v1".ljust(16, b"\0")
APS_MAGIC = b"evsteer-aps v1".ljust(16, b"\0")
DATASET_MAGIC = b"evsteer-ds v1".ljust(16, b"\0")

SOURCE_APS = 0
SOURCE_DVS = 1
SOURCE_NAMES = {SOURCE_APS: "APS", SOURCE_DVS: "DVS"}


class FormatError(Exception):
    """A data file does not match its documented binary or text layout."""


@dataclass
class AddressEvent:
    """One DVS brightness-change event. polarity is +1 (ON) or -1 (OFF)."""

    t: int
    x: int
    y: int
    polarity: int


@dataclass
class NormalizedFrame:
    """A 36x36 unit-range image tagged with its source and capture time."""

    values: np.ndarray
    source: int
    t: int = 0

    def __post_init__(self):
        assert self.values.shape == (FRAME_SIZE, FRAME_SIZE)


def subsample_address(x, y):
    """Map a 240x180 event address to its 36x36 histogram bin (floor bins)."""
    if not (0 <= x < SENSOR_WIDTH and 0 <= y < SENSOR_HEIGHT):
        raise ValueError(f"event address ({x}, {y}) outside {SENSOR_WIDTH}x{SENSOR_HEIGHT}")
    return (x * FRAME_SIZE) // SENSOR_WIDTH, (y * FRAME_SIZE) // SENSOR_HEIGHT


class DvsAccumulator:
    """Constant-count histogram builder: emits every `capacity` events.

    Bins start at 0.5 and move by +-1/200 per event, unclamped; clamping is
    the normalizer's job. Single-owner state: one accumulator per stream.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.values = np.full((FRAME_SIZE, FRAME_SIZE), 0.5, dtype=np.float64)
        self.events_in = 0

    def reset(self):
        self.values.fill(0.5)
        self.events_in = 0

    def add(self, event: AddressEvent):
        """Accumulate one event; returns the raw histogram on emission."""
        bx, by = subsample_address(event.x, event.y)
        self.values[by, bx] += event.polarity / GRAY_LEVELS
        self.events_in += 1
        if self.events_in == self.capacity:
            hist = self.values.copy()
            self.reset()
            return hist
        return None

    def add_batch(self, events: np.ndarray):
        """Vectorized accumulation of a structured event array.

        Returns a list of (emission timestamp, raw histogram) in time order.
        """
        out = []
        pos = 0
        n = len(events)
        while pos < n:
            take = min(self.capacity - self.events_in, n - pos)
            chunk = events[pos:pos + take]
            bx = (chunk["x"].astype(np.int64) * FRAME_SIZE) // SENSOR_WIDTH
            by = (chunk["y"].astype(np.int64) * FRAME_SIZE) // SENSOR_HEIGHT
            step = np.where(chunk["polarity"] > 0, 1.0, -1.0) / GRAY_LEVELS
            np.add.at(self.values, (by, bx), step)
            self.events_in += take
            pos += take
            if self.events_in == self.capacity:
                out.append((int(chunk["t"][-1]), self.values.copy()))
                self.reset()
        return out


def histogram_stats(hist):
    """Mean and population standard deviation over all bins (diagnostics)."""
    return float(np.mean(hist)), float(np.std(hist))


def dvs_normalize(hist, t=0) -> NormalizedFrame:
    """Clip deviations from the 0.5 zero-event level at 3 sigma and rescale.

    Sigma is computed over all 1296 bins of the raw histogram, so clipped
    extremes land exactly on 0 and 1 while zero-event bins stay at 0.5. A
    flat histogram (sigma 0) maps to all 0.5.
    """
    _, sigma = histogram_stats(hist)
    if sigma == 0.0:
        values = np.full((FRAME_SIZE, FRAME_SIZE), 0.5, dtype=np.float32)
    else:
        bound = 3.0 * sigma
        dev = np.clip(hist - 0.5, -bound, bound)
        # dividing by the bound first lands clipped extremes exactly on 0 and 1
        values = (0.5 + (dev / bound) * 0.5).astype(np.float32)
    return NormalizedFrame(values=values, source=SOURCE_DVS, t=t)


def _nearest_indices(n_out, n_in):
    # round-half-down sampling of source coordinate j * n_in / n_out
    src = np.arange(n_out) * (n_in / n_out)
    idx = np.ceil(src - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


_COL_IDX = _nearest_indices(FRAME_SIZE, SENSOR_WIDTH)
_ROW_IDX = _nearest_indices(FRAME_SIZE, SENSOR_HEIGHT)


def aps_resize(frame):
    """240x180 gray frame to 36x36 by pure nearest-neighbor sampling."""
    frame = np.asarray(frame)
    if frame.shape != (SENSOR_HEIGHT, SENSOR_WIDTH):
        raise ValueError(f"expected {SENSOR_HEIGHT}x{SENSOR_WIDTH} frame, got {frame.shape}")
    return frame[np.ix_(_ROW_IDX, _COL_IDX)]


def aps_normalize(frame, t=0) -> NormalizedFrame:
    """Min-max rescale to [0, 1]; a constant frame maps to neutral 0.5."""
    frame = np.asarray(frame, dtype=np.float64)
    lo, hi = float(frame.min()), float(frame.max())
    if hi == lo:
        values = np.full(frame.shape, 0.5, dtype=np.float32)
    else:
        values = ((frame - lo) / (hi - lo)).astype(np.float32)
    return NormalizedFrame(values=values, source=SOURCE_APS, t=t)


def exposure_augment(raw, shift):
    """Shift raw (pre-normalization) gray values and clip to the unit range."""
    return np.clip(np.asarray(raw, dtype=np.float64) + shift, 0.0, 1.0)


def label_from_target(target_x) -> Decision:
    """Thirds rule on the 36-column image; absent target means non-visible."""
    if target_x is None:
        return Decision.N
    if not 0 <= target_x < FRAME_SIZE:
        raise ValueError(f"target column {target_x} outside [0, {FRAME_SIZE})")
    return Decision(int(target_x) // REGION_WIDTH)


@dataclass
class LabeledFrame:
    frame: NormalizedFrame
    label: Decision
    target_x: int | None = None


@dataclass
class Recording:
    """One recording: raw events, raw resized APS grays, and a label track."""

    events: np.ndarray  # EVENT_DTYPE
    aps_t: np.ndarray  # (n,) uint32 capture times
    aps_raw: np.ndarray  # (n, 36, 36) float32 pre-normalization gray
    label_t: np.ndarray  # (m,) uint32 label instants
    label_x: np.ndarray  # (m,) int16 target column, -1 for non-visible

    def label_at(self, t):
        """Most recent label at or before t."""
        idx = int(np.searchsorted(self.label_t, t, side="right")) - 1
        if idx < 0:
            idx = 0
        x = int(self.label_x[idx])
        return None if x < 0 else x


@dataclass
class Dataset:
    """Assembled frames ready for training or evaluation."""

    frames: np.ndarray  # (n, 36, 36) float32 in [0, 1]
    labels: np.ndarray  # (n,) uint8 Decision values
    target_x: np.ndarray  # (n,) int16, -1 for absent
    source: np.ndarray  # (n,) uint8 SOURCE_APS | SOURCE_DVS

    def __len__(self):
        return len(self.frames)

    def source_counts(self):
        return (int(np.sum(self.source == SOURCE_APS)),
                int(np.sum(self.source == SOURCE_DVS)))

    def class_fractions(self):
        n = max(len(self), 1)
        return {Decision(k).name: float(np.sum(self.labels == k)) / n for k in range(4)}


def _concat_datasets(parts):
    return Dataset(frames=np.concatenate([p.frames for p in parts]),
                   labels=np.concatenate([p.labels for p in parts]),
                   target_x=np.concatenate([p.target_x for p in parts]),
                   source=np.concatenate([p.source for p in parts]))


def _empty_dataset():
    return Dataset(frames=np.zeros((0, FRAME_SIZE, FRAME_SIZE), dtype=np.float32),
                   labels=np.zeros(0, dtype=np.uint8),
                   target_x=np.zeros(0, dtype=np.int16),
                   source=np.zeros(0, dtype=np.uint8))


def frames_from_recording(rec: Recording, capacity=DEFAULT_CAPACITY):
    """Normalized, labeled frame stream of one recording in time order.

    Returns (t, source, values, label, target_x, raw) tuples; raw is the
    pre-normalization 36x36 gray for APS frames (None for DVS), kept so
    exposure augmentation can run on raw data later.
    """
    acc = DvsAccumulator(capacity)
    stream = []
    for t_emit, hist in acc.add_batch(rec.events):
        frame = dvs_normalize(hist, t=t_emit)
        x = rec.label_at(t_emit)
        stream.append((t_emit, SOURCE_DVS, frame.values, label_from_target(x), x, None))
    for t_cap, raw in zip(rec.aps_t, rec.aps_raw):
        frame = aps_normalize(raw, t=int(t_cap))
        x = rec.label_at(int(t_cap))
        stream.append((int(t_cap), SOURCE_APS, frame.values, label_from_target(x), x, raw))
    stream.sort(key=lambda item: (item[0], item[1]))
    return stream


def _to_dataset(items):
    if not items:
        return _empty_dataset()
    return Dataset(
        frames=np.stack([v for _, _, v, _, _, _ in items]).astype(np.float32),
        labels=np.array([int(lab) for _, _, _, lab, _, _ in items], dtype=np.uint8),
        target_x=np.array([-1 if x is None else x for _, _, _, _, x, _ in items],
                          dtype=np.int16),
        source=np.array([s for _, s, _, _, _, _ in items], dtype=np.uint8),
    )


DEFAULT_SHIFT_GRID = (0.15, -0.15, 0.30, -0.30)


def assemble_dataset(recordings, capacity=DEFAULT_CAPACITY,
                     aps_target_fraction=0.45, shift_grid=DEFAULT_SHIFT_GRID):
    """Per-recording temporal 80/20 split plus APS exposure augmentation.

    The first 80% of each recording's frame stream goes to training, the rest
    to test, with no shuffling across the boundary. Shifted-exposure copies
    of training APS frames are appended until the training source mix is
    about `aps_target_fraction` APS. Returns (train, test, report).
    """
    train_parts, test_parts = [], []
    for rec in recordings:
        stream = frames_from_recording(rec, capacity)
        if not stream:
            raise ValueError("recording produced no frames")
        n_train = int(0.8 * len(stream))
        train_parts.append(stream[:n_train])
        test_parts.append(stream[n_train:])

    train_items = [item for part in train_parts for item in part]
    test_items = [item for part in test_parts for item in part]
    train = _to_dataset(train_items)
    test = _to_dataset(test_items)

    n_aps, n_dvs = train.source_counts()
    report = {
        "train_frames": len(train),
        "test_frames": len(test),
        "train_aps_before_augment": n_aps,
        "train_dvs": n_dvs,
    }

    target_aps = int(round(n_dvs * aps_target_fraction / (1.0 - aps_target_fraction)))
    need = max(0, target_aps - n_aps)
    if need > 0:
        raws = [(item[3], item[4], item[5]) for item in train_items
                if item[1] == SOURCE_APS]
        aug_frames = np.zeros((need, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
        aug_labels = np.zeros(need, dtype=np.uint8)
        aug_x = np.zeros(need, dtype=np.int16)
        for i in range(need):
            label, x, raw = raws[i % len(raws)]
            shift = shift_grid[i % len(shift_grid)]
            aug_frames[i] = aps_normalize(exposure_augment(raw, shift)).values
            aug_labels[i] = int(label)
            aug_x[i] = -1 if x is None else x
        aug = Dataset(frames=aug_frames, labels=aug_labels, target_x=aug_x,
                      source=np.full(need, SOURCE_APS, dtype=np.uint8))
        train = _concat_datasets([train, aug])

    n_aps_after, n_dvs_after = train.source_counts()
    total = max(n_aps_after + n_dvs_after, 1)
    report.update({
        "train_aps": n_aps_after,
        "train_aps_fraction": n_aps_after / total,
        "train_class_mix": train.class_fractions(),
        "test_class_mix": test.class_fractions(),
        "reference_class_mix": dict(FIELD_REFERENCE_MIX),
    })
    return train, test, report


# ---------------------------------------------------------------------------
# On-disk formats. All integers little-endian; layouts are frozen.
#
# Event file:   16-byte magic, then 9-byte records
#               (t: u32 microseconds, x: u16, y: u16, polarity: u8, 1=ON 0=OFF)
# APS file:     16-byte magic, u32 frame count, then per frame
#               t: u32 followed by 1296 raw gray float32 (row-major 36x36)
# Label track:  text, one line per instant: "<t_us> <target_x_36>" or "<t_us> N"
# Dataset file: 16-byte magic, u32 frame count, u32 APS count, u32 DVS count,
#               then per frame: source u8, label u8, target_x u8 (255 absent),
#               1296 float32 values (row-major 36x36)
# ---------------------------------------------------------------------------


def write_events(path, events):
    arr = np.asarray(events, dtype=EVENT_DTYPE)
    with open(path, "wb") as fh:
        fh.write(EVENT_MAGIC)
        fh.write(arr.tobytes())


def read_events(path):
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != EVENT_MAGIC:
            raise FormatError(f"{path}: bad event file magic")
        body = fh.read()
    if len(body) % EVENT_DTYPE.itemsize != 0:
        raise FormatError(f"{path}: truncated event record")
    events = np.frombuffer(body, dtype=EVENT_DTYPE)
    if len(events) and np.any(np.diff(events["t"].astype(np.int64)) < 0):
        raise FormatError(f"{path}: timestamps decrease")
    return events


def write_aps(path, aps_t, aps_raw):
    aps_t = np.asarray(aps_t, dtype="<u4")
    aps_raw = np.asarray(aps_raw, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(APS_MAGIC)
        fh.write(np.uint32(len(aps_t)).tobytes())
        for t, frame in zip(aps_t, aps_raw):
            fh.write(t.tobytes())
            fh.write(frame.tobytes())


def read_aps(path):
    frame_bytes = 4 + FRAME_SIZE * FRAME_SIZE * 4
    with open(path, "rb") as fh:
        if fh.read(16) != APS_MAGIC:
            raise FormatError(f"{path}: bad APS file magic")
        count_raw = fh.read(4)
        if len(count_raw) != 4:
            raise FormatError(f"{path}: missing frame count")
        count = int(np.frombuffer(count_raw, dtype="<u4")[0])
        body = fh.read()
    if len(body) != count * frame_bytes:
        raise FormatError(f"{path}: expected {count} frames")
    ts = np.zeros(count, dtype=np.uint32)
    frames = np.zeros((count, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    for i in range(count):
        rec = body[i * frame_bytes:(i + 1) * frame_bytes]
        ts[i] = np.frombuffer(rec[:4], dtype="<u4")[0]
        frames[i] = np.frombuffer(rec[4:], dtype="<f4").reshape(FRAME_SIZE, FRAME_SIZE)
    return ts, frames


def write_labels(path, label_t, label_x):
    with open(path, "w") as fh:
        for t, x in zip(label_t, label_x):
            fh.write(f"{int(t)} {'N' if x < 0 else int(x)}\n")


def read_labels(path):
    ts, xs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 't x' or 't N'")
            try:
                ts.append(int(parts[0]))
                xs.append(-1 if parts[1] == "N" else int(parts[1]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad label line") from None
    return np.array(ts, dtype=np.uint32), np.array(xs, dtype=np.int16)


def load_recording(prefix) -> Recording:
    """Load rec files sharing a path prefix: .events, .aps, .labels."""
    events = read_events(str(prefix) + ".events")
    aps_t, aps_raw = read_aps(str(prefix) + ".aps")
    label_t, label_x = read_labels(str(prefix) + ".labels")
    return Recording(events=events, aps_t=aps_t, aps_raw=aps_raw,
                     label_t=label_t, label_x=label_x)


def save_recording(prefix, rec: Recording):
    write_events(str(prefix) + ".events", rec.events)
    write_aps(str(prefix) + ".aps", rec.aps_t, rec.aps_raw)
    write_labels(str(prefix) + ".labels", rec.label_t, rec.label_x)


def save_dataset(path, ds: Dataset):
    n_aps, n_dvs = ds.source_counts()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(np.array([len(ds), n_aps, n_dvs], dtype="<u4").tobytes())
        tx = np.where(ds.target_x < 0, 255, ds.target_x).astype(np.uint8)
        for i in range(len(ds)):
            fh.write(bytes([int(ds.source[i]), int(ds.labels[i]), int(tx[i])]))
            fh.write(ds.frames[i].astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    rec_bytes = 3 + FRAME_SIZE * FRAME_SIZE * 4
    with open(path, "rb") as fh:
        if fh.read(16) != DATASET_MAGIC:
            raise FormatError(f"{path}: bad dataset magic")
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: missing dataset header")
        count, n_aps, n_dvs = (int(v) for v in np.frombuffer(head, dtype="<u4"))
        body = fh.read()
    if len(body) != count * rec_bytes:
        raise FormatError(f"{path}: expected {count} frames")
    frames = np.zeros((count, FRAME_SIZE, FRAME_SIZE), dtype=np.float32)
    labels = np.zeros(count, dtype=np.uint8)
    target_x = np.zeros(count, dtype=np.int16)
    source = np.zeros(count, dtype=np.uint8)
    for i in range(count):
        rec = body[i * rec_bytes:(i + 1) * rec_bytes]
        source[i], labels[i], tx = rec[0], rec[1], rec[2]
        target_x[i] = -1 if tx == 255 else tx
        frames[i] = np.frombuffer(rec[3:], dtype="<f4").reshape(FRAME_SIZE, FRAME_SIZE)
    ds = Dataset(frames=frames, labels=labels, target_x=target_x, source=source)
    got_aps, got_dvs = ds.source_counts()
    if (got_aps, got_dvs) != (n_aps, n_dvs):
        raise FormatError(f"{path}: source counts disagree with header")
    return ds
