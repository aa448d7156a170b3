"""Asynchronous event streams: I/O, augmentation, slicing and batching.

Streams are kept as integer-microsecond timestamps plus channel indices.
Conversion to float seconds happens only when a batch is built, through an
explicit ``time_unit`` (seconds per tick).

Text interchange format (``.evs``)::

    #EVS1 J=<num_channels> label=<int | comma-separated floats>
    <t_us> <channel>
    ...

A dataset is a directory of ``.evs`` files plus a ``manifest`` file with one
``<relative path> <split> <class>`` record per line.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np

MAGIC = "#EVS1"
MANIFEST_NAME = "manifest"

# DVS128 sensor geometry used by the channel mapping below.
DVS_WIDTH = 128
DVS_HEIGHT = 128
DVS_NUM_CHANNELS = DVS_WIDTH * DVS_HEIGHT * 2
SHD_NUM_CHANNELS = 700

Label = Union[int, np.ndarray]


class EventStreamError(ValueError):
    """Base class for malformed or inconsistent event data."""


class EventFormatError(EventStreamError):
    """``line`` is the 1-based file line (header = 1); ``record`` the 1-based
    event record for errors in event lines."""

    def __init__(self, message: str, line: int | None = None, record: int | None = None):
        self.line = line
        self.record = record
        if self.record is not None:
            message = f"line {line} (event {self.record}): {message}"
        elif line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EventOrderError(EventFormatError):
    """Timestamps decrease."""


class ChannelRangeError(EventFormatError):
    """A channel index is outside ``[0, J)``."""


class Event(NamedTuple):
    t: int
    channel: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Ordered ``(timestamp, channel)`` records with a class or soft label.

    Attributes:
        times: int64 timestamps in microseconds, non-decreasing.
        channels: int64 channel indices in ``[0, num_channels)``.
        num_channels: declared channel count J.
        label: class index, or a probability vector for mixed samples.
    """

    times: np.ndarray
    channels: np.ndarray
    num_channels: int
    label: Label = 0

    def __post_init__(self) -> None:
        times = np.ascontiguousarray(self.times, dtype=np.int64).reshape(-1)
        channels = np.ascontiguousarray(self.channels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "channels", channels)
        if times.shape != channels.shape:
            raise EventStreamError(
                f"times and channels differ in length: {times.size} vs {channels.size}"
            )
        if self.num_channels < 1:
            raise EventStreamError(f"num_channels must be >= 1, got {self.num_channels}")
        if times.size:
            if times[0] < 0:
                raise EventStreamError("timestamps must be non-negative")
            bad = np.flatnonzero(np.diff(times) < 0)
            if bad.size:
                raise EventOrderError(f"timestamp decreases at event {bad[0] + 1}")
            if channels.min() < 0 or channels.max() >= self.num_channels:
                raise ChannelRangeError(
                    f"channel out of range [0, {self.num_channels})"
                )
        if isinstance(self.label, (int, np.integer)):
            object.__setattr__(self, "label", int(self.label))
        else:
            soft = np.asarray(self.label, dtype=np.float64).reshape(-1)
            if np.any(soft < 0) or abs(soft.sum() - 1.0) > 1e-6:
                raise EventStreamError(f"soft label must be a distribution, got {soft}")
            object.__setattr__(self, "label", soft)

    def __len__(self) -> int:
        return int(self.times.size)

    def __iter__(self) -> Iterator[Event]:
        for t, c in zip(self.times.tolist(), self.channels.tolist()):
            yield Event(t, c)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        if isinstance(self.label, int) != isinstance(other.label, int):
            return False
        same_label = (
            self.label == other.label
            if isinstance(self.label, int)
            else np.array_equal(self.label, other.label)
        )
        return (
            self.num_channels == other.num_channels
            and same_label
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.channels, other.channels)
        )

    @property
    def duration(self) -> int:
        return int(self.times[-1] - self.times[0]) if len(self) else 0

    @property
    def hard_label(self) -> int:
        if isinstance(self.label, int):
            return self.label
        return int(np.argmax(self.label))

    def soft_label(self, num_classes: int) -> np.ndarray:
        if isinstance(self.label, int):
            if not 0 <= self.label < num_classes:
                raise EventStreamError(f"label {self.label} outside [0, {num_classes})")
            out = np.zeros(num_classes)
            out[self.label] = 1.0
            return out
        if self.label.size != num_classes:
            raise EventStreamError(
                f"soft label has {self.label.size} entries, expected {num_classes}"
            )
        return self.label.copy()

    def replace(self, **changes) -> EventStream:
        kw = dict(
            times=self.times, channels=self.channels,
            num_channels=self.num_channels, label=self.label,
        )
        kw.update(changes)
        return EventStream(**kw)


@dataclass(frozen=True)
class DeltaSequence:
    deltas: np.ndarray
    channels: np.ndarray


@dataclass(frozen=True)
class Batch:
    """Padded multi-sample bundle.

    Padding positions have ``mask == False``, channel 0 and delta 0.
    """

    channels: np.ndarray  # [batch, max_len] int64
    deltas: np.ndarray  # [batch, max_len] float
    mask: np.ndarray  # [batch, max_len] bool
    labels: np.ndarray  # [batch, num_classes] float

    @property
    def num_events(self) -> int:
        return int(self.mask.sum())

    def __len__(self) -> int:
        return self.channels.shape[0]


# --------------------------------------------------------------------------
# Text interchange format
# --------------------------------------------------------------------------


def _parse_header(line: str) -> tuple[int, Label]:
    parts = line.split()
    if not parts or parts[0] != MAGIC:
        raise EventFormatError(f"missing {MAGIC} header", 1)
    fields = {}
    for item in parts[1:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise EventFormatError(f"bad header field {item!r}", 1)
        fields[key] = value
    if set(fields) != {"J", "label"}:
        raise EventFormatError(f"header needs exactly J and label, got {sorted(fields)}", 1)
    try:
        num_channels = int(fields["J"])
        raw = fields["label"]
        label: Label = (
            np.array([float(v) for v in raw.split(",")])
            if any(ch in raw for ch in ",.eEn") else int(raw)
        )
    except ValueError as exc:
        raise EventFormatError(str(exc), 1) from None
    if num_channels < 1:
        raise EventFormatError("J must be >= 1", 1)
    return num_channels, label


def parse_event_stream(text: str) -> EventStream:
    """Parse an interchange-format document.

    Raises:
        EventFormatError: malformed header or event line (carries ``line``).
        EventOrderError: a timestamp smaller than its predecessor.
        ChannelRangeError: a channel ``>= J``.
    """
    lines = text.splitlines()
    if not lines:
        raise EventFormatError("empty document", 1)
    num_channels, label = _parse_header(lines[0])
    times: list[int] = []
    channels: list[int] = []
    prev = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise EventFormatError(f"expected '<t_us> <channel>', got {line!r}", lineno, lineno - 1)
        try:
            t, c = int(parts[0]), int(parts[1])
        except ValueError:
            raise EventFormatError(f"non-integer field in {line!r}", lineno, lineno - 1) from None
        if t < 0 or c < 0:
            raise EventFormatError("negative value", lineno, lineno - 1)
        if times and t < prev:
            raise EventOrderError(f"timestamp {t} < previous {prev}", lineno, lineno - 1)
        if c >= num_channels:
            raise ChannelRangeError(f"channel {c} >= J={num_channels}", lineno, lineno - 1)
        times.append(t)
        channels.append(c)
        prev = t
    try:
        return EventStream(np.array(times, np.int64), np.array(channels, np.int64), num_channels, label)
    except EventStreamError as exc:
        raise EventFormatError(str(exc), 1) from None


def _format_label(label: Label) -> str:
    if isinstance(label, int):
        return str(label)
    return ",".join(repr(float(v)) for v in label)


def write_event_stream(s: EventStream) -> str:
    """Serialize ``s``; the exact inverse of :func:`parse_event_stream`."""
    out = [f"{MAGIC} J={s.num_channels} label={_format_label(s.label)}"]
    out.extend(f"{t} {c}" for t, c in zip(s.times.tolist(), s.channels.tolist()))
    return "\n".join(out) + "\n"


def load_event_stream(path: str | os.PathLike) -> EventStream:
    return parse_event_stream(Path(path).read_text())


def save_event_stream(s: EventStream, path: str | os.PathLike) -> None:
    Path(path).write_text(write_event_stream(s))


@dataclass
class ManifestEntry:
    path: str
    split: str
    label: int


def read_manifest(root: str | os.PathLike) -> list[ManifestEntry]:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest in {root}")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise EventFormatError(f"manifest record needs 'path split class': {line!r}", lineno)
        entries.append(ManifestEntry(parts[0], parts[1], int(parts[2])))
    return entries


def load_dataset(root: str | os.PathLike, split: str | None = None) -> dict[str, list[EventStream]]:
    """Load every stream listed in ``root/manifest``, grouped by split."""
    root = Path(root)
    out: dict[str, list[EventStream]] = {}
    for entry in read_manifest(root):
        if split is not None and entry.split != split:
            continue
        out.setdefault(entry.split, []).append(load_event_stream(root / entry.path))
    return out


def save_dataset(root: str | os.PathLike, splits: dict[str, Sequence[EventStream]]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for split in sorted(splits):
        (root / split).mkdir(exist_ok=True)
        for i, s in enumerate(splits[split]):
            rel = f"{split}/{i:06d}.evs"
            save_event_stream(s, root / rel)
            records.append(f"{rel} {split} {s.hard_label}")
    (root / MANIFEST_NAME).write_text("\n".join(records) + "\n")


# --------------------------------------------------------------------------
# Converter contract for external datasets
# --------------------------------------------------------------------------


def dvs_channel(x, y, polarity, width: int = DVS_WIDTH):
    """Flatten a DVS pixel address: ``(y * width + x) * 2 + polarity``."""
    return (np.asarray(y) * width + np.asarray(x)) * 2 + np.asarray(polarity)


def dvs_to_stream(t_us, x, y, polarity, label: int) -> EventStream:
    """Map DVS128 ``(t, x, y, p)`` arrays onto a stream with 32768 channels."""
    t_us = np.asarray(t_us, dtype=np.int64)
    order = np.argsort(t_us, kind="stable")
    ch = dvs_channel(x, y, polarity)
    return EventStream(t_us[order], np.asarray(ch)[order], DVS_NUM_CHANNELS, label)


def shd_to_stream(spike_times_s, units, label: int, num_channels: int = SHD_NUM_CHANNELS) -> EventStream:
    """Map SHD/SSC spike times (float seconds) and unit ids onto a stream."""
    t_us = np.rint(np.asarray(spike_times_s, dtype=np.float64) * 1e6).astype(np.int64)
    order = np.argsort(t_us, kind="stable")
    return EventStream(t_us[order], np.asarray(units, dtype=np.int64)[order], num_channels, label)


# --------------------------------------------------------------------------
# Deltas, augmentation, slicing
# --------------------------------------------------------------------------


def compute_deltas(s: EventStream, time_unit: float = 1e-6) -> DeltaSequence:
    """Inter-event gaps in seconds; the first event has gap 0."""
    ticks = np.diff(s.times, prepend=s.times[:1])
    return DeltaSequence(ticks.astype(np.float64) * time_unit, s.channels.copy())


def _mix_window(
    a: EventStream, b: EventStream, start_a: int, start_b: int, width: int, num_classes: int
) -> EventStream:
    """Replace a's events in ``[start_a, start_a + width)`` by b's events in
    ``[start_b, start_b + width)``, shifted onto a's time axis."""
    keep = (a.times < start_a) | (a.times >= start_a + width)
    take = (b.times >= start_b) & (b.times < start_b + width)
    n_a, n_b = int(keep.sum()), int(take.sum())
    times = np.concatenate([a.times[keep], b.times[take] - start_b + start_a])
    channels = np.concatenate([a.channels[keep], b.channels[take]])
    order = np.argsort(times, kind="stable")
    if n_a + n_b == 0 or n_b == 0:
        label = a.soft_label(num_classes)
    else:
        label = (n_a * a.soft_label(num_classes) + n_b * b.soft_label(num_classes)) / (n_a + n_b)
    return EventStream(times[order], channels[order], a.num_channels, label)


def cutmix(a: EventStream, b: EventStream, rng: np.random.Generator, num_classes: int) -> EventStream:
    """Splice a random contiguous time window of ``b`` into ``a``.

    The window duration is uniform on ``[0, min(duration_a, duration_b)]``
    and is anchored uniformly inside each stream. The result carries a soft
    label weighted by the number of events each source contributes.
    """
    if a.num_channels != b.num_channels:
        raise EventStreamError(
            f"cannot mix streams with J={a.num_channels} and J={b.num_channels}"
        )
    if len(a) == 0 or len(b) == 0:
        return a.replace(label=a.soft_label(num_classes))
    width = int(rng.integers(0, min(a.duration, b.duration) + 1))
    start_a = int(a.times[0] + rng.integers(0, a.duration - width + 1))
    start_b = int(b.times[0] + rng.integers(0, b.duration - width + 1))
    return _mix_window(a, b, start_a, start_b, width, num_classes)


@dataclass
class AugmentConfig:
    drop_prob: float = 0.0
    time_jitter_us: int = 0
    channel_jitter: int = 0
    cutmix_prob: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.time_jitter_us < 0 or self.channel_jitter < 0:
            raise ValueError("jitter magnitudes must be non-negative")
        if not 0.0 <= self.cutmix_prob <= 1.0:
            raise ValueError(f"cutmix_prob must be in [0, 1], got {self.cutmix_prob}")


def augment_jitter_drop(s: EventStream, cfg: AugmentConfig, rng: np.random.Generator) -> EventStream:
    """Drop events independently, then jitter timestamps and channels."""
    keep = rng.random(len(s)) >= cfg.drop_prob
    times, channels = s.times[keep], s.channels[keep]
    if cfg.time_jitter_us:
        times = times + rng.integers(-cfg.time_jitter_us, cfg.time_jitter_us + 1, times.size)
        times = np.maximum(times, 0)
    if cfg.channel_jitter:
        channels = channels + rng.integers(-cfg.channel_jitter, cfg.channel_jitter + 1, channels.size)
        channels = np.clip(channels, 0, s.num_channels - 1)
    order = np.argsort(times, kind="stable")
    return s.replace(times=times[order], channels=channels[order])


def slice_events(s: EventStream, max_events: int, rng: np.random.Generator) -> EventStream:
    """Return a uniformly placed contiguous run of at most ``max_events``."""
    if max_events < 1:
        raise ValueError(f"max_events must be >= 1, got {max_events}")
    if len(s) <= max_events:
        return s
    start = int(rng.integers(0, len(s) - max_events + 1))
    stop = start + max_events
    return s.replace(times=s.times[start:stop], channels=s.channels[start:stop])


def batch_pad(
    streams: Sequence[EventStream],
    time_unit: float = 1e-6,
    num_classes: int | None = None,
    dtype=np.float64,
) -> Batch:
    """Pad streams to a common length.

    ``max_len`` is at least 1 so that an all-empty batch still has a
    well-formed (fully masked) time axis.
    """
    if not streams:
        raise ValueError("cannot batch an empty list of streams")
    j = streams[0].num_channels
    if any(s.num_channels != j for s in streams):
        raise EventStreamError("all streams in a batch must share num_channels")
    if num_classes is None:
        num_classes = 1 + max(
            s.label if isinstance(s.label, int) else s.label.size - 1 for s in streams
        )
    max_len = max(1, max(len(s) for s in streams))
    n = len(streams)
    channels = np.zeros((n, max_len), np.int64)
    deltas = np.zeros((n, max_len), dtype)
    mask = np.zeros((n, max_len), bool)
    labels = np.zeros((n, num_classes), dtype)
    for i, s in enumerate(streams):
        m = len(s)
        channels[i, :m] = s.channels
        deltas[i, :m] = compute_deltas(s, time_unit).deltas
        mask[i, :m] = True
        labels[i] = s.soft_label(num_classes)
    return Batch(channels, deltas, mask, labels)


# --------------------------------------------------------------------------
# Synthetic timing task
# --------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Two-or-more-class task where only inter-event timing is informative.

    Every class draws channels uniformly from ``[0, num_channels)``; class
    ``k`` draws exponential inter-event intervals with mean
    ``interval_means_us[k]``.
    """

    num_channels: int = 16
    num_classes: int = 2
    events_per_sample: int = 512
    interval_means_us: tuple[float, ...] = (1000.0, 4000.0)
    n_train: int = 2000
    n_test: int = 500
    n_val: int = 0

    def __post_init__(self) -> None:
        self.interval_means_us = tuple(float(v) for v in self.interval_means_us)
        if self.num_channels < 2:
            raise ValueError("num_channels must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.events_per_sample < 1:
            raise ValueError("events_per_sample must be >= 1")
        if len(self.interval_means_us) != self.num_classes:
            raise ValueError("need one interval mean per class")
        if any(not m > 0 for m in self.interval_means_us):
            raise ValueError("interval means must be positive")
        if min(self.n_train, self.n_test, self.n_val) < 0:
            raise ValueError("split sizes must be non-negative")


def _synth_sample(cfg: SynthConfig, label: int, rng: np.random.Generator) -> EventStream:
    gaps = rng.exponential(cfg.interval_means_us[label], cfg.events_per_sample)
    gaps[0] = 0.0
    times = np.rint(np.cumsum(gaps)).astype(np.int64)
    channels = rng.integers(0, cfg.num_channels, cfg.events_per_sample)
    return EventStream(times, channels, cfg.num_channels, label)


def gen_synthetic_timing_task(cfg: SynthConfig, rng: np.random.Generator) -> dict[str, list[EventStream]]:
    """Generate class-balanced splits (labels cycle through classes)."""
    splits = {}
    for name, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        if n == 0 and name == "val":
            continue
        splits[name] = [_synth_sample(cfg, i % cfg.num_classes, rng) for i in range(n)]
    return splits


def event_count_stats(streams: Sequence[EventStream]) -> dict[str, float]:
    counts = np.array([len(s) for s in streams])
    if counts.size == 0:
        return {"n": 0, "min": 0, "median": 0.0, "max": 0}
    return {
        "n": int(counts.size),
        "min": int(counts.min()),
        "median": float(np.median(counts)),
        "max": int(counts.max()),
    }


def two_significant(x: float) -> str:
    """Round to two significant digits, as dataset summaries usually are."""
    if x == 0:
        return "0"
    digits = 1 - int(math.floor(math.log10(abs(x))))
    if float(x).is_integer():
        digits = min(digits, 0)  # counts stay whole numbers
    return f"{round(x, digits):.{max(digits, 0)}f}"
