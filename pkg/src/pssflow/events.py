"""Event streams, their on-disk formats, and dense event representations."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import EventFormatError, EventOrderError, ValidationError

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p", "pad"],
        "formats": ["<u8", "<u2", "<u2", "i1", ("u1", 3)],
        "offsets": [0, 8, 10, 12, 13],
        "itemsize": 16,
    }
)

TIME_SURFACE = "time_surface"
BINNED12 = "binned12"


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events of one sensor, stored column-wise.

    Construction validates bounds, polarity and ordering, so every instance
    in circulation satisfies the stream invariants.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_h: int
    sensor_w: int

    def __post_init__(self):
        cols = {
            "t": np.asarray(self.t, dtype=np.int64),
            "x": np.asarray(self.x, dtype=np.int64),
            "y": np.asarray(self.y, dtype=np.int64),
            "p": np.asarray(self.p, dtype=np.int64),
        }
        n = len(cols["t"])
        if any(c.ndim != 1 or len(c) != n for c in cols.values()):
            raise ValidationError("event columns must be 1-D and equally long")
        if self.sensor_h <= 0 or self.sensor_w <= 0:
            raise ValidationError("sensor dimensions must be positive")
        if n:
            if cols["t"].min() < 0:
                raise ValidationError("timestamps must be non-negative")
            bad = (
                (cols["x"] < 0)
                | (cols["x"] >= self.sensor_w)
                | (cols["y"] < 0)
                | (cols["y"] >= self.sensor_h)
            )
            if bad.any():
                raise ValidationError(
                    f"event {int(np.argmax(bad))} outside the "
                    f"{self.sensor_w}x{self.sensor_h} sensor"
                )
            badp = (cols["p"] != 1) & (cols["p"] != -1)
            if badp.any():
                raise ValidationError(f"event {int(np.argmax(badp))} has polarity not in {{+1, -1}}")
            _check_sorted(cols["t"])
        for name, col in cols.items():
            col.setflags(write=False)
            object.__setattr__(self, name, col)

    @classmethod
    def empty(cls, sensor_h: int, sensor_w: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, sensor_h, sensor_w)

    @classmethod
    def from_events(cls, events, sensor_h: int, sensor_w: int) -> "EventStream":
        events = list(events)
        if not events:
            return cls.empty(sensor_h, sensor_w)
        x, y, t, p = (np.array(c, dtype=np.int64) for c in zip(*events))
        return cls(t, x, y, p, sensor_h, sensor_w)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x, self.y, self.t, self.p):
            yield Event(int(x), int(y), int(t), int(p))

    def _take(self, sel) -> "EventStream":
        return EventStream(
            self.t[sel], self.x[sel], self.y[sel], self.p[sel], self.sensor_h, self.sensor_w
        )

    def same_as(self, other: "EventStream") -> bool:
        return (
            self.sensor_h == other.sensor_h
            and self.sensor_w == other.sensor_w
            and all(
                np.array_equal(getattr(self, c), getattr(other, c)) for c in "txyp"
            )
        )


@dataclass(frozen=True)
class EventRepresentation:
    """Dense H x W x C aggregation of one event window."""

    data: np.ndarray
    t_start: float
    t_end: float
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError("representation data must be H x W x C")
        if not self.t_start < self.t_end:
            raise ValidationError("representation window must satisfy t_start < t_end")
        if not np.isfinite(self.data).all():
            raise ValidationError("representation contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _check_sorted(t: np.ndarray) -> None:
    if len(t) > 1:
        drops = np.flatnonzero(t[1:] < t[:-1])
        if len(drops):
            i = int(drops[0]) + 1
            raise EventOrderError(i, int(t[i - 1]), int(t[i]))


# -- file formats -------------------------------------------------------------


def save_events(stream: EventStream, path) -> None:
    """Write ``stream`` in the binary ``EVT1`` format."""
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, stream.sensor_w, stream.sensor_h, len(stream)))
        fh.write(rec.tobytes())


def load_events(path) -> EventStream:
    """Read an ``EVT1`` binary file, or a ``t,x,y,p`` CSV when the magic is absent."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        if path.suffix.lower() == ".csv":
            return load_events_csv(path)
        raise EventFormatError("missing EVT1 magic", 0)
    if len(raw) < HEADER.size:
        raise EventFormatError("truncated header", len(raw))
    _, w, h, count = HEADER.unpack_from(raw, 0)
    body = raw[HEADER.size :]
    if len(body) < count * RECORD_DTYPE.itemsize:
        complete = len(body) // RECORD_DTYPE.itemsize
        raise EventFormatError(
            f"file ends inside record {complete} of {count}",
            HEADER.size + complete * RECORD_DTYPE.itemsize,
        )
    if len(body) > count * RECORD_DTYPE.itemsize:
        raise EventFormatError(
            "trailing bytes after last record", HEADER.size + count * RECORD_DTYPE.itemsize
        )
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=count)

    def fail(mask, what):
        i = int(np.argmax(mask))
        raise EventFormatError(f"record {i}: {what}", HEADER.size + i * RECORD_DTYPE.itemsize)

    bad = (rec["p"] != 1) & (rec["p"] != -1)
    if bad.any():
        fail(bad, "polarity must be +1 or -1")
    bad = rec["pad"].any(axis=1)
    if bad.any():
        fail(bad, "non-zero padding")
    bad = (rec["x"] >= w) | (rec["y"] >= h)
    if bad.any():
        fail(bad, f"coordinates outside {w}x{h} sensor")
    if rec["t"].size and rec["t"].max() > np.iinfo(np.int64).max:
        fail(rec["t"] > np.iinfo(np.int64).max, "timestamp overflows int64")
    return EventStream(
        rec["t"].astype(np.int64),
        rec["x"].astype(np.int64),
        rec["y"].astype(np.int64),
        rec["p"].astype(np.int64),
        sensor_h=h,
        sensor_w=w,
    )


def load_events_csv(path, sensor_w: int | None = None, sensor_h: int | None = None) -> EventStream:
    """Read ``t,x,y,p`` lines; a non-numeric first line is treated as a header.

    Sensor dimensions default to one past the largest coordinate seen.
    """
    rows = []
    offset = 0
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh):
            start = offset
            offset += len(line.encode())
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = next(csv.reader([text]))
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                if lineno == 0 and not rows:
                    continue
                raise EventFormatError(f"line {lineno + 1}: expected four integers", start) from None
            if p not in (1, -1):
                raise EventFormatError(f"line {lineno + 1}: polarity must be +1 or -1", start)
            rows.append((t, x, y, p))
    if not rows:
        return EventStream.empty(sensor_h or 1, sensor_w or 1)
    t, x, y, p = (np.array(c, dtype=np.int64) for c in zip(*rows))
    w = sensor_w if sensor_w is not None else int(x.max()) + 1
    h = sensor_h if sensor_h is not None else int(y.max()) + 1
    return EventStream(t, x, y, p, sensor_h=h, sensor_w=w)


def save_events_csv(stream: EventStream, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("t,x,y,p\n")
        for ev in stream:
            fh.write(f"{ev.t},{ev.x},{ev.y},{ev.p}\n")


# -- slicing ------------------------------------------------------------------


def slice_window(stream: EventStream, t_a: int, t_b: int, *, right_closed: bool = True) -> EventStream:
    """Events with ``t_a <= t <= t_b`` (or ``< t_b`` when ``right_closed`` is false)."""
    if not t_a < t_b:
        raise ValidationError(f"window requires t_a < t_b, got [{t_a}, {t_b}]")
    lo = np.searchsorted(stream.t, t_a, side="left")
    hi = np.searchsorted(stream.t, t_b, side="right" if right_closed else "left")
    return stream._take(slice(lo, hi))


def window_slices(stream: EventStream, bounds) -> list[EventStream]:
    """Partition ``stream`` into consecutive windows ``[b_j, b_{j+1})``.

    Only the last window is right-closed, so an event on an interior
    boundary lands in exactly one window.
    """
    bounds = list(bounds)
    if len(bounds) < 2:
        raise ValidationError("need at least two window bounds")
    last = len(bounds) - 2
    return [
        slice_window(stream, bounds[j], bounds[j + 1], right_closed=(j == last))
        for j in range(len(bounds) - 1)
    ]


# -- representations ----------------------------------------------------------


def build_time_surface(
    stream: EventStream,
    t_ref: int,
    tau: float,
    channels_per_polarity: int = 1,
    t_start: float | None = None,
) -> EventRepresentation:
    """Exponentially decayed age of the latest event per pixel and polarity.

    Channel ``k`` of each polarity uses decay constant ``tau * 2**k``.
    Positive-polarity channels come first.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if channels_per_polarity < 1:
        raise ValidationError("channels_per_polarity must be >= 1")
    if len(stream) and stream.t.max() > t_ref:
        raise ValidationError("time surface requires all events at or before t_ref")
    h, w = stream.sensor_h, stream.sensor_w
    last = np.full((2, h, w), -np.inf)
    for slot, pol in enumerate((1, -1)):
        sel = stream.p == pol
        # stream is sorted, so the final assignment per pixel is the latest event
        last[slot, stream.y[sel], stream.x[sel]] = stream.t[sel]
    age = t_ref - last
    chans = []
    for slot in range(2):
        for k in range(channels_per_polarity):
            chans.append(np.exp(-age[slot] / (tau * 2.0**k)))
    data = np.stack(chans, axis=-1).astype(np.float32)
    if t_start is None:
        t_start = t_ref - tau
    return EventRepresentation(
        data, float(t_start), float(t_ref), TIME_SURFACE, {"tau": tau, "channels_per_polarity": channels_per_polarity}
    )


def build_binned_representation(
    stream: EventStream, t_a: int, t_b: int, bins: int = 12
) -> EventRepresentation:
    """Signed polarity counts in ``bins`` equal temporal slices of ``[t_a, t_b]``.

    Events outside the window are ignored; the final bin is right-closed.
    """
    if not t_a < t_b:
        raise ValidationError(f"window requires t_a < t_b, got [{t_a}, {t_b}]")
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    h, w = stream.sensor_h, stream.sensor_w
    data = np.zeros((h, w, bins), dtype=np.float32)
    inside = (stream.t >= t_a) & (stream.t <= t_b)
    t = stream.t[inside]
    if len(t):
        # integer arithmetic keeps the bin edges exact
        idx = ((t - t_a) * bins) // (t_b - t_a)
        idx = np.minimum(idx, bins - 1)
        np.add.at(data, (stream.y[inside], stream.x[inside], idx), stream.p[inside])
    return EventRepresentation(data, float(t_a), float(t_b), BINNED12 if bins == 12 else f"binned{bins}", {"bins": bins})
