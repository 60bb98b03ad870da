"""Session reassembly, cleaning and the on-disk session dataset."""
from __future__ import annotations

import configparser
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .pcap import (
    ParsedPacket,
    Protocol,
    SessionKey,
    canonical_session_key,
    decode_packet,
    read_capture,
)

logger = logging.getLogger(__name__)

SESSION_LEN = 784
DNS_PORT = 53
DATASET_MAGIC = b"TSD1"
_DATASET_HEADER = struct.Struct("<4sIII")


class SessionError(Exception):
    pass


class EmptySession(SessionError):
    pass


class UnlabeledFile(SessionError):
    pass


class ClassTooSmall(SessionError):
    pass


class DatasetFormatError(SessionError):
    pass


@dataclass
class LabelMap:
    """First-hit mapping from filename substrings to class indices."""

    patterns: list[tuple[str, int]]
    class_names: list[str]

    def __post_init__(self):
        used = {idx for _, idx in self.patterns}
        missing = set(range(len(self.class_names))) - used
        if missing:
            raise ValueError(f"class indices without a pattern: {sorted(missing)}")
        bad = [idx for idx in used if not 0 <= idx < len(self.class_names)]
        if bad:
            raise ValueError(f"pattern class indices out of range: {sorted(bad)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, filename: str) -> int:
        name = Path(filename).name.lower()
        for pattern, idx in self.patterns:
            if pattern.lower() in name:
                return idx
        raise UnlabeledFile(f"no label pattern matches {filename!r}")

    @classmethod
    def from_ini(cls, text: str) -> "LabelMap":
        """Parse ``[classes]`` (index = name) and ``[patterns]`` (substring = name)."""
        cp = configparser.ConfigParser(delimiters=("=",))
        cp.optionxform = str
        cp.read_string(text)
        names = sorted(((int(k), v.strip()) for k, v in cp["classes"].items()))
        if [k for k, _ in names] != list(range(len(names))):
            raise ValueError("class indices must be 0..n-1 without gaps")
        class_names = [v for _, v in names]
        lookup = {n: i for i, n in enumerate(class_names)}
        patterns = []
        for pat, cname in cp["patterns"].items():
            cname = cname.strip()
            if cname not in lookup:
                raise ValueError(f"pattern {pat!r} names unknown class {cname!r}")
            patterns.append((pat, lookup[cname]))
        return cls(patterns, class_names)

    @classmethod
    def load(cls, path) -> "LabelMap":
        return cls.from_ini(Path(path).read_text())

    @classmethod
    def default(cls) -> "LabelMap":
        return cls.from_ini((Path(__file__).parent / "data" / "labelmap.ini").read_text())


def keep_packet(p: ParsedPacket) -> bool:
    if p.protocol == Protocol.TCP and p.payload_len == 0:
        return False
    if p.src_port == DNS_PORT or p.dst_port == DNS_PORT:
        return False
    return True


def sanitize_packet_bytes(p: ParsedPacket, record: bytes) -> bytes:
    """Copy of the packet from the IP header on, with both IP addresses zeroed."""
    out = bytearray(record[p.l3_offset:p.total_len])
    if p.ip_version == 4:
        out[12:20] = bytes(8)
    else:
        out[8:40] = bytes(32)
    return bytes(out)


def assemble_session(packets: Sequence[tuple[ParsedPacket, bytes]]) -> bytes:
    return b"".join(sanitize_packet_bytes(p, rec) for p, rec in packets)


def normalize_length(raw: bytes, length: int = SESSION_LEN) -> bytes:
    if not raw:
        raise EmptySession("cannot normalize an empty session")
    if len(raw) >= length:
        return bytes(raw[:length])
    return bytes(raw) + bytes(length - len(raw))


def scale(sample: np.ndarray | bytes) -> np.ndarray:
    arr = np.frombuffer(sample, dtype=np.uint8) if isinstance(sample, (bytes, bytearray)) else sample
    return np.asarray(arr, dtype=np.float64) / 255.0


@dataclass
class CaptureStats:
    source: str
    label: int
    packets: int = 0
    unclassifiable: int = 0
    filtered: int = 0
    sessions_kept: int = 0
    sessions_dropped: int = 0


def sessions_from_capture(raw: bytes, keep_ipv6: bool = True, source: str = "<memory>"):
    """Group one capture into sessions and return ``(sessions, stats)``.

    ``sessions`` is a list of ``(key, first_timestamp, session_bytes, packets)``
    in emission order: first kept packet time, then :class:`SessionKey` order.
    ``packets`` are the kept :class:`ParsedPacket` objects, for provenance checks.
    """
    stats = CaptureStats(source=source, label=-1)
    grouped: dict[SessionKey, list[tuple[tuple[int, int], int, ParsedPacket, bytes]]] = {}
    for idx, (rh, rec) in enumerate(read_capture(raw)):
        stats.packets += 1
        p = decode_packet(rec, (rh.ts_sec, rh.ts_usec))
        if p is None or (not keep_ipv6 and p.ip_version == 6):
            stats.unclassifiable += 1
            continue
        grouped.setdefault(canonical_session_key(p), []).append((p.timestamp, idx, p, rec))

    sessions = []
    for key, items in grouped.items():
        items.sort(key=lambda it: (it[0], it[1]))
        kept = [(p, rec) for _, _, p, rec in items if keep_packet(p)]
        stats.filtered += len(items) - len(kept)
        if not kept:
            stats.sessions_dropped += 1
            continue
        first_ts = next(ts for ts, _, p, _ in items if keep_packet(p))
        sessions.append((key, first_ts, normalize_length(assemble_session(kept)), [p for p, _ in kept]))
    sessions.sort(key=lambda s: (s[1], s[0]))
    stats.sessions_kept = len(sessions)
    return sessions, stats


@dataclass
class Dataset:
    data: np.ndarray  # (n, SESSION_LEN) uint8
    labels: np.ndarray  # (n,) int64
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    sources: Optional[list[str]] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            self.data = self.data.reshape(-1, SESSION_LEN)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.data) != len(self.labels):
            raise ValueError("data and labels disagree in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(self.num_classes)]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        sources = [self.sources[i] for i in idx] if self.sources is not None else None
        return Dataset(self.data[idx], self.labels[idx], self.num_classes, list(self.class_names), sources)

    def scaled(self, dtype=np.float32) -> np.ndarray:
        return (self.data.astype(np.float64) / 255.0).astype(dtype)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def to_bytes(self) -> bytes:
        out = bytearray(_DATASET_HEADER.pack(DATASET_MAGIC, len(self), self.data.shape[1], self.num_classes))
        for row, label in zip(self.data, self.labels):
            out += row.tobytes()
            out.append(int(label))
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes, class_names: Optional[list[str]] = None) -> "Dataset":
        if len(raw) < _DATASET_HEADER.size:
            raise DatasetFormatError("dataset file shorter than its header")
        magic, count, sample_len, num_classes = _DATASET_HEADER.unpack_from(raw, 0)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad dataset magic {magic!r}")
        if sample_len != SESSION_LEN:
            raise DatasetFormatError(f"sample length {sample_len}, expected {SESSION_LEN}")
        rec = sample_len + 1
        body = raw[_DATASET_HEADER.size:]
        if len(body) != count * rec:
            raise DatasetFormatError(f"expected {count} records of {rec} bytes, got {len(body)} bytes")
        arr = np.frombuffer(body, dtype=np.uint8).reshape(count, rec)
        return cls(arr[:, :sample_len].copy(), arr[:, sample_len].astype(np.int64), num_classes,
                   class_names or [])

    def manifest(self, dropped: Optional[dict[int, int]] = None) -> str:
        lines = [f"samples = {len(self)}", f"sample_len = {self.data.shape[1]}",
                 f"num_classes = {self.num_classes}", ""]
        counts = self.class_counts()
        for i, name in enumerate(self.class_names):
            line = f"{i}\t{name}\t{counts[i]}"
            if dropped is not None:
                line += f"\tdropped={dropped.get(i, 0)}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def save(self, path, dropped: Optional[dict[int, int]] = None) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        manifest_path(path).write_text(self.manifest(dropped))

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        names = None
        mpath = manifest_path(path)
        if mpath.exists():
            names = []
            for line in mpath.read_text().splitlines():
                parts = line.split("\t")
                if len(parts) >= 3 and parts[0].isdigit():
                    names.append(parts[1])
        return cls.from_bytes(path.read_bytes(), names)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


@dataclass
class BuildResult:
    dataset: Dataset
    stats: list[CaptureStats]

    def dropped_per_class(self) -> dict[int, int]:
        out: Counter = Counter()
        for s in self.stats:
            out[s.label] += s.sessions_dropped
        return dict(out)

    def summary(self) -> str:
        counts = self.dataset.class_counts()
        dropped = self.dropped_per_class()
        lines = [f"{'class':<20} {'kept':>8} {'dropped':>8}"]
        for i, name in enumerate(self.dataset.class_names):
            lines.append(f"{name:<20} {counts[i]:>8} {dropped.get(i, 0):>8}")
        lines.append(f"{'total':<20} {len(self.dataset):>8} {sum(dropped.values()):>8}")
        return "\n".join(lines)


def build_dataset(
    captures: Iterable,
    label_map: LabelMap,
    keep_ipv6: bool = True,
) -> BuildResult:
    """Turn capture files into one labeled session dataset.

    ``captures`` holds paths, or ``(name, raw_bytes)`` pairs for in-memory
    input; the label always comes from ``label_map`` applied to the name.
    Every file is resolved before any is parsed.
    """
    items = []
    for cap in captures:
        if isinstance(cap, tuple):
            name, raw = cap
        else:
            name, raw = str(cap), None
        items.append((name, raw, label_map.resolve(name)))

    rows, labels, sources, all_stats = [], [], [], []
    for name, raw, label in items:
        if raw is None:
            raw = Path(name).read_bytes()
        sessions, stats = sessions_from_capture(raw, keep_ipv6=keep_ipv6, source=name)
        stats.label = label
        all_stats.append(stats)
        logger.info("%s: %d packets, %d sessions kept, %d dropped",
                    name, stats.packets, stats.sessions_kept, stats.sessions_dropped)
        for _, _, sample, _ in sessions:
            rows.append(np.frombuffer(sample, dtype=np.uint8))
            labels.append(label)
            sources.append(name)

    data = np.stack(rows) if rows else np.zeros((0, SESSION_LEN), dtype=np.uint8)
    ds = Dataset(data, np.array(labels, dtype=np.int64), label_map.num_classes,
                 list(label_map.class_names), sources)
    return BuildResult(ds, all_stats)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(ds: Dataset, test_frac: float, val_frac: float, seed: int):
    """Per-class holdout: test is cut first, validation is a fraction of the rest.

    Classes with no samples are skipped; any class with 1 or 2 samples raises
    :class:`ClassTooSmall`. Returns ``(train, val, test)`` datasets whose
    members keep their original relative order.
    """
    if not (0 <= test_frac < 1 and 0 <= val_frac < 1):
        raise ValueError("fractions must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx, test_idx = [], [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) == 0:
            continue
        if len(members) < 3:
            raise ClassTooSmall(f"class {c} has {len(members)} samples, need at least 3")
        members = members[rng.permutation(len(members))]
        n_test = _round_half_up(len(members) * test_frac)
        n_val = _round_half_up((len(members) - n_test) * val_frac)
        test_idx.extend(members[:n_test])
        val_idx.extend(members[n_test:n_test + n_val])
        train_idx.extend(members[n_test + n_val:])
    return tuple(ds.subset(np.sort(np.array(ix, dtype=np.int64))) for ix in (train_idx, val_idx, test_idx))
