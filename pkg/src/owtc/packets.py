"""Packet ingestion, preprocessing, synthetic traffic and the dataset file format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyPayloadError, FormatError, PartialReadError, ValidationError, VersionError

log = logging.getLogger(__name__)

HEADER_STRIP = 24
VECTOR_LENGTH = 1456
UNLABELED = -1

DATASET_MAGIC = b"OWTC"
DATASET_VERSION = 1
_RECORD = struct.Struct("<iH")
RECORD_SIZE = _RECORD.size + VECTOR_LENGTH

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D


@dataclass
class Packet:
    raw: bytes
    truth_label: Optional[int] = None
    source: str = ""
    timestamp: Optional[int] = None  # microseconds

    def __post_init__(self):
        if not self.raw:
            raise ValidationError("packet has no bytes")


# ---------------------------------------------------------------------------
# Capture files
# ---------------------------------------------------------------------------


def ingest_pcap(path) -> list[Packet]:
    """Read every record of a classic pcap file (either byte order, us or ns)."""
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise FormatError("capture shorter than the 24-byte global header", len(data))
    for endian in ("<", ">"):
        (magic,) = struct.unpack_from(endian + "I", data, 0)
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            break
    else:
        raise FormatError(f"unknown capture magic 0x{data[:4].hex()}", 0)
    ts_scale = 1 if magic == PCAP_MAGIC_US else 1000
    rec = struct.Struct(endian + "IIII")
    source = str(path)
    packets = []
    offset = 24
    index = 0
    while offset < len(data):
        if offset + rec.size > len(data):
            raise PartialReadError("truncated record header", index, offset)
        sec, frac, incl_len, _orig = rec.unpack_from(data, offset)
        offset += rec.size
        if offset + incl_len > len(data):
            raise PartialReadError("truncated record body", index, offset)
        raw = data[offset:offset + incl_len]
        offset += incl_len
        if raw:
            packets.append(Packet(raw=raw, source=source, timestamp=sec * 1_000_000 + frac // ts_scale))
        index += 1
    return packets


def write_pcap(path, frames: Iterable[bytes], byte_order: str = "<", nanosecond: bool = False,
               timestamps: Optional[Sequence[int]] = None) -> None:
    """Write frames as a classic pcap (linktype ethernet); used for fixtures and exports."""
    magic = PCAP_MAGIC_NS if nanosecond else PCAP_MAGIC_US
    out = bytearray(struct.pack(byte_order + "IHHiIII", magic, 2, 4, 0, 0, 65535, 1))
    for i, frame in enumerate(frames):
        ts = timestamps[i] if timestamps is not None else i
        sec, usec = divmod(ts, 1_000_000)
        frac = usec * 1000 if nanosecond else usec
        out += struct.pack(byte_order + "IIII", sec, frac, len(frame), len(frame))
        out += frame
    Path(path).write_bytes(bytes(out))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def payload_bytes(packet: Packet) -> tuple[np.ndarray, int]:
    """Strip the first 24 bytes, keep up to 1456, zero-pad. Returns (bytes, kept length)."""
    raw = packet.raw if isinstance(packet, Packet) else bytes(packet)
    if len(raw) <= HEADER_STRIP:
        raise EmptyPayloadError(f"packet of {len(raw)} bytes has no payload after the {HEADER_STRIP}-byte strip")
    body = np.frombuffer(raw[HEADER_STRIP:HEADER_STRIP + VECTOR_LENGTH], dtype=np.uint8)
    out = np.zeros(VECTOR_LENGTH, dtype=np.uint8)
    out[:body.size] = body
    return out, int(body.size)


def preprocess(packet: Packet) -> np.ndarray:
    """Packet -> length-1456 float vector in [0, 1]."""
    body, _ = payload_bytes(packet)
    return body / 255.0


def reshape_for_export(vector: np.ndarray, mode: str = "gray_39x39") -> np.ndarray:
    """Lay a packet vector out as an 8-bit image grid (39x39 gray or 22x22x3 RGB)."""
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    pixels = np.rint(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)
    if mode == "gray_39x39":
        grid = np.zeros(39 * 39, dtype=np.uint8)
        n = min(pixels.size, grid.size)
        grid[:n] = pixels[:n]
        return grid.reshape(39, 39)
    if mode == "rgb_22x22x3":
        grid = np.zeros(22 * 22 * 3, dtype=np.uint8)
        n = min(pixels.size, grid.size)
        grid[:n] = pixels[:n]
        return grid.reshape(22, 22, 3)
    raise ValidationError(f"unknown export mode {mode!r}")


def flatten_export(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.uint8).reshape(-1) / 255.0


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Packet payloads (pre-scaling bytes) with integer labels; -1 marks unlabeled."""

    payload: np.ndarray
    labels: np.ndarray
    lengths: Optional[np.ndarray] = None
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.uint8).reshape(-1, VECTOR_LENGTH)
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if self.lengths is None:
            self.lengths = np.full(len(self.labels), VECTOR_LENGTH, dtype=np.uint16)
        self.lengths = np.asarray(self.lengths, dtype=np.uint16).reshape(-1)
        if not (len(self.payload) == len(self.labels) == len(self.lengths)):
            raise ValidationError("payload, labels and lengths must have the same number of records")
        if np.any(self.labels < UNLABELED):
            raise ValidationError("labels below -1 are not allowed")
        self.class_names = {int(k): str(v) for k, v in self.class_names.items()}

    def __len__(self) -> int:
        return len(self.labels)

    def vectors(self) -> np.ndarray:
        return self.payload / 255.0

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def class_count(self) -> int:
        lab = self.labels[self.labeled_mask]
        return int(lab.max()) + 1 if lab.size else 0

    def class_counts(self) -> dict:
        ids, counts = np.unique(self.labels[self.labeled_mask], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def check_dense(self, class_count: Optional[int] = None) -> int:
        """Raise unless every record is labeled and labels cover 0..M-1."""
        if not np.all(self.labeled_mask):
            raise ValidationError("dataset contains unlabeled records")
        m = self.class_count if class_count is None else class_count
        present = set(np.unique(self.labels).tolist())
        if present != set(range(m)):
            raise ValidationError(f"labels {sorted(present)} are not dense in [0, {m})")
        return m

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.payload[index], self.labels[index], self.lengths[index], dict(self.class_names))

    def relabel(self, labels) -> "LabeledDataset":
        return LabeledDataset(self.payload, labels, self.lengths, dict(self.class_names))

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            np.array_equal(self.payload, other.payload)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.lengths, other.lengths)
            and self.class_names == other.class_names
        )

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        names = {}
        for p in parts:
            names.update(p.class_names)
        return cls(
            np.concatenate([p.payload for p in parts]) if parts else np.zeros((0, VECTOR_LENGTH), np.uint8),
            np.concatenate([p.labels for p in parts]) if parts else np.zeros(0, np.int32),
            np.concatenate([p.lengths for p in parts]) if parts else np.zeros(0, np.uint16),
            names,
        )


def packets_to_dataset(packets: Sequence[Packet], label: int = UNLABELED,
                       class_name: Optional[str] = None) -> tuple[LabeledDataset, int]:
    """Preprocess packets into a dataset; returns (dataset, skipped count)."""
    rows, lengths, labels = [], [], []
    skipped = 0
    for p in packets:
        try:
            body, n = payload_bytes(p)
        except EmptyPayloadError:
            skipped += 1
            continue
        rows.append(body)
        lengths.append(n)
        labels.append(label if p.truth_label is None else p.truth_label)
    if skipped:
        log.warning("skipped %d packets with no payload", skipped)
    payload = np.stack(rows) if rows else np.zeros((0, VECTOR_LENGTH), np.uint8)
    names = {label: class_name} if class_name is not None and label != UNLABELED else {}
    return LabeledDataset(payload, labels, lengths, names), skipped


def _names_path(path) -> Path:
    return Path(str(path) + ".names.json")


def dataset_to_bytes(d: LabeledDataset) -> bytes:
    records = np.zeros(len(d), dtype=np.dtype([("label", "<i4"), ("length", "<u2"), ("payload", "u1", VECTOR_LENGTH)]))
    records["label"] = d.labels
    records["length"] = np.minimum(d.lengths, VECTOR_LENGTH)
    records["payload"] = d.payload
    return DATASET_MAGIC + struct.pack("<HI", DATASET_VERSION, len(d)) + records.tobytes()


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    if len(data) < 10:
        raise FormatError("file too short for a dataset header", len(data))
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    version, count = struct.unpack_from("<HI", data, 4)
    if version != DATASET_VERSION:
        raise VersionError(f"dataset format version {version}, expected {DATASET_VERSION}", 4)
    need = 10 + count * RECORD_SIZE
    if len(data) < need:
        complete = (len(data) - 10) // RECORD_SIZE
        raise FormatError(f"truncated: {count} records declared, {complete} complete", len(data))
    if len(data) > need:
        raise FormatError(f"{len(data) - need} trailing bytes after records", need)
    dtype = np.dtype([("label", "<i4"), ("length", "<u2"), ("payload", "u1", VECTOR_LENGTH)])
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=10)
    if np.any(rec["label"] < UNLABELED):
        raise FormatError("record label below -1", 10)
    return LabeledDataset(rec["payload"].copy(), rec["label"].copy(), rec["length"].copy())


def write_dataset(d: LabeledDataset, path) -> None:
    """Write the binary dataset; class names go to a ``<path>.names.json`` sidecar."""
    Path(path).write_bytes(dataset_to_bytes(d))
    names = _names_path(path)
    if d.class_names:
        names.write_text(json.dumps({str(k): v for k, v in sorted(d.class_names.items())}, indent=2) + "\n")
    elif names.exists():
        names.unlink()


def read_dataset(path) -> LabeledDataset:
    d = dataset_from_bytes(Path(path).read_bytes())
    names = _names_path(path)
    if names.exists():
        try:
            d.class_names = {int(k): str(v) for k, v in json.loads(names.read_text()).items()}
        except (ValueError, AttributeError) as exc:
            raise FormatError(f"unreadable class-name sidecar {names}: {exc}") from None
    return d


# ---------------------------------------------------------------------------
# Synthetic application traffic
# ---------------------------------------------------------------------------


@dataclass
class SynthAppProfile:
    """A seeded stand-in for one application's packet stream.

    Payload bytes follow an order-1 Markov chain whose sparse transition table
    (``fanout`` successors per byte value) and leading signature are derived
    from ``seed``. A fraction ``cipher_mix`` of bytes is replaced by uniform
    noise, mimicking encrypted content; the chain switches to a second table
    after ``signature_length`` bytes so statistics depend on position.
    """

    app_id: str
    seed: int
    length_min: int = 200
    length_max: int = 1480
    length_mode: int = 900
    fanout: int = 4
    signature_length: int = 12
    signature_noise: float = 0.05
    cipher_mix: float = 0.3
    band_center: Optional[int] = None  # successors cluster around this byte value
    band_width: int = 256

    def __post_init__(self):
        if not (0 < self.length_min <= self.length_mode <= self.length_max):
            raise ValidationError(f"{self.app_id}: need 0 < min <= mode <= max payload length")
        if not (1 <= self.fanout <= 256):
            raise ValidationError(f"{self.app_id}: fanout must be in [1, 256]")
        if not (1 <= self.band_width <= 256) or (self.band_center is not None and not 0 <= self.band_center < 256):
            raise ValidationError(f"{self.app_id}: band must satisfy 0 <= center < 256, 1 <= width <= 256")
        if not (0.0 <= self.cipher_mix <= 1.0 and 0.0 <= self.signature_noise <= 1.0):
            raise ValidationError(f"{self.app_id}: mixing rates must be in [0, 1]")

    @cached_property
    def _tables(self):
        rng = np.random.default_rng([0x5EED, self.seed])
        tables = []
        center = int(rng.integers(256)) if self.band_center is None else self.band_center
        band = (center - self.band_width // 2 + np.arange(self.band_width)) % 256
        fanout = min(self.fanout, self.band_width)
        for _ in range(2):
            succ = np.stack([rng.choice(band, size=fanout, replace=False) for _ in range(256)])
            w = rng.dirichlet(np.ones(fanout), size=256)
            tables.append((succ.astype(np.uint8), np.cumsum(w, axis=1)))
        initial = rng.dirichlet(np.full(256, 0.1))
        signature = rng.integers(0, 256, size=self.signature_length, dtype=np.uint8)
        return tables, np.cumsum(initial), signature

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def sample_lengths(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.length_min == self.length_max:
            return np.full(n, self.length_min, dtype=np.int64)
        x = rng.triangular(self.length_min, self.length_mode, self.length_max, size=n)
        return np.clip(np.rint(x).astype(np.int64), self.length_min, self.length_max)

    def sample_payloads(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(bytes (n, 1456), lengths)`` of post-strip payloads."""
        tables, init_cum, signature = self._tables
        lengths = np.minimum(self.sample_lengths(rng, n), VECTOR_LENGTH)
        out = np.zeros((n, VECTOR_LENGTH), dtype=np.uint8)
        if n == 0:
            return out, lengths
        prev = np.searchsorted(init_cum, rng.random(n) * init_cum[-1], side="right").clip(0, 255)
        for t in range(VECTOR_LENGTH):
            succ, cum = tables[0] if t < self.signature_length else tables[1]
            j = (rng.random(n)[:, None] > cum[prev]).sum(axis=1).clip(0, cum.shape[1] - 1)
            cur = succ[prev, j].astype(np.int64)
            noise = rng.random(n) < self.cipher_mix
            cur = np.where(noise, rng.integers(0, 256, size=n), cur)
            if t < self.signature_length:
                keep = rng.random(n) >= self.signature_noise
                cur = np.where(keep, signature[t], cur)
            out[:, t] = cur
            prev = cur
        out[np.arange(VECTOR_LENGTH)[None, :] >= lengths[:, None]] = 0
        return out, lengths

    def sample_packets(self, rng: np.random.Generator, n: int, label: Optional[int] = None) -> list[Packet]:
        body, lengths = self.sample_payloads(rng, n)
        heads = rng.integers(0, 256, size=(n, HEADER_STRIP), dtype=np.uint8)
        return [
            Packet(raw=heads[i].tobytes() + body[i, :lengths[i]].tobytes(), truth_label=label,
                   source=f"synth:{self.app_id}")
            for i in range(n)
        ]


def default_profiles(count: int, seed: int = 0, prefix: str = "app", band_width: int = 64,
                     cipher_mix: float = 0.3, signature_length: int = 12) -> list[SynthAppProfile]:
    """``count`` mutually far-apart profiles of bulk (mostly full-size) traffic.

    Byte bands are spread evenly around the byte circle; payload lengths are
    skewed towards the 1456-byte cap so length alone does not identify an app.
    """
    rng = np.random.default_rng([0xA11, seed])
    seeds = rng.choice(2**31 - 1, size=count, replace=False)
    centers = (np.arange(count) * (256 // count) + int(rng.integers(256))) % 256
    centers = centers[rng.permutation(count)]
    profiles = []
    for i in range(count):
        lo = int(rng.integers(900, 1200))
        profiles.append(SynthAppProfile(f"{prefix}{i}", int(seeds[i]), lo, 1480, 1480,
                                        signature_length=signature_length, cipher_mix=cipher_mix,
                                        band_center=int(centers[i]), band_width=band_width))
    return profiles


def load_profiles(path) -> list[SynthAppProfile]:
    """Read a profile config: ``{"profiles": [{...}]}`` or ``{"default": n, "seed": s}``."""
    try:
        cfg = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"profile config is not JSON: {exc}") from None
    if "profiles" in cfg:
        try:
            return [SynthAppProfile(**p) for p in cfg["profiles"]]
        except TypeError as exc:
            raise ValidationError(f"bad profile entry: {exc}") from None
    if "default" in cfg:
        return default_profiles(int(cfg["default"]), int(cfg.get("seed", 0)))
    raise ValidationError("profile config needs a 'profiles' list or a 'default' count")


def synth_generate(profiles: Sequence[SynthAppProfile], per_class_count, seed: int) -> LabeledDataset:
    """Draw ``per_class_count`` packets per profile; label i belongs to ``profiles[i]``.

    ``per_class_count`` may be an int or a per-profile sequence.
    """
    if len(profiles) < 2:
        raise ValidationError("need at least two profiles")
    ids = [p.app_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate app ids in {ids}")
    counts = [per_class_count] * len(profiles) if np.isscalar(per_class_count) else list(per_class_count)
    if len(counts) != len(profiles) or min(counts) < 1:
        raise ValidationError("per-class counts must be positive, one per profile")
    parts = []
    for label, (profile, n) in enumerate(zip(profiles, counts)):
        rng = np.random.default_rng([seed, label])
        body, lengths = profile.sample_payloads(rng, int(n))
        parts.append(LabeledDataset(body, np.full(int(n), label), lengths, {label: profile.app_id}))
    return LabeledDataset.concat(parts)
