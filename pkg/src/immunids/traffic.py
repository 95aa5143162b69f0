"""Flow records, KDD Cup 1999 ingestion and per-characteristic time series.

KDD connection records carry no addresses, ports or timestamps, so ingest
fills them in: both addresses are ``0.0.0.0``, the source port is 0, the
destination port is the well-known port of the ``service`` column (0 when the
service has none) and record ``i`` gets timestamp ``i * timestamp_step``.
"""

from __future__ import annotations

import gzip
import ipaddress
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

DATASET_MAGIC = "#immunids-dataset v1"
UNSPECIFIED_IP = "0.0.0.0"

KDD_COLUMNS = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate",
    "srv_serror_rate", "rerror_rate", "srv_rerror_rate", "same_srv_rate",
    "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)

# Code of a service or flag is its index in these tuples.
KDD_SERVICES = (
    "IRC", "X11", "Z39_50", "aol", "auth", "bgp", "courier", "csnet_ns", "ctf",
    "daytime", "discard", "domain", "domain_u", "echo", "eco_i", "ecr_i", "efs",
    "exec", "finger", "ftp", "ftp_data", "gopher", "harvest", "hostnames",
    "http", "http_2784", "http_443", "http_8001", "imap4", "iso_tsap", "klogin",
    "kshell", "ldap", "link", "login", "mtp", "name", "netbios_dgm",
    "netbios_ns", "netbios_ssn", "netstat", "nnsp", "nntp", "ntp_u", "other",
    "pm_dump", "pop_2", "pop_3", "printer", "private", "red_i", "remote_job",
    "rje", "shell", "smtp", "sql_net", "ssh", "sunrpc", "supdup", "systat",
    "telnet", "tftp_u", "tim_i", "time", "urh_i", "urp_i", "uucp", "uucp_path",
    "vmnet", "whois",
)
KDD_FLAGS = ("OTH", "REJ", "RSTO", "RSTOS0", "RSTR", "S0", "S1", "S2", "S3", "SF", "SH")

SERVICE_PORTS = {
    "IRC": 6667, "X11": 6000, "Z39_50": 210, "aol": 5190, "auth": 113,
    "bgp": 179, "courier": 530, "csnet_ns": 105, "ctf": 84, "daytime": 13,
    "discard": 9, "domain": 53, "domain_u": 53, "echo": 7, "efs": 520,
    "exec": 512, "finger": 79, "ftp": 21, "ftp_data": 20, "gopher": 70,
    "hostnames": 101, "http": 80, "http_2784": 2784, "http_443": 443,
    "http_8001": 8001, "imap4": 143, "iso_tsap": 102, "klogin": 543,
    "kshell": 544, "ldap": 389, "link": 245, "login": 513, "mtp": 57,
    "name": 42, "netbios_dgm": 138, "netbios_ns": 137, "netbios_ssn": 139,
    "netstat": 15, "nnsp": 433, "nntp": 119, "ntp_u": 123, "pop_2": 109,
    "pop_3": 110, "printer": 515, "remote_job": 71, "rje": 77, "shell": 514,
    "smtp": 25, "sql_net": 150, "ssh": 22, "sunrpc": 111, "supdup": 95,
    "systat": 11, "telnet": 23, "tftp_u": 69, "time": 37, "uucp": 540,
    "uucp_path": 117, "vmnet": 175, "whois": 43,
}

_SYMBOLIC = {"protocol_type", "service", "flag"}
_PROMOTED = {"duration", "src_bytes", "dst_bytes"}


class Protocol(str, Enum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"


@dataclass(frozen=True)
class Label:
    """Ground truth: ``normal``, ``attack`` (with a name) or ``unlabeled``."""

    kind: str
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("normal", "attack", "unlabeled"):
            raise ValidationError(f"unknown label kind {self.kind!r}")

    @classmethod
    def normal(cls) -> "Label":
        return cls("normal")

    @classmethod
    def attack(cls, name: str = "attack") -> "Label":
        return cls("attack", name)

    @classmethod
    def unlabeled(cls) -> "Label":
        return cls("unlabeled")

    @property
    def is_attack(self) -> bool:
        return self.kind == "attack"

    @property
    def is_normal(self) -> bool:
        return self.kind == "normal"

    def to_text(self) -> str:
        if self.kind == "attack":
            return f"attack:{self.name}"
        return self.kind

    @classmethod
    def from_text(cls, text: str) -> "Label":
        text = text.strip()
        if text.startswith("attack:"):
            return cls.attack(text[len("attack:"):])
        if text in ("normal", "unlabeled"):
            return cls(text)
        # KDD style: "normal." / "smurf."
        name = text[:-1] if text.endswith(".") else text
        if name == "normal":
            return cls.normal()
        if not name:
            raise ValidationError("empty label")
        return cls.attack(name)


@dataclass(frozen=True)
class FlowRecord:
    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: Protocol
    duration: float
    bytes_in: float
    bytes_out: float
    numeric_features: tuple[float, ...] = ()
    label: Label = field(default_factory=Label.unlabeled)

    def __post_init__(self):
        for name in ("src_ip", "dst_ip"):
            try:
                ipaddress.IPv4Address(getattr(self, name))
            except ValueError as exc:
                raise ValidationError(f"{name}: {exc}") from None
        for name in ("src_port", "dst_port"):
            port = getattr(self, name)
            if not 0 <= port <= 65535:
                raise ValidationError(f"{name} {port} outside 0-65535")
        for name in ("duration", "bytes_in", "bytes_out"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {value}")
        if not isinstance(self.protocol, Protocol):
            object.__setattr__(self, "protocol", Protocol(self.protocol))
        object.__setattr__(self, "numeric_features", tuple(float(v) for v in self.numeric_features))

    def feature_vector(self) -> list[float]:
        """Numeric view used by the adaptive layer."""
        return [self.duration, self.bytes_in, self.bytes_out, *self.numeric_features]


@dataclass(frozen=True)
class Characteristic:
    id: str
    description: str
    extractor: str


BUILTIN_CHARACTERISTICS = {
    "bytes_in_rate": Characteristic("bytes_in_rate", "incoming data rate in bytes/sec", "bytes_in_rate"),
    "bytes_out_rate": Characteristic("bytes_out_rate", "outgoing data rate in bytes/sec", "bytes_out_rate"),
    "mean_duration": Characteristic("mean_duration", "time required to handle a request", "mean_duration"),
}


@dataclass(frozen=True)
class TrafficSequence:
    characteristic: str
    values: tuple[float, ...]
    window_seconds: float

    def __post_init__(self):
        if not self.values:
            raise ValidationError("traffic sequence must be non-empty")
        if not all(math.isfinite(v) for v in self.values):
            raise ValidationError("traffic sequence values must be finite")
        if self.window_seconds <= 0:
            raise ValidationError("window_seconds must be positive")


@dataclass
class LabeledDataset:
    records: list[FlowRecord]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        width = len(self.feature_names)
        for i, rec in enumerate(self.records):
            if len(rec.numeric_features) != width:
                raise ValidationError(
                    f"record {i} has {len(rec.numeric_features)} numeric features, expected {width}")

    def __len__(self):
        return len(self.records)

    @property
    def vector_names(self) -> tuple[str, ...]:
        return ("duration", "bytes_in", "bytes_out", *self.feature_names)

    def matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(self.vector_names)))
        return np.array([r.feature_vector() for r in self.records], dtype=float)

    def labels(self) -> list[Label]:
        return [r.label for r in self.records]


# --------------------------------------------------------------------------
# KDD Cup 1999 text
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KddSchema:
    columns: tuple[str, ...] = KDD_COLUMNS

    @property
    def feature_names(self) -> tuple[str, ...]:
        rest = [c for c in self.columns if c not in _SYMBOLIC and c not in _PROMOTED]
        return (*rest, "service_code", "flag_code")


KDD_SCHEMA = KddSchema()


def _number(text: str, line_no, column: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", line_no, column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", line_no, column)
    return value


def parse_kdd_record(line: str, schema: KddSchema = KDD_SCHEMA, *, line_no: int | None = None,
                     timestamp: float = 0.0) -> FlowRecord:
    """Parse one KDD line. A trailing label column is optional (absent means unlabeled)."""
    parts = [p.strip() for p in line.strip().split(",")]
    width = len(schema.columns)
    if len(parts) not in (width, width + 1):
        raise ParseError(f"expected {width + 1} columns, got {len(parts)}", line_no)
    values = dict(zip(schema.columns, parts))
    col = {name: i + 1 for i, name in enumerate(schema.columns)}

    proto_text = values["protocol_type"]
    try:
        protocol = Protocol(proto_text)
    except ValueError:
        raise ParseError(f"unknown protocol {proto_text!r}", line_no, col["protocol_type"]) from None
    service = values["service"]
    if service not in KDD_SERVICES:
        raise ParseError(f"unknown service {service!r}", line_no, col["service"])
    flag = values["flag"]
    if flag not in KDD_FLAGS:
        raise ParseError(f"unknown flag {flag!r}", line_no, col["flag"])

    numeric = [_number(values[name], line_no, col[name])
               for name in schema.columns if name not in _SYMBOLIC and name not in _PROMOTED]
    numeric += [float(KDD_SERVICES.index(service)), float(KDD_FLAGS.index(flag))]

    if len(parts) == width + 1:
        try:
            label = Label.from_text(parts[-1])
        except ValidationError as exc:
            raise ParseError(str(exc), line_no, width + 1) from None
    else:
        label = Label.unlabeled()

    try:
        return FlowRecord(
            timestamp=timestamp,
            src_ip=UNSPECIFIED_IP,
            dst_ip=UNSPECIFIED_IP,
            src_port=0,
            dst_port=SERVICE_PORTS.get(service, 0),
            protocol=protocol,
            duration=_number(values["duration"], line_no, col["duration"]),
            bytes_in=_number(values["src_bytes"], line_no, col["src_bytes"]),
            bytes_out=_number(values["dst_bytes"], line_no, col["dst_bytes"]),
            numeric_features=tuple(numeric),
            label=label,
        )
    except ValidationError as exc:
        raise ParseError(str(exc), line_no) from None


def _fmt(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def format_kdd_record(record: FlowRecord, schema: KddSchema = KDD_SCHEMA) -> str:
    """Inverse of :func:`parse_kdd_record` (timestamp is not part of KDD text)."""
    names = schema.feature_names
    if len(record.numeric_features) != len(names):
        raise ValidationError("record does not follow the KDD feature layout")
    numeric = dict(zip(names, record.numeric_features))
    symbolic = {
        "protocol_type": record.protocol.value,
        "service": KDD_SERVICES[int(numeric["service_code"])],
        "flag": KDD_FLAGS[int(numeric["flag_code"])],
    }
    promoted = {"duration": record.duration, "src_bytes": record.bytes_in, "dst_bytes": record.bytes_out}
    cells = []
    for name in schema.columns:
        if name in symbolic:
            cells.append(symbolic[name])
        elif name in promoted:
            cells.append(_fmt(promoted[name]))
        else:
            cells.append(_fmt(numeric[name]))
    if record.label.is_attack:
        cells.append(record.label.name + ".")
    elif record.label.is_normal:
        cells.append("normal.")
    return ",".join(cells)


def _open_text(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def read_kdd(lines: Iterable[str], schema: KddSchema = KDD_SCHEMA, timestamp_step: float = 1.0,
             limit: int | None = None) -> LabeledDataset:
    records = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        records.append(parse_kdd_record(line, schema, line_no=line_no,
                                        timestamp=len(records) * timestamp_step))
        if limit is not None and len(records) >= limit:
            break
    return LabeledDataset(records, schema.feature_names)


# --------------------------------------------------------------------------
# Internal tab-separated dataset format
# --------------------------------------------------------------------------

_FIXED_COLUMNS = ("timestamp", "src_ip", "dst_ip", "src_port", "dst_port", "protocol",
                  "duration", "bytes_in", "bytes_out")


def format_dataset(dataset: LabeledDataset) -> str:
    lines = [DATASET_MAGIC, "\t".join((*_FIXED_COLUMNS, *dataset.feature_names, "label"))]
    for r in dataset.records:
        cells = [repr(float(r.timestamp)), r.src_ip, r.dst_ip, str(r.src_port), str(r.dst_port),
                 r.protocol.value, repr(float(r.duration)), repr(float(r.bytes_in)),
                 repr(float(r.bytes_out)), *(repr(v) for v in r.numeric_features), r.label.to_text()]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def parse_dataset(text: str) -> LabeledDataset:
    lines = text.splitlines()
    if not lines or lines[0].strip() != DATASET_MAGIC:
        raise ParseError("missing dataset header " + repr(DATASET_MAGIC), 1)
    if len(lines) < 2:
        raise ParseError("missing column header", 2)
    header = lines[1].split("\t")
    if tuple(header[:len(_FIXED_COLUMNS)]) != _FIXED_COLUMNS or header[-1] != "label":
        raise ParseError("unexpected column header", 2)
    feature_names = tuple(header[len(_FIXED_COLUMNS):-1])
    records = []
    for line_no, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(cells)}", line_no)
        num = [_number(c, line_no, i + 1) if i in (0, 6, 7, 8) or 9 <= i < len(cells) - 1 else None
               for i, c in enumerate(cells)]
        try:
            records.append(FlowRecord(
                timestamp=num[0], src_ip=cells[1], dst_ip=cells[2],
                src_port=int(cells[3]), dst_port=int(cells[4]), protocol=Protocol(cells[5]),
                duration=num[6], bytes_in=num[7], bytes_out=num[8],
                numeric_features=tuple(num[9:-1]), label=Label.from_text(cells[-1]),
            ))
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
    return LabeledDataset(records, feature_names)


def load_dataset(path, timestamp_step: float = 1.0) -> LabeledDataset:
    """Read either the internal format or (optionally gzipped) KDD text."""
    path = Path(path)
    with _open_text(path) as fh:
        first = fh.readline()
        if first.strip() == DATASET_MAGIC:
            return parse_dataset(first + fh.read())
        fh.seek(0)
        return read_kdd(fh, timestamp_step=timestamp_step)


# --------------------------------------------------------------------------
# Time series extraction
# --------------------------------------------------------------------------

def _bytes_in_rate(bucket: Sequence[FlowRecord], w: float) -> float:
    return sum(r.bytes_in for r in bucket) / w


def _bytes_out_rate(bucket: Sequence[FlowRecord], w: float) -> float:
    return sum(r.bytes_out for r in bucket) / w


def _mean_duration(bucket: Sequence[FlowRecord], w: float) -> float:
    if not bucket:
        return 0.0
    return sum(r.duration for r in bucket) / len(bucket)


EXTRACTORS: dict[str, Callable[[Sequence[FlowRecord], float], float]] = {
    "bytes_in_rate": _bytes_in_rate,
    "bytes_out_rate": _bytes_out_rate,
    "mean_duration": _mean_duration,
}


def bucket_index(t: float, start: float, w: float) -> int:
    """Index k such that start + k*w <= t < start + (k+1)*w."""
    k = math.floor((t - start) / w)
    # floor of the quotient can land one off when t sits on a boundary
    while start + (k + 1) * w <= t:
        k += 1
    while k > 0 and start + k * w > t:
        k -= 1
    return k


def sort_records(records: Iterable[FlowRecord]) -> list[FlowRecord]:
    return sorted(records, key=lambda r: r.timestamp)


def extract_sequence(records: Sequence[FlowRecord], c: Characteristic, window_seconds: float,
                     start: float | None = None, n_windows: int | None = None) -> TrafficSequence:
    """Aggregate records into consecutive windows of ``window_seconds``.

    Window ``k`` covers ``[start + k*w, start + (k+1)*w)``; ``start`` defaults to
    the first timestamp and ``n_windows`` to as many windows as needed to reach
    the last one. Records outside the covered span are ignored.
    """
    if window_seconds <= 0:
        raise ValidationError("window_seconds must be positive")
    if not records:
        raise ValidationError("empty stream")
    try:
        agg = EXTRACTORS[c.extractor]
    except KeyError:
        raise ValidationError(f"unknown extractor {c.extractor!r}") from None
    ordered = sort_records(records)
    if start is None:
        start = ordered[0].timestamp
    if n_windows is None:
        n_windows = bucket_index(ordered[-1].timestamp, start, window_seconds) + 1
    buckets: list[list[FlowRecord]] = [[] for _ in range(n_windows)]
    for r in ordered:
        if r.timestamp < start:
            continue
        k = bucket_index(r.timestamp, start, window_seconds)
        if k < n_windows:
            buckets[k].append(r)
    values = tuple(float(agg(b, window_seconds)) for b in buckets)
    return TrafficSequence(c.id, values, window_seconds)
