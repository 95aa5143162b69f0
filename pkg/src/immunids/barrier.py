"""Surface barrier: crisp matching of flows against known-malicious IPs and ports."""

from __future__ import annotations

import copy
import ipaddress
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ParseError, ValidationError
from .traffic import FlowRecord

ORIGINS = ("external_feed", "training_feedback", "detection_feedback", "sync")


@dataclass(frozen=True)
class Provenance:
    origin: str
    revision: int = 0  # logical insertion time, keeps saved models byte-stable


@dataclass(frozen=True)
class BarrierVerdict:
    matched: bool
    probability: float
    matched_rule: tuple[str, object] | None = None


def _normalize(kind: str, value):
    if kind == "ip":
        try:
            return str(ipaddress.IPv4Address(str(value)))
        except ValueError as exc:
            raise ValidationError(f"invalid IPv4 address {value!r}: {exc}") from None
    if kind == "port":
        try:
            port = int(value)
        except (TypeError, ValueError):
            raise ValidationError(f"invalid port {value!r}") from None
        if isinstance(value, float) and value != port:
            raise ValidationError(f"invalid port {value!r}")
        if not 0 <= port <= 65535:
            raise ValidationError(f"port {port} outside 0-65535")
        return port
    raise ValidationError(f"unknown rule kind {kind!r}")


@dataclass
class BarrierRuleSet:
    malicious_ips: set[str] = field(default_factory=set)
    malicious_ports: set[int] = field(default_factory=set)
    provenance: dict[tuple[str, object], Provenance] = field(default_factory=dict)

    def __len__(self):
        return len(self.malicious_ips) + len(self.malicious_ports)

    def __contains__(self, rule):
        kind, value = rule
        return (kind, _normalize(kind, value)) in self.provenance

    def rules(self) -> list[tuple[str, object]]:
        """All rules in serialization order: IPs (lexicographic) then ports (ascending)."""
        return ([("ip", ip) for ip in sorted(self.malicious_ips)]
                + [("port", p) for p in sorted(self.malicious_ports)])

    def add(self, kind: str, value, origin: str = "external_feed", revision: int = 0) -> bool:
        """Insert a rule. Returns False (and keeps the first provenance) if already present."""
        value = _normalize(kind, value)
        if origin not in ORIGINS:
            raise ValidationError(f"unknown provenance {origin!r}")
        key = (kind, value)
        if key in self.provenance:
            return False
        (self.malicious_ips if kind == "ip" else self.malicious_ports).add(value)
        self.provenance[key] = Provenance(origin, revision)
        return True

    def copy(self) -> "BarrierRuleSet":
        return copy.deepcopy(self)

    def since(self, revision: int, exclude_origins: Iterable[str] = ()) -> "BarrierRuleSet":
        """Rules inserted after ``revision``."""
        exclude = set(exclude_origins)
        out = BarrierRuleSet()
        for (kind, value), prov in self.provenance.items():
            if prov.revision > revision and prov.origin not in exclude:
                out.add(kind, value, prov.origin, prov.revision)
        return out

    def value_sets(self) -> tuple[frozenset, frozenset]:
        return frozenset(self.malicious_ips), frozenset(self.malicious_ports)

    def to_text(self) -> str:
        lines = []
        for kind, value in self.rules():
            prov = self.provenance[(kind, value)]
            lines.append(f"{kind} {value} {prov.origin} {prov.revision}")
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str, first_line: int = 1) -> "BarrierRuleSet":
        rules = cls()
        for offset, line in enumerate(text.splitlines()):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"bad rule line {line!r}", first_line + offset)
            revision = int(parts[3]) if len(parts) == 4 else 0
            try:
                rules.add(parts[0], parts[1], parts[2], revision)
            except ValidationError as exc:
                raise ParseError(str(exc), first_line + offset) from None
        return rules


def check(flow: FlowRecord, rules: BarrierRuleSet) -> BarrierVerdict:
    for kind, value in (("ip", flow.src_ip), ("ip", flow.dst_ip),
                        ("port", flow.src_port), ("port", flow.dst_port)):
        hit = value in (rules.malicious_ips if kind == "ip" else rules.malicious_ports)
        if hit:
            return BarrierVerdict(True, 1.0, (kind, value))
    return BarrierVerdict(False, 0.0, None)


def merge_rules(local: BarrierRuleSet, remote: BarrierRuleSet) -> BarrierRuleSet:
    """Union of both rule sets; on collision the local provenance is kept."""
    merged = local.copy()
    for (kind, value), prov in remote.provenance.items():
        merged.add(kind, value, prov.origin, prov.revision)
    return merged
