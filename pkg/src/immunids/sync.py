"""Knowledge exchange between engine instances.

Instances only ever talk to their direct neighbours. Every round, each queued
update travels one hop, fragmented and CRC-checked; a receiver checks the
sender's shared token, applies updates it has not seen, and queues them for
its own neighbours. Transport is an in-process, round-based simulation.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from . import analyzer as an
from .barrier import BarrierRuleSet, merge_rules
from .errors import (IncompleteError, IntegrityError, ParseError, PatternConflictError,
                     ValidationError)
from .innate import Pattern, add_pattern
from .optimizer import ProjectionModel
from .pipeline import TrainedSystem

UPDATE_FORMAT = "immunids-update v1"
MIN_FRAGMENT_SIZE = 64


# --------------------------------------------------------------------------
# Knowledge updates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSnapshot:
    version: int
    origin: str
    projection: str
    analyzer: str

    @property
    def key(self) -> tuple[int, str]:
        return (self.version, self.origin)


@dataclass
class KnowledgeUpdate:
    origin_instance: str
    sequence_number: int
    barrier_delta: BarrierRuleSet = field(default_factory=BarrierRuleSet)
    pattern_delta: list[Pattern] = field(default_factory=list)
    model_snapshot: ModelSnapshot | None = None

    @property
    def update_id(self) -> tuple[str, int]:
        return (self.origin_instance, self.sequence_number)

    def is_empty(self) -> bool:
        return not self.barrier_delta and not self.pattern_delta and self.model_snapshot is None

    def to_bytes(self) -> bytes:
        doc = {
            "format": UPDATE_FORMAT,
            "origin": self.origin_instance,
            "sequence": self.sequence_number,
            "barrier": self.barrier_delta.to_text(),
            "patterns": [p.to_text() for p in self.pattern_delta],
            "model": None if self.model_snapshot is None else {
                "version": self.model_snapshot.version,
                "origin": self.model_snapshot.origin,
                "projection": self.model_snapshot.projection,
                "analyzer": self.model_snapshot.analyzer,
            },
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "KnowledgeUpdate":
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"bad update payload: {exc}") from None
        if doc.get("format") != UPDATE_FORMAT:
            raise ParseError(f"unsupported update format {doc.get('format')!r}")
        model = doc["model"]
        return cls(
            doc["origin"], int(doc["sequence"]),
            BarrierRuleSet.from_text(doc["barrier"]),
            [Pattern.from_text(line) for line in doc["patterns"]],
            None if model is None else ModelSnapshot(int(model["version"]), model["origin"],
                                                     model["projection"], model["analyzer"]),
        )

    def __eq__(self, other):
        return isinstance(other, KnowledgeUpdate) and self.to_bytes() == other.to_bytes()


def build_update(system: TrainedSystem, since: int) -> KnowledgeUpdate | None:
    """Locally learned knowledge newer than revision ``since``; None when there is nothing to send.

    Knowledge received through sync is excluded; it spreads by forwarding.
    """
    barrier = system.barrier.since(since, exclude_origins=("sync",))
    patterns = []
    for cid in system.config.characteristics:
        patterns += system.pattern_sets[cid].since(since, exclude_origins=("sync",))
    snapshot = None
    if (system.has_model() and system.model_version[1] == system.instance_id
            and system.model_revision > since):
        snapshot = ModelSnapshot(system.model_version[0], system.model_version[1],
                                 system.projection.to_text(),
                                 an.analyzer_to_text(system.dims, system.global_fn))
    update = KnowledgeUpdate(system.instance_id, system.revision, barrier, patterns, snapshot)
    return None if update.is_empty() else update


@dataclass
class ApplyReport:
    rules_added: int = 0
    patterns_added: int = 0
    model_adopted: bool = False
    conflicts: list[str] = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return bool(self.rules_added or self.patterns_added or self.model_adopted)


def apply_update(system: TrainedSystem, u: KnowledgeUpdate) -> ApplyReport:
    """Merge an authenticated update into ``system`` in place."""
    report = ApplyReport()
    rev = system.revision + 1
    before = len(system.barrier)
    remote = BarrierRuleSet()
    for kind, value in u.barrier_delta.rules():
        remote.add(kind, value, "sync", rev)
    system.barrier = merge_rules(system.barrier, remote)
    report.rules_added = len(system.barrier) - before

    for p in u.pattern_delta:
        pats = system.pattern_sets.get(p.characteristic)
        if pats is None:
            continue
        pid = p.id if pats.get(p.id) is None else pats.fresh_id(f"{system.instance_id}:")
        try:
            if add_pattern(pats, Pattern(pid, p.label, p.sequence, p.characteristic, "sync", rev)).added:
                report.patterns_added += 1
        except PatternConflictError as exc:
            report.conflicts.append(f"{p.id}: {exc}")

    snap = u.model_snapshot
    if snap is not None and snap.key > tuple(system.model_version):
        system.projection = ProjectionModel.from_text(snap.projection)
        system.dims, system.global_fn = an.analyzer_from_text(snap.analyzer)
        system.model_version = snap.key
        system.model_revision = rev
        report.model_adopted = True
        if system.phase == "untrained":
            system.phase = "trained"
    if report.changed:
        system.revision = rev
    return report


# --------------------------------------------------------------------------
# Fragmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Fragment:
    update_id: tuple[str, int]
    index: int
    total: int
    payload: bytes
    checksum: int
    whole_checksum: int | None = None

    _HEAD = struct.Struct(">2sBH")
    _BODY = struct.Struct(">QIIIBII")

    def to_bytes(self) -> bytes:
        origin = self.update_id[0].encode("utf-8")
        has_whole = self.whole_checksum is not None
        return (self._HEAD.pack(b"KF", 1, len(origin)) + origin
                + self._BODY.pack(self.update_id[1], self.index, self.total, self.checksum,
                                  int(has_whole), self.whole_checksum or 0, len(self.payload))
                + self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Fragment":
        try:
            magic, version, olen = cls._HEAD.unpack_from(data, 0)
            if magic != b"KF" or version != 1:
                raise ParseError("not a knowledge fragment")
            pos = cls._HEAD.size
            origin = data[pos:pos + olen].decode("utf-8")
            pos += olen
            seq, index, total, crc, has_whole, whole, plen = cls._BODY.unpack_from(data, pos)
            pos += cls._BODY.size
        except (struct.error, UnicodeDecodeError) as exc:
            raise ParseError(f"truncated fragment: {exc}") from None
        payload = data[pos:pos + plen]
        if len(payload) != plen:
            raise ParseError("truncated fragment payload")
        return cls((origin, seq), index, total, payload, crc, whole if has_whole else None)


def fragment_update(u: KnowledgeUpdate, fragment_size: int) -> list[Fragment]:
    if fragment_size < MIN_FRAGMENT_SIZE:
        raise ValidationError(f"fragment_size must be at least {MIN_FRAGMENT_SIZE} bytes")
    data = u.to_bytes()
    chunks = [data[i:i + fragment_size] for i in range(0, len(data), fragment_size)] or [b""]
    whole = zlib.crc32(data)
    return [Fragment(u.update_id, i, len(chunks), chunk, zlib.crc32(chunk), whole if i == 0 else None)
            for i, chunk in enumerate(chunks)]


def reassemble(frags: Iterable[Fragment]) -> KnowledgeUpdate:
    """Rebuild an update from fragments given in any order; identical duplicates are ignored."""
    frags = list(frags)
    if not frags:
        raise IncompleteError(None, [])
    uid, total = frags[0].update_id, frags[0].total
    parts: dict[int, Fragment] = {}
    for f in frags:
        if f.update_id != uid or f.total != total:
            raise IntegrityError(f"fragment {f.index} of {f.update_id} does not belong to update {uid}")
        if not 0 <= f.index < total:
            raise IntegrityError(f"fragment index {f.index} outside 0..{total - 1}")
        if zlib.crc32(f.payload) != f.checksum:
            raise IntegrityError(f"checksum mismatch on fragment {f.index} of {uid}")
        seen = parts.get(f.index)
        if seen is not None:
            if seen.payload != f.payload or seen.whole_checksum != f.whole_checksum:
                raise IntegrityError(f"conflicting duplicates of fragment {f.index} of {uid}")
            continue
        parts[f.index] = f
    missing = [i for i in range(total) if i not in parts]
    if missing:
        raise IncompleteError(uid, missing)
    data = b"".join(parts[i].payload for i in range(total))
    whole = parts[0].whole_checksum
    if whole is None or zlib.crc32(data) != whole:
        raise IntegrityError(f"whole-update checksum mismatch for {uid}")
    update = KnowledgeUpdate.from_bytes(data)
    if update.update_id != uid:
        raise IntegrityError(f"payload id {update.update_id} differs from fragment id {uid}")
    return update


# --------------------------------------------------------------------------
# Topology
# --------------------------------------------------------------------------

@dataclass
class Topology:
    tokens: dict[str, str] = field(default_factory=dict)
    edges: set[frozenset] = field(default_factory=set)

    @property
    def instances(self) -> list[str]:
        return sorted(self.tokens)

    def add_node(self, node: str, token: str):
        if node in self.tokens:
            raise ValidationError(f"duplicate node {node!r}")
        self.tokens[node] = token

    def add_edge(self, a: str, b: str):
        for n in (a, b):
            if n not in self.tokens:
                raise ValidationError(f"edge references unknown node {n!r}")
        if a == b:
            raise ValidationError(f"self-loop on {a!r}")
        self.edges.add(frozenset((a, b)))

    def neighbors(self, node: str) -> list[str]:
        return sorted(next(iter(e - {node})) for e in self.edges if node in e)

    def distances_from(self, node: str) -> dict[str, int]:
        dist = {node: 0}
        queue = deque([node])
        while queue:
            cur = queue.popleft()
            for nb in self.neighbors(cur):
                if nb not in dist:
                    dist[nb] = dist[cur] + 1
                    queue.append(nb)
        return dist

    def components(self) -> list[list[str]]:
        left, out = set(self.tokens), []
        for node in self.instances:
            if node in left:
                comp = sorted(self.distances_from(node))
                left -= set(comp)
                out.append(comp)
        return out

    def diameter(self) -> int:
        """Largest hop distance within any connected component."""
        return max((max(self.distances_from(n).values()) for n in self.tokens), default=0)

    @classmethod
    def from_text(cls, text: str) -> "Topology":
        topo = cls()
        edges = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "node" and len(parts) == 3:
                try:
                    topo.add_node(parts[1], parts[2])
                except ValidationError as exc:
                    raise ParseError(str(exc), line_no) from None
            elif parts[0] == "edge" and len(parts) == 3:
                edges.append((line_no, parts[1], parts[2]))
            else:
                raise ParseError(f"bad topology line {line!r}", line_no)
        for line_no, a, b in edges:
            try:
                topo.add_edge(a, b)
            except ValidationError as exc:
                raise ParseError(str(exc), line_no) from None
        return topo

    def to_text(self) -> str:
        lines = [f"node {n} {self.tokens[n]}" for n in self.instances]
        lines += [f"edge {a} {b}" for a, b in sorted(tuple(sorted(e)) for e in self.edges)]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Round-based propagation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Delivery:
    sender: str
    token: str
    update: KnowledgeUpdate


def propagate_round(topology: Topology, pending: dict[str, list[KnowledgeUpdate]],
                    presented_tokens: dict[str, str] | None = None,
                    fragment_size: int = 512) -> dict[str, list[Delivery]]:
    """Move every queued update one hop, to each neighbour of its holder.

    Updates cross the link as fragments and are reassembled on arrival. The
    returned inboxes still need the receiver-side auth check (see
    :meth:`Mesh.step`).
    """
    presented = presented_tokens or {}
    inboxes: dict[str, list[Delivery]] = {n: [] for n in topology.instances}
    for sender in topology.instances:
        token = presented.get(sender, topology.tokens[sender])
        for update in pending.get(sender, ()):
            frags = fragment_update(update, fragment_size)
            wire = [Fragment.from_bytes(f.to_bytes()) for f in reversed(frags)]
            for nb in topology.neighbors(sender):
                inboxes[nb].append(Delivery(sender, token, reassemble(wire)))
    return inboxes


@dataclass
class RoundStats:
    sent: int = 0
    received: int = 0
    accepted: int = 0
    rejected_auth: int = 0
    duplicate_dropped: int = 0


TRACE_COLUMNS = ("round", "instance", "sent", "received", "accepted", "rejected_auth", "duplicate_dropped")


class Mesh:
    """Simulated deployment: one :class:`TrainedSystem` per topology node."""

    def __init__(self, topology: Topology, systems: dict[str, TrainedSystem] | None = None,
                 presented_tokens: dict[str, str] | None = None, fragment_size: int = 512):
        self.topology = topology
        self.systems = {n: (systems or {}).get(n) or TrainedSystem.empty(instance_id=n)
                        for n in topology.instances}
        self.presented = dict(presented_tokens or {})
        self.fragment_size = fragment_size
        self.outboxes: dict[str, list[KnowledgeUpdate]] = {n: [] for n in topology.instances}
        self.seen: dict[str, set] = {n: set() for n in topology.instances}
        self.last_built: dict[str, int] = {n: 0 for n in topology.instances}
        self.round = 0
        self.trace: list[tuple] = []
        self.conflicts: list[str] = []

    def _announce_local(self):
        for node in self.topology.instances:
            system = self.systems[node]
            update = build_update(system, self.last_built[node])
            self.last_built[node] = system.revision
            if update is not None:
                self.seen[node].add(update.update_id)
                self.outboxes[node].append(update)

    def pending(self) -> bool:
        return any(self.outboxes.values())

    def step(self) -> dict[str, RoundStats]:
        self.round += 1
        self._announce_local()
        stats = {n: RoundStats() for n in self.topology.instances}
        for node, box in self.outboxes.items():
            stats[node].sent = len(box) * len(self.topology.neighbors(node))
        inboxes = propagate_round(self.topology, self.outboxes, self.presented, self.fragment_size)
        self.outboxes = {n: [] for n in self.topology.instances}
        for node in self.topology.instances:
            st = stats[node]
            accepted = []
            for d in inboxes[node]:
                st.received += 1
                if self.topology.tokens.get(d.sender) != d.token:
                    st.rejected_auth += 1
                else:
                    accepted.append(d.update)
            accepted.sort(key=lambda u: u.update_id)
            for u in accepted:
                if u.update_id in self.seen[node]:
                    st.duplicate_dropped += 1
                    continue
                self.seen[node].add(u.update_id)
                result = apply_update(self.systems[node], u)
                self.conflicts += [f"{node}: {c}" for c in result.conflicts]
                st.accepted += 1
                self.outboxes[node].append(u)
            # knowledge that arrived by sync is not re-announced as local
            self.last_built[node] = self.systems[node].revision
        for node in self.topology.instances:
            s = stats[node]
            self.trace.append((self.round, node, s.sent, s.received, s.accepted, s.rejected_auth,
                               s.duplicate_dropped))
        return stats

    def format_trace(self) -> str:
        rows = [TRACE_COLUMNS] + [tuple(str(v) for v in row) for row in self.trace]
        widths = [max(len(str(r[i])) for r in rows) for i in range(len(TRACE_COLUMNS))]
        return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows) + "\n"

    # -- consistency -------------------------------------------------------

    def knowledge(self, node: str) -> dict[str, object]:
        system = self.systems[node]
        patterns = frozenset((p.characteristic, p.label, p.sequence)
                             for ps in system.pattern_sets.values() for p in ps)
        return {"barrier": system.barrier.value_sets(), "patterns": patterns,
                "model": tuple(system.model_version)}

    def consistent(self, kind: str) -> bool:
        for comp in self.topology.components():
            views = {self._freeze(self.knowledge(n)[kind]) for n in comp}
            if len(views) > 1:
                return False
        return True

    @staticmethod
    def _freeze(value):
        return value if not isinstance(value, list) else tuple(value)


KINDS = ("barrier", "patterns", "model")


@dataclass
class Scenario:
    """Scripted learning events: ``round -> [(instance, kind, args)]`` plus token overrides."""

    events: dict[int, list[tuple[str, str, tuple[str, ...]]]] = field(default_factory=dict)
    presented_tokens: dict[str, str] = field(default_factory=dict)
    max_rounds: int | None = None

    @property
    def last_event_round(self) -> int:
        return max(self.events, default=1)

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        """Parse lines such as ``at 1 A rule port 6667``, ``at 2 B pattern bytes_in_rate nonself 1,2,3``,
        ``at 3 A retrain``, ``token C wrong-secret`` and ``rounds 10``."""
        sc = cls()
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "at" and len(parts) >= 4:
                    rnd = int(parts[1])
                    if rnd < 1:
                        raise ValueError("rounds start at 1")
                    kind = parts[3]
                    if kind not in ("rule", "pattern", "retrain"):
                        raise ValueError(f"unknown event {kind!r}")
                    sc.events.setdefault(rnd, []).append((parts[2], kind, tuple(parts[4:])))
                elif parts[0] == "token" and len(parts) == 3:
                    sc.presented_tokens[parts[1]] = parts[2]
                elif parts[0] == "rounds" and len(parts) == 2:
                    sc.max_rounds = int(parts[1])
                else:
                    raise ValueError(f"bad scenario line {line!r}")
            except ValueError as exc:
                raise ParseError(str(exc), line_no) from None
        return sc


def _apply_event(system: TrainedSystem, kind: str, args: tuple[str, ...]):
    system.tick()
    if kind == "rule":
        if len(args) != 2:
            raise ValidationError("rule event needs: rule <ip|port> <value>")
        system.barrier.add(args[0], args[1], "detection_feedback", system.revision)
    elif kind == "pattern":
        if len(args) != 3:
            raise ValidationError("pattern event needs: pattern <characteristic> <self|nonself> <values>")
        if args[0] not in system.pattern_sets:
            raise ValidationError(f"unknown characteristic {args[0]!r}")
        system.insert_pattern(args[0], args[1], [float(v) for v in args[2].split(",")], "detection_feedback")
    elif kind == "retrain":
        if not system.has_model():
            raise ValidationError(f"instance {system.instance_id} has no model to retrain")
        system.model_version = (system.model_version[0] + 1, system.instance_id)
        system.model_revision = system.revision


@dataclass
class SimulationResult:
    rounds: int
    rounds_to_consistency: dict[str, int | None]
    trace: str
    conflicts: list[str]


def simulate(topology: Topology, scenario: Scenario, systems: dict[str, TrainedSystem] | None = None,
             fragment_size: int = 512) -> SimulationResult:
    """Run the scenario until every knowledge kind is consistent and nothing is in flight."""
    mesh = Mesh(topology, systems, scenario.presented_tokens, fragment_size)
    for node in topology.instances:
        mesh.last_built[node] = 0
    last_event = scenario.last_event_round
    limit = scenario.max_rounds or (last_event + 2 * len(topology.tokens) + 2)
    reached: dict[str, int | None] = {k: None for k in KINDS}
    while mesh.round < limit:
        rnd = mesh.round + 1
        for node, kind, args in scenario.events.get(rnd, ()):
            if node not in mesh.systems:
                raise ValidationError(f"scenario references unknown instance {node!r}")
            _apply_event(mesh.systems[node], kind, args)
        if rnd == last_event:
            # kinds no event disturbed need zero rounds
            for kind in KINDS:
                if mesh.consistent(kind):
                    reached[kind] = rnd - 1
        mesh.step()
        for kind in KINDS:
            ok = mesh.consistent(kind)
            if not ok or mesh.round < last_event:
                reached[kind] = None
            elif reached[kind] is None:
                reached[kind] = mesh.round
        if mesh.round >= last_event and not mesh.pending() and all(v is not None for v in reached.values()):
            break
    rounds = {k: (None if v is None else v - last_event + 1) for k, v in reached.items()}
    return SimulationResult(mesh.round, rounds, mesh.format_trace(), mesh.conflicts)
