"""Three-layer detection engine: training, detection and feedback.

Flows first meet the surface barrier one at a time. Flows that pass are
grouped into analysis windows of ``segment_len`` sampling buckets; the innate
detectors score each window, and windows they do not flag go to the adaptive
layer record by record.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import analyzer as an
from .barrier import BarrierRuleSet, BarrierVerdict, check
from .config import SystemConfig, config_from_text
from .errors import (ModelVersionError, NotTrainedError, ParseError, PatternConflictError,
                     TrainingError, ValidationError)
from .innate import (NONSELF, SELF, InnateVerdict, Pattern, PatternSet, add_pattern,
                     classify_sequence, is_active, learn_patterns_from_training)
from .optimizer import ProjectionModel, fit_projection, project_matrix
from .traffic import FlowRecord, Label, LabeledDataset, bucket_index, extract_sequence

log = logging.getLogger(__name__)

MODEL_MAGIC = "immunids-model v1"
LAYER_ORDER = {"surface": 0, "innate": 1, "adaptive": 2, "none": 3}


@dataclass
class TrainedSystem:
    config: SystemConfig
    barrier: BarrierRuleSet = field(default_factory=BarrierRuleSet)
    pattern_sets: dict[str, PatternSet] = field(default_factory=dict)
    projection: ProjectionModel | None = None
    dims: list = field(default_factory=list)
    global_fn: an.GlobalFunction | None = None
    store: an.FeedbackStore | None = None
    benign_ips: set[str] = field(default_factory=set)
    benign_ports: set[int] = field(default_factory=set)
    phase: str = "untrained"
    revision: int = 0
    model_version: tuple[int, str] = (0, "")
    model_revision: int = 0

    @classmethod
    def empty(cls, config: SystemConfig | None = None, instance_id: str | None = None) -> "TrainedSystem":
        config = config or SystemConfig()
        if instance_id is not None:
            config = dataclasses.replace(config, instance_id=instance_id)
        system = cls(config)
        system.store = an.FeedbackStore(config.feedback_store_bound)
        for c in config.characteristics:
            system.pattern_sets[c] = PatternSet(c)
        return system

    @property
    def instance_id(self) -> str:
        return self.config.instance_id

    def rename(self, instance_id: str):
        """Give the system a new instance identity; a locally built model moves with it."""
        if self.model_version[1] == self.instance_id:
            self.model_version = (self.model_version[0], instance_id)
        self.config = dataclasses.replace(self.config, instance_id=instance_id)

    def tick(self) -> int:
        self.revision += 1
        return self.revision

    def copy(self) -> "TrainedSystem":
        return copy.deepcopy(self)

    def has_model(self) -> bool:
        return self.projection is not None and self.global_fn is not None

    def adaptive_probabilities(self, flows: Sequence[FlowRecord]) -> list[float]:
        if not flows:
            return []
        z = project_matrix(self.projection, np.array([f.feature_vector() for f in flows]))
        return [an.evaluate(self.dims, self.global_fn, row) for row in z]

    def insert_pattern(self, characteristic: str, label: str, sequence, origin: str,
                       revision: int | None = None) -> bool:
        """Store a pattern under a fresh local id. Returns False when the sequence is already known."""
        pats = self.pattern_sets[characteristic]
        pattern = Pattern(pats.fresh_id(f"{self.instance_id}:"), label, tuple(sequence), characteristic,
                          origin, self.revision if revision is None else revision)
        return add_pattern(pats, pattern).added


@dataclass(frozen=True)
class DetectionReport:
    report_id: str
    verdict: str
    deciding_layer: str
    probability: float
    flow_indices: tuple[int, ...]
    window: int | None = None
    barrier: BarrierVerdict | None = None
    innate: dict[str, InnateVerdict] | None = None
    adaptive_probabilities: tuple[float, ...] | None = None
    sequences: dict[str, tuple[float, ...]] | None = None
    flows: tuple[FlowRecord, ...] = ()
    adaptive_threshold: float = 0.5

    @property
    def offending_flows(self) -> tuple[FlowRecord, ...]:
        """Flows blamed for an intrusion: adaptive hits when the adaptive layer fired, else all."""
        if self.deciding_layer == "adaptive" and self.adaptive_probabilities is not None:
            hits = tuple(f for f, p in zip(self.flows, self.adaptive_probabilities)
                         if p >= self.adaptive_threshold)
            if hits:
                return hits
        return self.flows

    def detail(self) -> str:
        if self.barrier is not None and self.barrier.matched:
            kind, value = self.barrier.matched_rule
            return f"rule={kind}:{value}"
        if self.innate:
            cid, verdict = max(self.innate.items(), key=lambda kv: (kv[1].probability, -list(self.innate).index(kv[0])))
            nearest = verdict.nearest_nonself if verdict.probability >= 0.5 else verdict.nearest_self
            return f"pattern={nearest[0]}"
        return "-"

    def to_line(self) -> str:
        return f"{self.report_id} {self.verdict} {self.deciding_layer} {self.probability:.4f} {self.detail()}"

    def to_structured(self) -> str:
        lines = [f"report={self.report_id}", f"verdict={self.verdict}", f"layer={self.deciding_layer}",
                 f"probability={self.probability:.4f}",
                 "flows=" + ",".join(str(i) for i in self.flow_indices)]
        if self.window is not None:
            lines.append(f"window={self.window}")
        if self.barrier is not None:
            lines.append(f"barrier.matched={'true' if self.barrier.matched else 'false'}")
            if self.barrier.matched_rule:
                lines.append(f"barrier.rule={self.barrier.matched_rule[0]}:{self.barrier.matched_rule[1]}")
        for cid, v in (self.innate or {}).items():
            lines.append(f"innate.{cid}.probability={v.probability:.4f}")
            lines.append(f"innate.{cid}.nearest_self={v.nearest_self[0]}:{v.nearest_self[1]:.6g}")
            lines.append(f"innate.{cid}.nearest_nonself={v.nearest_nonself[0]}:{v.nearest_nonself[1]:.6g}")
        if self.adaptive_probabilities is not None:
            lines.append("adaptive.probabilities=" + ",".join(f"{p:.4f}" for p in self.adaptive_probabilities))
        lines.append("end")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _flow_values(flow: FlowRecord):
    return (("ip", flow.src_ip), ("ip", flow.dst_ip), ("port", flow.src_port), ("port", flow.dst_port))


def _add_barrier_values(system: TrainedSystem, flows: Iterable[FlowRecord], origin: str) -> int:
    """Add the flows' IPs and ports as rules, skipping values seen in benign traffic."""
    added = 0
    for flow in flows:
        for kind, value in _flow_values(flow):
            benign = system.benign_ips if kind == "ip" else system.benign_ports
            if value in benign:
                continue
            if system.barrier.add(kind, value, origin, system.revision):
                added += 1
    return added


def _remember_benign(system: TrainedSystem, flows: Iterable[FlowRecord]):
    for flow in flows:
        system.benign_ips.update((flow.src_ip, flow.dst_ip))
        system.benign_ports.update((flow.src_port, flow.dst_port))


def _fit_adaptive(system: TrainedSystem, data: LabeledDataset):
    cfg = system.config
    x = data.matrix()
    y = an.binary_labels(data.labels())
    system.projection = fit_projection(x, cfg.pca_p if cfg.pca_p is None else min(cfg.pca_p, x.shape[1]),
                                       cfg.pca_variance_target, cfg.standardize)
    system.store.extend(x, y)
    _retrain(system)


def _retrain(system: TrainedSystem):
    x, y = system.store.matrix()
    system.dims, system.global_fn = an.train_analyzer(project_matrix(system.projection, x), y,
                                                      system.config.analyzer_config())
    system.model_version = (system.model_version[0] + 1, system.instance_id)
    system.model_revision = system.tick()


def train(config: SystemConfig, data: LabeledDataset, seed_rules: BarrierRuleSet | None = None,
          seed_patterns: Iterable[Pattern] | None = None) -> TrainedSystem:
    """Train all three layers on a labeled dataset containing normal and attack records."""
    if not data.records:
        raise TrainingError("training data is empty")
    kinds = {r.label.kind for r in data.records}
    missing = [k for k in ("normal", "attack") if k not in kinds]
    if missing:
        raise TrainingError(f"training data has no {' or '.join(missing)} records")

    system = TrainedSystem.empty(config)
    rev = system.tick()
    if seed_rules is not None:
        for kind, value in seed_rules.rules():
            system.barrier.add(kind, value, seed_rules.provenance[(kind, value)].origin, rev)
    for p in seed_patterns or ():
        if p.characteristic in system.pattern_sets:
            system.insert_pattern(p.characteristic, p.label, p.sequence, "external_feed", rev)

    for c in config.characteristic_objects():
        learned = learn_patterns_from_training(data, c, config.window_seconds, config.segment_len)
        for p in learned:
            try:
                system.insert_pattern(c.id, p.label, p.sequence, "training", rev)
            except PatternConflictError as exc:
                log.warning("training pattern skipped: %s", exc)
        if not is_active(system.pattern_sets[c.id]):
            log.warning("detector %s lacks self or nonself patterns and stays inactive", c.id)

    normal = [r for r in data.records if r.label.is_normal]
    attacks = [r for r in data.records if r.label.is_attack]
    _remember_benign(system, normal)
    _add_barrier_values(system, attacks, "training_feedback")

    _fit_adaptive(system, data)
    system.phase = "trained"
    return system


def training_accuracy(system: TrainedSystem, data: LabeledDataset) -> float:
    probs = system.adaptive_probabilities(data.records)
    truth = an.binary_labels(data.labels())
    pred = np.array([p >= system.config.adaptive_threshold for p in probs], dtype=int)
    return float((pred == truth).mean())


# --------------------------------------------------------------------------
# Detection
# --------------------------------------------------------------------------

def detect(system: TrainedSystem, flows: Sequence[FlowRecord]) -> list[DetectionReport]:
    """One report per barrier-matched flow and one per analysed window, in input order."""
    if system.phase != "trained":
        raise NotTrainedError("detect requires a trained system")
    if not flows:
        raise ValidationError("no flows to analyse")
    cfg = system.config
    w = cfg.window_seconds
    span = w * cfg.segment_len
    t0 = min(f.timestamp for f in flows)
    t_last = max(f.timestamp for f in flows)
    last_segment = bucket_index(t_last, t0, span)

    reports: list[tuple[int, DetectionReport]] = []
    windows: dict[int, list[int]] = {}
    for i, flow in enumerate(flows):
        verdict = check(flow, system.barrier)
        if verdict.matched:
            reports.append((i, DetectionReport(f"F{i:06d}", "intrusion", "surface", 1.0, (i,),
                                               barrier=verdict, flows=(flow,),
                                               adaptive_threshold=cfg.adaptive_threshold)))
        else:
            windows.setdefault(bucket_index(flow.timestamp, t0, span), []).append(i)

    active = [c for c in cfg.characteristic_objects() if is_active(system.pattern_sets[c.id])]
    for k in sorted(windows):
        idx = tuple(windows[k])
        members = [flows[i] for i in idx]
        start = t0 + k * span
        n_windows = cfg.segment_len
        if k == last_segment:
            n_windows = min(n_windows, bucket_index(t_last, start, w) + 1)
        sequences, innate = {}, {}
        for c in active:
            seq = extract_sequence(members, c, w, start=start, n_windows=n_windows)
            sequences[c.id] = seq.values
            innate[c.id] = classify_sequence(seq, system.pattern_sets[c.id])
        common = dict(flow_indices=idx, window=k, sequences=sequences, flows=tuple(members),
                      adaptive_threshold=cfg.adaptive_threshold)
        top = max((v.probability for v in innate.values()), default=None)
        if top is not None and top >= cfg.innate_threshold:
            report = DetectionReport(f"W{k:06d}", "intrusion", "innate", top, innate=innate, **common)
        else:
            probs = tuple(system.adaptive_probabilities(members))
            p = max(probs)
            fired = p >= cfg.adaptive_threshold
            report = DetectionReport(f"W{k:06d}", "intrusion" if fired else "clean",
                                     "adaptive" if fired else "none", p, innate=innate,
                                     adaptive_probabilities=probs, **common)
        reports.append((idx[0], report))
    reports.sort(key=lambda pair: pair[0])
    return [r for _, r in reports]


# --------------------------------------------------------------------------
# Feedback
# --------------------------------------------------------------------------

@dataclass
class FeedbackSummary:
    rules_added: int = 0
    patterns_added: int = 0
    rows_appended: int = 0
    conflicts: list[str] = field(default_factory=list)


def _as_label(value) -> Label:
    if isinstance(value, Label):
        return value
    text = str(value).strip()
    if text in ("intrusion", "attack"):
        return Label.attack()
    if text in ("clean", "normal"):
        return Label.normal()
    return Label.from_text(text)


def feedback_with_summary(system: TrainedSystem, confirmed) -> tuple[TrainedSystem, FeedbackSummary]:
    summary = FeedbackSummary()
    confirmed = list(confirmed)
    if not confirmed:
        return system, summary
    system = system.copy()
    system.tick()
    rows, row_labels = [], []
    for report, final in confirmed:
        label = _as_label(final)
        if label.kind == "unlabeled":
            raise ValidationError(f"confirmation for {report.report_id} carries no label")
        attack = label.is_attack
        blamed = report.offending_flows if attack else report.flows
        if attack:
            summary.rules_added += _add_barrier_values(system, blamed, "detection_feedback")
        else:
            _remember_benign(system, blamed)
        for cid, seq in (report.sequences or {}).items():
            if cid not in system.pattern_sets:
                continue
            try:
                if system.insert_pattern(cid, NONSELF if attack else SELF, seq, "detection_feedback"):
                    summary.patterns_added += 1
            except PatternConflictError as exc:
                summary.conflicts.append(f"{report.report_id}/{cid}: {exc}")
                log.warning("feedback pattern conflict in %s: %s", report.report_id, exc)
        for flow in blamed:
            rows.append(flow.feature_vector())
            row_labels.append(an.ATTACK if attack else an.NORMAL)
    if rows:
        summary.rows_appended = system.store.extend(rows, row_labels)
        _retrain(system)
    return system, summary


def feedback(system: TrainedSystem, confirmed) -> TrainedSystem:
    """Fold confirmed verdicts back into every layer; barrier rules are never removed."""
    return feedback_with_summary(system, confirmed)[0]


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def save_system(system: TrainedSystem) -> str:
    sections = [MODEL_MAGIC, "[config]", system.config.to_text().rstrip("\n"), "[barrier]"]
    sections.append(system.barrier.to_text().rstrip("\n"))
    sections.append("[benign]")
    sections += [f"ip {ip}" for ip in sorted(system.benign_ips)]
    sections += [f"port {p}" for p in sorted(system.benign_ports)]
    sections.append("[patterns]")
    for cid in system.config.characteristics:
        sections += [p.to_text() for p in system.pattern_sets[cid].patterns]
    sections.append("[state]")
    sections.append(f"phase {system.phase}")
    sections.append(f"revision {system.revision}")
    sections.append(f"model_version {system.model_version[0]} {system.model_version[1] or '-'}")
    sections.append(f"model_revision {system.model_revision}")
    if system.has_model():
        sections.append("[projection]")
        sections.append(system.projection.to_text().rstrip("\n"))
        sections.append("[analyzer]")
        sections.append(an.analyzer_to_text(system.dims, system.global_fn).rstrip("\n"))
    sections.append("[store]")
    sections.append(system.store.to_text().rstrip("\n"))
    return "\n".join(s for s in sections if s != "") + "\n"


def load_system(text: str) -> TrainedSystem:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        found = lines[0].strip() if lines else "<empty>"
        raise ModelVersionError(f"incompatible model file: expected {MODEL_MAGIC!r}, found {found!r}")
    sections: dict[str, list[str]] = {}
    current = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
        elif line.strip():
            raise ParseError("content before first section")

    config = config_from_text("\n".join(sections.get("config", [])))
    system = TrainedSystem.empty(config)
    system.barrier = BarrierRuleSet.from_text("\n".join(sections.get("barrier", [])))
    for line in sections.get("benign", []):
        kind, value = line.split()
        if kind == "ip":
            system.benign_ips.add(value)
        else:
            system.benign_ports.add(int(value))
    for n, line in enumerate(sections.get("patterns", []), start=1):
        if line.strip():
            p = Pattern.from_text(line, n)
            add_pattern(system.pattern_sets[p.characteristic], p)
    state = dict(line.split(" ", 1) for line in sections.get("state", []) if line.strip())
    system.phase = state.get("phase", "untrained")
    system.revision = int(state.get("revision", 0))
    version, origin = state.get("model_version", "0 -").split()
    system.model_version = (int(version), "" if origin == "-" else origin)
    system.model_revision = int(state.get("model_revision", 0))
    if "projection" in sections:
        system.projection = ProjectionModel.from_text("\n".join(sections["projection"]))
        system.dims, system.global_fn = an.analyzer_from_text("\n".join(sections["analyzer"]))
    if "store" in sections:
        system.store = an.FeedbackStore.from_text("\n".join(sections["store"]))
    return system
