import dataclasses

import numpy as np
import pytest

from conftest import FEATURES, flow, toy_records
from immunids import pipeline
from immunids.barrier import BarrierRuleSet
from immunids.config import SystemConfig
from immunids.errors import ModelVersionError, NotTrainedError, TrainingError, ValidationError
from immunids.innate import NONSELF, SELF, Pattern
from immunids.pipeline import LAYER_ORDER, TrainedSystem, detect, feedback, feedback_with_summary, train
from immunids.traffic import Label, LabeledDataset, bucket_index


def attacker_stream(start=1000.0, n=24, port=31337, ip="10.9.9.9"):
    """Normal-looking traffic with an intruder talking to ``port`` in the middle third."""
    out = []
    rng = np.random.default_rng(9)
    for k in range(n):
        t = start + k
        if n // 3 <= k < 2 * n // 3:
            out.append(flow(t, src=ip, dport=port, bytes_in=5000.0, bytes_out=40.0, duration=0.0,
                            features=(250.0, 1.0)))
        else:
            out.append(flow(t, src="192.168.1.10", sport=40000, bytes_in=float(rng.integers(80, 160)),
                            bytes_out=1200.0, duration=2.0, features=(5.0, 0.0)))
    return out


@pytest.fixture
def trained(toy_dataset, toy_config):
    return train(toy_config, toy_dataset)


def expected_report_count(system, flows):
    """Counting oracle: barrier-matched flows plus distinct windows of the rest."""
    cfg = system.config
    span = cfg.window_seconds * cfg.segment_len
    t0 = min(f.timestamp for f in flows)
    hits = [f for f in flows if f.src_ip in system.barrier.malicious_ips
            or f.dst_ip in system.barrier.malicious_ips or f.src_port in system.barrier.malicious_ports
            or f.dst_port in system.barrier.malicious_ports]
    rest = [f for f in flows if f not in hits]
    return len(hits) + len({bucket_index(f.timestamp, t0, span) for f in rest})


# ------------------------------------------------------------------- train ---

def test_train_postconditions(trained):
    assert trained.phase == "trained"
    for pats in trained.pattern_sets.values():
        assert pats.count(SELF) >= 1 and pats.count(NONSELF) >= 1
    assert trained.projection is not None and len(trained.dims) == trained.projection.p


def test_training_extracts_attack_port_and_ip(trained):
    assert ("port", 6667) in trained.barrier
    assert ("ip", "10.0.0.66") in trained.barrier
    # values also seen in normal traffic are never blocked
    assert ("ip", "192.168.1.1") not in trained.barrier
    assert ("port", 80) not in trained.barrier


def test_seed_rules_kept(toy_dataset, toy_config):
    seed = BarrierRuleSet()
    seed.add("port", 4444)
    seed.add("ip", "6.6.6.6")
    system = train(toy_config, toy_dataset, seed_rules=seed)
    assert set(seed.rules()) <= set(system.barrier.rules())
    assert system.barrier.provenance[("port", 4444)].origin == "external_feed"


def test_seed_patterns_added(toy_dataset, toy_config):
    p = Pattern("feed-1", NONSELF, (1.0, 2.0, 3.0, 4.0), "bytes_in_rate")
    system = train(toy_config, toy_dataset, seed_patterns=[p])
    assert system.pattern_sets["bytes_in_rate"].find((1.0, 2.0, 3.0, 4.0)) is not None


def test_train_errors(toy_config):
    normal_only = [r for r in toy_records() if r.label.is_normal]
    with pytest.raises(TrainingError, match="attack"):
        train(toy_config, LabeledDataset(normal_only, FEATURES))
    with pytest.raises(TrainingError):
        train(toy_config, LabeledDataset([], FEATURES))


def test_training_accuracy(trained, toy_dataset):
    assert pipeline.training_accuracy(trained, toy_dataset) == 1.0


# ------------------------------------------------------------------ detect ---

def test_detect_requires_trained_system():
    with pytest.raises(NotTrainedError):
        detect(TrainedSystem.empty(), [flow(0)])


def test_detect_requires_flows(trained):
    with pytest.raises(ValidationError):
        detect(trained, [])


def test_barrier_hit_is_surface_only(trained):
    reports = detect(trained, [flow(0, src="10.0.0.66")])
    r = reports[0]
    assert (r.deciding_layer, r.probability, r.verdict) == ("surface", 1.0, "intrusion")
    assert r.innate is None and r.adaptive_probabilities is None
    assert r.to_line() == "F000000 intrusion surface 1.0000 rule=ip:10.0.0.66"


def test_self_traffic_is_clean(toy_config):
    normal = toy_records(n_blocks=1, block=16, seed=0)
    attack = toy_records(n_blocks=2, block=16, seed=0, start=16.0)[16:]
    system = train(toy_config, LabeledDataset(normal + attack, FEATURES))
    reports = detect(system, normal)
    assert reports and all(r.verdict == "clean" and r.deciding_layer == "none" for r in reports)
    assert all(r.probability < system.config.adaptive_threshold for r in reports)


def test_nonself_window_decides_innate(trained):
    pats = trained.pattern_sets["bytes_in_rate"]
    target = next(p for p in pats if p.label == NONSELF)
    # one flow per window carrying the pattern value, nothing on the barrier
    flows = [flow(100.0 + k, src="192.168.1.10", sport=40000, dport=80, bytes_in=v)
             for k, v in enumerate(target.sequence)]
    (report,) = detect(trained, flows)
    assert report.deciding_layer == "innate"
    assert report.innate["bytes_in_rate"].probability == 1.0
    assert report.probability == 1.0
    assert report.adaptive_probabilities is None


def test_layer_invariants_and_report_count(trained):
    flows = toy_records(n_blocks=4, block=10, seed=3, start=500.0) + attacker_stream(start=560.0)
    reports = detect(trained, flows)
    assert len(reports) == expected_report_count(trained, flows)
    covered = sorted(i for r in reports for i in r.flow_indices)
    assert covered == list(range(len(flows)))
    for r in reports:
        if r.deciding_layer == "surface":
            assert r.probability == 1.0 and r.innate is None
        if r.deciding_layer == "innate":
            assert r.adaptive_probabilities is None
            assert r.probability >= trained.config.innate_threshold
        if r.deciding_layer == "adaptive":
            assert r.probability >= trained.config.adaptive_threshold
        assert 0.0 <= r.probability <= 1.0
    firsts = [r.flow_indices[0] for r in reports]
    assert firsts == sorted(firsts)


def test_detect_is_deterministic(trained):
    flows = toy_records(n_blocks=3, seed=5, start=300.0)
    a = [r.to_structured() for r in detect(trained, flows)]
    b = [r.to_structured() for r in detect(trained.copy(), flows)]
    assert a == b


def test_structured_report_format(trained):
    (r,) = detect(trained, [flow(0, dport=6667)])
    text = r.to_structured()
    assert text.splitlines()[0] == "report=F000000" and text.endswith("end")
    assert "barrier.rule=port:6667" in text


# ---------------------------------------------------------------- feedback ---

def test_empty_feedback_is_fixed_point(trained):
    assert pipeline.save_system(feedback(trained, [])) == pipeline.save_system(trained)


def test_confirmed_intrusion_hardens_to_surface(trained):
    stream = attacker_stream()
    before = detect(trained, stream)
    (idx,) = [k for k, f in enumerate(stream) if f.dst_port == 31337][:1]
    report = next(r for r in before if idx in r.flow_indices)
    assert report.deciding_layer != "surface"
    hardened, summary = feedback_with_summary(trained, [(report, "intrusion")])
    assert summary.rules_added >= 1 and ("port", 31337) in hardened.barrier
    after = detect(hardened, stream)
    for k, f in enumerate(stream):
        if f.dst_port != 31337:
            continue
        old = next(r for r in before if k in r.flow_indices)
        new = next(r for r in after if k in r.flow_indices)
        assert new.deciding_layer == "surface" and new.probability == 1.0
        assert LAYER_ORDER[new.deciding_layer] <= LAYER_ORDER[old.deciding_layer]
        assert new.probability >= old.probability


def test_feedback_appends_rows_and_patterns(trained):
    stream = attacker_stream()
    reports = detect(trained, stream)
    target = next(r for r in reports if any(f.dst_port == 31337 for f in r.flows))
    new, summary = feedback_with_summary(trained, [(target, "intrusion")])
    assert summary.rows_appended == len(target.offending_flows)
    assert len(new.store) == len(trained.store) + summary.rows_appended
    assert new.model_version[0] == trained.model_version[0] + 1
    # the input system is untouched
    assert ("port", 31337) not in trained.barrier


def test_false_positive_becomes_self_pattern(trained):
    stream = toy_records(n_blocks=1, block=4, seed=11, start=700.0)
    (report,) = detect(trained, stream)
    new, summary = feedback_with_summary(trained, [(report, "normal")])
    assert summary.conflicts == []
    for cid, values in report.sequences.items():
        p = new.pattern_sets[cid].find(values)
        assert p is not None and p.label == SELF
    assert len(new.barrier) == len(trained.barrier)


def test_feedback_rejects_unlabeled(trained):
    (report,) = detect(trained, [flow(0, dport=6667)])
    with pytest.raises(ValidationError):
        feedback(trained, [(report, Label.unlabeled())])


# ------------------------------------------------------------- persistence ---

def test_save_load_round_trip(trained):
    text = pipeline.save_system(trained)
    loaded = pipeline.load_system(text)
    assert pipeline.save_system(loaded) == text
    flows = toy_records(n_blocks=2, seed=8, start=200.0)
    assert ([r.to_line() for r in detect(loaded, flows)]
            == [r.to_line() for r in detect(trained, flows)])


def test_load_rejects_other_versions(trained):
    text = pipeline.save_system(trained)
    with pytest.raises(ModelVersionError):
        pipeline.load_system(text.replace("immunids-model v1", "immunids-model v2", 1))


def test_training_is_deterministic(toy_dataset, toy_config):
    a = pipeline.save_system(train(toy_config, toy_dataset))
    b = pipeline.save_system(train(dataclasses.replace(toy_config), toy_dataset))
    assert a == b


def test_rules_model_kind(toy_dataset):
    system = train(SystemConfig(segment_len=4, model_kind="rules"), toy_dataset)
    assert pipeline.training_accuracy(system, toy_dataset) >= 0.9
    assert pipeline.load_system(pipeline.save_system(system)).global_fn is not None
