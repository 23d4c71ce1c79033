import json

import numpy as np
import pytest

import gazerace.dagger as dagger_mod
from gazerace.attention_net import AttentionNet, AttentionNetConfig
from gazerace.dagger import AggregatedDataset, DaggerSchedule, collect_rollout, run_dagger, train_iteration
from gazerace.expert import MpcExpert, generate_reference
from gazerace.policy import PolicyConfig, PolicyNet, forward_policy, load_policy, make_assembler
from gazerace.render import make_renderer
from gazerace.sim import run_rollout
from helpers import SMALL_POLICY

TRACKS_CFG = PolicyConfig(modality="tracks", **SMALL_POLICY)


@pytest.fixture(scope="module")
def oval_ref(oval):
    return generate_reference(oval, 5.0)


@pytest.fixture(scope="module")
def att_net():
    return AttentionNet(AttentionNetConfig(), seed=0)


@pytest.fixture(scope="module")
def expert_pairs(oval, oval_ref, att_net):
    """Labeled pairs from one clean expert rollout (attention modality, full-size policy)."""
    cfg = PolicyConfig()
    sched = DaggerSchedule(noise_p_start=0, noise_p_end=0, start_jitter=0)
    _, pairs, _ = collect_rollout(None, make_assembler(cfg, att_net), oval_ref, oval, sched, 0, 0, make_renderer(oval))
    return cfg, pairs


def test_default_schedule_totals():
    s = DaggerSchedule()
    assert (s.total_rollouts, s.total_epochs) == (150, 100)
    assert s.noise_p(0) == 0.05 and s.noise_p(4) == pytest.approx(0.25)
    assert np.allclose(s.tau(0), [2.0, 0.5, 0.5, 0.5])
    assert np.allclose(s.tau(2), np.array([2.0, 0.5, 0.5, 0.5]) * 2.25)


def test_schedule_validation():
    with pytest.raises(ValueError, match="rollouts"):
        DaggerSchedule(rollouts=0)
    with pytest.raises(ValueError, match="probabilities"):
        DaggerSchedule(noise_p_end=1.5)


def test_untrained_policy_is_mostly_overridden(oval, oval_ref, att_net):
    cfg = PolicyConfig()
    rlog, pairs, ctrl = collect_rollout(PolicyNet(cfg, 0), make_assembler(cfg, att_net), oval_ref, oval,
                                        DaggerSchedule(), 0, 11, make_renderer(oval))
    assert ctrl.n_expert / len(pairs) >= 0.9
    # labels are the clean expert command even where noise was applied
    assert np.allclose(np.stack([p[1] for p in pairs]), rlog.expert)
    assert "noise" in rlog.source


def test_infinite_threshold_flies_the_policy(oval, oval_ref):
    sched = DaggerSchedule(tau_thrust=1e9, tau_rate=1e9)
    rlog, pairs, ctrl = collect_rollout(PolicyNet(TRACKS_CFG, 0), make_assembler(TRACKS_CFG), oval_ref, oval, sched, 0, 3,
                                        make_renderer(oval))
    assert set(rlog.source) == {"policy"} and ctrl.n_expert == 0
    assert len(pairs) == len(rlog)


def test_zero_noise_zero_threshold_is_behavior_cloning(oval, oval_ref):
    sched = DaggerSchedule(noise_p_start=0, noise_p_end=0, tau_thrust=0, tau_rate=0)
    rlog, _, _ = collect_rollout(PolicyNet(TRACKS_CFG, 0), make_assembler(TRACKS_CFG), oval_ref, oval, sched, 0, 5,
                                 make_renderer(oval))
    assert set(rlog.source) == {"expert"}
    pure = run_rollout(MpcExpert(oval_ref), oval, oval_ref, seed=5, start_jitter=sched.start_jitter)
    assert np.array_equal(rlog.states, pure.states)
    assert rlog.termination == "completed"


def test_expert_failure_keeps_partial_data(oval, oval_ref, monkeypatch):
    class FailingExpert(MpcExpert):
        def solve(self, s):
            sol = super().solve(s)
            if len(self.iteration_log) > 10:
                sol.flagged = True
            return sol

    monkeypatch.setattr(dagger_mod, "MpcExpert", FailingExpert)
    rlog, pairs, _ = collect_rollout(None, make_assembler(TRACKS_CFG), oval_ref, oval, DaggerSchedule(), 0, 0,
                                     make_renderer(oval))
    assert rlog.termination == "expert-failure"
    assert len(pairs) == 10


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train_iteration(AggregatedDataset(), PolicyNet(TRACKS_CFG), 1)


def test_overfits_a_hundred_pairs(expert_pairs):
    cfg, pairs = expert_pairs
    data = AggregatedDataset()
    data.extend(pairs[100:200], 0)
    trace = train_iteration(data, PolicyNet(cfg, 0), epochs=200, lr=1e-3, seed=0, batch_size=32)
    assert trace[-1] < 1e-3


def test_loss_trace_is_seeded_and_decreasing(expert_pairs):
    cfg, pairs = expert_pairs
    data = AggregatedDataset()
    data.extend(pairs, 0)
    a = train_iteration(data, PolicyNet(cfg, 1), epochs=10, seed=7)
    b = train_iteration(data, PolicyNet(cfg, 1), epochs=10, seed=7)
    assert a == b
    assert all(later <= 1.1 * earlier for earlier, later in zip(a, a[1:]))
    assert a[-1] < a[0]


def test_run_dagger_provenance_and_checkpoints(tmp_path, oval, oval_ref):
    refs = [oval_ref, generate_reference(oval, 4.0, name="slow")]
    sched = DaggerSchedule(iterations=2, rollouts=2, epochs=2)
    res = run_dagger(TRACKS_CFG, refs, oval, sched, seed=3, renderer=make_renderer(oval), out_dir=tmp_path)
    lines = (tmp_path / "provenance.ndjson").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    assert len(recs) == 4
    assert [r["reference_id"] for r in recs] == [oval_ref.name, "slow", oval_ref.name, "slow"]
    assert {"seed", "reference_id", "gates_passed", "expert_fraction", "dataset_size"} <= set(recs[0])
    sizes = [r["dataset_size"] for r in recs]
    assert sizes == sorted(sizes) and res.dataset_sizes == [sizes[1], sizes[3]]
    assert [len(t) for t in res.loss_traces] == [2, 2]
    # the last checkpoint is the returned model, bit for bit
    back = load_policy(res.checkpoints[-1], TRACKS_CFG)
    for a, b in zip(back.params(), res.model.params()):
        assert np.array_equal(a.data, b.data)
    assert len(res.checkpoints) == 2


def test_run_dagger_is_deterministic(oval, oval_ref):
    sched = DaggerSchedule(iterations=1, rollouts=1, epochs=2)
    a = run_dagger(TRACKS_CFG, [oval_ref], oval, sched, seed=1, renderer=make_renderer(oval))
    b = run_dagger(TRACKS_CFG, [oval_ref], oval, sched, seed=1, renderer=make_renderer(oval))
    assert a.loss_traces == b.loss_traces


def test_run_dagger_needs_references(oval):
    with pytest.raises(ValueError, match="reference"):
        run_dagger(TRACKS_CFG, [], oval, DaggerSchedule(), renderer=make_renderer(oval))
