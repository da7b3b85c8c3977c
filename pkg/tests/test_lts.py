import json

import numpy as np
import pytest

from sampfa.grid import BusKind
from sampfa.lts import (DatasetSpec, SliceRejected, generate_dataset,
                        load_dataset, perturb_and_resolve, record_to_sample,
                        sample_inputs, sample_mismatch, sample_to_record)
from sampfa.lts import slice as lts_slice
from sampfa.newton import mismatch


def test_slice_is_exact(net39, sol39):
    rng = np.random.default_rng(0)
    accepted = 0
    for _ in range(60):
        size = int(rng.integers(5, 40))
        start = int(rng.integers(net39.n))
        try:
            s = lts_slice(net39, sol39, start, size, rng)
        except SliceRejected:
            continue
        accepted += 1
        sub = s.sub_network
        assert sub.n == size
        assert sample_mismatch(s) < 1e-10
        kinds = [b.kind for b in sub.buses]
        assert kinds.count(BusKind.Slack) == 1
        assert any(k in (BusKind.Slack, BusKind.PV) for k in kinds)
        assert sub.is_connected()
    assert accepted >= 40


def test_slice_preserves_interior_state(net39, sol39):
    rng = np.random.default_rng(1)
    s = lts_slice(net39, sol39, 0, 15, rng)
    for local, parent_idx in enumerate(s.bus_map):
        assert s.solution.v[local] == sol39.v[parent_idx]
        assert s.solution.theta[local] == sol39.theta[parent_idx]


def test_slice_full_network(net39, sol39):
    rng = np.random.default_rng(2)
    s = lts_slice(net39, sol39, 3, net39.n, rng)
    assert s.sub_network.n == net39.n
    assert sample_mismatch(s) < 1e-10


def test_slice_rejects_bad_size(net39, sol39):
    rng = np.random.default_rng(3)
    with pytest.raises((SliceRejected, ValueError)):
        lts_slice(net39, sol39, 0, net39.n + 1, rng)


def test_perturb_and_resolve(net39, sol39):
    rng = np.random.default_rng(4)
    spec = DatasetSpec(sizes=[20], samples_per_size=1, perturbation=0.2,
                       max_outages=2, seed=4)
    base = lts_slice(net39, sol39, 5, 20, rng)
    pert = perturb_and_resolve(base, spec, rng)
    assert sample_mismatch(pert) < 1e-8
    assert pert.sub_network.is_connected()
    # loads actually moved
    p_old = [b.p_set for b in base.sub_network.buses if b.kind == BusKind.PQ]
    p_new = [b.p_set for b in pert.sub_network.buses if b.kind == BusKind.PQ]
    assert p_old != p_new


def test_sample_inputs_shape(net39):
    x = sample_inputs(net39)
    assert x.shape == (net39.n, 7)
    slack = net39.slack_index
    assert x[slack, 0] == 0.0 and x[slack, 1] == 0.0
    for i, b in enumerate(net39.buses):
        if b.kind == BusKind.PV:
            assert x[i, 1] == 0.0
            assert x[i, 2] == b.v_set


def test_record_roundtrip(net39, sol39):
    rng = np.random.default_rng(6)
    s = lts_slice(net39, sol39, 10, 12, rng)
    rec = sample_to_record(s, 7)
    rec2 = json.loads(json.dumps(rec))    # survive serialization
    back = record_to_sample(rec2)
    assert back.sub_network == s.sub_network
    assert np.allclose(back.solution.v, s.solution.v)
    assert np.allclose(back.solution.s_branch, s.solution.s_branch)
    assert rec2["provenance"]["sample_index"] == 7


def test_generate_dataset_deterministic(net39, sol39, tmp_path):
    spec = DatasetSpec(sizes=[8, 12], samples_per_size=5, seed=9)
    p1 = tmp_path / "a.jsonl"
    p2 = tmp_path / "b.jsonl"
    r1 = generate_dataset([(net39, sol39)], spec, p1)
    r2 = generate_dataset([(net39, sol39)], spec, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert r1["samples"] == 10
    recs = load_dataset(p1)
    assert len(recs) == 10
    sizes = sorted({len(r["network"]["buses"]) for r in recs})
    assert sizes == [8, 12]


def test_generate_dataset_worker_invariance(net39, sol39, tmp_path):
    spec = DatasetSpec(sizes=[10], samples_per_size=6, seed=13)
    p1 = tmp_path / "w1.jsonl"
    p2 = tmp_path / "w2.jsonl"
    generate_dataset([(net39, sol39)], spec, p1, workers=1)
    generate_dataset([(net39, sol39)], spec, p2, workers=2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_records_are_consistent(net39, sol39, tmp_path):
    spec = DatasetSpec(sizes=[15], samples_per_size=5, seed=21)
    path = tmp_path / "c.jsonl"
    generate_dataset([(net39, sol39)], spec, path)
    for rec in load_dataset(path):
        s = record_to_sample(rec)
        assert sample_mismatch(s) < 1e-8
        net = s.sub_network
        dp, dq = mismatch(net, s.solution.v, s.solution.theta,
                          p_set=s.solution.p, q_set=s.solution.q)
        assert max(np.max(np.abs(dp)), np.max(np.abs(dq))) < 1e-8
        # branch targets follow the directed ordering
        assert len(rec["branch_targets"]) == 2 * len(net.live_branches())
