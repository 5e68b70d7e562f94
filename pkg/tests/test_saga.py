import itertools
import math

import numpy as np
import pytest
from scipy.stats import chi2

from rdassoc import (
    Chain,
    ChainFitTracker,
    Detection,
    FitNormalization,
    KinematicState,
    NoiseModel,
    SagaConfig,
    SensorArray,
    add_skip_edges,
    build_graph,
    ga_dfs,
    geometric_gate,
    initial_thresholds,
    saga_associate,
    simulate_observations,
    simulate_scene,
    state_distance,
)

from conftest import chain_labels, exact_observations


def resolved_config(noise, array, **kw):
    return SagaConfig(**kw).resolved(noise, array)


# ----------------------------------------------------------------------------
# gate and thresholds
# ----------------------------------------------------------------------------

def test_gate_examples():
    d = lambda r: Detection(range_m=r, doppler=0.0, sensor_index=0)
    assert geometric_gate(d(5.0), d(5.0), 4.0)
    assert not geometric_gate(d(1.0), d(10.0), 4.0)
    assert not geometric_gate(d(2.0), d(1.5), 4.0)


def test_gate_is_symmetric_in_ranges():
    d = lambda r: Detection(range_m=r, doppler=0.0, sensor_index=0)
    assert not geometric_gate(d(10.0), d(1.0), 4.0)


def test_initial_thresholds_chi2_quantiles():
    tau = initial_thresholds(0.01, 6)
    assert tau[6] == pytest.approx(26.217, abs=1e-3)
    assert tau[2] == pytest.approx(13.277, abs=1e-3)
    assert tau[6] == pytest.approx(chi2.ppf(0.99, 12), rel=1e-12)


def test_thresholds_vanish_as_pfa_grows():
    tau = initial_thresholds(1 - 1e-12, 6)
    assert np.all(tau[2:] < 1e-6)


def test_gate_soundness_noiseless(array6):
    # True consecutive pairs always pass with zero slack.
    rng = np.random.default_rng(3)
    for _ in range(100):
        z = KinematicState(rng.uniform(-8, 8), rng.uniform(2, 12),
                           rng.uniform(-10, 10), rng.uniform(-10, 10))
        obs = exact_observations([z], array6)
        for i in range(5):
            assert geometric_gate(obs.detections[i][0], obs.detections[i + 1][0],
                                  array6.baseline(i, i + 1), slack=0.0)


# ----------------------------------------------------------------------------
# graph construction
# ----------------------------------------------------------------------------

def test_single_target_graph_is_a_path(array4, nominal_noise):
    obs = exact_observations([KinematicState(1, 5, 2, 1)], array4)
    config = resolved_config(nominal_noise, array4)
    graph = build_graph(obs, array4, config)
    edges = [(a, b) for a, nbrs in graph.cons_out.items() for b in nbrs]
    assert len(edges) == 3
    assert graph.longest_path_len() == 4


def test_empty_graph(array4, nominal_noise):
    obs = exact_observations([], array4)
    graph = build_graph(obs, array4, resolved_config(nominal_noise, array4))
    assert graph.n_alive() == 0
    assert graph.longest_path_len() == 0


def test_consecutive_pairs_minimal(array6):
    # Gated-pair counts between consecutive sensors never exceed the count
    # for a wider pair with the same left sensor (noiseless scenes).
    rng = np.random.default_rng(8)
    for trial in range(30):
        targets = simulate_scene(20, separation=(0.3, 0.5), array=array6,
                                 rng_seed=rng.integers(1 << 32))
        obs = exact_observations(targets, array6, rng_seed=trial)

        def gated_count(i, j):
            return sum(
                geometric_gate(a, b, array6.baseline(i, j), slack=0.0)
                for a in obs.detections[i] for b in obs.detections[j])

        for i in range(5):
            consecutive = gated_count(i, i + 1)
            for j in range(i + 2, 6):
                assert consecutive <= gated_count(i, j)


# ----------------------------------------------------------------------------
# skip edges
# ----------------------------------------------------------------------------

def test_skip_edge_bridges_a_miss(array4, nominal_noise):
    z = KinematicState(1, 5, 2, 1)
    full = exact_observations([z], array4)
    # Drop sensor 2's detection: chain must bridge 1 -> 3.
    dets = tuple(col if s != 2 else () for s, col in enumerate(full.detections))
    labels = tuple(lab if s != 2 else () for s, lab in enumerate(full.truth_labels))
    obs = type(full)(detections=dets, truth_labels=labels)
    config = resolved_config(nominal_noise, array4)
    graph = build_graph(obs, array4, config)
    add_skip_edges(graph, 1, config)
    assert graph.skip_out.get((1, 0)) == [(3, 0)]
    assert graph.longest_path_len() == 3


def test_skip_edge_suppressed_when_path_exists(array4, nominal_noise):
    # Full detection coverage: the consecutive path already explains the
    # pair, so the duplicate-chain guard blocks every skip edge.
    obs = exact_observations([KinematicState(1, 5, 2, 1)], array4)
    config = resolved_config(nominal_noise, array4)
    graph = build_graph(obs, array4, config)
    add_skip_edges(graph, 1, config)
    assert not graph.skip_out


def test_skip_edges_pass_gate(array6):
    noise = NoiseModel.from_snr(-10.0, p_miss=0.2)
    config = resolved_config(noise, array6)
    for seed in range(10):
        targets = simulate_scene(15, array=array6, rng_seed=seed)
        obs = simulate_observations(targets, array6, noise, rng_seed=100 + seed)
        graph = build_graph(obs, array6, config)
        for h in range(1, config.rho + 1):
            add_skip_edges(graph, h, config)
        for (i, k), nbrs in graph.skip_out.items():
            for (q, m) in nbrs:
                assert geometric_gate(obs.detections[i][k], obs.detections[q][m],
                                      array6.baseline(i, q), config.gate_slack)


# ----------------------------------------------------------------------------
# guided DFS
# ----------------------------------------------------------------------------

def test_dfs_returns_full_chain(array4, nominal_noise):
    obs = exact_observations([KinematicState(1, 5, 2, 1)], array4)
    config = resolved_config(nominal_noise, array4)
    graph = build_graph(obs, array4, config)
    tau = initial_thresholds(config.p_fa, 4)
    norm = FitNormalization.conservative(nominal_noise)
    found = ga_dfs(graph, (0, 0), 4, tau, tau.copy(), norm, nominal_noise, config.alpha)
    assert found is not None
    assert found.chain.n == 4
    assert found.fit_error <= 1e-9


def test_dfs_rejects_inconsistent_only_path(array4, nominal_noise):
    # A forced mixture of two far-apart targets is the only path; its fit
    # error blows through the threshold, so no chain comes back.
    za, zb = KinematicState(-6, 3, 8, 0), KinematicState(6, 11, -8, 0)
    dets = []
    for s, l in enumerate(array4.positions):
        z = za if s % 2 == 0 else zb
        from rdassoc import range_doppler_transform
        r, d = range_doppler_transform(z, l)
        dets.append((Detection(range_m=r, doppler=d, sensor_index=s),))
    obs = type(exact_observations([za], array4))(detections=tuple(dets),
                                                 truth_labels=None)
    config = resolved_config(nominal_noise, array4, gate_slack=50.0)
    graph = build_graph(obs, array4, config)
    tau = initial_thresholds(config.p_fa, 4)
    norm = FitNormalization.conservative(nominal_noise)
    found = ga_dfs(graph, (0, 0), 4, tau, tau.copy(), norm, nominal_noise, config.alpha)
    assert found is None


def test_dfs_extraction_matches_exhaustive_oracle(array4, nominal_noise):
    targets = simulate_scene(3, separation=(1.0, 1.5), array=array4, rng_seed=5)
    obs = exact_observations(targets, array4, rng_seed=6)
    config = resolved_config(nominal_noise, array4)
    norm = FitNormalization.conservative(nominal_noise)
    tau = initial_thresholds(config.p_fa, 4)

    # Oracle: enumerate every gated full-length path; the admissible ones
    # are exactly the three true chains.
    tracker = ChainFitTracker(array4, nominal_noise)
    admissible = set()
    for combo in itertools.product(*(range(len(c)) for c in obs.detections)):
        dets = [obs.detections[s][k] for s, k in enumerate(combo)]
        if not all(geometric_gate(dets[i], dets[i + 1],
                                  array4.baseline(i, i + 1), config.gate_slack)
                   for i in range(3)):
            continue
        for det in dets:
            tracker.push(det)
        ok = tracker.weighted_fitting_error() < tau[4]
        for _ in range(4):
            tracker.pop()
        if ok:
            admissible.add(tuple(obs.truth_labels[s][k] for s, k in enumerate(combo)))
    assert admissible == {(t, t, t, t) for t in range(3)}

    graph = build_graph(obs, array4, config)
    recovered = []
    for _ in range(3):
        for k in range(len(graph.columns[0])):
            if not graph.alive[0][k]:
                continue
            found = ga_dfs(graph, (0, k), 4, tau, tau.copy(), norm,
                           nominal_noise, config.alpha)
            if found:
                recovered.append(chain_labels(obs, found.chain))
                graph.remove_nodes(found.nodes)
                break
    assert sorted(recovered) == [(0,) * 4, (1,) * 4, (2,) * 4]


# ----------------------------------------------------------------------------
# full association loop
# ----------------------------------------------------------------------------

def test_noiseless_recovery_zero_errors(array6, nominal_noise):
    targets = simulate_scene(20, separation=(0.3, 0.5), array=array6, rng_seed=7)
    obs = exact_observations(targets, array6, rng_seed=8)
    res = saga_associate(obs, array6, nominal_noise, SagaConfig(rho=4))
    assert len(res.chains) == 20
    labels = sorted(chain_labels(obs, c) for c in res.chains)
    assert labels == [(t,) * 6 for t in range(20)]
    for chain, sf in zip(res.chains, res.states):
        target = targets[chain_labels(obs, chain)[0]]
        assert sf.state.as_array() == pytest.approx(target.as_array(), abs=1e-6)


def test_all_missed_returns_empty(array6, nominal_noise):
    targets = simulate_scene(5, rng_seed=1)
    noise = NoiseModel(sigma_r=0.5, sigma_d=0.5, p_miss=1.0)
    obs = simulate_observations(targets, array6, noise, rng_seed=2)
    res = saga_associate(obs, array6, nominal_noise, SagaConfig(rho=4))
    assert res.chains == ()


def test_chains_disjoint_and_long_enough(array6):
    noise = NoiseModel.from_snr(-10.0, p_miss=0.1)
    for seed in range(5):
        targets = simulate_scene(15, array=array6, rng_seed=seed)
        obs = simulate_observations(targets, array6, noise, rng_seed=50 + seed)
        for rho in (0, 2, 4):
            res = saga_associate(obs, array6, noise, SagaConfig(rho=rho))
            seen = set()
            for chain in res.chains:
                assert chain.n >= max(2, 6 - rho)
                for det in chain.detections:
                    key = (det.sensor_index, det.range_m, det.doppler)
                    assert key not in seen
                    seen.add(key)


def test_saga_deterministic(array6, nominal_noise):
    targets = simulate_scene(10, array=array6, rng_seed=3)
    noise = NoiseModel.from_snr(-10.0, p_miss=0.05)
    obs = simulate_observations(targets, array6, noise, rng_seed=4)
    a = saga_associate(obs, array6, noise, SagaConfig(rho=2))
    b = saga_associate(obs, array6, noise, SagaConfig(rho=2))
    assert a.chains == b.chains
    assert [sf.state for sf in a.states] == [sf.state for sf in b.states]
    assert (a.likelihood_evals, a.fit_evals) == (b.likelihood_evals, b.fit_evals)


def test_relaxation_terminates_on_structural_dead_ends(array6, nominal_noise):
    # A slack-gated pair with an infeasible implied state can never become a
    # chain; the loop must notice and stop instead of relaxing to the cap.
    dets = [() for _ in range(6)]
    dets[0] = (Detection(1.0, 0.0, 0),)
    dets[1] = (Detection(1.2, 0.0, 1),)
    obs = type(exact_observations([], array6))(detections=tuple(dets), truth_labels=None)
    config = SagaConfig(rho=4, gate_slack=3.0, tau_z=1.0)
    res = saga_associate(obs, array6, nominal_noise, config)
    assert res.chains == ()
    assert res.rounds <= 2


def test_counters_monotone_and_positive(array6, nominal_noise):
    targets = simulate_scene(8, array=array6, rng_seed=11)
    noise = NoiseModel.from_snr(-10.0, p_miss=0.05)
    obs = simulate_observations(targets, array6, noise, rng_seed=12)
    res = saga_associate(obs, array6, noise, SagaConfig(rho=2))
    assert res.likelihood_evals >= 0 and res.fit_evals > 0


def test_rho_clamped_to_sensor_budget(array4, nominal_noise):
    config = SagaConfig(rho=9).resolved(nominal_noise, array4)
    assert config.rho == 2
