"""
Reference association algorithms for benchmarking the graph search:

  - saesl_associate: scores every gated edge's two-detection candidate state
    against the whole observation set and greedily consumes the best one's
    neighborhood (the expensive exhaustive baseline).
  - nn_associate: grows chains greedily from seed pairs, appending each
    sensor's nearest detection to the running state prediction.
  - mcf_associate: poses disjoint chain selection as a min-cost flow over the
    gated graph and solves it by successive shortest paths.

All three share the evaluation-counter conventions of the graph search so
complexity comparisons are by counted objective evaluations, not wall time.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from .fitting import Chain, ChainFitTracker, FitNormalization, StateFit, gauss_newton_refine
from .saga import (
    AssociationResult,
    SagaConfig,
    geometric_gate,
    initial_thresholds,
)
from .scene import (
    Detection,
    KinematicState,
    NoiseModel,
    ObservationSet,
    SensorArray,
    range_doppler_transform,
)

Node = Tuple[int, int]


@dataclass(frozen=True)
class CandidateState:
    """Two-detection candidate: the state implied by one gated edge."""

    state: KinematicState
    source_edge: Tuple[int, int, int, int]  # (sensor_i, det_k, sensor_q, det_l)
    likelihood: float


def edge_candidate_state(det_i: Detection, det_q: Detection,
                         l_i: float, l_q: float) -> Optional[KinematicState]:
    """Closed-form state from two detections at distinct sensors.

    Exact inversion of the forward transform on noiseless same-target pairs.
    Returns None when the implied y^2 is non-positive (the pair passed the
    gate only through slack).
    """
    if l_i == l_q:
        raise ValueError("detections must come from distinct sensor positions")
    ri, di = det_i.range_m, det_i.doppler
    rq, dq = det_q.range_m, det_q.doppler
    x = (rq * rq - ri * ri + l_i * l_i - l_q * l_q) / (2.0 * (l_i - l_q))
    vx = (rq * dq - ri * di) / (l_i - l_q)
    y2 = ri * ri - (x - l_i) ** 2
    if y2 <= 0.0:
        return None
    y = math.sqrt(y2)
    vy = (ri * di - (x - l_i) * vx) / y
    return KinematicState(x=x, y=y, vx=vx, vy=vy)


def candidate_likelihood(state: KinematicState, obs: ObservationSet,
                         array: SensorArray, noise: NoiseModel,
                         saturation: Optional[float] = None,
                         counters=None) -> float:
    """Normalized squared distance of a candidate state to the observations.

    Per sensor, the minimum over that sensor's detections of the quadratic
    range-Doppler residual; sensors with no detections contribute
    `saturation` (default: the chi-squared(4) 0.99 quantile). If `counters`
    is given, its likelihood_evals is incremented once per (state, detection)
    pair examined.
    """
    noise.require_positive()
    if saturation is None:
        saturation = float(chi2.ppf(0.99, 4))
    inv_r2 = 1.0 / noise.sigma_r ** 2
    inv_d2 = 1.0 / noise.sigma_d ** 2
    total = 0.0
    n_pairs = 0
    for i, l in enumerate(array.positions):
        col = obs.detections[i]
        if not col:
            total += saturation
            continue
        best = math.inf
        for det in col:
            r_hat, d_hat = range_doppler_transform(state, l)
            cost = (r_hat - det.range_m) ** 2 * inv_r2 + (d_hat - det.doppler) ** 2 * inv_d2
            if cost < best:
                best = cost
        n_pairs += len(col)
        total += best
    if counters is not None:
        counters.likelihood_evals += n_pairs
    return total


# ----------------------------------------------------------------------------
# Shared vectorized machinery
# ----------------------------------------------------------------------------

class _EdgeTable:
    """All gated edges up to skip level rho, with feasible candidate states
    and their per-sensor perceived range-Doppler rows."""

    def __init__(self, obs: ObservationSet, array: SensorArray,
                 gate_slack: float, rho: int):
        self.array = array
        ls = array.positions
        ns = len(ls)
        records = []
        for i in range(ns):
            for q in range(i + 1, min(i + rho + 2, ns)):
                baseline = array.baseline(i, q)
                for k, da in enumerate(obs.detections[i]):
                    for m, db in enumerate(obs.detections[q]):
                        if not geometric_gate(da, db, baseline, gate_slack):
                            continue
                        state = edge_candidate_state(da, db, ls[i], ls[q])
                        if state is None:
                            continue
                        records.append((i, da.range_m, da.doppler, q,
                                        db.range_m, db.doppler, k, m, state))
        # Canonical order: independent of per-sensor detection shuffling.
        records.sort(key=lambda rec: rec[:6])
        self.edges: List[Tuple[int, int, int, int]] = [
            (rec[0], rec[6], rec[3], rec[7]) for rec in records]
        self.states: List[KinematicState] = [rec[8] for rec in records]
        self.skips = np.array([rec[3] - rec[0] - 1 for rec in records], dtype=int)
        if records:
            xs = np.array([s.x for s in self.states])
            ys = np.array([s.y for s in self.states])
            vxs = np.array([s.vx for s in self.states])
            vys = np.array([s.vy for s in self.states])
            lrow = np.asarray(ls)
            dx = xs[:, None] - lrow[None, :]
            self.pred_r = np.hypot(dx, ys[:, None])
            self.pred_d = (dx * vxs[:, None] + (ys * vys)[:, None]) / self.pred_r
        else:
            self.pred_r = np.zeros((0, ns))
            self.pred_d = np.zeros((0, ns))

    def __len__(self) -> int:
        return len(self.edges)


def _column_arrays(obs: ObservationSet):
    rs = [np.array([det.range_m for det in col]) for col in obs.detections]
    ds = [np.array([det.doppler for det in col]) for col in obs.detections]
    return rs, ds


def _edge_costs(table: _EdgeTable, edge_ids: Sequence[int],
                col_r: Sequence[np.ndarray], col_d: Sequence[np.ndarray],
                alive: Sequence[np.ndarray], noise: NoiseModel,
                saturation: float) -> Tuple[np.ndarray, int]:
    """Observation-set likelihood for a set of edges; returns (costs, pairs)
    where pairs counts the (state, detection) evaluations performed."""
    ids = np.asarray(edge_ids, dtype=int)
    ns = len(col_r)
    costs = np.zeros(len(ids))
    pairs = 0
    inv_r2 = 1.0 / noise.sigma_r ** 2
    inv_d2 = 1.0 / noise.sigma_d ** 2
    for i in range(ns):
        mask = alive[i]
        m = int(mask.sum())
        if m == 0:
            costs += saturation
            continue
        r_obs = col_r[i][mask]
        d_obs = col_d[i][mask]
        dr = table.pred_r[ids, i][:, None] - r_obs[None, :]
        dd = table.pred_d[ids, i][:, None] - d_obs[None, :]
        costs += np.min(dr * dr * inv_r2 + dd * dd * inv_d2, axis=1)
        pairs += len(ids) * m
    return costs, pairs


# ----------------------------------------------------------------------------
# SAESL
# ----------------------------------------------------------------------------

def saesl_associate(obs: ObservationSet, array: SensorArray, noise: NoiseModel,
                    config: Optional[SagaConfig] = None) -> AssociationResult:
    """Exhaustive edge-likelihood association.

    Builds the fully skip-augmented gated graph, then repeatedly evaluates
    every surviving edge's candidate state against the remaining observations,
    keeps the best, and consumes all detections inside its resolution
    neighborhood. Candidates that captured at least two detections are
    emitted; their final states are Gauss-Newton refinements over the
    captured chain (one nearest detection per sensor).
    """
    noise.require_positive()
    config = (config or SagaConfig()).resolved(noise, array)
    saturation = float(chi2.ppf(1.0 - config.p_fa, 4))
    table = _EdgeTable(obs, array, config.gate_slack, config.rho)
    col_r, col_d = _column_arrays(obs)
    alive = [np.ones(len(col), dtype=bool) for col in obs.detections]

    likelihood_evals = 0
    rounds = 0
    candidates: List[CandidateState] = []
    chains: List[Chain] = []
    fits: List[StateFit] = []

    active = [e for e in range(len(table))]
    while active:
        rounds += 1
        costs, pairs = _edge_costs(table, active, col_r, col_d, alive, noise, saturation)
        likelihood_evals += pairs
        best_pos = int(np.argmin(costs))
        best_id = active[best_pos]
        si, ki, sq, kq = table.edges[best_id]
        state = table.states[best_id]

        # Neighborhood: everything inside one resolution cell of the
        # candidate's perceived pair, per sensor.
        captured: List[Node] = []
        nearest: Dict[int, Tuple[float, int]] = {}
        for s in range(array.n_sensors):
            r_star = table.pred_r[best_id, s]
            d_star = table.pred_d[best_id, s]
            in_box = (np.abs(col_r[s] - r_star) <= noise.delta_r) \
                & (np.abs(col_d[s] - d_star) <= noise.delta_d) & alive[s]
            for k in np.nonzero(in_box)[0]:
                captured.append((s, int(k)))
                dist = ((col_r[s][k] - r_star) / noise.sigma_r) ** 2 \
                    + ((col_d[s][k] - d_star) / noise.sigma_d) ** 2
                if s not in nearest or dist < nearest[s][0]:
                    nearest[s] = (dist, int(k))
        for s, k in captured:
            alive[s][k] = False

        if len(captured) >= 2:
            candidates.append(CandidateState(
                state=state, source_edge=(si, ki, sq, kq),
                likelihood=float(costs[best_pos])))
            dets = tuple(obs.detections[s][k] for s, (_, k) in sorted(nearest.items()))
            if len(dets) >= 2:
                chain = Chain(dets)
                refined = gauss_newton_refine(chain, array, state, noise)
                tracker = ChainFitTracker(array)
                for det in dets:
                    tracker.push(det)
                quad = tracker.quadratic_log_likelihood(refined, noise)
                loglik = quad + chain.n * math.log(config.alpha / (1.0 - config.alpha))
                (a1, b1), (a2, b2) = tracker.line_coefficients()
                chains.append(chain)
                fits.append(StateFit(state=refined, fit_error=float("nan"),
                                     log_likelihood=loglik, s1=(a1, b1), s2=(a2, b2)))

        active = [e for e in active
                  if alive[table.edges[e][0]][table.edges[e][1]]
                  and alive[table.edges[e][2]][table.edges[e][3]]]

    return AssociationResult(chains=tuple(chains), states=tuple(fits),
                             likelihood_evals=likelihood_evals, fit_evals=0,
                             rounds=rounds, candidates=tuple(candidates))


# ----------------------------------------------------------------------------
# Gated nearest neighbor
# ----------------------------------------------------------------------------

def nn_associate(obs: ObservationSet, array: SensorArray, noise: NoiseModel,
                 config: Optional[SagaConfig] = None) -> AssociationResult:
    """Greedy chain growth from likelihood-ranked consecutive seed pairs.

    Each seed's state is extended sensor-by-sensor with the detection that
    minimizes the quadratic residual increment (if within the per-sensor gate
    radius); a grown chain is accepted under the same length/likelihood/fit
    criteria as the graph search. Passes over the seed list repeat until one
    full pass accepts nothing.
    """
    noise.require_positive()
    config = (config or SagaConfig()).resolved(noise, array)
    ns = array.n_sensors
    ls = array.positions
    tau = initial_thresholds(config.p_fa, ns)
    per_sensor_gate = float(chi2.ppf(1.0 - config.p_fa, 4))
    norm = FitNormalization.conservative(noise)
    min_len = max(2, ns - config.rho)
    inv_r2 = 1.0 / noise.sigma_r ** 2
    inv_d2 = 1.0 / noise.sigma_d ** 2

    # Seeds: consecutive gated pairs, ranked once by candidate likelihood.
    table = _EdgeTable(obs, array, config.gate_slack, rho=0)
    col_r, col_d = _column_arrays(obs)
    alive = [np.ones(len(col), dtype=bool) for col in obs.detections]
    likelihood_evals = 0
    fit_evals = 0
    if len(table):
        costs, pairs = _edge_costs(table, range(len(table)), col_r, col_d,
                                   alive, noise, per_sensor_gate)
        likelihood_evals += pairs
        # Table order is canonical (sensor, range, Doppler), so index
        # tie-breaks are invariant to per-sensor detection shuffling.
        seed_order = sorted(range(len(table)), key=lambda e: (costs[e], e))
    else:
        seed_order = []

    chains: List[Chain] = []
    fits: List[StateFit] = []
    passes = 0

    def try_seed(edge_id: int) -> Optional[Tuple[List[Node], KinematicState, float, float]]:
        nonlocal likelihood_evals, fit_evals
        si, ki, sq, kq = table.edges[edge_id]
        tracker = ChainFitTracker(array, noise)
        tracker.push(obs.detections[si][ki])
        tracker.push(obs.detections[sq][kq])
        nodes = [(si, ki), (sq, kq)]
        state = tracker.state()
        if state is None:
            return None
        for s in range(ns):
            if s in (si, sq):
                continue
            idx = np.nonzero(alive[s])[0]
            if len(idx) == 0:
                continue
            r_hat, d_hat = range_doppler_transform(state, ls[s])
            best_cost, best_k = math.inf, -1
            for k in idx:
                det = obs.detections[s][k]
                cost = (r_hat - det.range_m) ** 2 * inv_r2 + (d_hat - det.doppler) ** 2 * inv_d2
                if cost < best_cost:
                    best_cost, best_k = cost, int(k)
            likelihood_evals += len(idx)
            if best_cost >= per_sensor_gate:
                continue  # sensor recorded as a skip
            tracker.push(obs.detections[s][best_k])
            new_state = tracker.state()
            if new_state is None:
                tracker.pop()
                continue
            state = new_state
            nodes.append((s, best_k))
        n = tracker.n
        if n < min_len:
            return None
        fit_err = tracker.weighted_fitting_error()
        fit_evals += 1
        if fit_err >= tau[n]:
            return None
        quad = tracker.quadratic_log_likelihood(state, noise)
        likelihood_evals += 1
        if quad >= tau[n]:
            return None
        return nodes, state, fit_err, quad

    while True:
        passes += 1
        accepted_any = False
        for edge_id in seed_order:
            si, ki, sq, kq = table.edges[edge_id]
            if not (alive[si][ki] and alive[sq][kq]):
                continue
            result = try_seed(edge_id)
            if result is None:
                continue
            nodes, state, fit_err, _ = result
            dets = tuple(obs.detections[s][k] for s, k in sorted(nodes))
            chain = Chain(dets)
            refined = gauss_newton_refine(chain, array, state, noise)
            tracker = ChainFitTracker(array)
            for det in dets:
                tracker.push(det)
            quad = tracker.quadratic_log_likelihood(refined, noise)
            loglik = quad + chain.n * math.log(config.alpha / (1.0 - config.alpha))
            (a1, b1), (a2, b2) = tracker.line_coefficients()
            chains.append(chain)
            fits.append(StateFit(state=refined, fit_error=fit_err,
                                 log_likelihood=loglik, s1=(a1, b1), s2=(a2, b2)))
            for s, k in nodes:
                alive[s][k] = False
            accepted_any = True
        if not accepted_any:
            break

    return AssociationResult(chains=tuple(chains), states=tuple(fits),
                             likelihood_evals=likelihood_evals,
                             fit_evals=fit_evals, rounds=passes)


# ----------------------------------------------------------------------------
# Min-cost flow
# ----------------------------------------------------------------------------

class _MinCostFlow:
    """Successive shortest augmenting paths with Johnson potentials."""

    def __init__(self, n_nodes: int):
        self.n = n_nodes
        self.head: List[List[int]] = [[] for _ in range(n_nodes)]
        self.to: List[int] = []
        self.cap: List[int] = []
        self.cost: List[float] = []

    def add_arc(self, u: int, v: int, cap: int, cost: float) -> int:
        arc_id = len(self.to)
        self.head[u].append(arc_id)
        self.to.append(v)
        self.cap.append(cap)
        self.cost.append(cost)
        self.head[v].append(arc_id + 1)
        self.to.append(u)
        self.cap.append(0)
        self.cost.append(-cost)
        return arc_id

    def augment_once(self, source: int, sink: int, potential: List[float]) -> Optional[float]:
        """Push one unit along the shortest residual path; returns its true
        cost or None when the sink is unreachable. Updates potentials."""
        dist = [math.inf] * self.n
        parent_arc = [-1] * self.n
        dist[source] = 0.0
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u] + 1e-12:
                continue
            for arc in self.head[u]:
                if self.cap[arc] <= 0:
                    continue
                v = self.to[arc]
                reduced = self.cost[arc] + potential[u] - potential[v]
                if reduced < 0.0:  # floating-point slack only
                    reduced = 0.0
                if d + reduced < dist[v] - 1e-12:
                    dist[v] = d + reduced
                    parent_arc[v] = arc
                    heapq.heappush(heap, (dist[v], v))
        if not math.isfinite(dist[sink]):
            return None
        for v in range(self.n):
            if math.isfinite(dist[v]):
                potential[v] += dist[v]
        path_cost = 0.0
        v = sink
        while v != source:
            arc = parent_arc[v]
            self.cap[arc] -= 1
            self.cap[arc ^ 1] += 1
            path_cost += self.cost[arc]
            v = self.to[arc ^ 1]
        return path_cost


def mcf_associate(obs: ObservationSet, array: SensorArray, noise: NoiseModel,
                  config: Optional[SagaConfig] = None) -> AssociationResult:
    """Disjoint chain selection by min-cost flow over the gated graph.

    Each detection is a unit-capacity split node; gated arcs carry the edge
    candidate's observation-set likelihood plus |log alpha| per skipped
    sensor; entry/exit arcs charge the leading/trailing skips. The flow value
    K sweeps 1..K_max by successive shortest paths and the K minimizing
    (flow cost + per-detection length penalty) is kept. Chains shorter than
    the minimum admissible length are dropped from the output.
    """
    noise.require_positive()
    config = (config or SagaConfig()).resolved(noise, array)
    ns = array.n_sensors
    min_len = max(2, ns - config.rho)
    skip_unit = abs(math.log(config.alpha))
    length_bonus = math.log(config.alpha / (1.0 - config.alpha))  # negative
    saturation = float(chi2.ppf(1.0 - config.p_fa, 4))

    table = _EdgeTable(obs, array, config.gate_slack, config.rho)
    col_r, col_d = _column_arrays(obs)
    alive = [np.ones(len(col), dtype=bool) for col in obs.detections]
    likelihood_evals = 0
    if len(table):
        arc_likelihoods, pairs = _edge_costs(table, range(len(table)), col_r, col_d,
                                             alive, noise, saturation)
        likelihood_evals += pairs
    else:
        arc_likelihoods = np.zeros(0)

    counts = obs.counts()
    if obs.n_detections() == 0 or len(table) == 0:
        return AssociationResult(chains=(), states=(), likelihood_evals=likelihood_evals,
                                 fit_evals=0, rounds=0)
    k_max = max(1, min(counts) + round(ns * noise.p_false_alarm))

    flat: List[Node] = [(s, k) for s, col in enumerate(obs.detections)
                        for k in range(len(col))]
    index = {node: i for i, node in enumerate(flat)}
    n_nodes = 2 + 2 * len(flat)
    source, sink = 0, 1
    node_in = lambda i: 2 + 2 * i
    node_out = lambda i: 3 + 2 * i

    net = _MinCostFlow(n_nodes)
    split_arcs = []
    for i, (s, _) in enumerate(flat):
        split_arcs.append(net.add_arc(node_in(i), node_out(i), 1, 0.0))
        if s <= config.rho:
            net.add_arc(source, node_in(i), 1, s * skip_unit)
        if (ns - 1 - s) <= config.rho:
            net.add_arc(node_out(i), sink, 1, (ns - 1 - s) * skip_unit)
    for e, (si, ki, sq, kq) in enumerate(table.edges):
        a = index[(si, ki)]
        b = index[(sq, kq)]
        net.add_arc(node_out(a), node_in(b), 1,
                    float(arc_likelihoods[e]) + table.skips[e] * skip_unit)

    # Sweep K by successive augmentations, scoring each prefix flow.
    potential = [0.0] * n_nodes
    total_cost = 0.0
    best = (0.0, 0, None)  # (objective, K, flow snapshot)
    snapshots = []
    k = 0
    while k < k_max:
        path_cost = net.augment_once(source, sink, potential)
        if path_cost is None:
            break
        k += 1
        total_cost += path_cost
        covered = sum(1 for arc in split_arcs if net.cap[arc] == 0)
        objective = total_cost + length_bonus * covered
        snapshots.append((objective, k, list(net.cap)))
    if snapshots:
        best = min(snapshots, key=lambda snap: snap[0])
        if best[0] >= 0.0:
            best = (0.0, 0, None)

    chains: List[Chain] = []
    fits: List[StateFit] = []
    if best[2] is not None:
        cap_snapshot = best[2]
        # All forward arcs are unit capacity, so residual 0 means "carries
        # flow". Walk one unit path per flow unit, consuming arcs.
        flow_out: Dict[int, List[int]] = {}
        for u in range(n_nodes):
            for arc in net.head[u]:
                if arc % 2 == 0 and cap_snapshot[arc] == 0:
                    flow_out.setdefault(u, []).append(arc)
        for _ in range(best[1]):
            path_nodes: List[Node] = []
            u = source
            while u != sink:
                arc = flow_out[u].pop()
                v = net.to[arc]
                if v >= 2 and v % 2 == 0:  # entering a detection's in-node
                    path_nodes.append(flat[(v - 2) // 2])
                u = v
            if len(path_nodes) < min_len:
                continue
            dets = tuple(obs.detections[s][kk] for s, kk in sorted(path_nodes))
            chain = Chain(dets)
            tracker = ChainFitTracker(array)
            for det in dets:
                tracker.push(det)
            state = tracker.state()
            if state is None:
                continue
            refined = gauss_newton_refine(chain, array, state, noise)
            quad = tracker.quadratic_log_likelihood(refined, noise)
            loglik = quad + chain.n * math.log(config.alpha / (1.0 - config.alpha))
            (a1, b1), (a2, b2) = tracker.line_coefficients()
            chains.append(chain)
            fits.append(StateFit(state=refined, fit_error=float("nan"),
                                 log_likelihood=loglik, s1=(a1, b1), s2=(a2, b2)))

    return AssociationResult(chains=tuple(chains), states=tuple(fits),
                             likelihood_evals=likelihood_evals, fit_evals=0,
                             rounds=best[1])
