"""
Graph-search association: gated graph construction, skip edges for miss
robustness, fitting-error-guided depth-first extraction, and the
threshold-relaxation outer loop.

The search operates on a column graph (one column of detections per sensor).
Edges join detections at increasing sensors when the pair could plausibly
originate from one target (triangle-inequality gate on the two ranges and the
sensor baseline). Chains are extracted depth-first, exploring children in
order of the chain's geometric fitting error and abandoning any branch whose
error exceeds the current threshold; a chain is accepted when it is long
enough and both its fitting error and its quadratic log-likelihood clear the
per-length thresholds. Accepted chains are removed from the graph, skip-h
edges (bridging h consecutive sensors) admit chains with up to rho missing
detections, and the thresholds relax geometrically until no admissible chain
remains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from .fitting import (
    Chain,
    ChainFitTracker,
    FitNormalization,
    StateFit,
    gauss_newton_refine,
)
from .scene import (
    Detection,
    KinematicState,
    NoiseModel,
    ObservationSet,
    SensorArray,
    state_distance,
)

Node = Tuple[int, int]  # (sensor column, index within column)

REFERENCE_STATE = KinematicState(x=0.0, y=7.0, vx=0.0, vy=0.0)


@dataclass(frozen=True)
class SagaConfig:
    """Tuning for the graph search.

    rho bounds the number of tolerated per-target misses; p_fa sets the
    chi-squared quantile for the initial thresholds; beta is the relaxation
    factor; tau_z the state-similarity radius for skip-edge dedup; gate_slack
    widens the range gate against noise. None fields are derived from the
    noise model and array via resolved().
    """

    rho: int = 4
    p_fa: float = 0.01
    beta: float = 2.0
    alpha: float = 0.05
    tau_z: Optional[float] = None
    gate_slack: Optional[float] = None
    max_relaxations: int = 40
    path_cap: int = 64

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if not 0.0 < self.p_fa < 1.0:
            raise ValueError("p_fa must lie in (0, 1)")
        if self.beta <= 1.0:
            raise ValueError("beta must exceed 1")

    def resolved(self, noise: NoiseModel, array: SensorArray) -> "SagaConfig":
        """Fill derived defaults: gate_slack = 6 sigma_r, tau_z from the
        position/velocity bound at the broadside reference state."""
        updates = {}
        if self.gate_slack is None:
            updates["gate_slack"] = 6.0 * noise.sigma_r
        if self.tau_z is None:
            updates["tau_z"] = default_tau_z(array, noise)
        rho_max = array.n_sensors - 2
        if self.rho > rho_max:
            updates["rho"] = rho_max
        return replace(self, **updates) if updates else self


def default_tau_z(array: SensorArray, noise: NoiseModel) -> float:
    """State-similarity radius: 10x the root position+velocity bound at a
    nominal broadside reference target."""
    from .metrics import crb_position_velocity

    report = crb_position_velocity(REFERENCE_STATE, array,
                                   noise.sigma_r ** 2, noise.sigma_d ** 2)
    return report.tau_z


def initial_thresholds(p_fa: float, max_len: int) -> np.ndarray:
    """Per-length thresholds tau[n] = chi-squared(2n) quantile at 1 - p_fa.

    Index by chain length n; entries below n=2 are +inf placeholders. The same
    values initialize both the fitting-error and the likelihood thresholds
    (the latter gates the quadratic part only).
    """
    if not 0.0 < p_fa < 1.0:
        raise ValueError("p_fa must lie in (0, 1)")
    tau = np.full(max_len + 1, np.inf)
    for n in range(2, max_len + 1):
        tau[n] = chi2.ppf(1.0 - p_fa, 2 * n)
    return tau


def geometric_gate(det_i: Detection, det_j: Detection, baseline: float,
                   slack: float = 0.0) -> bool:
    """Triangle-inequality feasibility of two ranges over a sensor baseline."""
    if abs(det_i.range_m - det_j.range_m) >= baseline + slack:
        return False
    return det_i.range_m + det_j.range_m > baseline - slack


# ----------------------------------------------------------------------------
# Graph
# ----------------------------------------------------------------------------

class AssociationGraph:
    """Column graph over an observation set with gated edges and counters.

    Consecutive edges are built once; skip edges are a separate layer cleared
    at the start of each relaxation round. Node removal drops all incident
    edges. A graph instance is single-threaded during one associate call.
    """

    def __init__(self, obs: ObservationSet, array: SensorArray, gate_slack: float):
        self.array = array
        self.columns: Tuple[Tuple[Detection, ...], ...] = obs.detections
        self.gate_slack = gate_slack
        self.alive: List[List[bool]] = [[True] * len(col) for col in self.columns]
        self.cons_out: Dict[Node, List[Node]] = {}
        self.skip_out: Dict[Node, List[Node]] = {}
        self.likelihood_evals = 0
        self.fit_evals = 0
        # Set whenever a search decision failed a tau comparison; cleared per
        # round. If a whole round extracts nothing and this stayed False, no
        # amount of relaxation can change the outcome.
        self.tau_limited = False
        self._build_consecutive()

    def _build_consecutive(self) -> None:
        for i in range(len(self.columns) - 1):
            baseline = self.array.baseline(i, i + 1)
            for k, det_a in enumerate(self.columns[i]):
                out = [(i + 1, m) for m, det_b in enumerate(self.columns[i + 1])
                       if geometric_gate(det_a, det_b, baseline, self.gate_slack)]
                if out:
                    self.cons_out[(i, k)] = out

    # -- topology ------------------------------------------------------------

    def detection(self, node: Node) -> Detection:
        return self.columns[node[0]][node[1]]

    def is_alive(self, node: Node) -> bool:
        return self.alive[node[0]][node[1]]

    def alive_nodes(self) -> List[Node]:
        return [(s, k) for s, col in enumerate(self.columns)
                for k in range(len(col)) if self.alive[s][k]]

    def n_alive(self) -> int:
        return sum(sum(col) for col in self.alive)

    def successors(self, node: Node):
        for nbr in self.cons_out.get(node, ()):
            if self.alive[nbr[0]][nbr[1]]:
                yield nbr
        for nbr in self.skip_out.get(node, ()):
            if self.alive[nbr[0]][nbr[1]]:
                yield nbr

    def edge_count(self) -> int:
        return sum(1 for node in self.alive_nodes() for _ in self.successors(node))

    def remove_nodes(self, nodes: Sequence[Node]) -> None:
        for s, k in nodes:
            self.alive[s][k] = False

    def clear_skip_edges(self) -> None:
        self.skip_out.clear()

    def add_skip_edge(self, src: Node, dst: Node) -> None:
        self.skip_out.setdefault(src, []).append(dst)

    def longest_path_len(self) -> int:
        """Length in nodes of the longest path over the current edge set."""
        best: Dict[Node, int] = {}
        for s in range(len(self.columns) - 1, -1, -1):
            for k in range(len(self.columns[s])):
                if not self.alive[s][k]:
                    continue
                node = (s, k)
                deepest = 0
                for nbr in self.successors(node):
                    deepest = max(deepest, best.get(nbr, 0))
                best[node] = 1 + deepest
        return max(best.values(), default=0)


def build_graph(obs: ObservationSet, array: SensorArray,
                config: SagaConfig) -> AssociationGraph:
    """Gated column graph with consecutive edges only and zeroed counters."""
    if config.gate_slack is None:
        raise ValueError("config.gate_slack unresolved; call config.resolved(noise, array)")
    return AssociationGraph(obs, array, config.gate_slack)


# ----------------------------------------------------------------------------
# Skip edges
# ----------------------------------------------------------------------------

def _two_node_state(graph: AssociationGraph, a: Node, b: Node) -> Optional[KinematicState]:
    t = ChainFitTracker(graph.array)
    t.push(graph.detection(a))
    t.push(graph.detection(b))
    return t.state()


def _path_blocks_edge(graph: AssociationGraph, src: Node, dst: Node,
                      edge_state: KinematicState, tau_z: float, cap: int) -> bool:
    """True if some existing src->dst path predicts a state within tau_z.

    Paths run through intermediate sensors strictly between the endpoints.
    Enumeration is depth-first and stops at `cap` complete paths; paths with
    infeasible closed-form states do not block.
    """
    target_sensor = dst[0]
    tracker = ChainFitTracker(graph.array)
    tracker.push(graph.detection(src))
    seen = 0

    def walk(node: Node) -> bool:
        nonlocal seen
        for nbr in graph.successors(node):
            if nbr[0] > target_sensor:
                continue
            if nbr[0] == target_sensor:
                if nbr != dst:
                    continue
                tracker.push(graph.detection(nbr))
                state = tracker.state()
                tracker.pop()
                seen += 1
                if state is not None and state_distance(state, edge_state) <= tau_z:
                    return True
                if seen >= cap:
                    return False
                continue
            tracker.push(graph.detection(nbr))
            blocked = walk(nbr)
            tracker.pop()
            if blocked or seen >= cap:
                return blocked
        return False

    return walk(src)


def add_skip_edges(graph: AssociationGraph, h: int, config: SagaConfig) -> AssociationGraph:
    """Add gated skip-h edges (src sensor i -> i + h + 1).

    An edge is added only when (a) the range gate passes, (b) the implied
    two-detection state exists, and (c) no existing connecting path predicts a
    state within tau_z of it (a near match means the pair is already explained
    by a chain hypothesis, and a duplicate chain would form).
    """
    if h < 1:
        return graph
    if config.tau_z is None:
        raise ValueError("config.tau_z unresolved; call config.resolved(noise, array)")
    ns = len(graph.columns)
    for i in range(ns - h - 1):
        q = i + h + 1
        baseline = graph.array.baseline(i, q)
        for k in range(len(graph.columns[i])):
            if not graph.alive[i][k]:
                continue
            src = (i, k)
            det_a = graph.columns[i][k]
            for m in range(len(graph.columns[q])):
                if not graph.alive[q][m]:
                    continue
                dst = (q, m)
                det_b = graph.columns[q][m]
                if not geometric_gate(det_a, det_b, baseline, graph.gate_slack):
                    continue
                edge_state = _two_node_state(graph, src, dst)
                if edge_state is None:
                    continue
                if _path_blocks_edge(graph, src, dst, edge_state,
                                     config.tau_z, config.path_cap):
                    continue
                graph.add_skip_edge(src, dst)
    return graph


# ----------------------------------------------------------------------------
# Guided depth-first search
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractedChain:
    nodes: Tuple[Node, ...]
    chain: Chain
    state: KinematicState  # maximum-likelihood (refined) chain state
    fit_error: float
    quadratic: float


def ga_dfs(graph: AssociationGraph, start: Node, gamma: int,
           tau_f: np.ndarray, tau_l: np.ndarray, norm: FitNormalization,
           noise: NoiseModel, alpha: float) -> Optional[ExtractedChain]:
    """Depth-first extraction of one admissible chain rooted at `start`.

    Children are explored in ascending fitting-error order, pruned against the
    maximum-length threshold tau_f[-1]; on exhausting children, the chain may
    terminate at the current node (accounting for trailing misses) when its
    length, fitting error, and quadratic likelihood all pass. The quadratic is
    evaluated at the chain's maximum-likelihood state (closed-form prediction
    polished by Gauss-Newton), since that is the state the chain actually
    proposes. Returns the first admissible chain found, or None. Increments
    the graph's fit counter per fitting-error evaluation and its likelihood
    counter per quadratic evaluation.
    """
    ns = len(graph.columns)
    tau_f_max = tau_f[ns]
    tracker = ChainFitTracker(graph.array, noise)
    tracker.push(graph.detection(start))
    nodes: List[Node] = [start]

    def descend(chain_fit: float) -> Optional[ExtractedChain]:
        node = nodes[-1]
        n = tracker.n
        children = []
        for nbr in graph.successors(node):
            # A child is worth scoring only if gamma is still reachable.
            if n + 1 + (ns - 1 - nbr[0]) < gamma:
                continue
            det = graph.detection(nbr)
            tracker.push(det)
            f_ext = tracker.weighted_fitting_error()
            tracker.pop()
            graph.fit_evals += 1
            if f_ext < tau_f_max:
                children.append((f_ext, det.range_m, nbr))
            else:
                graph.tau_limited = True
        children.sort(key=lambda c: (c[0], c[1]))
        for f_ext, _, nbr in children:
            tracker.push(graph.detection(nbr))
            nodes.append(nbr)
            found = descend(f_ext)
            nodes.pop()
            tracker.pop()
            if found is not None:
                return found
        # Chain termination at this node (trailing sensors treated as misses).
        if n >= gamma:
            if chain_fit >= tau_f[n]:
                graph.tau_limited = True
            else:
                state = tracker.state()
                if state is not None:
                    quad = tracker.quadratic_log_likelihood(state, noise)
                    graph.likelihood_evals += 1
                    if quad < tau_l[n]:
                        chain = Chain(tracker.detections)
                        refined = gauss_newton_refine(chain, graph.array, state, noise)
                        quad_refined = tracker.quadratic_log_likelihood(refined, noise)
                        reported_f = tracker.fitting_error(norm)
                        graph.fit_evals += 1
                        return ExtractedChain(nodes=tuple(nodes), chain=chain,
                                              state=refined, fit_error=reported_f,
                                              quadratic=quad_refined)
                    graph.tau_limited = True
        return None

    return descend(0.0)


# ----------------------------------------------------------------------------
# Full association loop
# ----------------------------------------------------------------------------

@dataclass
class AssociationResult:
    """Output of one association call: disjoint chains with refined states,
    plus the evaluation counters accumulated on the graph."""

    chains: Tuple[Chain, ...]
    states: Tuple[StateFit, ...]
    likelihood_evals: int
    fit_evals: int
    rounds: int = 1
    candidates: Tuple = ()

    @property
    def total_evals(self) -> int:
        return self.likelihood_evals + self.fit_evals

    def estimates(self) -> List[KinematicState]:
        return [sf.state for sf in self.states]


def _finalize_chain(found: ExtractedChain, array: SensorArray, noise: NoiseModel,
                    alpha: float) -> StateFit:
    tracker = ChainFitTracker(array)
    for det in found.chain.detections:
        tracker.push(det)
    (a1, b1), (a2, b2) = tracker.line_coefficients()
    loglik = found.quadratic + found.chain.n * math.log(alpha / (1.0 - alpha))
    return StateFit(state=found.state, fit_error=found.fit_error,
                    log_likelihood=loglik, s1=(a1, b1), s2=(a2, b2))


def saga_associate(obs: ObservationSet, array: SensorArray, noise: NoiseModel,
                   config: Optional[SagaConfig] = None) -> AssociationResult:
    """Extract node-disjoint chains by relaxed, geometry-guided graph search.

    Rounds alternate over skip levels h = 0..rho (minimum chain length
    gamma = n_sensors - h), extracting and removing admissible chains; the
    thresholds relax by beta between rounds until no path of length
    >= n_sensors - rho survives (or the relaxation cap is hit).
    """
    noise.require_positive()
    config = (config or SagaConfig()).resolved(noise, array)
    ns = array.n_sensors
    norm = FitNormalization.conservative(noise)
    graph = build_graph(obs, array, config)
    tau_f = initial_thresholds(config.p_fa, ns)
    tau_l = tau_f.copy()
    min_len = max(2, ns - config.rho)

    chains: List[Chain] = []
    fits: List[StateFit] = []
    rounds = 0
    while True:
        rounds += 1
        graph.clear_skip_edges()
        graph.tau_limited = False
        extracted_before = len(chains)
        for h in range(config.rho + 1):
            gamma = ns - h
            if h >= 1:
                add_skip_edges(graph, h, config)
            for s in range(min(h + 1, ns)):
                for k in range(len(graph.columns[s])):
                    if not graph.alive[s][k]:
                        continue
                    found = ga_dfs(graph, (s, k), gamma, tau_f, tau_l,
                                   norm, noise, config.alpha)
                    if found is None:
                        continue
                    chains.append(found.chain)
                    fits.append(_finalize_chain(found, array, noise, config.alpha))
                    graph.remove_nodes(found.nodes)
        if graph.longest_path_len() < min_len:
            break
        if len(chains) == extracted_before and not graph.tau_limited:
            # Whatever is left failed on structure (infeasible states,
            # unreachable lengths), which no relaxation can cure.
            break
        if rounds > config.max_relaxations:
            break
        tau_f = tau_f * config.beta
        tau_l = tau_l * config.beta

    return AssociationResult(chains=tuple(chains), states=tuple(fits),
                             likelihood_evals=graph.likelihood_evals,
                             fit_evals=graph.fit_evals, rounds=rounds)
