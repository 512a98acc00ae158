"""Decentralized aggregation of symbol messages across the AP graph.

APs exchange normalized per-(user, slot) pmfs with their graph neighbors;
on a tree the scheme reproduces the centralized product of all local
symbol messages at every AP after diameter+1 exchange rounds. All pmf
products run in the log domain with max-subtraction to survive products of
many sharply peaked messages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cfep import engine
from cfep.engine import EngineOptions
from cfep.gaussian import log_normalize

__all__ = [
    "ConsensusEnvelope",
    "ScheduleOptions",
    "ScheduleState",
    "RunStats",
    "compute_nu",
    "decentralized_belief",
    "refresh_beliefs",
    "run_iteration",
    "run_schedule",
    "spanning_tree",
]


@dataclass
class ConsensusEnvelope:
    """Inter-AP message: normalized pmfs for every (user, slot)."""

    sender: int
    receiver: int
    iteration: int
    log_pmf: np.ndarray  # (K, T, S)

    @property
    def pmf(self) -> np.ndarray:
        return np.exp(self.log_pmf)


@dataclass
class ScheduleOptions:
    engine: EngineOptions = field(default_factory=EngineOptions)
    max_iterations: int = 20
    residual_tol: float = 1e-6
    schedule: str = "sequential"  # "sequential" | "parallel"

    def __post_init__(self):
        if self.schedule not in ("sequential", "parallel"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class ScheduleState:
    """Current inter-AP messages plus residual bookkeeping."""

    links: np.ndarray                      # (L, L) bool adjacency
    nu: dict = field(default_factory=dict)  # (sender, receiver) -> (K,T,S) log pmf
    iteration: int = 0
    prev_means: np.ndarray | None = None   # (L, K, N) channel-belief means

    @classmethod
    def initialize(cls, links: np.ndarray, workspaces: list) -> "ScheduleState":
        """Uniform inter-AP messages on every directed edge."""
        ws0 = workspaces[0]
        shape = (ws0.num_users, ws0.num_slots, ws0.points.shape[0])
        uniform = np.full(shape, -np.log(shape[2]))
        nu = {}
        for l in range(links.shape[0]):
            for m in np.flatnonzero(links[l]):
                nu[(l, int(m))] = uniform.copy()
        means = np.stack([engine.channel_estimate(ws) for ws in workspaces])
        return cls(links=links, nu=nu, prev_means=means)


@dataclass
class RunStats:
    iterations: int
    residuals: list


def compute_nu(l: int, to: int, links: np.ndarray, nu_read: dict, log_msg2x: np.ndarray) -> np.ndarray:
    """Outbound message l -> to: the local symbol message times every
    inbound message except the one from `to`, renormalized per (k, t)."""
    if not links[l, to]:
        raise ValueError(f"({l}, {to}) is not an edge of the AP graph")
    acc = log_msg2x.copy()
    for nb in np.flatnonzero(links[l]):
        if nb != to:
            acc += nu_read[(int(nb), l)]
    return log_normalize(acc)


def decentralized_belief(
    l: int, links: np.ndarray, nu: dict, log_msg2x: np.ndarray, log_prior: np.ndarray
) -> np.ndarray:
    """Local symbol belief at AP l: prior times local message times all
    inbound messages, normalized per (k, t)."""
    acc = log_prior[None, None, :] + log_msg2x
    for nb in np.flatnonzero(links[l]):
        acc += nu[(int(nb), l)]
    return log_normalize(acc)


def refresh_beliefs(workspaces: list, state: ScheduleState):
    """Phase 1 of an iteration: every AP rebuilds its symbol beliefs from
    the currently stored inbound messages."""
    for l, ws in enumerate(workspaces):
        ws.log_bx = decentralized_belief(
            l, state.links, state.nu, ws.log_msg2x, ws.log_prior
        )


def run_iteration(
    workspaces: list,
    state: ScheduleState,
    opts: ScheduleOptions,
    update_factors: bool = True,
    tracer=None,
) -> float:
    """One outer iteration: belief refresh at all APs, then the per-AP local
    sweeps interleaved with outbound message updates.

    With the sequential schedule the stored inbound messages are read live,
    so APs later in the sweep see messages already refreshed this iteration;
    the parallel schedule reads a frozen snapshot from the previous
    iteration. `update_factors=False` skips the factor updates and only
    propagates symbol messages (used by the tree-consensus tests).

    Returns the iteration residual: the maximum total-variation change of
    the symbol beliefs plus the maximum relative change of the channel
    belief means.
    """
    old_bx = [ws.log_bx for ws in workspaces]
    refresh_beliefs(workspaces, state)
    tv = max(
        0.5 * np.abs(np.exp(ws.log_bx) - np.exp(old)).sum(axis=-1).max()
        for ws, old in zip(workspaces, old_bx)
    )

    if tracer is not None:
        tracer.bind(iteration=state.iteration)
    nu_read = state.nu if opts.schedule == "sequential" else dict(state.nu)
    staged = {}
    for l, ws in enumerate(workspaces):
        if update_factors:
            engine.ap_iterate(ws, opts.engine, tracer=tracer)
        for nb in np.flatnonzero(state.links[l]):
            nb = int(nb)
            nu_new = compute_nu(l, nb, state.links, nu_read, ws.log_msg2x)
            if opts.schedule == "sequential":
                state.nu[(l, nb)] = nu_new
            else:
                staged[(l, nb)] = nu_new
            if tracer is not None:
                _trace_nu(tracer, l, nb, nu_new)
    if staged:
        state.nu.update(staged)

    means = np.stack([engine.channel_estimate(ws) for ws in workspaces])
    delta = np.linalg.norm(means - state.prev_means, axis=-1)
    scale = np.maximum(np.linalg.norm(state.prev_means, axis=-1), 1e-300)
    mean_change = float((delta / scale).max())
    state.prev_means = means
    state.iteration += 1
    return float(tv) + mean_change


def run_schedule(workspaces: list, state: ScheduleState, opts: ScheduleOptions, tracer=None) -> RunStats:
    """Iterate until the residual drops below tolerance or the iteration
    budget is exhausted; leaves the symbol beliefs refreshed against the
    final messages."""
    residuals = []
    for _ in range(opts.max_iterations):
        res = run_iteration(workspaces, state, opts, tracer=tracer)
        residuals.append(res)
        if res < opts.residual_tol:
            break
    refresh_beliefs(workspaces, state)
    return RunStats(iterations=len(residuals), residuals=residuals)


def spanning_tree(links: np.ndarray, root: int = 0) -> np.ndarray:
    """BFS spanning tree of a connected graph, as a new adjacency matrix."""
    n = links.shape[0]
    tree = np.zeros_like(links)
    seen = np.zeros(n, dtype=bool)
    seen[root] = True
    frontier = [root]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(links[u]):
                if not seen[v]:
                    seen[v] = True
                    tree[u, v] = tree[v, u] = True
                    nxt.append(int(v))
        frontier = nxt
    if not seen.all():
        raise ValueError("graph is disconnected")
    return tree


def _trace_nu(tracer, sender: int, receiver: int, log_pmf: np.ndarray):
    pmf = np.exp(log_pmf)
    K, T, _ = pmf.shape
    for k in range(K):
        for t in range(T):
            tracer.emit(
                "nu",
                sender=sender,
                receiver=receiver,
                k=k,
                t=t,
                pmf=pmf[k, t].tolist(),
            )
