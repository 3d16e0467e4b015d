"""Round-synchronous network simulation.

Agents sit on a static undirected graph. A message sent in round ``s`` is
readable in round ``s + 1``, and only along edges. Every scalar put on an
edge is charged to the sender in a :class:`CommLedger`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.csgraph import connected_components, shortest_path

from decgp.errors import ContractError, TopologyError


class Graph:
    """Static undirected communication graph.

    Parameters
    ----------
    adjacency : array_like
        Symmetric 0/1 matrix with zero diagonal.
    link_cost : array_like, optional
        Edges actually traversed by one message on each link. Defaults to 1;
        larger values describe virtual links relayed through other agents.
    """

    def __init__(self, adjacency, link_cost=None):
        A = np.asarray(adjacency)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise TopologyError(f"adjacency must be square and non-empty, got shape {A.shape}")
        A = A.astype(bool)
        if not np.array_equal(A, A.T):
            raise TopologyError("adjacency must be symmetric")
        if np.any(np.diag(A)):
            raise TopologyError("adjacency must have a zero diagonal")
        n_comp, _ = connected_components(A.astype(np.int8), directed=False)
        if n_comp != 1:
            raise TopologyError(f"graph has {n_comp} connected components")
        A.setflags(write=False)
        self.adjacency = A
        self.M = A.shape[0]
        self.degree = A.sum(axis=1)
        self.max_degree = int(self.degree.max())
        self.neighbors = [tuple(int(j) for j in np.flatnonzero(A[i])) for i in range(self.M)]
        cost = np.ones(A.shape, dtype=np.int64) if link_cost is None else np.asarray(link_cost, dtype=np.int64)
        self.link_cost = np.where(A, cost, 0)
        # scalars put on edges when every agent sends one scalar to each neighbor
        self.link_load = self.link_cost.sum(axis=1)

    @property
    def laplacian(self) -> np.ndarray:
        return np.diag(self.degree).astype(float) - self.adjacency.astype(float)

    @cached_property
    def hops(self) -> np.ndarray:
        return shortest_path(self.adjacency.astype(float), unweighted=True, directed=False)

    @property
    def diameter(self) -> int:
        return int(self.hops.max())

    @property
    def is_complete(self) -> bool:
        return bool(np.all(self.degree == self.M - 1))

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency))
        return list(zip(i.tolist(), j.tolist()))

    @cached_property
    def flood_load(self) -> np.ndarray:
        """Payload forwards per agent for one flood of unit-size payloads."""
        ledger = CommLedger(self.M)
        flood(self, [np.zeros(1)] * self.M, ledger, phase="probe")
        return ledger.sent.copy()

    def subgraph(self, nodes) -> Graph:
        nodes = np.asarray(nodes)
        return Graph(self.adjacency[np.ix_(nodes, nodes)])

    def __repr__(self) -> str:
        return f"Graph(M={self.M}, edges={len(self.edges)}, diameter={self.diameter})"


def build_graph(kind: str, M: int, adjacency=None) -> Graph:
    """Build a ``path``, ``complete`` or ``custom`` graph on ``M`` agents."""
    if M < 1:
        raise TopologyError("M must be at least 1")
    if kind == "path":
        A = np.zeros((M, M), dtype=bool)
        idx = np.arange(M - 1)
        A[idx, idx + 1] = A[idx + 1, idx] = True
    elif kind == "complete":
        A = ~np.eye(M, dtype=bool)
    elif kind == "custom":
        if adjacency is None:
            raise TopologyError("custom topology needs an adjacency matrix")
        A = np.asarray(adjacency)
        if A.shape != (M, M):
            raise TopologyError(f"adjacency shape {A.shape} does not match M={M}")
    else:
        raise TopologyError(f"unknown topology {kind!r}")
    return Graph(A)


def load_adjacency_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=int, ndmin=2)


def perron_epsilon(graph: Graph) -> float:
    """Consensus step ``1/(max_degree + 1)``, inside the open interval (0, 1/max_degree)."""
    if graph.max_degree == 0:
        return 1.0
    return 1.0 / (graph.max_degree + 1)


@dataclass
class CommLedger:
    """Per-agent count of transmitted scalars plus round counts per phase."""

    n_agents: int
    sent: np.ndarray = field(init=False)
    received: np.ndarray = field(init=False)
    by_phase: dict = field(default_factory=dict)
    rounds: dict = field(default_factory=dict)
    streams: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sent = np.zeros(self.n_agents, dtype=np.int64)
        self.received = np.zeros(self.n_agents, dtype=np.int64)

    def charge(self, phase: str, sent, received=None) -> None:
        """Add per-agent scalar counts (arrays of length ``n_agents``)."""
        sent = np.asarray(sent, dtype=np.int64)
        if np.any(sent < 0):
            raise ContractError("scalar counts must be nonnegative")
        self.sent += sent
        self.received += sent if received is None else np.asarray(received, dtype=np.int64)
        if phase not in self.by_phase:
            self.by_phase[phase] = np.zeros(self.n_agents, dtype=np.int64)
        self.by_phase[phase] += sent

    def add_rounds(self, phase: str, n: int) -> None:
        self.rounds[phase] = self.rounds.get(phase, 0) + int(n)

    def add_iterations(self, phase: str, n: int) -> None:
        self.iterations[phase] = self.iterations.get(phase, 0) + int(n)

    def charge_neighbors(self, phase: str, graph: Graph, width: int, agents=None) -> None:
        """Charge one round in which each agent sends ``width`` scalars to every neighbor."""
        per_agent = graph.link_load * int(width)
        if agents is None:
            self.charge(phase, per_agent)
        else:
            full = np.zeros(self.n_agents, dtype=np.int64)
            full[np.asarray(agents)] = per_agent
            self.charge(phase, full)

    def absorb(self, other: CommLedger, agents) -> None:
        """Fold a ledger kept over a subset of agents into this one."""
        agents = np.asarray(agents)
        for phase, counts in other.by_phase.items():
            full = np.zeros(self.n_agents, dtype=np.int64)
            full[agents] = counts
            self.charge(phase, full, np.zeros(self.n_agents, dtype=np.int64))
        self.received[agents] += other.received
        for name in ("rounds", "iterations"):
            mine = getattr(self, name)
            for k, v in getattr(other, name).items():
                mine[k] = mine.get(k, 0) + v
        self.streams.update(other.streams)

    def total_rounds(self) -> int:
        return int(sum(self.rounds.values()))

    def summary(self) -> dict:
        return {
            "scalars_sent": self.sent.tolist(),
            "scalars_sent_by_phase": {k: v.tolist() for k, v in sorted(self.by_phase.items())},
            "rounds": dict(sorted(self.rounds.items())),
            "iterations": dict(sorted(self.iterations.items())),
            "streams": dict(sorted(self.streams.items())),
        }


class MessageBus:
    """Per-edge mailboxes with one-round delivery delay.

    Messages carry an optional integer tag (e.g. the origin id of a relayed
    payload) which is routing metadata and is not charged.
    """

    def __init__(self, graph: Graph, ledger: CommLedger | None = None, phase: str = "bus"):
        self.graph = graph
        self.ledger = ledger
        self.phase = phase
        self.round = 0
        self._outbox: list[list[tuple[int, int, np.ndarray]]] = [[] for _ in range(graph.M)]
        self._inbox: list[list[tuple[int, int, np.ndarray]]] = [[] for _ in range(graph.M)]
        self.trace: list[tuple[int, int, int, int]] = []
        self.round_totals: list[tuple[int, int]] = []

    def send(self, src: int, dst: int, payload, tag: int = -1) -> None:
        if not self.graph.adjacency[src, dst]:
            raise TopologyError(f"agents {src} and {dst} are not neighbors")
        payload = np.array(payload, dtype=float).reshape(-1)
        self._outbox[dst].append((src, tag, payload))
        self.trace.append((self.round, src, dst, payload.size))

    def receive(self, dst: int) -> list[tuple[int, int, np.ndarray]]:
        """Messages delivered to ``dst`` at the start of the current round."""
        return list(self._inbox[dst])

    def step(self) -> None:
        """Close the round: deliver outboxes and charge the ledger."""
        sent = np.zeros(self.graph.M, dtype=np.int64)
        recv = np.zeros(self.graph.M, dtype=np.int64)
        for dst, box in enumerate(self._outbox):
            for src, _, payload in box:
                cost = payload.size * int(self.graph.link_cost[src, dst])
                sent[src] += cost
                recv[dst] += cost
        if self.ledger is not None:
            self.ledger.charge(self.phase, sent, recv)
        self.round_totals.append((int(sent.sum()), int(recv.sum())))
        self._inbox = self._outbox
        self._outbox = [[] for _ in range(self.graph.M)]
        self.round += 1


def flood(graph: Graph, payloads, ledger: CommLedger, phase: str = "flood") -> list[list[np.ndarray]]:
    """Relay every agent's payload to all agents.

    Each agent forwards a payload, tagged with its origin id, to all its
    neighbors in the round after it first learns it. Runs ``diam`` rounds.

    Returns
    -------
    list of list of ndarray
        For each agent, all ``M`` payloads in origin-id order.
    """
    M = graph.M
    if len(payloads) != M:
        raise ContractError(f"expected {M} payloads, got {len(payloads)}")
    known = [{i: np.array(payloads[i], dtype=float).reshape(-1)} for i in range(M)]
    fresh = [[i] for i in range(M)]
    bus = MessageBus(graph, ledger, phase)
    for _ in range(graph.diameter):
        for i in range(M):
            for origin in fresh[i]:
                for j in graph.neighbors[i]:
                    bus.send(i, j, known[i][origin], tag=origin)
        bus.step()
        fresh = [[] for _ in range(M)]
        for j in range(M):
            for _, origin, payload in bus.receive(j):
                if origin not in known[j]:
                    known[j][origin] = payload
                    fresh[j].append(origin)
    ledger.add_rounds(phase, graph.diameter)
    return [[known[i][k] for k in range(M)] for i in range(M)]


def charge_all_to_all(graph: Graph, width: int, ledger: CommLedger, phase: str) -> int:
    """Charge one all-to-all exchange of ``width`` scalars per agent; return rounds used.

    On a complete graph this is a single direct round; otherwise it costs a
    full flood.
    """
    ledger.charge(phase, graph.flood_load * int(width))
    ledger.add_rounds(phase, graph.diameter)
    return graph.diameter


def neighbor_exchange(graph: Graph, states, ledger: CommLedger, phase: str = "exchange") -> list[dict]:
    """One round in which every agent sends its state to each neighbor.

    Returns
    -------
    list of dict
        ``received[i][j]`` is agent ``j``'s state for each neighbor ``j`` of ``i``.
    """
    if len(states) != graph.M:
        raise ContractError(f"expected {graph.M} states, got {len(states)}")
    bus = MessageBus(graph, ledger, phase)
    for i, state in enumerate(states):
        for j in graph.neighbors[i]:
            bus.send(i, j, state)
    bus.step()
    ledger.add_rounds(phase, 1)
    return [{src: payload for src, _, payload in bus.receive(i)} for i in range(graph.M)]


def bridged_subgraph(graph: Graph, nodes) -> Graph:
    """Graph over ``nodes`` (in the given order) that stays connected.

    Two chosen agents are linked when they are adjacent, or when a path
    joins them through agents outside the chosen set only; such a virtual
    link costs its hop count, since the outsiders relay every message.
    """
    nodes = [int(v) for v in nodes]
    chosen = np.zeros(graph.M, dtype=bool)
    chosen[nodes] = True
    k = len(nodes)
    A = np.zeros((k, k), dtype=bool)
    cost = np.zeros((k, k), dtype=np.int64)
    for a_pos, a in enumerate(nodes):
        # breadth-first search that may only pass through unchosen agents
        dist = {a: 0}
        frontier = [a]
        while frontier:
            nxt = []
            for u in frontier:
                for v in graph.neighbors[u]:
                    if v in dist:
                        continue
                    dist[v] = dist[u] + 1
                    if not chosen[v]:
                        nxt.append(v)
            frontier = nxt
        for b_pos, b in enumerate(nodes):
            if b != a and b in dist:
                A[a_pos, b_pos] = True
                cost[a_pos, b_pos] = dist[b]
    return Graph(A, cost)


def broadcast_tree(graph: Graph, sources) -> tuple[dict[int, int], int]:
    """Breadth-first forest rooted at ``sources``.

    Returns
    -------
    parent : dict
        ``parent[v]`` is the agent that forwards to ``v``, for each non-source.
    depth : int
        Rounds needed to reach every agent.
    """
    dist = {int(s): 0 for s in sources}
    parent = {}
    frontier = sorted(dist)
    while frontier:
        nxt = []
        for u in frontier:
            for v in graph.neighbors[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    parent[v] = u
                    nxt.append(v)
        frontier = nxt
    return parent, max(dist.values())
