"""Decentralized numerical primitives.

* average consensus (DAC) with a Perron-matrix update,
* Jacobi over-relaxation (JOR) for ``H q = b`` with one row per agent,
* power iteration for the relaxation factor that makes JOR fastest,
* projection-consensus linear solving (DALE), which needs only neighbors,
* a windowed max/min detector that lets agents stop without a coordinator.

Agents are simulated in lockstep: per-agent quantities are stacked along
axis 0 and every round charges the ledger with what each agent transmits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from decgp.errors import ContractError, NonConvergenceError
from decgp.netsim import CommLedger, Graph, charge_all_to_all, perron_epsilon

log = logging.getLogger(__name__)

ETA_STOP = 1e-9
ETA_PM = 1e-8
SOLVER_MAX_ITER = 50_000
PM_MAX_ITER = 100_000
PM_START_SEED = 0


def _as_columns(values) -> tuple[np.ndarray, bool]:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        return arr[:, None], True
    return arr, False


class MaximinDetector:
    """Windowed max/min consensus used as a local stopping rule.

    At the start of each window every agent seeds a running max and min with
    its current value; for ``diam`` rounds agents replace them with the max
    (min) over their closed neighborhood. After ``diam`` rounds each agent
    holds the network-wide extremes of the window-start values, so all agents
    reach the same verdict. For averaging updates the iterate stays inside
    that range afterwards, hence a firing detector certifies every agent is
    within ``eta`` of the network average.
    """

    def __init__(self, graph: Graph, eta: float, ledger: CommLedger | None = None,
                 phase: str = "maximin"):
        self.closed = graph.adjacency | np.eye(graph.M, dtype=bool)
        self.graph = graph
        self.window = max(graph.diameter, 1)
        self.eta = eta
        self.ledger = ledger
        self.phase = phase
        self.t = 0
        self.hi = self.lo = None

    def observe(self, values: np.ndarray) -> bool:
        """Run one detector round on ``values`` (agents along axis 0)."""
        V = values.reshape(values.shape[0], -1)
        if self.t == 0:
            self.hi, self.lo = V.copy(), V.copy()
        mask = self.closed[:, :, None]
        self.hi = np.where(mask, self.hi[None, :, :], -np.inf).max(axis=1)
        self.lo = np.where(mask, self.lo[None, :, :], np.inf).min(axis=1)
        if self.ledger is not None:
            self.ledger.charge_neighbors(self.phase, self.graph, 2 * V.shape[1])
        self.t += 1
        if self.t < self.window:
            return False
        self.t = 0
        return bool(np.all(self.hi - self.lo < self.eta))


def dac_cap(M: int, eps: float) -> int:
    """Iteration cap ``10 M^3 log(M / eps)``."""
    return max(int(math.ceil(10 * M**3 * math.log(M / eps))), 10)


def dac_step(graph: Graph, W: np.ndarray, eps: float, ledger: CommLedger | None = None,
             phase: str = "dac") -> np.ndarray:
    """One Perron update ``w_i += eps * sum_{j in N_i} (w_j - w_i)``."""
    W2, flat = _as_columns(W)
    if ledger is not None:
        ledger.charge_neighbors(phase, graph, W2.shape[1])
    out = W2 - eps * (graph.laplacian @ W2)
    return out[:, 0] if flat else out


def run_dac(graph: Graph, values, eta_stop: float = ETA_STOP, ledger: CommLedger | None = None,
            eps: float | None = None, max_rounds: int | None = None,
            phase: str = "dac") -> tuple[np.ndarray, int]:
    """Average consensus until the max/min detector fires.

    Parameters
    ----------
    values : array_like
        Shape (M,) or (M, k); each column is an independent consensus stream.

    Returns
    -------
    W : ndarray
        Final per-agent values, same shape as ``values``.
    rounds : int
        Communication rounds used (detector traffic piggybacks on the updates).
    """
    W, flat = _as_columns(values)
    M = graph.M
    if W.shape[0] != M:
        raise ContractError(f"expected {M} rows, got {W.shape[0]}")
    if ledger is not None:
        ledger.streams[phase] = W.shape[1]
    if M == 1:
        return (W[:, 0] if flat else W), 0
    eps = perron_epsilon(graph) if eps is None else eps
    if not 0 < eps < 1.0 / graph.max_degree:
        raise ContractError(f"eps={eps} outside (0, 1/{graph.max_degree})")
    cap = dac_cap(M, eps) if max_rounds is None else max_rounds
    detector = MaximinDetector(graph, eta_stop, ledger, phase=f"{phase}/maximin")
    for s in range(cap):
        if detector.observe(W):
            if ledger is not None:
                ledger.add_rounds(phase, s + 1)
            return (W[:, 0] if flat else W), s + 1
        W = dac_step(graph, W, eps, ledger, phase)
    raise NonConvergenceError(f"average consensus did not converge in {cap} rounds")


def _check_diag(H: np.ndarray) -> np.ndarray:
    d = np.diag(H).copy()
    if np.any(d == 0):
        raise ContractError("JOR needs a nonzero diagonal")
    return d


def jor_step(H: np.ndarray, b: np.ndarray, q: np.ndarray, omega: float) -> np.ndarray:
    """``q_i <- (1 - w) q_i + (w / h_ii) (b_i - sum_{j != i} h_ij q_j)`` for every agent."""
    d = _check_diag(H)
    if q.ndim == 2:
        d = d[:, None]
    off = H @ q - d * q
    return (1.0 - omega) * q + (omega / d) * (b - off)


def fixed_omega(M: int, rule: str = "sufficient") -> float:
    """Relaxation factor from the agent count alone.

    ``sufficient`` stays strictly inside the sufficient region (1.999 / M);
    ``boundary`` uses 2 / M exactly.
    """
    if rule == "sufficient":
        return 1.999 / M
    if rule == "boundary":
        return 2.0 / M
    raise ContractError(f"unknown omega rule {rule!r}")


def run_jor(graph: Graph, H, b, omega: float, eta_stop: float = ETA_STOP,
            ledger: CommLedger | None = None, max_iter: int = SOLVER_MAX_ITER,
            q0=None, phase: str = "jor") -> tuple[np.ndarray, int]:
    """Solve ``H q = b`` by JOR, agent ``i`` owning row ``i``.

    Every iteration each agent needs all current ``q_j``: one direct round on
    a complete graph, otherwise a flood charged at ``diam`` rounds. Each
    agent also shares its own residual ``b_i - row_i q`` in the same
    exchange, and iteration stops once the largest residual is below
    ``eta_stop``. A step-size test would stop early whenever the slowest
    mode creeps, leaving an error of about ``step / (1 - rate)``.

    Returns
    -------
    q : ndarray
        Solution estimate, shape of ``b``.
    iterations : int
    """
    H = np.asarray(H, dtype=float)
    b2, flat = _as_columns(b)
    d = _check_diag(H)
    q = b2 / d[:, None] if q0 is None else _as_columns(q0)[0].copy()
    for s in range(1, max_iter + 1):
        if ledger is not None and graph.M > 1:
            charge_all_to_all(graph, 2 * q.shape[1], ledger, phase)
        with np.errstate(over="ignore", invalid="ignore"):
            q = jor_step(H, b2, q, omega)
            residual = np.max(np.abs(b2 - H @ q))
        if not np.isfinite(residual):
            raise NonConvergenceError(f"JOR diverged at iteration {s} with omega={omega}")
        if residual < eta_stop:
            if ledger is not None:
                ledger.add_iterations(phase, s)
            return (q[:, 0] if flat else q), s
    raise NonConvergenceError(f"JOR did not converge in {max_iter} iterations")


def power_method(R, graph: Graph, eta_pm: float = ETA_PM, ledger: CommLedger | None = None,
                 max_iter: int = PM_MAX_ITER, phase: str = "pm", e0=None) -> float:
    """Dominant eigenvalue magnitude of ``R`` by distributed power iteration.

    Agent ``i`` holds row ``i``. Starting from ``e0`` (default ``1/M``), each iteration
    computes ``g = R e`` (every agent broadcasts its entry), rescales
    ``e = g / ||g||_inf`` and returns ``||g||_inf`` once ``e`` stops moving.
    ``e`` may flip sign every step when the dominant eigenvalue is
    negative, so movement is measured up to sign.
    """
    R = np.asarray(R, dtype=float)
    M = R.shape[0]
    e = np.full(M, 1.0 / M) if e0 is None else np.array(e0, dtype=float)
    for s in range(1, max_iter + 1):
        g = R @ e
        if ledger is not None and M > 1:
            charge_all_to_all(graph, 1, ledger, phase)
        gmax = float(np.max(np.abs(g)))
        if gmax == 0.0:
            if ledger is not None:
                ledger.add_iterations(phase, s)
            return 0.0
        e_new = g / gmax
        move = min(np.linalg.norm(e_new - e), np.linalg.norm(e_new + e))
        e = e_new
        if move < eta_pm:
            if ledger is not None:
                ledger.add_iterations(phase, s)
            return gmax
    raise NonConvergenceError(f"power iteration did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class OmegaEstimate:
    omega: float
    lam_max: float
    lam_min: float


def optimal_omega(CA, graph: Graph, eta_pm: float = ETA_PM,
                  ledger: CommLedger | None = None) -> OmegaEstimate:
    """Fastest JOR relaxation ``2 / (lam_max(R) + lam_min(R))``, ``R = diag(CA)^-1 CA``.

    Agents first exchange their rows of ``CA``. ``lam_min`` comes from a
    second power iteration on the shifted matrix ``R - lam_max I``, whose
    dominant magnitude is ``lam_max - lam_min``.

    Both iterations start from a seeded random positive vector (one entry
    drawn per agent): the uniform start is an exact eigenvector whenever
    ``R`` has equal row sums, which can stall or mislead the iteration.
    """
    CA = np.asarray(CA, dtype=float)
    M = CA.shape[0]
    if ledger is not None and M > 1:
        charge_all_to_all(graph, M, ledger, "pm/rows")
    R = CA / _check_diag(CA)[:, None]
    e0 = np.random.default_rng(PM_START_SEED).uniform(0.5, 1.5, M) / M
    lam_max = power_method(R, graph, eta_pm, ledger, e0=e0)
    lam_shift = power_method(R - lam_max * np.eye(M), graph, eta_pm, ledger, e0=e0)
    lam_min = abs(lam_shift - lam_max)
    if lam_min <= 0:
        raise ContractError("relaxation estimate needs a positive definite matrix")
    if M > 1 and lam_shift < 10 * eta_pm:
        log.warning("spectrum looks degenerate (lam_max - lam_min = %.3g)", lam_shift)
    return OmegaEstimate(2.0 / (lam_max + lam_min), lam_max, lam_min)


@dataclass
class DaleState:
    """Per-agent rows, right-hand sides, projectors and iterates.

    ``Q`` has shape (agents, unknowns, rhs): agent ``i`` holds a full
    estimate of the solution vector for every right-hand side.
    """

    H: np.ndarray
    b: np.ndarray
    P: np.ndarray
    x0: np.ndarray
    Q: np.ndarray

    @classmethod
    def init(cls, H, b) -> DaleState:
        H = np.asarray(H, dtype=float)
        b2, _ = _as_columns(b)
        norms = np.einsum("ij,ij->i", H, H)
        if np.any(norms == 0):
            raise ContractError("every agent needs a nonzero row")
        n = H.shape[1]
        P = np.eye(n)[None] - H[:, :, None] * H[:, None, :] / norms[:, None, None]
        # minimum-norm point of each agent's hyperplane
        x0 = H[:, :, None] * (b2 / norms[:, None])[:, None, :]
        return cls(H, b2, P, x0, x0.copy())


def dale_step(graph: Graph, state: DaleState, ledger: CommLedger | None = None,
              phase: str = "dale") -> DaleState:
    """``q_i <- x0_i + (1/|N_i|) P_i sum_{j in N_i} q_j`` for all agents."""
    if ledger is not None:
        ledger.charge_neighbors(phase, graph, state.Q.shape[1] * state.Q.shape[2])
    S = np.einsum("ij,jnk->ink", graph.adjacency.astype(float), state.Q)
    S /= graph.degree[:, None, None]
    state.Q = state.x0 + np.einsum("inm,imk->ink", state.P, S)
    return state


def run_dale(graph: Graph, H, b, eta_stop: float = ETA_STOP, ledger: CommLedger | None = None,
             max_iter: int = SOLVER_MAX_ITER, phase: str = "dale") -> tuple[np.ndarray, int]:
    """Solve ``H q = b`` with neighbor-only projection consensus.

    Returns
    -------
    Q : ndarray
        Per-agent solution estimates, shape (agents, unknowns) for a vector
        ``b`` or (agents, unknowns, rhs) for a matrix ``b``.
    iterations : int
    """
    flat = np.ndim(b) == 1
    state = DaleState.init(H, b)
    if graph.M != state.H.shape[0]:
        raise ContractError("DALE needs one row per agent")
    if graph.M == 1:
        return (state.Q[:, :, 0] if flat else state.Q), 0
    detector = MaximinDetector(graph, eta_stop, ledger, phase=f"{phase}/maximin")
    for s in range(max_iter):
        if detector.observe(state.Q):
            if ledger is not None:
                ledger.add_rounds(phase, s + 1)
                ledger.add_iterations(phase, s)
            return (state.Q[:, :, 0] if flat else state.Q), s
        state = dale_step(graph, state, ledger, phase)
    raise NonConvergenceError(f"DALE did not converge in {max_iter} iterations")
