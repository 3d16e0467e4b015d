"""Hyperparameter training over partitioned data.

Centralized trainers (a coordinator gathers and scatters):

* ``fact_gp_train``: gradient descent on the sum of local likelihoods,
* ``cgp_train``: consensus ADMM with an inexact nested minimization,
* ``apx_gp_train``: consensus ADMM with the local likelihood linearized,
* ``gapx_gp_train``: the linearized variant on data augmented with a
  shared communication sample.

Decentralized trainers (neighbors only, fixed round budget):

* ``dec_cgp_train``, ``dec_apx_train``, ``dec_gapx_train``.

All iterates live in log-hyperparameter space. Agent ``i``'s state is row
``i`` of the stacked arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from decgp.errors import ConditioningError, ContractError, NonConvergenceError
from decgp.gp import Dataset, HyperParams, nll_and_grad
from decgp.netsim import CommLedger, Graph, flood, neighbor_exchange

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmConfig:
    """Trainer settings.

    Attributes
    ----------
    rho : float
        Augmented-Lagrangian penalty.
    lipschitz : float
        Curvature bound used by the linearized centralized update.
    kappa : float
        Proximal weight of the linearized decentralized update.
    gd_step : float
        Step of the nested gradient descent in the exact ADMM variants.
    s_end : int
        Round budget of the decentralized trainers.
    tol_admm : float
        Centralized stopping tolerance on ``max_i ||theta_i - z||``.
    theta0 : tuple
        Initial hyperparameters (natural scale).
    """

    rho: float = 500.0
    lipschitz: float = 5000.0
    kappa: float = 5000.0
    gd_step: float = 1e-5
    s_end: int = 100
    tol_admm: float = 1e-3
    seed: int = 0
    theta0: tuple = (2.0, 0.5, 1.0, 1.0)
    max_rounds: int = 1000
    nested_max_iter: int = 100
    nested_tol: float = 1e-6
    fact_step: float = 1e-3

    def __post_init__(self):
        for name in ("rho", "lipschitz", "kappa", "gd_step", "tol_admm", "fact_step"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.s_end < 1 or self.max_rounds < 1:
            raise ContractError("round budgets must be at least 1")
        object.__setattr__(self, "theta0", tuple(float(v) for v in self.theta0))
        HyperParams.from_vector(self.theta0)

    def log_theta0(self, dim: int) -> np.ndarray:
        if len(self.theta0) != dim + 2:
            raise ContractError(f"theta0 has {len(self.theta0)} entries, inputs need {dim + 2}")
        return np.log(np.asarray(self.theta0))


@dataclass
class CentralAdmmState:
    z: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    @classmethod
    def init(cls, log_theta0: np.ndarray, M: int) -> CentralAdmmState:
        theta = np.tile(log_theta0, (M, 1))
        return cls(log_theta0.copy(), theta, np.zeros_like(theta))

    def residual(self) -> float:
        return float(np.max(np.linalg.norm(self.theta - self.z, axis=1)))


@dataclass
class DecAdmmState:
    theta: np.ndarray
    p: np.ndarray

    @classmethod
    def init(cls, log_theta0: np.ndarray, M: int) -> DecAdmmState:
        theta = np.tile(log_theta0, (M, 1))
        return cls(theta, np.zeros_like(theta))

    def spread(self) -> float:
        return consensus_spread(self.theta)


@dataclass(frozen=True)
class AugmentedData:
    """Shared communication sample and per-agent augmented datasets.

    ``plus[i]`` is the multiset union of agent ``i``'s data with the
    communication sample; ``plus_unique(i)`` drops exact input repeats and
    is what likelihoods and experts are built on.
    """

    samples: tuple[Dataset, ...]
    comm: Dataset
    plus: tuple[Dataset, ...]

    def plus_unique(self, i: int) -> Dataset:
        return self.plus[i].deduplicated()

    @property
    def comm_unique(self) -> Dataset:
        return self.comm.deduplicated()


@dataclass
class TrainResult:
    """Trainer output.

    ``theta`` holds the final log-hyperparameters per agent (one row for the
    centralized trainers' global estimate broadcast to every agent).
    """

    theta: np.ndarray
    rounds: int
    converged: bool
    spread_history: list = field(default_factory=list)
    augmented: AugmentedData | None = None

    @property
    def hyper(self) -> HyperParams:
        """Agent-averaged estimate."""
        return HyperParams.from_log(self.theta.mean(axis=0))

    @property
    def agent_hypers(self) -> list[HyperParams]:
        return [HyperParams.from_log(t) for t in self.theta]


def consensus_spread(theta: np.ndarray) -> float:
    """Largest pairwise distance between agents' estimates."""
    diff = theta[:, None, :] - theta[None, :, :]
    return float(np.sqrt(np.max(np.einsum("ijk,ijk->ij", diff, diff))))


def _check_datasets(datasets) -> list[Dataset]:
    datasets = list(datasets)
    if not datasets:
        raise ContractError("need at least one local dataset")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise ContractError(f"local datasets disagree on input dimension: {dims}")
    return datasets


def _local_grad(ds: Dataset, theta: np.ndarray) -> np.ndarray:
    return nll_and_grad(ds, theta)[1]


def nested_gd(fun_grad, x0: np.ndarray, step: float, max_iter: int = 100,
              tol: float = 1e-6) -> np.ndarray:
    """Fixed-step gradient descent for the inner ADMM problems.

    Stops early when the gradient norm drops below ``tol``. If the objective
    increases 20 steps in a row the step is halved once; a second streak
    raises :class:`NonConvergenceError`.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    streak = 0
    halved = False
    for _ in range(max_iter):
        if np.linalg.norm(g) < tol:
            break
        x_new = x - step * g
        f_new, g_new = fun_grad(x_new)
        streak = streak + 1 if f_new > f else 0
        if streak >= 20:
            if halved:
                raise NonConvergenceError("nested gradient descent keeps increasing the objective")
            step /= 2.0
            halved = True
            streak = 0
        x, f, g = x_new, f_new, g_new
    return x


def fact_gp_train(datasets, config: AdmmConfig = AdmmConfig(),
                  ledger: CommLedger | None = None) -> TrainResult:
    """Gradient descent on the sum of local likelihoods (block-diagonal approximation).

    Each round the coordinator gathers every agent's local value and
    gradient; step size is chosen by backtracking on the summed objective.
    Stops when the relative decrease falls below 1e-10 or after
    ``config.max_rounds`` rounds (``converged`` is then False).
    """
    datasets = _check_datasets(datasets)
    P = datasets[0].dim + 2

    def total(theta):
        vals = [nll_and_grad(ds, theta) for ds in datasets]
        return sum(v for v, _ in vals), sum(g for _, g in vals)

    theta = config.log_theta0(datasets[0].dim)
    f, g = total(theta)
    step = config.fact_step
    converged = False
    rounds = 0
    for rounds in range(1, config.max_rounds + 1):
        if ledger is not None:
            ledger.charge("gather", np.full(ledger.n_agents, P))
            ledger.add_rounds("gather", 1)
        gnorm2 = float(g @ g)
        while True:
            cand = theta - step * g
            if ledger is not None:
                # each trial point costs one local objective value per agent
                ledger.charge("linesearch", np.ones(ledger.n_agents))
            try:
                f_new, g_new = total(cand)
            except ConditioningError:
                f_new = np.inf
            if f_new <= f - 1e-4 * step * gnorm2 or step < 1e-14:
                break
            step /= 2.0
        if not np.isfinite(f_new):
            break
        done = abs(f - f_new) <= 1e-10 * max(1.0, abs(f))
        theta, f, g = cand, f_new, g_new
        step *= 2.0
        if done:
            converged = True
            break
    if not converged:
        log.warning("factorized training stopped without converging after %d rounds", rounds)
    return TrainResult(np.tile(theta, (len(datasets), 1)), rounds, converged)


def _charge_gather_scatter(ledger: CommLedger | None, P: int) -> None:
    if ledger is not None:
        ledger.charge("gather", np.full(ledger.n_agents, P))
        ledger.add_rounds("gather", 2)


def cgp_round(state: CentralAdmmState, datasets, config: AdmmConfig,
              ledger: CommLedger | None = None) -> CentralAdmmState:
    """One consensus-ADMM round with an inexact nested minimization per agent."""
    rho = config.rho
    z = np.mean(state.theta + state.psi / rho, axis=0)
    theta = np.empty_like(state.theta)
    for i, ds in enumerate(datasets):
        psi_i = state.psi[i]

        def fun_grad(t, ds=ds, psi_i=psi_i):
            v, g = nll_and_grad(ds, t)
            r = t - z
            return v + psi_i @ r + 0.5 * rho * r @ r, g + psi_i + rho * r

        theta[i] = nested_gd(fun_grad, state.theta[i], config.gd_step,
                             config.nested_max_iter, config.nested_tol)
    psi = state.psi + rho * (theta - z)
    _charge_gather_scatter(ledger, z.size)
    return CentralAdmmState(z, theta, psi)


def apx_gp_round(state: CentralAdmmState, datasets, config: AdmmConfig,
                 ledger: CommLedger | None = None) -> CentralAdmmState:
    """One linearized consensus-ADMM round: ``theta_i = z - (grad_i(z) + psi_i)/(rho + L)``."""
    rho = config.rho
    z = np.mean(state.theta + state.psi / rho, axis=0)
    grads = np.array([_local_grad(ds, z) for ds in datasets])
    theta = z - (grads + state.psi) / (rho + config.lipschitz)
    psi = state.psi + rho * (theta - z)
    _charge_gather_scatter(ledger, z.size)
    return CentralAdmmState(z, theta, psi)


def _run_central(round_fn, datasets, config: AdmmConfig, ledger) -> TrainResult:
    datasets = _check_datasets(datasets)
    state = CentralAdmmState.init(config.log_theta0(datasets[0].dim), len(datasets))
    history = []
    for s in range(1, config.max_rounds + 1):
        state = round_fn(state, datasets, config, ledger)
        history.append(state.residual())
        if history[-1] < config.tol_admm:
            return TrainResult(np.tile(state.z, (len(datasets), 1)), s, True, history)
    log.warning("centralized ADMM hit the round cap (residual %.3g)", history[-1])
    return TrainResult(np.tile(state.z, (len(datasets), 1)), config.max_rounds, False, history)


def cgp_train(datasets, config: AdmmConfig = AdmmConfig(),
              ledger: CommLedger | None = None) -> TrainResult:
    return _run_central(cgp_round, datasets, config, ledger)


def apx_gp_train(datasets, config: AdmmConfig = AdmmConfig(),
                 ledger: CommLedger | None = None) -> TrainResult:
    return _run_central(apx_gp_round, datasets, config, ledger)


def sample_communication_data(datasets, seed: int) -> list[Dataset]:
    """Each agent draws ``floor(N_i / M)`` of its points without replacement.

    Agent ``i`` uses its own stream seeded by ``(seed, i)``.
    """
    M = len(datasets)
    samples = []
    for i, ds in enumerate(datasets):
        rng = np.random.default_rng([seed, i])
        idx = rng.choice(len(ds), size=len(ds) // M, replace=False)
        samples.append(ds.subset(idx))
    return samples


def _pack(ds: Dataset) -> np.ndarray:
    return np.column_stack([ds.inputs, ds.outputs]).reshape(-1)


def _unpack(payload: np.ndarray, dim: int) -> Dataset:
    rows = payload.reshape(-1, dim + 1)
    return Dataset(rows[:, :dim], rows[:, dim])


def build_augmented_data(datasets, seed: int, graph: Graph | None = None,
                         ledger: CommLedger | None = None) -> AugmentedData:
    """Sample, share and fuse the communication dataset.

    With a ``graph`` and ``ledger`` the samples are flooded through the
    network; otherwise a coordinator gathers and scatters them.
    """
    datasets = _check_datasets(datasets)
    samples = sample_communication_data(datasets, seed)
    dim = datasets[0].dim
    M = len(datasets)
    if graph is not None and ledger is not None:
        received = flood(graph, [_pack(s) for s in samples], ledger, phase="flood")
        views = [[_unpack(p, dim) for p in received[i] if p.size] for i in range(M)]
        comm = Dataset.concat(views[0]) if views[0] else None
        for v in views[1:]:
            if comm is not None and not np.array_equal(Dataset.concat(v).inputs, comm.inputs):
                raise ContractError("agents ended up with different communication datasets")
    else:
        nonempty = [s for s in samples if len(s)]
        comm = Dataset.concat(nonempty) if nonempty else None
    if comm is None:
        raise ContractError("communication dataset is empty (every N_i < M)")
    plus = tuple(Dataset.concat([ds, comm]) for ds in datasets)
    return AugmentedData(tuple(samples), comm, plus)


def gapx_gp_train(datasets, config: AdmmConfig = AdmmConfig(),
                  ledger: CommLedger | None = None) -> TrainResult:
    """Linearized consensus ADMM on augmented datasets; the result carries them."""
    datasets = _check_datasets(datasets)
    aug = build_augmented_data(datasets, config.seed)
    result = apx_gp_train([aug.plus_unique(i) for i in range(len(datasets))], config, ledger)
    return replace(result, augmented=aug)


def _neighbor_view(graph: Graph, state: DecAdmmState, ledger: CommLedger | None,
                   phase: str) -> list[np.ndarray]:
    """Exchange ``theta`` with neighbors; return, per agent, the stacked neighbor states."""
    if ledger is None:
        ledger = CommLedger(graph.M)
    got = neighbor_exchange(graph, list(state.theta), ledger, phase)
    P = state.theta.shape[1]
    return [np.array([got[i][j] for j in graph.neighbors[i]]).reshape(-1, P) for i in range(graph.M)]


def dec_cgp_round(state: DecAdmmState, graph: Graph, datasets, config: AdmmConfig,
                  ledger: CommLedger | None = None) -> DecAdmmState:
    """One decentralized ADMM round with an inexact nested minimization."""
    rho = config.rho
    nbrs = _neighbor_view(graph, state, ledger, "admm")
    theta = np.empty_like(state.theta)
    p = np.empty_like(state.p)
    for i, ds in enumerate(datasets):
        th_i = state.theta[i]
        p[i] = state.p[i] + rho * np.sum(th_i - nbrs[i], axis=0)
        mids = (th_i + nbrs[i]) / 2.0
        p_i = p[i]

        def fun_grad(t, ds=ds, p_i=p_i, mids=mids):
            v, g = nll_and_grad(ds, t)
            r = t - mids
            return (v + t @ p_i + rho * np.sum(r * r),
                    g + p_i + 2.0 * rho * np.sum(r, axis=0))

        theta[i] = nested_gd(fun_grad, th_i, config.gd_step,
                             config.nested_max_iter, config.nested_tol)
    return DecAdmmState(theta, p)


def dec_apx_update(theta_i, nbr_thetas, grad_i, p_next, rho: float, kappa: float) -> np.ndarray:
    """Closed-form minimizer of the linearized per-agent subproblem."""
    n = len(nbr_thetas)
    total = np.sum(nbr_thetas, axis=0) if n else np.zeros_like(theta_i)
    return (rho * total - grad_i + (kappa + n * rho) * theta_i - p_next) / (kappa + 2 * n * rho)


def dec_apx_round(state: DecAdmmState, graph: Graph, datasets, config: AdmmConfig,
                  ledger: CommLedger | None = None) -> DecAdmmState:
    """One decentralized linearized ADMM round (closed-form per-agent update)."""
    rho = config.rho
    nbrs = _neighbor_view(graph, state, ledger, "admm")
    theta = np.empty_like(state.theta)
    p = np.empty_like(state.p)
    for i, ds in enumerate(datasets):
        th_i = state.theta[i]
        p[i] = state.p[i] + rho * np.sum(th_i - nbrs[i], axis=0)
        theta[i] = dec_apx_update(th_i, nbrs[i], _local_grad(ds, th_i), p[i], rho, config.kappa)
    return DecAdmmState(theta, p)


def kappa_lower_bound(graph: Graph, rho: float, lipschitz: float, strong_convexity: float) -> float:
    """Sufficient proximal weight ``L^2/m^2 - rho * lambda_min(D + A)`` (diagnostic only)."""
    if strong_convexity <= 0:
        raise ContractError("strong convexity modulus must be positive")
    signless = np.diag(graph.degree).astype(float) + graph.adjacency.astype(float)
    lam_min = float(np.linalg.eigvalsh(signless)[0])
    return lipschitz**2 / strong_convexity**2 - rho * lam_min


def _run_dec(round_fn, datasets, graph: Graph, config: AdmmConfig, ledger) -> TrainResult:
    datasets = _check_datasets(datasets)
    if graph.M != len(datasets):
        raise ContractError(f"graph has {graph.M} agents but {len(datasets)} datasets were given")
    state = DecAdmmState.init(config.log_theta0(datasets[0].dim), graph.M)
    history = []
    for _ in range(config.s_end):
        state = round_fn(state, graph, datasets, config, ledger)
        history.append(state.spread())
    return TrainResult(state.theta, config.s_end, True, history)


def dec_cgp_train(datasets, graph: Graph, config: AdmmConfig = AdmmConfig(),
                  ledger: CommLedger | None = None) -> TrainResult:
    return _run_dec(dec_cgp_round, datasets, graph, config, ledger)


def dec_apx_train(datasets, graph: Graph, config: AdmmConfig = AdmmConfig(),
                  ledger: CommLedger | None = None) -> TrainResult:
    return _run_dec(dec_apx_round, datasets, graph, config, ledger)


def dec_gapx_train(datasets, graph: Graph, config: AdmmConfig = AdmmConfig(),
                   ledger: CommLedger | None = None) -> TrainResult:
    """Flood the communication samples, then run the linearized rounds on augmented data."""
    datasets = _check_datasets(datasets)
    ledger = CommLedger(graph.M) if ledger is None else ledger
    aug = build_augmented_data(datasets, config.seed, graph, ledger)
    result = dec_apx_train([aug.plus_unique(i) for i in range(graph.M)], graph, config, ledger)
    return replace(result, augmented=aug)


TRAINERS = {
    "fact": fact_gp_train,
    "cgp": cgp_train,
    "apx": apx_gp_train,
    "gapx": gapx_gp_train,
    "dec-cgp": dec_cgp_train,
    "dec-apx": dec_apx_train,
    "dec-gapx": dec_gapx_train,
}
