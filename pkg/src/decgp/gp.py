"""Squared-exponential GP regression primitives.

Everything here works on dense matrices. The marginal likelihood is the
constant-free form ``y^T C^{-1} y + log|C|`` with ``C = K + sigma_eps^2 I``,
and its gradient is taken with respect to log-hyperparameters so that
optimizers never have to enforce positivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from decgp.errors import ConditioningError, ContractError

JITTER_START = 1e-10
JITTER_DOUBLINGS = 8


@dataclass(frozen=True)
class HyperParams:
    """Kernel hyperparameters ``(l_1, ..., l_D, sigma_f, sigma_eps)``."""

    lengthscales: tuple[float, ...]
    signal_std: float
    noise_std: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_std", float(self.signal_std))
        object.__setattr__(self, "noise_std", float(self.noise_std))
        vec = self.to_vector()
        if len(ls) == 0 or not np.all(np.isfinite(vec)) or np.any(vec <= 0):
            raise ContractError(f"hyperparameters must be finite and positive, got {vec}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_vector(self) -> np.ndarray:
        return np.array([*self.lengthscales, self.signal_std, self.noise_std])

    @classmethod
    def from_vector(cls, vec) -> HyperParams:
        vec = np.asarray(vec, dtype=float)
        return cls(tuple(vec[:-2]), vec[-2], vec[-1])

    def to_log(self) -> np.ndarray:
        return np.log(self.to_vector())

    @classmethod
    def from_log(cls, log_vec) -> HyperParams:
        return cls.from_vector(np.exp(np.asarray(log_vec, dtype=float)))


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` (N x D) and outputs ``y`` (N,)."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ContractError(f"{X.shape[0]} inputs but {y.shape[0]} outputs")
        if X.shape[0] < 1:
            raise ContractError("dataset must hold at least one point")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", y)

    def __len__(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], self.outputs[idx])

    @staticmethod
    def concat(parts) -> Dataset:
        parts = list(parts)
        return Dataset(
            np.vstack([p.inputs for p in parts]),
            np.concatenate([p.outputs for p in parts]),
        )

    def deduplicated(self) -> Dataset:
        """Drop rows whose input exactly repeats an earlier row."""
        _, first = np.unique(self.inputs, axis=0, return_index=True)
        if first.size == len(self):
            return self
        return self.subset(np.sort(first))


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float


def _check_dim(X: np.ndarray, hyper: HyperParams) -> None:
    if X.shape[-1] != hyper.dim:
        raise ContractError(
            f"inputs have {X.shape[-1]} columns but hyperparameters have {hyper.dim} lengthscales"
        )


def _scaled_sqdist(Xa: np.ndarray, Xb: np.ndarray, ls: np.ndarray) -> np.ndarray:
    diff = (Xa[:, None, :] - Xb[None, :, :]) / ls
    return np.einsum("ijd,ijd->ij", diff, diff)


def kernel_eval(x, x2, hyper: HyperParams) -> float:
    """``sigma_f^2 exp(-sum_d (x_d - x2_d)^2 / l_d^2)`` for two single points."""
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    _check_dim(x, hyper)
    _check_dim(x2, hyper)
    r2 = np.sum(((x - x2) / np.asarray(hyper.lengthscales)) ** 2)
    return hyper.signal_std**2 * float(np.exp(-r2))


def covariance_matrix(Xa, Xb, hyper: HyperParams, add_noise: bool = False) -> np.ndarray:
    """Kernel matrix between two point sets.

    Parameters
    ----------
    Xa, Xb : array_like
        Point sets of shape (Na, D) and (Nb, D).
    hyper : HyperParams
    add_noise : bool
        Add ``sigma_eps^2`` on the diagonal. Only allowed when ``Xa`` and
        ``Xb`` are the same point set.
    """
    Xa = np.atleast_2d(np.asarray(Xa, dtype=float))
    Xb = np.atleast_2d(np.asarray(Xb, dtype=float))
    _check_dim(Xa, hyper)
    _check_dim(Xb, hyper)
    K = hyper.signal_std**2 * np.exp(-_scaled_sqdist(Xa, Xb, np.asarray(hyper.lengthscales)))
    if add_noise:
        if Xa.shape != Xb.shape or not np.array_equal(Xa, Xb):
            raise ContractError("add_noise requires identical point sets")
        K[np.diag_indices_from(K)] += hyper.noise_std**2
    return K


def cholesky_with_jitter(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding growing diagonal jitter if needed."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(C)))
    if not np.isfinite(scale) or scale <= 0:
        raise ConditioningError("covariance has a non-positive or non-finite diagonal")
    jitter = JITTER_START * scale
    for _ in range(JITTER_DOUBLINGS):
        try:
            return np.linalg.cholesky(C + jitter * np.eye(C.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise ConditioningError(f"Cholesky failed with jitter up to {jitter / 2:.3g}")


def _factor(dataset: Dataset, hyper: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    K = covariance_matrix(dataset.inputs, dataset.inputs, hyper)
    C = K.copy()
    C[np.diag_indices_from(C)] += hyper.noise_std**2
    return K, cholesky_with_jitter(C)


def nll(dataset: Dataset, hyper: HyperParams) -> float:
    """Constant-free negative log marginal likelihood ``y^T C^{-1} y + log|C|``."""
    _, L = _factor(dataset, hyper)
    v = solve_triangular(L, dataset.outputs, lower=True)
    return float(v @ v + 2.0 * np.sum(np.log(np.diag(L))))


def nll_and_grad(dataset: Dataset, log_hyper) -> tuple[float, np.ndarray]:
    """Objective and its gradient with respect to log-hyperparameters.

    Uses ``d/dtheta_j = tr((C^{-1} - a a^T) dC/dtheta_j)`` with
    ``a = C^{-1} y``, then multiplies by ``theta_j`` for the log chain rule.
    """
    hyper = HyperParams.from_log(log_hyper)
    X, y = dataset.inputs, dataset.outputs
    K, L = _factor(dataset, hyper)
    alpha = cho_solve((L, True), y)
    value = float(y @ alpha + 2.0 * np.sum(np.log(np.diag(L))))

    Cinv = cho_solve((L, True), np.eye(len(y)))
    W = Cinv - np.outer(alpha, alpha)

    grad = np.empty(hyper.dim + 2)
    for d, ld in enumerate(hyper.lengthscales):
        diff2 = (X[:, None, d] - X[None, :, d]) ** 2
        # theta * dC/dl_d = 2 K * diff^2 / l_d^2
        grad[d] = np.sum(W * K * diff2) * 2.0 / ld**2
    grad[-2] = 2.0 * np.sum(W * K)
    grad[-1] = 2.0 * hyper.noise_std**2 * np.trace(W)
    return value, grad


def nll_grad(dataset: Dataset, log_hyper) -> np.ndarray:
    """Gradient of :func:`nll` with respect to log-hyperparameters."""
    return nll_and_grad(dataset, log_hyper)[1]


@dataclass(frozen=True)
class ExpertModel:
    """A GP conditioned on one agent's data, with its Cholesky factor cached."""

    dataset: Dataset
    chol: np.ndarray
    hyper: HyperParams
    alpha: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, dataset: Dataset, hyper: HyperParams) -> ExpertModel:
        _check_dim(dataset.inputs, hyper)
        _, L = _factor(dataset, hyper)
        L.setflags(write=False)
        alpha = cho_solve((L, True), dataset.outputs)
        alpha.setflags(write=False)
        return cls(dataset, L, hyper, alpha)

    @property
    def prior_var(self) -> float:
        return self.hyper.signal_std**2

    def cross_cov(self, Xstar) -> np.ndarray:
        """``k(X_i, X*)`` with shape (N_i, Q)."""
        return covariance_matrix(self.dataset.inputs, np.atleast_2d(Xstar), self.hyper)

    def solve(self, B: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol, True), B)

    def weights(self, Xstar) -> np.ndarray:
        """``C_i^{-1} k(X_i, X*)``, one column per query."""
        return self.solve(self.cross_cov(Xstar))

    def predict_many(self, Xstar) -> tuple[np.ndarray, np.ndarray]:
        """Local posterior means and variances at each row of ``Xstar``."""
        Ks = self.cross_cov(Xstar)
        mean = Ks.T @ self.alpha
        V = solve_triangular(self.chol, Ks, lower=True)
        var = self.prior_var - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var, 0.0)

    def explained_var(self, Xstar) -> np.ndarray:
        """``k*^T C_i^{-1} k*`` per query: the prior variance the data explains."""
        V = solve_triangular(self.chol, self.cross_cov(Xstar), lower=True)
        return np.einsum("ij,ij->j", V, V)


def local_predict(expert: ExpertModel, xstar) -> Prediction:
    xstar = np.asarray(xstar, dtype=float).reshape(1, -1)
    mean, var = expert.predict_many(xstar)
    return Prediction(float(mean[0]), float(var[0]))


def full_gp_predict(dataset: Dataset, hyper: HyperParams, xstar) -> Prediction:
    """Exact GP posterior mean and latent variance at one query point."""
    return local_predict(ExpertModel.fit(dataset, hyper), xstar)
