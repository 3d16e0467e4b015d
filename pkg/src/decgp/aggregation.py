"""Combining local GP experts into one prediction.

Centralized rules (product of experts, Bayesian committee machines and
their robust/generalized forms, and the nested pointwise aggregation)
serve as oracles for the decentralized versions, which replace the
coordinator by average consensus (DAC), JOR or DALE over the agent graph.

Local predictive variances here are latent-function variances, so the
prior variance at a query is ``k(x*, x*) = sigma_f^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from decgp.consensus import (
    ETA_PM,
    ETA_STOP,
    fixed_omega,
    optimal_omega,
    run_dac,
    run_dale,
    run_jor,
)
from decgp.errors import ConditioningError, ContractError
from decgp.gp import ExpertModel, Prediction, cholesky_with_jitter, covariance_matrix
from decgp.netsim import (
    CommLedger,
    Graph,
    bridged_subgraph,
    broadcast_tree,
    flood,
)

POE_FAMILY = ("poe", "gpoe", "bcm", "rbcm", "grbcm")
# Noise on off-diagonal NPAE blocks, as written in the method's derivation.
CROSS_BLOCK_NOISE = True


@dataclass(frozen=True)
class LocalSummary:
    mu: float
    var: float
    beta: float


@dataclass(frozen=True)
class NpaeLocal:
    kA: float
    row: np.ndarray
    mu: float


@dataclass(frozen=True)
class CbnnSelection:
    kmu: np.ndarray
    selected: tuple[int, ...]
    eta: float

    @property
    def ratio(self) -> float:
        return len(self.selected) / len(self.kmu)


def _check_var(var) -> np.ndarray:
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ContractError("local variances must be strictly positive")
    return var


def expert_betas(variant: str, var, prior_var=None, var_c=None, strict: bool = False) -> np.ndarray:
    """Per-expert weights, experts along axis 0.

    ``grbcm`` gives the first expert weight 1 and every other expert the
    entropy difference to the communication expert; ``strict`` also pins
    the second expert to 1.
    """
    var = _check_var(var)
    M = var.shape[0]
    if variant in ("poe", "bcm"):
        return np.ones_like(var)
    if variant == "gpoe":
        return np.full_like(var, 1.0 / M)
    if variant == "rbcm":
        return 0.5 * (np.log(prior_var) - np.log(var))
    if variant == "grbcm":
        beta = 0.5 * (np.log(var_c) - np.log(var))
        beta[: 2 if strict else 1] = 1.0
        return beta
    raise ContractError(f"unknown aggregation rule {variant!r}")


def _combine(variant, mu, var, beta, prior_var=None, mu_c=None, var_c=None):
    """Closed-form aggregation from per-expert sums (axis 0 = experts)."""
    s_mu = np.sum(beta * mu / var, axis=0)
    s_prec = np.sum(beta / var, axis=0)
    s_beta = np.sum(beta, axis=0)
    return _from_sums(variant, s_mu, s_prec, s_beta, prior_var, mu_c, var_c)


def _from_sums(variant, s_mu, s_prec, s_beta, prior_var=None, mu_c=None, var_c=None):
    if variant in ("poe", "gpoe"):
        prec = s_prec
        num = s_mu
    elif variant in ("bcm", "rbcm"):
        prec = s_prec + (1.0 - s_beta) / prior_var
        num = s_mu
    elif variant == "grbcm":
        prec = s_prec + (1.0 - s_beta) / var_c
        num = s_mu - (s_beta - 1.0) * mu_c / var_c
    else:
        raise ContractError(f"unknown aggregation rule {variant!r}")
    variance = 1.0 / prec
    return num * variance, variance


def poe_aggregate(mu, var, variant: str = "poe") -> Prediction:
    """Product of experts (``poe``) or its generalized form with weights 1/M (``gpoe``)."""
    if variant not in ("poe", "gpoe"):
        raise ContractError(f"unknown product-of-experts variant {variant!r}")
    mu = np.asarray(mu, dtype=float)
    beta = expert_betas(variant, var)
    m, v = _combine(variant, mu, _check_var(var), beta)
    return Prediction(float(m), float(v))


def bcm_aggregate(mu, var, prior_var: float, variant: str = "bcm") -> Prediction:
    """Bayesian committee machine with the prior correction ``(1 - sum beta) / prior_var``."""
    if variant not in ("bcm", "rbcm"):
        raise ContractError(f"unknown committee-machine variant {variant!r}")
    if prior_var <= 0:
        raise ContractError("prior variance must be positive")
    mu = np.asarray(mu, dtype=float)
    beta = expert_betas(variant, var, prior_var)
    m, v = _combine(variant, mu, _check_var(var), beta, prior_var)
    return Prediction(float(m), float(v))


def grbcm_aggregate(mu_plus, var_plus, mu_c: float, var_c: float, strict: bool = False) -> Prediction:
    """Generalized robust BCM anchored on the communication expert ``(mu_c, var_c)``."""
    if var_c <= 0:
        raise ContractError("communication expert variance must be positive")
    mu_plus = np.asarray(mu_plus, dtype=float)
    beta = expert_betas("grbcm", var_plus, var_c=var_c, strict=strict)
    m, v = _combine("grbcm", mu_plus, _check_var(var_plus), beta, mu_c=mu_c, var_c=var_c)
    return Prediction(float(m), float(v))


def npae_terms(experts, Xstar, cross_block_noise: bool = CROSS_BLOCK_NOISE):
    """Quantities of the nested pointwise aggregation at every query.

    Returns
    -------
    mu : ndarray, shape (M, Q)
        Local means.
    kA : ndarray, shape (M, Q)
        ``k_i*^T C_i^{-1} k_i*``.
    CA : ndarray, shape (Q, M, M)
        ``k_i*^T C_i^{-1} C_ij C_j^{-1} k_j*``, where off-diagonal blocks
        ``C_ij = k(X_i, X_j)`` plus, when ``cross_block_noise``, noise
        ``sigma_eps^2`` on the leading diagonal of the block.
    """
    Xstar = np.atleast_2d(Xstar)
    M = len(experts)
    hyper = experts[0].hyper
    Ks = [e.cross_cov(Xstar) for e in experts]
    W = [e.solve(k) for e, k in zip(experts, Ks)]
    mu = np.array([k.T @ e.alpha for e, k in zip(experts, Ks)])
    kA = np.array([np.einsum("nq,nq->q", k, w) for k, w in zip(Ks, W)])
    CA = np.empty((Xstar.shape[0], M, M))
    for i in range(M):
        for j in range(i, M):
            Xi, Xj = experts[i].dataset.inputs, experts[j].dataset.inputs
            Cij = covariance_matrix(Xi, Xj, hyper)
            if i == j or cross_block_noise:
                Cij = Cij + hyper.noise_std**2 * np.eye(len(Xi), len(Xj))
            CA[:, i, j] = CA[:, j, i] = np.einsum("nq,nm,mq->q", W[i], Cij, W[j])
    return mu, kA, CA


def npae_local(i: int, experts, xstar, cross_block_noise: bool = CROSS_BLOCK_NOISE) -> NpaeLocal:
    """Agent ``i``'s entry of ``k_A`` and its row of ``C_A`` at one query."""
    mu, kA, CA = npae_terms(experts, np.reshape(xstar, (1, -1)), cross_block_noise)
    return NpaeLocal(float(kA[i, 0]), CA[0, i].copy(), float(mu[i, 0]))


def npae_aggregate(mu, kA, CA, kss: float) -> Prediction:
    """``mean = kA^T CA^{-1} mu``, ``variance = kss - kA^T CA^{-1} kA``."""
    L = cholesky_with_jitter(np.asarray(CA, dtype=float))
    sol = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([mu, kA])))
    kA = np.asarray(kA, dtype=float)
    return Prediction(float(kA @ sol[:, 0]), float(kss - kA @ sol[:, 1]))


def npae_predict(experts, xstar, cross_block_noise: bool = CROSS_BLOCK_NOISE) -> Prediction:
    mu, kA, CA = npae_terms(experts, np.reshape(xstar, (1, -1)), cross_block_noise)
    return npae_aggregate(mu[:, 0], kA[:, 0], CA[0], experts[0].prior_var)


def _local_arrays(experts, Xstar):
    means, variances = zip(*(e.predict_many(Xstar) for e in experts))
    return np.array(means), np.array(variances)


def centralized_predict_many(variant: str, experts, Xstar, comm_expert: ExpertModel | None = None,
                             strict: bool = False,
                             cross_block_noise: bool = CROSS_BLOCK_NOISE) -> tuple[np.ndarray, np.ndarray]:
    """Means and variances of a centralized rule at every row of ``Xstar``."""
    Xstar = np.atleast_2d(Xstar)
    prior_var = experts[0].prior_var
    if variant == "npae":
        mu, kA, CA = npae_terms(experts, Xstar, cross_block_noise)
        preds = [npae_aggregate(mu[:, q], kA[:, q], CA[q], prior_var) for q in range(Xstar.shape[0])]
        return np.array([p.mean for p in preds]), np.array([p.variance for p in preds])
    mu, var = _local_arrays(experts, Xstar)
    mu_c = var_c = None
    if variant == "grbcm":
        if comm_expert is None:
            raise ContractError("grbcm needs a communication expert")
        mu_c, var_c = comm_expert.predict_many(Xstar)
    beta = expert_betas(variant, var, prior_var, var_c, strict)
    return _combine(variant, mu, _check_var(var), beta, prior_var, mu_c, var_c)


def _dac_combine(graph: Graph, variant: str, mu, var, beta, active, prior_var, mu_c, var_c,
                 ledger: CommLedger, eta_stop: float) -> list[Prediction]:
    """Average the weighted local terms and apply the closed-form rule at each agent.

    Inactive agents (relays) start every stream at zero, so ``M`` times the
    average is the sum over active agents.
    """
    M = graph.M
    cols = [beta * mu / var, beta / var]
    if variant in ("rbcm", "grbcm"):
        cols.append(beta)
    W0 = np.where(active[:, None], np.column_stack(cols), 0.0)
    W, _ = run_dac(graph, W0, eta_stop, ledger, phase="dac")
    n_active = int(np.sum(active))
    out = []
    for i in range(M):
        s_mu, s_prec = M * W[i, 0], M * W[i, 1]
        if variant in ("rbcm", "grbcm"):
            s_beta = M * W[i, 2]
        elif variant == "gpoe":
            s_beta = 1.0
        else:
            s_beta = float(n_active)
        m, v = _from_sums(variant, s_mu, s_prec, s_beta, prior_var, mu_c, var_c)
        out.append(Prediction(float(m), float(v)))
    return out


def _summaries(variant, experts, xstar, comm_expert, strict):
    xstar = np.reshape(xstar, (1, -1))
    mu, var = _local_arrays(experts, xstar)
    mu, var = mu[:, 0], _check_var(var[:, 0])
    prior_var = experts[0].prior_var
    mu_c = var_c = None
    if variant == "grbcm":
        if comm_expert is None:
            raise ContractError("grbcm needs a communication expert")
        m_c, v_c = comm_expert.predict_many(xstar)
        mu_c, var_c = float(m_c[0]), float(v_c[0])
    beta = expert_betas(variant, var, prior_var, var_c, strict)
    return mu, var, beta, prior_var, mu_c, var_c


def dec_poe_family(graph: Graph, experts, xstar, variant: str, ledger: CommLedger | None = None,
                   comm_expert: ExpertModel | None = None, eta_stop: float = ETA_STOP,
                   strict: bool = False) -> list[Prediction]:
    """Decentralized PoE/gPoE/BCM/rBCM/grBCM at one query.

    Each agent forms its weighted local terms, two or three average
    consensus streams run in lockstep, and every agent rescales by ``M``.
    For ``grbcm`` the experts are the augmented ones and ``comm_expert``
    is built on the shared communication data.

    Returns
    -------
    list of Prediction
        One per agent.
    """
    if variant not in POE_FAMILY:
        raise ContractError(f"unknown aggregation rule {variant!r}")
    if len(experts) != graph.M:
        raise ContractError(f"{len(experts)} experts for {graph.M} agents")
    ledger = CommLedger(graph.M) if ledger is None else ledger
    mu, var, beta, prior_var, mu_c, var_c = _summaries(variant, experts, xstar, comm_expert, strict)
    active = np.ones(graph.M, dtype=bool)
    return _dac_combine(graph, variant, mu, var, beta, active, prior_var, mu_c, var_c, ledger, eta_stop)


def cbnn_select(experts, xstar, eta_nn: float) -> CbnnSelection:
    """Keep agents whose explained variance ``k_i*^T C_i^{-1} k_i*`` reaches ``eta_nn``.

    Falls back to the single most correlated agent (lowest id on ties).
    """
    if eta_nn < 0:
        raise ContractError("eta_nn must be nonnegative")
    xstar = np.reshape(xstar, (1, -1))
    kmu = np.array([float(e.explained_var(xstar)[0]) for e in experts])
    selected = tuple(int(i) for i in np.flatnonzero(kmu >= eta_nn))
    if not selected:
        selected = (int(np.argmax(kmu)),)
    return CbnnSelection(kmu, selected, eta_nn)


def default_eta_nn(expert: ExpertModel) -> float:
    return 0.05 * expert.prior_var


def _selection_round(graph: Graph, ledger: CommLedger) -> None:
    # every agent tells its neighbors whether it takes part
    ledger.charge_neighbors("cbnn", graph, 1)
    ledger.add_rounds("cbnn", 1)


def _broadcast_result(graph: Graph, selected, preds_sel, ledger: CommLedger,
                      width: int = 2) -> list[Prediction]:
    """Forward the selected agents' predictions to everyone else along a BFS forest."""
    out: list[Prediction | None] = [None] * graph.M
    for pos, i in enumerate(selected):
        out[i] = preds_sel[pos]
    parent, depth = broadcast_tree(graph, selected)
    sent = np.zeros(graph.M, dtype=np.int64)
    # process by distance from the selected set so parents are filled first
    order = sorted(parent, key=lambda v: min(graph.hops[s, v] for s in selected))
    for v in order:
        out[v] = out[parent[v]]
        sent[parent[v]] += width
    ledger.charge("broadcast", sent)
    ledger.add_rounds("broadcast", depth)
    return out


def dec_nn_family(graph: Graph, experts, xstar, variant: str, eta_nn: float | None = None,
                  ledger: CommLedger | None = None, comm_expert: ExpertModel | None = None,
                  select_experts=None, eta_stop: float = ETA_STOP,
                  strict: bool = False) -> list[Prediction]:
    """Nearest-neighbor decentralized aggregation at one query.

    Agents with too little explained variance at ``xstar`` sit out; the
    rest run the decentralized rule over their (bridged) subgraph with
    ``M`` replaced by the number of participants, then forward the result
    to the excluded agents.

    Parameters
    ----------
    select_experts : list of ExpertModel, optional
        Experts used for the selection test. Defaults to ``experts``; for
        ``grbcm`` pass the local (non-augmented) experts, since the shared
        communication data would make every augmented expert look close.
    """
    if len(experts) != graph.M:
        raise ContractError(f"{len(experts)} experts for {graph.M} agents")
    ledger = CommLedger(graph.M) if ledger is None else ledger
    select_experts = experts if select_experts is None else select_experts
    eta_nn = default_eta_nn(experts[0]) if eta_nn is None else eta_nn
    sel = cbnn_select(select_experts, xstar, eta_nn)
    _selection_round(graph, ledger)
    chosen = list(sel.selected)
    sub = bridged_subgraph(graph, chosen)
    sub_ledger = CommLedger(sub.M)
    preds = dec_poe_family(sub, [experts[i] for i in chosen], xstar, variant, sub_ledger,
                           comm_expert, eta_stop, strict)
    ledger.absorb(sub_ledger, chosen)
    ledger.iterations["m_nn"] = ledger.iterations.get("m_nn", 0) + len(chosen)
    return _broadcast_result(graph, chosen, preds, ledger)


def _flood_models(graph: Graph, experts, ledger: CommLedger) -> None:
    """Every agent shares its inputs and Cholesky factor with all others."""
    tri = [np.concatenate([e.dataset.inputs.ravel(), e.chol[np.tril_indices(len(e.dataset))]])
           for e in experts]
    flood(graph, tri, ledger, phase="models")


def dec_npae(graph: Graph, experts, xstar, mode: str = "fixed_omega",
             ledger: CommLedger | None = None, eta_nn: float | None = None,
             omega_rule: str = "sufficient", eta_stop: float = ETA_STOP, eta_pm: float = ETA_PM,
             cross_block_noise: bool = CROSS_BLOCK_NOISE) -> list[Prediction]:
    """Decentralized nested pointwise aggregation at one query.

    Modes
    -----
    fixed_omega
        Two JOR solves with ``omega`` from ``omega_rule``, then two DACs.
    optimal_omega
        As above with the fastest ``omega`` found by power iteration.
    nn_dale
        Nearest-neighbor selection, then two DALE solves on the (bridged)
        subgraph; each participant forms the inner products locally.
    """
    if len(experts) != graph.M:
        raise ContractError(f"{len(experts)} experts for {graph.M} agents")
    ledger = CommLedger(graph.M) if ledger is None else ledger
    xstar = np.reshape(xstar, (1, -1))
    kss = experts[0].prior_var

    if mode == "nn_dale":
        eta_nn = default_eta_nn(experts[0]) if eta_nn is None else eta_nn
        sel = cbnn_select(experts, xstar, eta_nn)
        _selection_round(graph, ledger)
        chosen = list(sel.selected)
        sub = bridged_subgraph(graph, chosen)
        sub_ledger = CommLedger(sub.M)
        picked = [experts[i] for i in chosen]
        _flood_models(sub, picked, sub_ledger)
        mu, kA, CA = npae_terms(picked, xstar, cross_block_noise)
        mu, kA, CA = mu[:, 0], kA[:, 0], CA[0]
        # participants also need every k_A entry for the final inner products
        flood(sub, [[v] for v in kA], sub_ledger, phase="kA")
        try:
            Q, _ = run_dale(sub, CA, np.column_stack([mu, kA]), eta_stop, sub_ledger)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(str(exc)) from exc
        preds = [Prediction(float(kA @ Q[a, :, 0]), float(kss - kA @ Q[a, :, 1])) for a in range(sub.M)]
        ledger.absorb(sub_ledger, chosen)
        ledger.iterations["m_nn"] = ledger.iterations.get("m_nn", 0) + len(chosen)
        return _broadcast_result(graph, chosen, preds, ledger)

    if mode not in ("fixed_omega", "optimal_omega"):
        raise ContractError(f"unknown NPAE mode {mode!r}")
    M = graph.M
    _flood_models(graph, experts, ledger)
    mu, kA, CA = npae_terms(experts, xstar, cross_block_noise)
    mu, kA, CA = mu[:, 0], kA[:, 0], CA[0]
    if mode == "optimal_omega":
        omega = optimal_omega(CA, graph, eta_pm, ledger).omega
    else:
        omega = fixed_omega(M, omega_rule)
    Q, _ = run_jor(graph, CA, np.column_stack([mu, kA]), omega, eta_stop, ledger)
    W, _ = run_dac(graph, kA[:, None] * Q, eta_stop, ledger, phase="dac")
    return [Prediction(float(M * W[i, 0]), float(kss - M * W[i, 1])) for i in range(M)]
