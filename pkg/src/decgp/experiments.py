"""Desk-scale experiment harness.

Draws a synthetic GP field on a jittered grid, splits it into stripes (one
per agent, in path order), trains hyperparameters with one of the trainers
and scores one of the predictors at random query points. Results go to one
JSON document per replication plus a flat CSV table.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from decgp.aggregation import centralized_predict_many, dec_npae, dec_nn_family, dec_poe_family
from decgp.errors import ConditioningError, ContractError, DecgpError, NonConvergenceError
from decgp.gp import Dataset, ExpertModel, HyperParams, covariance_matrix
from decgp.netsim import CommLedger, Graph, build_graph, load_adjacency_csv
from decgp.training import TRAINERS, AdmmConfig, AugmentedData, build_augmented_data, consensus_spread

log = logging.getLogger(__name__)

SCHEMA = "decgp/v1"
MAX_FIELD_POINTS = 4096
# latent-field sampling nugget, relative to sigma_f^2; keeps the Cholesky of a
# very smooth kernel matrix stable and is far below any useful noise level
SAMPLING_NUGGET = 1e-6


@dataclass(frozen=True)
class FieldDraw:
    """A synthetic field: noisy training data plus latent values at query points."""

    data: Dataset
    latent: np.ndarray
    query_inputs: np.ndarray
    query_latent: np.ndarray


def jittered_grid(n: int, rng: np.random.Generator, bounds=(0.0, 2.0), jitter: float = 0.3) -> np.ndarray:
    """``n`` points from a square grid over ``bounds``^2, each moved within its cell.

    The grid side is ``ceil(sqrt(n))``; surplus cells are dropped at random.
    """
    lo, hi = bounds
    side = math.ceil(math.sqrt(n))
    h = (hi - lo) / side
    centers = lo + (np.arange(side) + 0.5) * h
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    keep = np.sort(rng.choice(len(pts), size=n, replace=False))
    pts = pts[keep] + rng.uniform(-jitter * h, jitter * h, size=(n, 2))
    return pts


def grid_cell(n: int, bounds=(0.0, 2.0)) -> float:
    return (bounds[1] - bounds[0]) / math.ceil(math.sqrt(n))


def query_points(n_query: int, n_grid: int, rng: np.random.Generator, bounds=(0.0, 2.0)) -> np.ndarray:
    """Uniform points over the box shrunk by one grid cell on every side."""
    h = grid_cell(n_grid, bounds)
    return rng.uniform(bounds[0] + h, bounds[1] - h, size=(n_query, 2))


def synth_field(n: int, hyper: HyperParams, seed: int, bounds=(0.0, 2.0),
                n_query: int = 0) -> FieldDraw:
    """Sample a GP field at ``n`` jittered grid points and ``n_query`` query points.

    Training outputs are latent values plus ``N(0, sigma_eps^2)`` noise; query
    points keep their noise-free latent values as ground truth.
    """
    if n < 1 or n > MAX_FIELD_POINTS:
        raise ContractError(f"field size must be in [1, {MAX_FIELD_POINTS}], got {n}")
    if hyper.dim != 2:
        raise ContractError("synthetic fields are two-dimensional")
    rng = np.random.default_rng(seed)
    X = jittered_grid(n, rng, bounds)
    Xq = query_points(n_query, n, rng, bounds) if n_query else np.empty((0, 2))
    allX = np.vstack([X, Xq])
    K = covariance_matrix(allX, allX, hyper)
    K[np.diag_indices_from(K)] += SAMPLING_NUGGET * hyper.signal_std**2
    f = np.linalg.cholesky(K) @ rng.standard_normal(len(allX))
    y = f[:n] + hyper.noise_std * rng.standard_normal(n)
    return FieldDraw(Dataset(X, y), f[:n], Xq, f[n:])


def partition_stripes(dataset: Dataset, M: int, axis: int = 0, bounds=None) -> list[Dataset]:
    """Split into ``M`` equal-width stripes along ``axis``, ordered low to high.

    Stripe ``m`` covers ``[lo + m w, lo + (m + 1) w)``; the last one also
    takes the upper edge. Points keep their original order within a stripe.
    """
    if M < 1:
        raise ContractError("M must be at least 1")
    x = dataset.inputs[:, axis]
    lo, hi = (x.min(), x.max()) if bounds is None else bounds
    width = (hi - lo) / M
    owner = np.clip(np.floor((x - lo) / width).astype(int), 0, M - 1) if width > 0 else np.zeros(len(x), int)
    parts = [dataset.subset(np.flatnonzero(owner == m)) if np.any(owner == m) else None for m in range(M)]
    if any(p is None for p in parts):
        raise ContractError("a stripe received no points; use fewer agents")
    return parts


def rmse(mean, truth) -> float:
    mean = np.asarray(mean, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if mean.shape != truth.shape:
        raise ContractError("predictions and truths differ in length")
    return float(np.sqrt(np.mean((mean - truth) ** 2)))


def nlpd(mean, variance, truth) -> float:
    """Mean negative log Gaussian predictive density."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if not mean.shape == variance.shape == truth.shape:
        raise ContractError("predictions and truths differ in length")
    if np.any(variance <= 0):
        raise ContractError("NLPD needs strictly positive predictive variances")
    return float(np.mean(0.5 * np.log(2 * np.pi * variance) + (truth - mean) ** 2 / (2 * variance)))


def load_csv_dataset(path) -> Dataset:
    """Read a dataset from CSV with an ``x1,x2,y`` header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"x1", "x2", "y"} <= set(rows[0]):
        raise ContractError(f"{path}: expected columns x1,x2,y")
    X = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    return Dataset(X, y)


CENTRAL_PREDICTORS = ("full", "poe", "gpoe", "bcm", "rbcm", "grbcm", "npae")
DEC_PREDICTORS = (
    "dec-poe", "dec-gpoe", "dec-bcm", "dec-rbcm", "dec-grbcm",
    "dec-npae", "dec-npae-star",
    "dec-nn-poe", "dec-nn-gpoe", "dec-nn-bcm", "dec-nn-rbcm", "dec-nn-grbcm",
    "dec-nn-npae",
)
PREDICTORS = CENTRAL_PREDICTORS + DEC_PREDICTORS


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: data, network, trainer, predictors and replication count.

    ``trainer=None`` skips training and predicts with the true ``theta``.
    ``dataset_csv`` replaces the synthetic field with user data; query
    points are then held out from it and scored against their outputs.
    """

    N: int = 512
    M: int = 4
    D: int = 2
    theta: tuple = (1.2, 0.3, 1.3, 0.1)
    topology: str = "path"
    adjacency_file: str | None = None
    trainer: str | None = "dec-gapx"
    predictors: tuple = ("dec-nn-grbcm",)
    replications: int = 1
    n_query: int = 100
    seed: int = 0
    stripe_axis: int = 0
    eta_nn: float | None = None
    admm: dict = field(default_factory=dict)
    dataset_csv: str | None = None
    out: str = "results"

    def __post_init__(self):
        if self.replications < 1:
            raise ContractError("replications must be at least 1")
        if self.M < 1 or self.N < self.M:
            raise ContractError("need 1 <= M <= N")
        if self.D != 2:
            raise ContractError("the harness works on two-dimensional inputs")
        if len(self.theta) != self.D + 2:
            raise ContractError(f"theta needs {self.D + 2} entries")
        if self.n_query < 1:
            raise ContractError("n_query must be at least 1")
        if self.trainer is not None and self.trainer not in TRAINERS:
            raise ContractError(f"unknown trainer {self.trainer!r}")
        bad = [p for p in self.predictors if p not in PREDICTORS]
        if bad:
            raise ContractError(f"unknown predictors {bad}")
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))
        object.__setattr__(self, "predictors", tuple(self.predictors))
        object.__setattr__(self, "admm", dict(self.admm))

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        doc = dict(doc)
        if isinstance(doc.get("predictors"), str):
            doc["predictors"] = [doc["predictors"]]
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = list(self.theta)
        d["predictors"] = list(self.predictors)
        return d


def replication_seed(seed: int, r: int) -> int:
    """Independent 32-bit seed for replication ``r``."""
    return int(np.random.SeedSequence([seed, r]).generate_state(1)[0])


def make_graph(spec: ExperimentSpec) -> Graph:
    if spec.topology == "custom":
        if spec.adjacency_file is None:
            raise ContractError("custom topology needs adjacency_file")
        return build_graph("custom", spec.M, load_adjacency_csv(spec.adjacency_file))
    return build_graph(spec.topology, spec.M)


def _draw_data(spec: ExperimentSpec, rseed: int):
    """Training data plus query inputs and their ground truth."""
    if spec.dataset_csv is None:
        fd = synth_field(spec.N, HyperParams.from_vector(spec.theta), rseed, n_query=spec.n_query)
        return fd.data, fd.query_inputs, fd.query_latent
    data = load_csv_dataset(spec.dataset_csv)
    if len(data) <= spec.n_query:
        raise ContractError("dataset has too few rows to hold out the query points")
    rng = np.random.default_rng(rseed)
    perm = rng.permutation(len(data))
    held, kept = np.sort(perm[:spec.n_query]), np.sort(perm[spec.n_query:])
    return data.subset(kept), data.inputs[held], data.outputs[held]


@dataclass
class PredictionContext:
    """Everything the predictors of one replication share."""

    graph: Graph
    hyper: HyperParams
    data: Dataset
    experts: list
    aug_experts: list
    comm_expert: ExpertModel
    eta_nn: float | None


def build_context(spec, graph, parts, data, hyper, aug: AugmentedData) -> PredictionContext:
    """Fit the local, augmented and communication experts under one kernel."""
    experts = [ExpertModel.fit(p, hyper) for p in parts]
    aug_experts = [ExpertModel.fit(aug.plus_unique(i), hyper) for i in range(len(parts))]
    comm_expert = ExpertModel.fit(aug.comm_unique, hyper)
    return PredictionContext(graph, hyper, data, experts, aug_experts, comm_expert, spec.eta_nn)


def predict(method: str, ctx: PredictionContext, Xq: np.ndarray):
    """Run one predictor at every query point.

    Returns
    -------
    mean, variance : ndarray
    ledger : CommLedger or None
        Communication record for the decentralized predictors (agent 0's
        prediction is reported; all agents hold the same one).
    """
    if method == "full":
        model = ExpertModel.fit(ctx.data, ctx.hyper)
        m, v = model.predict_many(Xq)
        return m, v, None
    if method in CENTRAL_PREDICTORS:
        grb = method == "grbcm"
        experts = ctx.aug_experts if grb else ctx.experts
        m, v = centralized_predict_many(method, experts, Xq, ctx.comm_expert if grb else None)
        return np.asarray(m), np.asarray(v), None
    if method not in DEC_PREDICTORS:
        raise ContractError(f"unknown predictor {method!r}")
    ledger = CommLedger(ctx.graph.M)
    rule = method.rsplit("-", 1)[-1]
    grb = rule == "grbcm"
    experts = ctx.aug_experts if grb else ctx.experts
    comm = ctx.comm_expert if grb else None
    out = []
    for xstar in Xq:
        if method == "dec-npae":
            preds = dec_npae(ctx.graph, experts, xstar, "fixed_omega", ledger)
        elif method == "dec-npae-star":
            preds = dec_npae(ctx.graph, experts, xstar, "optimal_omega", ledger)
        elif method == "dec-nn-npae":
            preds = dec_npae(ctx.graph, experts, xstar, "nn_dale", ledger, eta_nn=ctx.eta_nn)
        elif method.startswith("dec-nn-"):
            preds = dec_nn_family(ctx.graph, experts, xstar, rule, ctx.eta_nn, ledger, comm,
                                  select_experts=ctx.experts)
        else:
            preds = dec_poe_family(ctx.graph, experts, xstar, rule, ledger, comm)
        out.append(preds[0])
    return (np.array([p.mean for p in out]), np.array([p.variance for p in out]), ledger)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def run_replication(spec: ExperimentSpec, r: int, do_predict: bool = True) -> dict:
    """Train and (optionally) score every predictor on replication ``r``."""
    rseed = replication_seed(spec.seed, r)
    graph = make_graph(spec)
    data, Xq, truth = _draw_data(spec, rseed)
    parts = partition_stripes(data, spec.M, axis=spec.stripe_axis)
    cfg = AdmmConfig(**{"seed": rseed, **spec.admm})
    record = {"schema": SCHEMA, "replication": r, "seed": rseed, "spec": spec.to_dict(),
              "local_sizes": [len(p) for p in parts]}

    hyper = HyperParams.from_vector(spec.theta)
    aug = None
    if spec.trainer is not None:
        train_ledger = CommLedger(spec.M)
        fn = TRAINERS[spec.trainer]
        if spec.trainer.startswith("dec-"):
            result = fn(parts, graph, cfg, train_ledger)
        else:
            result = fn(parts, cfg, train_ledger)
        hyper = result.hyper
        aug = result.augmented
        record["train"] = {
            "trainer": spec.trainer,
            "rounds": result.rounds,
            "converged": result.converged,
            "theta": list(hyper.to_vector()),
            "agent_theta": [list(h.to_vector()) for h in result.agent_hypers],
            "spread": consensus_spread(result.theta),
            "ledger": train_ledger.summary(),
        }
    if not do_predict:
        return _jsonable(record)

    if aug is None:
        aug = build_augmented_data(parts, rseed)
    ctx = build_context(spec, graph, parts, data, hyper, aug)
    metrics = {}
    for method in spec.predictors:
        log.info("replication %d: %s", r, method)
        try:
            mean, var, ledger = predict(method, ctx, Xq)
        except (NonConvergenceError, ConditioningError) as exc:
            # one stalled solver should not discard the other methods' results
            log.warning("replication %d: %s failed: %s", r, method, exc)
            metrics[method] = {"error": type(exc).__name__, "message": str(exc)}
            continue
        entry = {"rmse": rmse(mean, truth), "nlpd": nlpd(mean, var, truth)}
        if ledger is not None:
            entry["ledger"] = ledger.summary()
            entry["rounds"] = ledger.total_rounds()
            entry["scalars_sent"] = int(ledger.sent.sum())
            if "m_nn" in ledger.iterations:
                entry["m_nn_ratio"] = ledger.iterations["m_nn"] / (len(Xq) * spec.M)
        metrics[method] = entry
    record["metrics"] = metrics
    return _jsonable(record)


def run_experiment(spec: ExperimentSpec, do_predict: bool = True) -> list[dict]:
    """One record per replication; errors carry the replication id.

    Solver failures inside a single predictor are recorded under that
    method's ``error`` key instead of being raised.
    """
    records = []
    for r in range(spec.replications):
        try:
            records.append(run_replication(spec, r, do_predict))
        except DecgpError as exc:
            exc.args = (f"replication {r}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
    return records


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=2) + "\n"


CSV_COLUMNS = ("replication", "method", "rmse", "nlpd", "rounds", "scalars_sent")


def csv_rows(records) -> list[dict]:
    rows = []
    for rec in records:
        for method, m in sorted(rec.get("metrics", {}).items()):
            rows.append({"replication": rec["replication"], "method": method,
                         "rmse": repr(m["rmse"]) if "rmse" in m else "",
                         "nlpd": repr(m["nlpd"]) if "nlpd" in m else "",
                         "rounds": m.get("rounds", ""), "scalars_sent": m.get("scalars_sent", "")})
    return rows


def write_results(records, out_dir) -> list[Path]:
    """Write ``replication_<r>.json`` per record plus ``metrics.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        p = out / f"replication_{rec['replication']:03d}.json"
        p.write_text(dumps_record(rec), encoding="utf-8")
        paths.append(p)
    p = out / "metrics.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(csv_rows(records))
    paths.append(p)
    return paths
