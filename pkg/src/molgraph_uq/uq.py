"""MC-dropout sampling, uncertainty decomposition and training objectives."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .errors import TaskMismatch, TooFewSamples

DEFAULT_T = 20
LENGTH_SCALE = 1e-4
MC_CHUNK = 50  # molecules per stochastic forward; fixed so draws are reproducible


@dataclass
class UncertaintyReport:
    """Predictive summary for one molecule.

    Regression: ``mean`` is the MC mean, variance parts are scalars.
    Classification: ``mean`` holds class probabilities; ``aleatoric_matrix`` and
    ``epistemic_matrix`` are the full C x C terms and the scalar fields hold the
    positive-class diagonal entries.
    """

    task: str
    mean: object
    aleatoric: float
    epistemic: float
    total: float
    T: int
    aleatoric_matrix: np.ndarray = None
    epistemic_matrix: np.ndarray = None
    samples: np.ndarray = field(default=None, repr=False)

    @property
    def p_positive(self):
        return float(self.mean[1])

    @property
    def total_matrix(self):
        return self.aleatoric_matrix + self.epistemic_matrix

    @property
    def total_trace(self):
        """Trace of the total covariance: the summed per-class variance."""
        return float(np.trace(self.total_matrix))


# --------------------------------------------------------------------------
# decompositions
# --------------------------------------------------------------------------


def _spread(samples):
    """(1/T) sum y_t^2 - ((1/T) sum y_t)^2, floored at zero against rounding."""
    y = np.asarray(samples, dtype=np.float64)
    if y.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 samples, got {y.shape[0]}")
    gap = np.mean(y * y, axis=0) - np.mean(y, axis=0) ** 2
    return np.maximum(gap, 0.0)


def regression_decomposition(y_samples, var_samples, keep_samples=False):
    """Split predictive variance into epistemic spread and mean predicted noise."""
    y = np.asarray(y_samples, dtype=np.float64).reshape(-1)
    v = np.asarray(var_samples, dtype=np.float64).reshape(-1)
    if y.shape != v.shape:
        raise ValueError("y and variance streams differ in length")
    epistemic = float(_spread(y))
    aleatoric = float(np.mean(v))
    return UncertaintyReport(
        task="regression",
        mean=float(np.mean(y)),
        aleatoric=aleatoric,
        epistemic=epistemic,
        total=aleatoric + epistemic,
        T=len(y),
        samples=np.stack([y, v], axis=1) if keep_samples else None,
    )


def classification_decomposition(prob_samples, keep_samples=False):
    """Epistemic = sample covariance of p_t; aleatoric = mean of diag(p_t) - p_t p_t^T."""
    p = np.asarray(prob_samples, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("prob_samples must be (T, classes)")
    n_samples = p.shape[0]
    if n_samples < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n_samples}")
    p_bar = p.mean(axis=0)
    d = p - p_bar
    epistemic = d.T @ d / n_samples
    aleatoric = np.diag(p.mean(axis=0)) - p.T @ p / n_samples
    total = aleatoric + epistemic
    pos = 1 if p.shape[1] > 1 else 0
    return UncertaintyReport(
        task="classification",
        mean=p_bar,
        aleatoric=float(aleatoric[pos, pos]),
        epistemic=float(epistemic[pos, pos]),
        total=float(aleatoric[pos, pos]) + float(epistemic[pos, pos]),
        T=n_samples,
        aleatoric_matrix=aleatoric,
        epistemic_matrix=epistemic,
        samples=p if keep_samples else None,
    )


def homoscedastic_variance(samples, sigma2):
    """sigma^2 plus the MC second-moment gap of the predictions."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    return float(sigma2) + float(np.sum(_spread(np.asarray(samples, dtype=np.float64))))


# --------------------------------------------------------------------------
# Monte-Carlo prediction
# --------------------------------------------------------------------------


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mc_outputs(params, compacts, n_samples, rng, chunk=MC_CHUNK):
    """Raw stochastic outputs, shape ``(molecules, T, 2)``.

    ``compacts`` holds per-molecule ``(X_n, A_n)`` arrays. Molecules are processed
    ``chunk`` at a time, each replicated ``n_samples`` times in one batch.
    """
    if n_samples < 2:
        raise TooFewSamples(f"need T >= 2, got {n_samples}")
    out = np.empty((len(compacts), n_samples, 2))
    with T.no_grad():
        for start in range(0, len(compacts), chunk):
            part = compacts[start : start + chunk]
            batch = M.GraphBatch.from_compact(part).repeat(n_samples)
            raw = M.forward(batch, params, "stochastic", rng).value
            out[start : start + len(part)] = raw.reshape(len(part), n_samples, 2)
    return out


def deterministic_outputs(params, compacts, chunk=MC_CHUNK):
    out = np.empty((len(compacts), 2))
    with T.no_grad():
        for start in range(0, len(compacts), chunk):
            part = compacts[start : start + chunk]
            raw = M.forward(M.GraphBatch.from_compact(part), params, "deterministic").value
            out[start : start + len(part)] = raw.reshape(len(part), 2)
    return out


def reports_from_outputs(task, raw, keep_samples=False):
    if task == "regression":
        return [regression_decomposition(r[:, 0], np.exp(r[:, 1]), keep_samples) for r in raw]
    return [classification_decomposition(_softmax(r), keep_samples) for r in raw]


def mc_predict(params, compacts, n_samples, rng, keep_samples=False):
    raw = mc_outputs(params, compacts, n_samples, rng)
    return reports_from_outputs(params.task, raw, keep_samples)


def mc_predict_regression(params, gt, n_samples, rng, keep_samples=False):
    if params.task != "regression":
        raise TaskMismatch(f"checkpoint task is {params.task!r}, not regression")
    return mc_predict(params, [M.compact(gt)], n_samples, rng, keep_samples)[0]


def mc_predict_classification(params, gt, n_samples, rng, keep_samples=False):
    if params.task != "classification":
        raise TaskMismatch(f"checkpoint task is {params.task!r}, not classification")
    return mc_predict(params, [M.compact(gt)], n_samples, rng, keep_samples)[0]


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------


def _column(values, like):
    return T.Tensor(np.asarray(values, dtype=np.float64).reshape(like.shape))


def loss_regression(y_hat, s, labels):
    """Heteroscedastic Gaussian NLL (constants dropped), averaged over the batch.

    ``y_hat`` and ``s`` are tensors of matching shape; ``s`` is log sigma^2.
    """
    y = _column(labels, y_hat)
    n = y.value.size
    err = T.sub(y, y_hat)
    weighted = T.hadamard(T.exp(T.scale(s, -1.0)), T.hadamard(err, err))
    per_item = T.add(T.scale(weighted, 0.5), T.scale(s, 0.5))
    return T.scale(T.sum_all(per_item), 1.0 / n)


def loss_classification(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels in {0, 1}."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = labels.size
    onehot = np.zeros(logits.shape)
    flat = onehot.reshape(n, -1)
    flat[np.arange(n), labels] = 1.0
    logp = T.log_softmax_rows(logits)
    return T.scale(T.sum_all(T.hadamard(logp, T.Tensor(onehot))), -1.0 / n)


def split_output(out):
    return T.cols(out, 0, 1), T.cols(out, 1, 2)


def data_loss(params, out, labels):
    if params.task == "regression":
        y_hat, s = split_output(out)
        return loss_regression(y_hat, s, labels)
    return loss_classification(out, labels)


def variational_regularizer(params, n_data, length_scale=LENGTH_SCALE):
    """Concrete-dropout KL surrogate, differentiable in weights and dropout logits.

    Per dropout site: l^2 |W|^2 / (2 M (1 - p)) over the consuming weights plus
    (K_in / M) (p log p + (1 - p) log(1 - p)). Remaining tensors get the plain
    Gaussian-prior term l^2 |W|^2 / (2 M).
    """
    if n_data < 1:
        raise ValueError("dataset size must be >= 1")
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    M_ = float(n_data)
    l2 = length_scale**2
    terms = []
    covered = set()
    for rho, weights, k_in in params.dropout_sites():
        p = T.sigmoid(rho)
        q = T.sub(T.Tensor(1.0), p)
        sq = T.sum_all(T.hadamard(weights[0], weights[0]))
        for w in weights[1:]:
            sq = T.add(sq, T.sum_all(T.hadamard(w, w)))
        covered.update(id(w) for w in weights)
        inv_keep = T.add(T.Tensor(1.0), T.exp(rho))
        terms.append(T.scale(T.hadamard(sq, inv_keep), l2 / (2.0 * M_)))
        neg_entropy = T.add(T.hadamard(p, T.log(p)), T.hadamard(q, T.log(q)))
        terms.append(T.scale(neg_entropy, k_in / M_))
    rho_ids = {id(r) for r in params.rhos()}
    for t in params.tensors():
        if id(t) in covered or id(t) in rho_ids:
            continue
        terms.append(T.scale(T.sum_all(T.hadamard(t, t)), l2 / (2.0 * M_)))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

REG_COLUMNS = ["id", "smiles", "label", "pred_mean", "aleatoric", "epistemic", "total"]
CLS_COLUMNS = ["id", "smiles", "label", "p_positive", "aleatoric", "epistemic", "total"]


def report_rows(task, ids, smiles, labels, reports):
    rows = []
    for i, s, y, r in zip(ids, smiles, labels, reports):
        first = r.mean if task == "regression" else r.p_positive
        rows.append([int(i), s, float(y), float(first), r.aleatoric, r.epistemic, r.total])
    return rows


def write_report_csv(path, task, rows):
    header = REG_COLUMNS if task == "regression" else CLS_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0], row[1]] + [repr(float(x)) for x in row[2:]])
