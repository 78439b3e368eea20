"""Training loop: splits, Adam with step-decay, clipping and history logging."""

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import model as M
from . import tensor as T
from . import uq
from .errors import NonFiniteLoss, ShapeError, TooSmall
from .graph import featurize, parse_smiles


@dataclass
class TrainConfig:
    task: str = "regression"
    epochs: int = 100
    batch_size: int = 100
    lr0: float = 1e-3
    lr_halving: int = 10
    train_frac: float = 0.72
    valid_frac: float = 0.08
    test_frac: float = 0.2
    seed: int = 0
    mc_samples: int = uq.DEFAULT_T
    length_scale: float = uq.LENGTH_SCALE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    valid_mode: str = "deterministic"

    def __post_init__(self):
        if self.task not in M.TASKS:
            raise ValueError(f"task must be one of {M.TASKS}, got {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if abs(self.train_frac + self.valid_frac + self.test_frac - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.valid_mode not in ("deterministic", "mc"):
            raise ValueError("valid_mode must be 'deterministic' or 'mc'")

    @property
    def ratios(self):
        return (self.train_frac, self.valid_frac, self.test_frac)


def format_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


def parse_config(text, base=None):
    """Read ``key = value`` lines into a :class:`TrainConfig` (``#`` starts a comment)."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = types[key]
        values[key] = int(value) if kind in (int, "int") else float(value) if kind in (float, "float") else value
    return TrainConfig(**values)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


# --------------------------------------------------------------------------
# splitting and schedule
# --------------------------------------------------------------------------


def split_indices(n, ratios, seed):
    if n < 10:
        raise TooSmall(f"need at least 10 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_valid - n_test
    return perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]


def split_dataset(records, ratios=(0.72, 0.08, 0.2), seed=0):
    """Seeded shuffle into disjoint (train, valid, test) lists."""
    records = list(records)
    parts = split_indices(len(records), ratios, seed)
    return tuple([records[i] for i in idx] for idx in parts)


def lr_at(epoch, lr0=1e-3, halving=10):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // halving)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros(t.shape) for t in tensors],
            v=[np.zeros(t.shape) for t in tensors],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def copy(self):
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step, self.beta1, self.beta2, self.eps)


def adam_step(tensors, grads, state, lr):
    """One bias-corrected Adam update, in place on ``tensors`` and ``state``."""
    if len(tensors) != len(grads) or len(tensors) != len(state.m):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for t, g, m in zip(tensors, grads, state.m):
        if t.shape != np.shape(g) or t.shape != m.shape:
            raise ShapeError(f"adam_step: parameter {t.shape} vs gradient {np.shape(g)} vs moment {m.shape}")
    state.step += 1
    for t, g, m, v in zip(tensors, grads, state.m, state.v):
        kernels.adam_update(t.value, np.asarray(g, dtype=np.float64), m, v, lr, state.beta1, state.beta2, state.eps, state.step)
    return tensors, state


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return grads, norm


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    params: M.ModelParams
    best_params: M.ModelParams
    best_epoch: int
    history: list
    split: tuple  # (train idx, valid idx, test idx)
    config: TrainConfig = field(default=None)


def compact_graphs(smiles_list):
    return [M.compact(featurize(parse_smiles(s))) for s in smiles_list]


def _batch_loss(params, batch, labels, n_data, cfg, rng):
    out = M.forward(batch, params, "stochastic", rng)
    data = uq.data_loss(params, out, labels)
    return T.add(data, uq.variational_regularizer(params, n_data, cfg.length_scale))


def evaluate(params, compacts, labels, cfg, rng=None):
    """(data loss, metric) on a held-out set: RMSE for regression, accuracy otherwise."""
    if not compacts:
        return float("nan"), float("nan")
    labels = np.asarray(labels, dtype=np.float64)
    if cfg.valid_mode == "mc":
        raw = uq.mc_outputs(params, compacts, cfg.mc_samples, rng).mean(axis=1)
    else:
        raw = uq.deterministic_outputs(params, compacts)
    with T.no_grad():
        out = T.Tensor(raw[:, None, :])
        loss = uq.data_loss(params, out, labels).item()
    if params.task == "regression":
        metric = float(np.sqrt(np.mean((raw[:, 0] - labels) ** 2)))
    else:
        metric = float(np.mean(np.argmax(raw, axis=1) == labels.astype(int)))
    return loss, metric


def fit(cfg, smiles, labels, compacts=None, log=None):
    """Train a model; returns final and best-validation parameters plus history.

    Raises NonFiniteLoss (with epoch and batch id) if the objective or any
    parameter leaves the finite range.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if compacts is None:
        compacts = compact_graphs(smiles)
    train_idx, valid_idx, test_idx = split_indices(len(smiles), cfg.ratios, cfg.seed)
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng, drop_rng, valid_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    params = M.init_params(cfg.task, init_rng)
    tensors = params.tensors()
    state = AdamState.zeros_like(tensors, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n_data = len(train_idx)
    valid_c = [compacts[i] for i in valid_idx]
    valid_y = labels[valid_idx]

    history = []
    best = (math.inf, params.copy(), -1)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_halving)
        order = train_idx[shuffle_rng.permutation(n_data)]
        losses = []
        for b, start in enumerate(range(0, n_data, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = M.GraphBatch.from_compact([compacts[i] for i in idx])
            with T.Tape() as tape:
                loss = _batch_loss(params, batch, labels[idx], n_data, cfg, drop_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, b, value)
            grads = T.backward(loss, tape, params=tensors)
            g_list, _ = clip_by_global_norm([grads[t] for t in tensors], cfg.clip_norm)
            adam_step(tensors, g_list, state, lr)
            for t in tensors:
                if not np.all(np.isfinite(t.value)):
                    raise NonFiniteLoss(epoch, b, f"parameter {t.name} became non-finite")
            losses.append(value)
        v_loss, v_metric = evaluate(params, valid_c, valid_y, cfg, valid_rng)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "valid_loss": v_loss,
            "valid_metric": v_metric,
        }
        history.append(row)
        if log is not None:
            log(row)
        if math.isfinite(v_loss) and v_loss < best[0]:
            best = (v_loss, params.copy(), epoch)
    if best[2] < 0:
        best = (math.nan, params.copy(), cfg.epochs - 1)
    return FitResult(
        params=params,
        best_params=best[1],
        best_epoch=best[2],
        history=history,
        split=(train_idx, valid_idx, test_idx),
        config=cfg,
    )


HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "valid_loss", "valid_metric"]


def write_history(path, history):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def read_history(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
