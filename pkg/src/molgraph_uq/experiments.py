"""Experiment harnesses: label noise sweep, corruption retrieval, confidence bins.

Each runner returns an :class:`ExperimentReport` whose summaries can be
recomputed from its per-sample rows.
"""

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import mannwhitneyu

from . import datagen as D
from . import train as TR
from . import uq

HIST_WIDTH = 0.05
CONFIDENCE_EDGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
N_DECILES = 10


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    seed: int
    summaries: list
    columns: list
    rows: list = field(default_factory=list, repr=False)

    def summary_object(self):
        return {
            "experiment": self.experiment,
            "config": self.config,
            "seed": self.seed,
            "summaries": self.summaries,
        }


# --------------------------------------------------------------------------
# statistics (pure functions of the per-sample rows)
# --------------------------------------------------------------------------


def histogram(values, width=HIST_WIDTH):
    """Fixed-width histogram starting at zero: list of {lo, hi, count}."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return []
    n_bins = max(1, int(math.floor(v.max() / width)) + 1)
    idx = np.clip(np.floor(v / width).astype(int), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return [{"lo": round(k * width, 10), "hi": round((k + 1) * width, 10), "count": int(c)} for k, c in enumerate(counts)]


def roc_auc(scores, flags):
    """Probability that a flagged item outscores an unflagged one (ties count half).

    Returns None when either class is empty.
    """
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    pos, neg = s[f], s[~f]
    if pos.size == 0 or neg.size == 0:
        return None
    u = mannwhitneyu(pos, neg, alternative="two-sided", method="asymptotic").statistic
    return float(u) / (pos.size * neg.size)


def _mean_or_none(values):
    return float(np.mean(values)) if len(values) else None


def noise_summary(sigma, aleatoric, epistemic, total):
    return {
        "sigma": float(sigma),
        "n": len(aleatoric),
        "mean_aleatoric": _mean_or_none(aleatoric),
        "mean_epistemic": _mean_or_none(epistemic),
        "mean_total": _mean_or_none(total),
        "hist_aleatoric": histogram(aleatoric),
        "hist_epistemic": histogram(epistemic),
        "hist_total": histogram(total),
    }


def corruption_summary(fraction, aleatoric, corrupted):
    a = np.asarray(aleatoric, dtype=np.float64)
    c = np.asarray(corrupted, dtype=bool)
    mean_bad = _mean_or_none(a[c])
    mean_ok = _mean_or_none(a[~c])
    top = None
    if c.any():
        # threshold marking the top group, sized like the corrupted share of the rows
        k = int(c.sum())
        top = float(np.sort(a)[::-1][k - 1])
    ratio = mean_bad / mean_ok if mean_bad is not None and mean_ok else None
    return {
        "corrupt_frac": float(fraction),
        "n": int(a.size),
        "n_corrupted": int(c.sum()),
        "roc_auc": roc_auc(a, c),
        "mean_aleatoric_corrupted": mean_bad,
        "mean_aleatoric_clean": mean_ok,
        "aleatoric_ratio": ratio,
        "top_group_threshold": top,
        "top_group_precision": float(np.mean(c[a >= top])) if top is not None else None,
    }


def confidence_bins(uncertainty, correct, edges=CONFIDENCE_EDGES):
    """Per-bin count and accuracy over (e0, e1], (e1, e2], ...; zero joins the first bin."""
    u = np.asarray(uncertainty, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    bins = []
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        sel = (u > lo) & (u <= hi)
        if k == 0:
            sel |= u <= lo
        n = int(sel.sum())
        bins.append({"lo": lo, "hi": hi, "count": n, "accuracy": float(ok[sel].mean()) if n else None})
    return bins


def probability_deciles(p_positive, total, n=N_DECILES):
    """Mean total uncertainty per predicted-probability decile [k/n, (k+1)/n)."""
    p = np.asarray(p_positive, dtype=np.float64)
    t = np.asarray(total, dtype=np.float64)
    idx = np.clip(np.floor(p * n).astype(int), 0, n - 1)
    out = []
    for k in range(n):
        sel = idx == k
        out.append({"lo": k / n, "hi": (k + 1) / n, "count": int(sel.sum()), "mean_total": _mean_or_none(t[sel])})
    return out


def peak_decile(deciles):
    filled = [(d["mean_total"], k) for k, d in enumerate(deciles) if d["mean_total"] is not None]
    return max(filled)[1] if filled else None


def confidence_summary(flip_rate, threshold, uncertainty, correct, p_positive, total):
    deciles = probability_deciles(p_positive, total)
    return {
        "flip_rate": float(flip_rate),
        "threshold": float(threshold),
        "n": len(correct),
        "accuracy": _mean_or_none(np.asarray(correct, dtype=float)),
        "bins": confidence_bins(uncertainty, correct),
        "deciles": deciles,
        "peak_decile": peak_decile(deciles),
    }


# --------------------------------------------------------------------------
# runners
# --------------------------------------------------------------------------


def _corpus(n, seed, max_atoms):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return D.make_records(D.generate_molecules(n, rng, max_atoms))


def _damage_rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([seed, 2, tag]))


def _train_and_predict(cfg, records, labels, compacts, log):
    smiles = [r.smiles for r in records]
    res = TR.fit(cfg, smiles, labels, compacts, log=log)
    test = res.split[2]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    reports = uq.mc_predict(res.best_params, [compacts[i] for i in test], cfg.mc_samples, rng)
    return res, test, reports


def _config_echo(cfg, **extra):
    out = dataclasses.asdict(cfg)
    out.update(extra)
    return out


def run_noise(sigmas, n=2500, seed=0, max_atoms=24, cfg=None, log=None):
    cfg = cfg or TR.TrainConfig(task="regression", seed=seed)
    records = _corpus(n, seed, max_atoms)
    compacts = TR.compact_graphs([r.smiles for r in records])
    summaries, rows = [], []
    for k, sigma in enumerate(sigmas):
        noisy = D.inject_noise(records, sigma, _damage_rng(seed, k))
        labels = [r.label for r in noisy]
        _, test, reports = _train_and_predict(cfg, noisy, labels, compacts, log)
        al = [r.aleatoric for r in reports]
        ep = [r.epistemic for r in reports]
        tot = [r.total for r in reports]
        summaries.append(noise_summary(sigma, al, ep, tot))
        for i, r in zip(test, reports):
            rec = noisy[i]
            rows.append([float(sigma), rec.id, rec.smiles, rec.label, r.mean, r.aleatoric, r.epistemic, r.total])
    return ExperimentReport(
        experiment="noise",
        config=_config_echo(cfg, n=n, max_atoms=max_atoms, sigmas=[float(s) for s in sigmas]),
        seed=seed,
        summaries=summaries,
        columns=["sigma", "id", "smiles", "label", "pred_mean", "aleatoric", "epistemic", "total"],
        rows=rows,
    )


def run_corruption(fraction, n=2500, seed=0, max_atoms=24, cfg=None, mode="clustered", log=None):
    if not 0.0 <= fraction < 0.5:
        raise ValueError("corrupt fraction must lie in [0, 0.5)")
    cfg = cfg or TR.TrainConfig(task="regression", seed=seed)
    records = _corpus(n, seed, max_atoms)
    damaged = D.inject_corruption(records, fraction, _damage_rng(seed, 0), mode=mode)
    compacts = TR.compact_graphs([r.smiles for r in damaged])
    _, test, reports = _train_and_predict(cfg, damaged, [r.label for r in damaged], compacts, log)
    rows = []
    for i, r in zip(test, reports):
        rec = damaged[i]
        rows.append([rec.id, rec.smiles, rec.label, int(rec.corrupted), r.mean, r.aleatoric, r.epistemic, r.total])
    summary = corruption_summary(fraction, [r.aleatoric for r in reports], [damaged[i].corrupted for i in test])
    return ExperimentReport(
        experiment="corruption",
        config=_config_echo(cfg, n=n, max_atoms=max_atoms, corrupt_frac=float(fraction), corrupt_mode=mode),
        seed=seed,
        summaries=[summary],
        columns=["id", "smiles", "label", "corrupted", "pred_mean", "aleatoric", "epistemic", "total"],
        rows=rows,
    )


def run_confidence(flip_rate=0.2, threshold=None, n=2500, seed=0, max_atoms=24, cfg=None, log=None):
    """Binary classifier on thresholded surrogate labels with random flips.

    ``threshold`` defaults to the median clean label so classes are balanced.
    """
    cfg = cfg or TR.TrainConfig(task="classification", seed=seed)
    records = _corpus(n, seed, max_atoms)
    if threshold is None:
        threshold = float(np.median([r.clean_label for r in records]))
    labeled = D.make_class_labels(records, threshold, flip_rate, _damage_rng(seed, 0))
    compacts = TR.compact_graphs([r.smiles for r in labeled])
    _, test, reports = _train_and_predict(cfg, labeled, [r.label for r in labeled], compacts, log)
    rows = []
    for i, r in zip(test, reports):
        rec = labeled[i]
        pred = int(r.p_positive > 0.5)
        rows.append([rec.id, rec.smiles, rec.label, r.p_positive, pred, int(pred == int(rec.label)),
                     r.aleatoric, r.epistemic, r.total, r.total_trace])
    summary = confidence_summary(
        flip_rate,
        threshold,
        uncertainty=[row[9] for row in rows],
        correct=[row[5] for row in rows],
        p_positive=[row[3] for row in rows],
        total=[row[8] for row in rows],
    )
    return ExperimentReport(
        experiment="confidence",
        config=_config_echo(cfg, n=n, max_atoms=max_atoms, flip_rate=float(flip_rate), threshold=threshold),
        seed=seed,
        summaries=[summary],
        columns=["id", "smiles", "label", "p_positive", "predicted", "correct",
                 "aleatoric", "epistemic", "total", "total_trace"],
        rows=rows,
    )


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------


def _cell(x):
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if obj is None:
        return "n/a"
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else "n/a"
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_report(report, csv_path, json_path):
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(report.columns)
        for row in report.rows:
            w.writerow([_cell(x) for x in row])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(_json_ready(report.summary_object()), fh, indent=2)
        fh.write("\n")


def read_rows(csv_path):
    with open(csv_path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
