import json

import numpy as np
import pytest

from molgraph_uq import experiments as E
from molgraph_uq import train as TR


def brute_force_auc(scores, flags):
    pos = [s for s, f in zip(scores, flags) if f]
    neg = [s for s, f in zip(scores, flags) if not f]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


class TestRocAuc:
    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(5, 80))
            scores = np.round(rng.normal(size=n), 1)  # rounding forces ties
            flags = rng.random(n) < 0.3
            if flags.all() or not flags.any():
                continue
            assert E.roc_auc(scores, flags) == pytest.approx(brute_force_auc(scores, flags), abs=1e-12)

    def test_perfect_and_inverted(self):
        assert E.roc_auc([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0
        assert E.roc_auc([0.9, 0.2, 0.1], [0, 0, 1]) == 0.0

    def test_undefined_without_positives(self):
        assert E.roc_auc([0.1, 0.2], [0, 0]) is None


class TestHistogram:
    def test_counts(self):
        h = E.histogram([0.0, 0.01, 0.049, 0.05, 0.12])
        assert [b["count"] for b in h] == [3, 1, 1]
        assert h[1]["lo"] == 0.05 and h[1]["hi"] == 0.1

    def test_empty(self):
        assert E.histogram([]) == []


class TestConfidenceBins:
    def test_assignment(self):
        u = [0.0, 0.05, 0.1, 0.15, 0.45, 0.5]
        ok = [1, 1, 0, 1, 0, 1]
        bins = E.confidence_bins(u, ok)
        assert [b["count"] for b in bins] == [3, 1, 0, 0, 2]
        assert bins[0]["accuracy"] == pytest.approx(2 / 3)
        assert bins[2]["accuracy"] is None

    def test_deciles_and_peak(self):
        p = [0.05, 0.45, 0.55, 0.95, 1.0]
        tot = [0.01, 0.2, 0.24, 0.02, 0.0]
        d = E.probability_deciles(p, tot)
        assert d[9]["count"] == 2 and d[9]["mean_total"] == pytest.approx(0.01)
        assert E.peak_decile(d) == 5


def _recompute_noise(rows, sigma):
    sel = [r for r in rows if float(r["sigma"]) == sigma]
    return {k: float(np.mean([float(r[k]) for r in sel])) for k in ("aleatoric", "epistemic", "total")}


TINY = dict(epochs=2, batch_size=50)


class TestRunners:
    def test_noise_report_recomputable(self, tmp_path):
        cfg = TR.TrainConfig(seed=1, **TINY)
        rep = E.run_noise([0.0, 1.0], n=80, seed=1, max_atoms=12, cfg=cfg)
        assert [s["sigma"] for s in rep.summaries] == [0.0, 1.0]
        E.write_report(rep, tmp_path / "r.csv", tmp_path / "r.json")
        rows = E.read_rows(tmp_path / "r.csv")
        summary = json.loads((tmp_path / "r.json").read_text())
        assert summary["experiment"] == "noise" and summary["seed"] == 1
        for s in summary["summaries"]:
            again = _recompute_noise(rows, s["sigma"])
            assert abs(again["aleatoric"] - s["mean_aleatoric"]) < 1e-9
            assert abs(again["epistemic"] - s["mean_epistemic"]) < 1e-9
            assert abs(again["total"] - s["mean_total"]) < 1e-9
            assert sum(b["count"] for b in s["hist_total"]) == s["n"]

    def test_single_sigma(self):
        rep = E.run_noise([0.0], n=40, seed=0, max_atoms=8, cfg=TR.TrainConfig(**TINY))
        assert len(rep.summaries) == 1

    def test_corruption_zero_fraction_is_na(self, tmp_path):
        rep = E.run_corruption(0.0, n=40, seed=0, max_atoms=8, cfg=TR.TrainConfig(**TINY))
        assert rep.summaries[0]["roc_auc"] is None
        E.write_report(rep, tmp_path / "c.csv", tmp_path / "c.json")
        assert json.loads((tmp_path / "c.json").read_text())["summaries"][0]["roc_auc"] == "n/a"

    def test_corruption_summary_recomputable(self, tmp_path):
        rep = E.run_corruption(0.2, n=80, seed=2, max_atoms=12, cfg=TR.TrainConfig(seed=2, **TINY))
        E.write_report(rep, tmp_path / "c.csv", tmp_path / "c.json")
        rows = E.read_rows(tmp_path / "c.csv")
        s = rep.summaries[0]
        al = [float(r["aleatoric"]) for r in rows]
        flags = [r["corrupted"] == "1" for r in rows]
        if s["roc_auc"] is not None:
            assert abs(brute_force_auc(al, flags) - s["roc_auc"]) < 1e-9
        assert s["n_corrupted"] == sum(flags)

    def test_confidence_summary_recomputable(self, tmp_path):
        cfg = TR.TrainConfig(task="classification", **TINY)
        rep = E.run_confidence(0.2, None, n=80, seed=3, max_atoms=12, cfg=cfg)
        E.write_report(rep, tmp_path / "k.csv", tmp_path / "k.json")
        rows = E.read_rows(tmp_path / "k.csv")
        bins = E.confidence_bins([float(r["total_trace"]) for r in rows], [int(r["correct"]) for r in rows])
        assert bins == rep.summaries[0]["bins"]
        for r in rows:
            assert float(r["total"]) <= 0.25 + 1e-12
            assert abs(2 * float(r["total"]) - float(r["total_trace"])) < 1e-12

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            E.run_corruption(0.6, n=40)
