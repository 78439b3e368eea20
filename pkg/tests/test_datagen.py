import numpy as np
import pytest

from molgraph_uq import datagen as D
from molgraph_uq.graph import featurize, parse_smiles, write_smiles


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSurrogate:
    @pytest.mark.parametrize("smiles,expected", [("CCO", 0.1), ("C", 0.2), ("c1ccccc1", 2.1)])
    def test_hand_values(self, smiles, expected):
        assert D.surrogate_property(parse_smiles(smiles)) == pytest.approx(expected, abs=1e-12)

    def test_other_element_contributes_zero(self):
        # B counts 0, C 0.2, one bond 0.05
        assert D.surrogate_property(parse_smiles("BC")) == pytest.approx(0.25, abs=1e-12)

    def test_invariant_under_rewrite(self):
        for s in D.generate_molecules(50, rng(4), 20):
            g = parse_smiles(s)
            alt, _ = write_smiles(g, root=g.n_atoms - 1, rng=rng(1))
            assert D.surrogate_property(parse_smiles(alt)) == pytest.approx(D.surrogate_property(g), abs=1e-12)


def corpus(n=200, seed=0):
    return D.make_records(D.generate_molecules(n, rng(seed), 16))


class TestNoise:
    def test_zero_sigma(self):
        recs = corpus()
        assert [r.label for r in D.inject_noise(recs, 0.0, rng(1))] == [r.clean_label for r in recs]

    def test_unit_sigma_statistics(self):
        recs = [D.LabeledRecord(i, "C", 0.2, 0.2) for i in range(10_000)]
        eps = np.array([r.label - r.clean_label for r in D.inject_noise(recs, 1.0, rng(2))])
        assert 0.97 <= eps.std(ddof=1) <= 1.03
        assert abs(eps.mean()) < 3 / np.sqrt(eps.size)

    def test_seeded(self):
        recs = corpus()
        assert D.inject_noise(recs, 0.5, rng(3)) == D.inject_noise(recs, 0.5, rng(3))

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            D.inject_noise(corpus(20), -1.0, rng())


class TestCorruption:
    def test_zero_fraction(self):
        assert not any(r.corrupted for r in D.inject_corruption(corpus(), 0.0, rng()))

    @pytest.mark.parametrize("mode", ["clustered", "uniform"])
    def test_floor_count_and_zero_labels(self, mode):
        recs = corpus(1000)
        out = D.inject_corruption(recs, 0.1, rng(5), mode=mode)
        flagged = [r for r in out if r.corrupted]
        assert len(flagged) == 100
        assert all(r.label == 0.0 for r in flagged)
        assert all(r.label == r.clean_label for r in out if not r.corrupted)

    def test_floor_arithmetic(self):
        assert sum(r.corrupted for r in D.inject_corruption(corpus(205), 0.05, rng())) == 10

    def test_clustered_hits_large_molecules(self):
        recs = corpus(1000)
        out = D.inject_corruption(recs, 0.05, rng(6), mode="clustered")
        sizes = np.array([D.heavy_atom_count(r) for r in recs])
        hit = np.array([r.corrupted for r in out])
        assert sizes[hit].min() >= np.sort(sizes)[::-1][99]

    def test_seeded(self):
        recs = corpus()
        assert D.inject_corruption(recs, 0.2, rng(8)) == D.inject_corruption(recs, 0.2, rng(8))

    def test_bad_fraction_and_mode(self):
        with pytest.raises(ValueError):
            D.inject_corruption(corpus(20), 1.5, rng())
        with pytest.raises(ValueError):
            D.inject_corruption(corpus(20), 0.5, rng(), mode="bogus")


class TestClassLabels:
    def test_threshold_below_all(self):
        out = D.make_class_labels(corpus(), -100.0, 0.0, rng())
        assert all(r.label == 1.0 for r in out)

    def test_step_function(self):
        recs = corpus()
        out = D.make_class_labels(recs, 1.0, 0.0, rng())
        assert all(r.label == float(r.clean_label > 1.0) for r in out)

    def test_flip_share(self):
        recs = [D.LabeledRecord(i, "C", float(i % 2), float(i % 2)) for i in range(10_000)]
        out = D.make_class_labels(recs, 0.5, 0.2, rng(9))
        flipped = np.mean([r.label != float(r.clean_label > 0.5) for r in out])
        assert 0.18 <= flipped <= 0.22

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            D.make_class_labels(corpus(20), 0.0, 0.5, rng())


class TestGenerate:
    def test_all_parse(self):
        out = D.generate_molecules(1000, rng(10), 24)
        assert len(out) == 1000
        for s in out:
            parse_smiles(s)

    def test_single_atoms(self):
        for s in D.generate_molecules(100, rng(11), 1):
            assert parse_smiles(s).n_atoms == 1

    def test_seeded(self):
        assert D.generate_molecules(200, rng(12), 30) == D.generate_molecules(200, rng(12), 30)

    def test_max_atoms_respected(self):
        assert max(parse_smiles(s).n_atoms for s in D.generate_molecules(300, rng(13), 10)) <= 10

    def test_bad_max_atoms(self):
        with pytest.raises(ValueError):
            D.generate_molecules(1, rng(), 0)
        with pytest.raises(ValueError):
            D.generate_molecules(1, rng(), 76)

    def test_variety(self):
        out = D.generate_molecules(500, rng(14), 24)
        graphs = [parse_smiles(s) for s in out]
        assert len(set(out)) > 400
        assert any(a.aromatic for g in graphs for a in g.atoms)
        assert any(any(g.ring_atoms()) for g in graphs)
        assert {a.symbol for g in graphs for a in g.atoms} >= {"C", "N", "O", "S", "Cl"}


@pytest.mark.slow
def test_pipeline_fuzz_large():
    # generate -> parse -> featurize never raises
    for s in D.generate_molecules(100_000, rng(15), 75):
        featurize(parse_smiles(s))


def test_sidecar_roundtrip(tmp_path):
    recs = D.inject_corruption(corpus(50), 0.1, rng())
    path = tmp_path / "side.csv"
    D.write_sidecar(path, recs)
    assert path.read_text().splitlines()[0] == "id,clean_label,corrupted"
    assert D.read_sidecar(path) == [(r.id, r.clean_label, r.corrupted) for r in recs]
