import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molgraph_uq.datagen import generate_molecules
from molgraph_uq.errors import SizeError, SmilesSyntaxError, ValenceError
from molgraph_uq.graph import (
    F_INP,
    MAX_VALENCE,
    N_MAX,
    BOND_ORDERS,
    featurize,
    parse_smiles,
    read_dataset,
    write_dataset,
    write_smiles,
)


class TestParse:
    def test_ethanol(self):
        g = parse_smiles("CCO")
        assert [a.symbol for a in g.atoms] == ["C", "C", "O"]
        assert sorted(g.bonds) == [(0, 1, "single"), (1, 2, "single")]
        assert [a.hydrogens for a in g.atoms] == [3, 2, 1]

    def test_benzene(self):
        g = parse_smiles("c1ccccc1")
        assert g.n_atoms == 6
        assert all(a.aromatic and a.symbol == "C" for a in g.atoms)
        assert len(g.bonds) == 6
        assert all(o == "aromatic" for _, _, o in g.bonds)
        assert all(g.ring_atoms())

    def test_branch(self):
        g = parse_smiles("CC(C)C")
        assert g.n_atoms == 4
        assert g.degree(1) == 3

    def test_unmatched_ring_closure(self):
        with pytest.raises(SmilesSyntaxError):
            parse_smiles("C1CC")

    @pytest.mark.parametrize("bad", ["", "CC)", "C(C", "[CH4", "C%12CC", "C.C", "[13CH4]", "C[C@H](O)N", "*C", "C==C", "C="])
    def test_syntax_errors(self, bad):
        with pytest.raises(SmilesSyntaxError):
            parse_smiles(bad)

    @pytest.mark.parametrize("bad", ["FC(F)(F)(F)F", "C=O=C", "O(C)(C)C", "N#N#N", "ClCl(C)"])
    def test_valence_errors(self, bad):
        with pytest.raises(ValenceError):
            parse_smiles(bad)

    def test_size_limit(self):
        parse_smiles("C" * N_MAX)
        with pytest.raises(SizeError):
            parse_smiles("C" * (N_MAX + 1))

    def test_bracket_atoms(self):
        g = parse_smiles("C[NH3+]")
        assert g.atoms[1].charge == 1 and g.atoms[1].hydrogens == 3
        g = parse_smiles("CC(=O)[O-]")
        assert g.atoms[3].charge == -1 and g.atoms[3].hydrogens == 0

    def test_heteroaromatics(self):
        assert [a.hydrogens for a in parse_smiles("c1ccncc1").atoms] == [1, 1, 1, 0, 1, 1]
        assert parse_smiles("c1ccoc1").atoms[3].hydrogens == 0
        assert parse_smiles("c1cc[nH]c1").atoms[3].hydrogens == 1

    def test_ring_closure_bond_order(self):
        g = parse_smiles("C=1CCCCC1")
        assert (0, 5, "double") in g.bonds

    def test_ring_flags(self):
        g = parse_smiles("CC1CC1")
        assert g.ring_atoms() == [False, True, True, True]


class TestFeaturize:
    def test_ethanol_first_row(self):
        gt = featurize(parse_smiles("CCO"))
        # C one-hot 0, degree 1 -> 10+1, charge 0 -> 16+2, 3 H -> 23+3
        assert set(np.flatnonzero(gt.X[0])) == {0, 11, 18, 26}
        assert gt.X.shape == (N_MAX, F_INP) == (75, 28)

    def test_ethanol_adjacency(self):
        gt = featurize(parse_smiles("CCO"))
        np.testing.assert_array_equal(gt.A[:3, :3], [[1, 1, 0], [1, 1, 1], [0, 1, 1]])
        np.testing.assert_array_equal(gt.mask, [1, 1, 1] + [0] * 72)

    def test_padding_is_zero(self):
        gt = featurize(parse_smiles("CC(C)Cl"))
        n = gt.n_atoms
        assert not gt.X[n:].any()
        assert not gt.A[n:].any() and not gt.A[:, n:].any()

    def test_aromatic_ring_row(self):
        gt = featurize(parse_smiles("c1ccccc1"))
        # C, degree 2, charge 0, aromatic, ring, 1 H
        assert set(np.flatnonzero(gt.X[0])) == {0, 12, 18, 21, 22, 24}

    def test_other_element_and_charge(self):
        gt = featurize(parse_smiles("[B-](F)(F)(F)F"))
        assert gt.X[0, 9] == 1.0  # B -> "other"
        assert gt.X[0, 16 + 1] == 1.0  # charge -1

    def test_deterministic(self):
        a, b = featurize(parse_smiles("OC(=O)c1ccccc1")), featurize(parse_smiles("OC(=O)c1ccccc1"))
        assert a.X.tobytes() == b.X.tobytes() and a.A.tobytes() == b.A.tobytes()


def check_invariants(g):
    n = g.n_atoms
    seen = set()
    for i, j, o in g.bonds:
        assert 0 <= i < n and 0 <= j < n and i != j
        key = (min(i, j), max(i, j))
        assert key not in seen
        seen.add(key)
        assert o in BOND_ORDERS
    assert 1 <= n <= N_MAX
    for k, atom in enumerate(g.atoms):
        if atom.charge == 0 and not atom.aromatic:
            assert g.bond_order_sum(k) + atom.hydrogens <= MAX_VALENCE[atom.symbol]


def check_tensor_invariants(gt):
    n = gt.n_atoms
    np.testing.assert_array_equal(gt.A, gt.A.T)
    np.testing.assert_array_equal(np.diag(gt.A), gt.mask)
    assert not gt.X[gt.mask == 0].any()
    assert gt.mask[:n].all() and not gt.mask[n:].any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_relabeling_equivariance(seed, max_atoms):
    rng = np.random.default_rng(seed)
    smiles = generate_molecules(1, rng, max_atoms)[0]
    g = parse_smiles(smiles)
    root = int(rng.integers(g.n_atoms))
    alt, order = write_smiles(g, root=root, rng=rng)
    g2 = parse_smiles(alt)
    a, b = featurize(g), featurize(g2)
    perm = np.asarray(order)
    n = g.n_atoms
    np.testing.assert_array_equal(b.X[:n], a.X[perm])
    np.testing.assert_array_equal(b.A[:n, :n], a.A[np.ix_(perm, perm)])


def test_fuzz_generated_molecules_satisfy_invariants():
    for s in generate_molecules(2000, np.random.default_rng(11), max_atoms=40):
        g = parse_smiles(s)
        check_invariants(g)
        check_tensor_invariants(featurize(g))


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="CNOcnos()=#123[]+-HFBrl", min_size=1, max_size=20))
def test_random_strings_either_parse_validly_or_raise(text):
    try:
        g = parse_smiles(text)
    except (SmilesSyntaxError, ValenceError, SizeError):
        return
    check_invariants(g)


def test_dataset_file_roundtrip(tmp_path):
    path = tmp_path / "data.tsv"
    write_dataset(path, [("CCO", 0.1), ("c1ccccc1", 2.1)], header="demo")
    assert path.read_text().splitlines()[0].startswith("#")
    assert read_dataset(path) == [("CCO", 0.1), ("c1ccccc1", 2.1)]


def test_dataset_classification_labels(tmp_path):
    path = tmp_path / "cls.tsv"
    write_dataset(path, [("CCO", 1.0), ("CC", 0.0)], task="classification")
    assert path.read_text() == "CCO\t1\nCC\t0\n"


def test_dataset_bad_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("CCO 1.0\n")
    with pytest.raises(ValueError):
        read_dataset(path)
