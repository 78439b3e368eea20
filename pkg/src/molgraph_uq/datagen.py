"""Synthetic corpus: random molecules, a surrogate property and label damage."""

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .graph import Atom, MolGraph, N_MAX, assign_hydrogens, parse_smiles, write_smiles

SURROGATE_COEF = {
    "C": 0.2,
    "N": -0.3,
    "O": -0.4,
    "F": 0.1,
    "P": 0.2,
    "S": 0.4,
    "Cl": 0.6,
    "Br": 0.8,
    "I": 1.0,
}
AROMATIC_BONUS = 0.1
BOND_BONUS = 0.05

# element frequencies and the valence used while growing chains
_GROW_ELEMENTS = ("C", "N", "O", "S", "F", "Cl", "Br", "I", "P")
_GROW_WEIGHTS = np.array([0.62, 0.12, 0.12, 0.04, 0.03, 0.03, 0.02, 0.01, 0.01])
_GROW_VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1, "Br": 1, "I": 1, "P": 3}


@dataclass(frozen=True)
class LabeledRecord:
    id: int
    smiles: str
    label: float
    clean_label: float
    corrupted: bool = False


def surrogate_property(g):
    """Deterministic atom-contribution stand-in for logP."""
    total = sum(SURROGATE_COEF.get(a.symbol, 0.0) for a in g.atoms)
    total += AROMATIC_BONUS * sum(1 for a in g.atoms if a.aromatic)
    total += BOND_BONUS * len(g.bonds)
    return total


# --------------------------------------------------------------------------
# molecule generation
# --------------------------------------------------------------------------


def _random_graph(rng, n_target):
    atoms = []
    free = []
    bonds = []
    adj = []

    def new_atom(symbol, aromatic=False):
        atoms.append(Atom(symbol, aromatic=aromatic))
        free.append(_GROW_VALENCE[symbol])
        adj.append(set())
        return len(atoms) - 1

    def bond(i, j, order):
        bonds.append((min(i, j), max(i, j), order))
        adj[i].add(j)
        adj[j].add(i)
        cost = 1 if order == "aromatic" else {"single": 1, "double": 2, "triple": 3}[order]
        free[i] -= cost
        free[j] -= cost

    ring_kind = rng.random()
    if n_target >= 6 and ring_kind < 0.25:
        # benzene seed: each aromatic carbon keeps one free valence
        ring = [new_atom("C", aromatic=True) for _ in range(6)]
        for k in range(6):
            bond(ring[k], ring[(k + 1) % 6], "aromatic")
        for k in ring:
            free[k] = 1
        want_closure = False
    else:
        new_atom(str(rng.choice(_GROW_ELEMENTS, p=_GROW_WEIGHTS)))
        want_closure = n_target >= 3 and ring_kind < 0.6

    while len(atoms) < n_target:
        hosts = [k for k in range(len(atoms)) if free[k] > 0]
        if not hosts:
            break
        host = hosts[int(rng.integers(len(hosts)))]
        symbol = str(rng.choice(_GROW_ELEMENTS, p=_GROW_WEIGHTS))
        if len(atoms) + 1 < n_target and _GROW_VALENCE[symbol] == 1:
            # a halogen mid-growth would cap the only open site of a small chain
            if len(hosts) == 1 and free[host] == 1:
                symbol = "C"
        k = new_atom(symbol)
        cap = min(free[host], free[k])
        u = rng.random()
        if cap >= 3 and u < 0.03:
            order = "triple"
        elif cap >= 2 and u < 0.15:
            order = "double"
        else:
            order = "single"
        bond(host, k, order)

    if want_closure:
        candidates = []
        dist = _distances(adj)
        for i in range(len(atoms)):
            for j in range(i + 1, len(atoms)):
                if free[i] > 0 and free[j] > 0 and 2 <= dist[i][j] <= 6:
                    candidates.append((i, j))
        if candidates:
            i, j = candidates[int(rng.integers(len(candidates)))]
            bond(i, j, "single")

    g = MolGraph(atoms=atoms, bonds=bonds)
    assign_hydrogens(g)
    return g


def _distances(adj):
    n = len(adj)
    out = []
    for s in range(n):
        d = [math.inf] * n
        d[s] = 0
        frontier = [s]
        while frontier:
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if d[w] == math.inf:
                        d[w] = d[v] + 1
                        nxt.append(w)
            frontier = nxt
        out.append(d)
    return out


def generate_molecules(n, rng, max_atoms=24):
    """Return ``n`` random valence-respecting SMILES of at most ``max_atoms`` atoms."""
    if not 1 <= max_atoms <= N_MAX:
        raise ValueError(f"max_atoms must lie in [1, {N_MAX}], got {max_atoms}")
    out = []
    while len(out) < n:
        n_target = int(rng.integers(1, max_atoms + 1))
        g = _random_graph(rng, n_target)
        smiles, _ = write_smiles(g, root=0)
        parse_smiles(smiles)  # closure check: every output must re-parse
        out.append(smiles)
    return out


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------


def make_records(smiles_list):
    """Noise-free regression records labelled with the surrogate property."""
    records = []
    for i, s in enumerate(smiles_list):
        y = surrogate_property(parse_smiles(s))
        records.append(LabeledRecord(id=i, smiles=s, label=y, clean_label=y))
    return records


def inject_noise(records, sigma, rng):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    eps = rng.normal(0.0, 1.0, size=len(records)) * sigma
    return [replace(r, label=r.clean_label + float(e)) for r, e in zip(records, eps)]


def heavy_atom_count(record):
    return parse_smiles(record.smiles).n_atoms


def inject_corruption(records, fraction, rng, mode="clustered", pool_factor=2.0):
    """Zero the labels of a seeded random ``floor(fraction * n)`` subset.

    ``mode="uniform"`` draws the subset from all records. ``mode="clustered"``
    draws it from a susceptible pool, the ``ceil(pool_factor * k)`` largest
    molecules (random tie-break), so damage hits one structural class the way a
    failing labelling pipeline would.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(records)
    k = int(math.floor(fraction * n + 1e-12))
    if k == 0:
        return list(records)
    if mode == "uniform":
        chosen = rng.choice(n, size=k, replace=False)
    elif mode == "clustered":
        sizes = np.array([heavy_atom_count(r) for r in records])
        tiebreak = rng.random(n)
        ranked = np.lexsort((tiebreak, -sizes))
        pool = ranked[: min(n, int(math.ceil(pool_factor * k)))]
        chosen = rng.choice(pool, size=k, replace=False)
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    hit = set(int(i) for i in chosen)
    return [replace(r, label=0.0, corrupted=True) if i in hit else r for i, r in enumerate(records)]


def make_class_labels(records, threshold, flip_rate, rng):
    """Binary labels ``clean_label > threshold``, each flipped with ``flip_rate``."""
    if not 0.0 <= flip_rate < 0.5:
        raise ValueError("flip_rate must lie in [0, 0.5)")
    u = rng.random(len(records))
    out = []
    for r, ui in zip(records, u):
        y = 1.0 if r.clean_label > threshold else 0.0
        if ui < flip_rate:
            y = 1.0 - y
        out.append(replace(r, label=y))
    return out


def write_sidecar(path, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "clean_label", "corrupted"])
        for r in records:
            w.writerow([r.id, repr(float(r.clean_label)), int(r.corrupted)])


def read_sidecar(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return [
            (int(row["id"]), float(row["clean_label"]), bool(int(row["corrupted"])))
            for row in csv.DictReader(fh)
        ]
