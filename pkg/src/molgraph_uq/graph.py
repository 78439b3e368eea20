"""SMILES-subset parsing, SMILES writing and fixed-size graph featurization.

Supported grammar: organic-subset atoms ``B C N O P S F Cl Br I``, aromatic
``c n o s``, bracket atoms with optional H count and charge (``[NH4+]``,
``[O-]``, ``[nH]``), branches, ring closures ``1``-``9`` and the bond symbols
``- = #``. Stereo, isotopes, wildcards and ``.`` are rejected.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeError, SmilesSyntaxError, ValenceError

N_MAX = 75
F_INP = 28

ELEMENTS = ("C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
ORGANIC = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC = ("c", "n", "o", "s")
MAX_VALENCE = {"B": 3, "C": 4, "N": 3, "O": 2, "F": 1, "Cl": 1, "Br": 1, "I": 1, "S": 6, "P": 5}
# allowed valence states used to derive implicit hydrogens, lowest first
DEFAULT_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

BOND_ORDERS = {"single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}
_BOND_SYMBOL = {"-": "single", "=": "double", "#": "triple"}

# feature layout offsets
_ELEM_OFF, _DEG_OFF, _CHG_OFF, _AROM_OFF, _RING_OFF, _H_OFF = 0, 10, 16, 21, 22, 23


@dataclass
class Atom:
    symbol: str
    charge: int = 0
    aromatic: bool = False
    hydrogens: int = 0
    bracket: bool = False


@dataclass
class MolGraph:
    atoms: list = field(default_factory=list)
    bonds: list = field(default_factory=list)  # (i, j, order) with i < j

    @property
    def n_atoms(self):
        return len(self.atoms)

    def neighbors(self):
        nbrs = [[] for _ in self.atoms]
        for i, j, _ in self.bonds:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs

    def degree(self, i):
        return sum(1 for a, b, _ in self.bonds if a == i or b == i)

    def bond_order_sum(self, i):
        return sum(BOND_ORDERS[o] for a, b, o in self.bonds if a == i or b == i)

    def ring_atoms(self):
        """Flags for atoms lying on at least one cycle (incident to a non-bridge bond)."""
        nbrs = self.neighbors()
        n = len(self.atoms)
        disc = [-1] * n
        low = [0] * n
        in_ring = [False] * n
        counter = 0
        for root in range(n):
            if disc[root] != -1:
                continue
            disc[root] = low[root] = counter
            counter += 1
            stack = [(root, -1, iter(nbrs[root]))]
            while stack:
                v, parent, it = stack[-1]
                advanced = False
                for w in it:
                    if w == parent:
                        continue
                    if disc[w] == -1:
                        disc[w] = low[w] = counter
                        counter += 1
                        stack.append((w, v, iter(nbrs[w])))
                        advanced = True
                        break
                    low[v] = min(low[v], disc[w])
                if advanced:
                    continue
                stack.pop()
                if parent != -1:
                    low[parent] = min(low[parent], low[v])
                    if low[v] <= disc[parent]:
                        # edge (parent, v) is not a bridge
                        in_ring[v] = in_ring[parent] = True
        return in_ring


@dataclass
class GraphTensor:
    X: np.ndarray
    A: np.ndarray
    mask: np.ndarray

    @property
    def n_atoms(self):
        return int(self.mask.sum())


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _charge_adjusted_max(symbol, charge):
    base = MAX_VALENCE.get(symbol, 4)
    if charge == 0:
        return base
    if symbol == "C":
        return base - abs(charge)
    if symbol == "B":  # [B-] is isoelectronic with carbon
        return base - charge
    if symbol in ("N", "O", "S", "P"):
        return base + charge
    return base - abs(charge)


def _implicit_h(symbol, used):
    for v in DEFAULT_VALENCES[symbol]:
        if v >= used:
            return v - used
    return 0


def _aromatic_bond_weight(atom, k_arom, others, max_val):
    """Valence contribution of an atom's aromatic bonds.

    1.5 per aromatic bond; a lone-pair donor (furan O, thiophene S, pyrrole
    [nH]) whose total would otherwise overflow counts them as single bonds.
    """
    full = 1.5 * k_arom
    if math.floor(full + others + 1e-9) <= max_val:
        return full
    return float(k_arom)


def _tokenize_bracket(text, pos):
    end = text.find("]", pos)
    if end == -1:
        raise SmilesSyntaxError(f"unclosed bracket atom at position {pos}")
    body = text[pos + 1 : end]
    if not body:
        raise SmilesSyntaxError(f"empty bracket atom at position {pos}")
    i = 0
    if body[0].isdigit():
        raise SmilesSyntaxError(f"isotopes are not supported: [{body}]")
    aromatic = False
    if body[:2] in ("Cl", "Br"):
        symbol, i = body[:2], 2
    elif body[0] in "BCNOPSFI":
        symbol, i = body[0], 1
    elif body[0] in AROMATIC:
        symbol, i, aromatic = body[0].upper(), 1, True
    else:
        raise SmilesSyntaxError(f"unknown element in [{body}]")
    hydrogens = 0
    if i < len(body) and body[i] == "H":
        i += 1
        hydrogens = 1
        if i < len(body) and body[i].isdigit():
            hydrogens = int(body[i])
            i += 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        i += 1
        if i < len(body) and body[i].isdigit():
            charge = sign * int(body[i])
            i += 1
        else:
            charge = sign
            while i < len(body) and body[i] == ("+" if sign > 0 else "-"):
                charge += sign
                i += 1
    if i != len(body):
        raise SmilesSyntaxError(f"unsupported bracket atom syntax: [{body}]")
    atom = Atom(symbol, charge=charge, aromatic=aromatic, hydrogens=hydrogens, bracket=True)
    return atom, end + 1


def parse_smiles(text):
    """Parse a SMILES-subset string into a :class:`MolGraph`.

    Raises SmilesSyntaxError, ValenceError or SizeError.
    """
    if not isinstance(text, str) or not text:
        raise SmilesSyntaxError("empty SMILES")
    if not text.isascii():
        raise SmilesSyntaxError("SMILES must be ASCII")

    atoms = []
    bonds = {}
    branch_stack = []
    ring_open = {}
    prev = None
    pending_bond = None
    pos = 0
    n = len(text)

    def add_bond(i, j, order):
        key = (min(i, j), max(i, j))
        if i == j:
            raise SmilesSyntaxError(f"atom {i} bonded to itself")
        if key in bonds:
            raise SmilesSyntaxError(f"duplicate bond between atoms {key[0]} and {key[1]}")
        bonds[key] = order

    def implicit_order(i, j):
        return "aromatic" if atoms[i].aromatic and atoms[j].aromatic else "single"

    while pos < n:
        ch = text[pos]
        atom = None
        if ch == "[":
            atom, pos = _tokenize_bracket(text, pos)
        elif text.startswith(("Cl", "Br"), pos):
            atom = Atom(text[pos : pos + 2])
            pos += 2
        elif ch in "BCNOPSFI":
            atom = Atom(ch)
            pos += 1
        elif ch in AROMATIC:
            atom = Atom(ch.upper(), aromatic=True)
            pos += 1
        elif ch in _BOND_SYMBOL:
            if pending_bond is not None or prev is None:
                raise SmilesSyntaxError(f"misplaced bond symbol {ch!r} at position {pos}")
            pending_bond = _BOND_SYMBOL[ch]
            pos += 1
            continue
        elif ch == "(":
            if prev is None or pending_bond is not None:
                raise SmilesSyntaxError(f"misplaced '(' at position {pos}")
            branch_stack.append(prev)
            pos += 1
            continue
        elif ch == ")":
            if not branch_stack or pending_bond is not None:
                raise SmilesSyntaxError(f"unbalanced ')' at position {pos}")
            prev = branch_stack.pop()
            pos += 1
            continue
        elif ch.isdigit() and ch != "0":
            if prev is None:
                raise SmilesSyntaxError(f"ring closure before any atom at position {pos}")
            digit = int(ch)
            if digit in ring_open:
                start, order = ring_open.pop(digit)
                if order is not None and pending_bond is not None and order != pending_bond:
                    raise SmilesSyntaxError(f"conflicting bond orders on ring closure {digit}")
                order = pending_bond or order or implicit_order(start, prev)
                add_bond(start, prev, order)
            else:
                ring_open[digit] = (prev, pending_bond)
            pending_bond = None
            pos += 1
            continue
        else:
            raise SmilesSyntaxError(f"unknown symbol {ch!r} at position {pos}")

        atoms.append(atom)
        idx = len(atoms) - 1
        if len(atoms) > N_MAX:
            raise SizeError(f"more than {N_MAX} atoms")
        if prev is not None:
            add_bond(prev, idx, pending_bond or implicit_order(prev, idx))
        elif pending_bond is not None:
            raise SmilesSyntaxError("bond symbol without a preceding atom")
        pending_bond = None
        prev = idx

    if pending_bond is not None:
        raise SmilesSyntaxError("dangling bond symbol at end of SMILES")
    if branch_stack:
        raise SmilesSyntaxError("unbalanced '(' in SMILES")
    if ring_open:
        raise SmilesSyntaxError(f"unmatched ring closure(s) {sorted(ring_open)}")
    if not atoms:
        raise SmilesSyntaxError("SMILES contains no atoms")

    g = MolGraph(atoms=atoms, bonds=[(i, j, o) for (i, j), o in bonds.items()])
    assign_hydrogens(g)
    return g


def assign_hydrogens(g):
    arom_count = [0] * g.n_atoms
    other = [0.0] * g.n_atoms
    for i, j, o in g.bonds:
        for k in (i, j):
            if o == "aromatic":
                arom_count[k] += 1
            else:
                other[k] += BOND_ORDERS[o]
    for k, atom in enumerate(g.atoms):
        max_val = _charge_adjusted_max(atom.symbol, atom.charge)
        h_fixed = atom.hydrogens if atom.bracket else 0
        arom = _aromatic_bond_weight(atom, arom_count[k], other[k] + h_fixed, max_val)
        used = math.floor(arom + other[k] + 1e-9)
        if used + h_fixed > max_val:
            raise ValenceError(
                f"atom {k} ({atom.symbol}) has bond-order sum {arom + other[k]:g}"
                f" + {h_fixed} H, exceeding valence {max_val}"
            )
        if not atom.bracket:
            atom.hydrogens = _implicit_h(atom.symbol, used)


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------


def _atom_token(g, k, used):
    atom = g.atoms[k]
    sym = atom.symbol.lower() if atom.aromatic else atom.symbol
    bare_ok = (
        atom.charge == 0
        and atom.symbol in ORGANIC
        and (not atom.aromatic or sym in AROMATIC)
        and _implicit_h(atom.symbol, used) == atom.hydrogens
    )
    if bare_ok:
        return sym
    text = "[" + sym
    if atom.hydrogens:
        text += "H" + (str(atom.hydrogens) if atom.hydrogens > 1 else "")
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        text += sign + (str(abs(atom.charge)) if abs(atom.charge) > 1 else "")
    return text + "]"


def write_smiles(g, root=0, rng=None):
    """Serialize ``g`` to SMILES by depth-first traversal.

    Returns ``(smiles, order)``; ``order[k]`` is the index in ``g`` of the k-th
    atom written, so parsing the string yields atoms in that order. ``rng``
    shuffles neighbor visiting order to produce alternative spellings.
    """
    nbrs = g.neighbors()
    order_of = {}
    for i, j, o in g.bonds:
        order_of[(i, j)] = order_of[(j, i)] = o
    if rng is not None:
        for lst in nbrs:
            rng.shuffle(lst)

    arom_count = [0] * g.n_atoms
    other = [0.0] * g.n_atoms
    for i, j, o in g.bonds:
        for k in (i, j):
            if o == "aromatic":
                arom_count[k] += 1
            else:
                other[k] += BOND_ORDERS[o]

    def used_valence(k):
        atom = g.atoms[k]
        max_val = _charge_adjusted_max(atom.symbol, atom.charge)
        arom = _aromatic_bond_weight(atom, arom_count[k], other[k], max_val)
        return math.floor(arom + other[k] + 1e-9)

    def bond_text(a, b):
        o = order_of[(a, b)]
        if o == "double":
            return "="
        if o == "triple":
            return "#"
        if o == "single" and g.atoms[a].aromatic and g.atoms[b].aromatic:
            return "-"
        return ""

    # spanning tree by DFS, then ring-closure labels for non-tree edges
    visited = [False] * g.n_atoms
    order = []
    tree_children = [[] for _ in g.atoms]
    closures = [[] for _ in g.atoms]  # (partner, opens)
    tree_edges = set()

    def dfs(start):
        stack = [(start, -1)]
        while stack:
            v, parent = stack.pop()
            if visited[v]:
                continue
            visited[v] = True
            order.append(v)
            if parent != -1:
                tree_children[parent].append(v)
                tree_edges.add((min(v, parent), max(v, parent)))
            for w in reversed(nbrs[v]):
                if not visited[w]:
                    stack.append((w, v))

    dfs(root)
    for k in range(g.n_atoms):
        if not visited[k]:
            raise ValueError("write_smiles supports connected graphs only")

    rank = {v: r for r, v in enumerate(order)}
    ring_edges = sorted(
        ((min(i, j), max(i, j)) for i, j, _ in g.bonds if (min(i, j), max(i, j)) not in tree_edges),
        key=lambda e: (min(rank[e[0]], rank[e[1]]), max(rank[e[0]], rank[e[1]])),
    )
    for i, j in ring_edges:
        a, b = (i, j) if rank[i] < rank[j] else (j, i)
        closures[a].append((b, True))
        closures[b].append((a, False))

    free_digits = list(range(1, 10))
    label = {}
    parts = []

    def emit(v):
        parts.append(_atom_token(g, v, used_valence(v)))
        for partner, opens in sorted(closures[v], key=lambda c: rank[c[0]]):
            edge = (min(v, partner), max(v, partner))
            if opens:
                if not free_digits:
                    raise ValueError("more than 9 simultaneously open rings")
                d = free_digits.pop(0)
                label[edge] = d
                parts.append(bond_text(v, partner) + str(d))
            else:
                d = label.pop(edge)
                parts.append(str(d))
                free_digits.append(d)
                free_digits.sort()

    # iterative emission of nested branches
    stack = [("atom", root, -1)]
    while stack:
        kind, v, parent = stack.pop()
        if kind == "text":
            parts.append(v)
            continue
        if parent != -1:
            parts.append(bond_text(parent, v))
        emit(v)
        kids = tree_children[v]
        tail = []
        for c in kids[:-1]:
            tail.extend([("text", "(", -1), ("atom", c, v), ("text", ")", -1)])
        if kids:
            tail.append(("atom", kids[-1], v))
        # a branch's whole subtree is emitted before its closing paren
        stack.extend(reversed(tail))
    return "".join(parts), order


# --------------------------------------------------------------------------
# featurization
# --------------------------------------------------------------------------


def featurize(g, n_max=N_MAX):
    """Encode ``g`` as padded node features, adjacency with self-loops and a mask."""
    n = g.n_atoms
    if n > n_max:
        raise SizeError(f"{n} atoms exceed padding size {n_max}")
    X = np.zeros((n_max, F_INP))
    A = np.zeros((n_max, n_max))
    mask = np.zeros(n_max)
    ring = g.ring_atoms()
    degree = [0] * n
    for i, j, _ in g.bonds:
        degree[i] += 1
        degree[j] += 1
        A[i, j] = A[j, i] = 1.0
    for k, atom in enumerate(g.atoms):
        elem = ELEMENTS.index(atom.symbol) if atom.symbol in ELEMENTS else 9
        X[k, _ELEM_OFF + elem] = 1.0
        X[k, _DEG_OFF + min(degree[k], 5)] = 1.0
        X[k, _CHG_OFF + min(max(atom.charge, -2), 2) + 2] = 1.0
        X[k, _AROM_OFF] = float(atom.aromatic)
        X[k, _RING_OFF] = float(ring[k])
        X[k, _H_OFF + min(atom.hydrogens, 4)] = 1.0
        A[k, k] = 1.0
        mask[k] = 1.0
    return GraphTensor(X=X, A=A, mask=mask)


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------


def read_dataset(path):
    """Read ``<SMILES><TAB><label>`` lines; returns a list of (smiles, label)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<SMILES>\\t<label>'")
            try:
                label = float(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {parts[1]!r} is not a number") from None
            records.append((parts[0].strip(), label))
    return records


def format_label(label, task="regression"):
    if task == "classification":
        return str(int(round(label)))
    return repr(float(label))


def write_dataset(path, records, task="regression", header=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        for smiles, label in records:
            fh.write(f"{smiles}\t{format_label(label, task)}\n")
