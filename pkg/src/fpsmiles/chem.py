"""SMILES parsing, canonical writing, and molecule filtering.

The molecular graph is the structural ground truth for everything else in
this package: fingerprints, tokenization targets, and property scorers all
start from the graphs produced here.

Scope of the grammar: linear chains, branches, ring closures (single digit
and %nn), explicit bond symbols ``- = # : / \\``, dot-separated fragments,
aromatic organic-subset atoms (lowercase), and bracket atoms with isotope
(parsed, ignored), charge, H-count, atom map (parsed, ignored), and
tetrahedral ``@``/``@@`` chirality.  Extended stereo descriptors (``@TH1``,
``@OH2``, ...) are rejected.  Directional markers on ring-closure bonds are
parsed as plain single bonds; cis/trans is preserved only when it can be
carried by chain bonds, which covers acyclic double bonds.

Chirality is normalized at parse time so it survives relabeling: the stored
sense is relative to neighbors in ascending atom-index order, with an
implicit bracket hydrogen keyed by the central atom's own index.  Double
bond stereo is stored as a same-side/opposite-side flag between the
lowest-index neighbor on each end.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator, Sequence


class SmilesSyntaxError(ValueError):
    """Raised for structurally invalid SMILES text.

    Decoding a model's output stream produces many of these; callers filter
    rather than abort.
    """


class ValenceWarning(UserWarning):
    """A parsed atom exceeds its usual valence; structure kept as written."""


class Chirality(Enum):
    NONE = "none"
    CCW = "ccw"  # '@'  with neighbors in ascending-index order
    CW = "cw"    # '@@' with neighbors in ascending-index order


class BondOrder(Enum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


# Organic-subset symbols that may be written without brackets.
ORGANIC_ALIPHATIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
ORGANIC_AROMATIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

ALLOWED_ELEMENTS = frozenset({"H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I"})

# Element symbols accepted inside brackets.  Parsing tolerates elements
# outside ALLOWED_ELEMENTS; the drug filter rejects them later.
_ELEMENTS = frozenset(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te
    I Xe Cs Ba La Ce Pr Nd Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt
    Au Hg Tl Pb Bi Po At Rn U""".split()
)

# Lowest usual valences, in increasing order, used for implicit H counting.
_DEFAULT_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
    "H": (1,),
}

# Bond contribution in half-units so aromatic (1.5) stays integral.
_HALF_ORDER = {
    BondOrder.SINGLE: 2,
    BondOrder.DOUBLE: 4,
    BondOrder.TRIPLE: 6,
    BondOrder.AROMATIC: 3,
}


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    aromatic: bool = False
    chirality: Chirality = Chirality.NONE
    explicit_h_count: int = 0
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


@dataclass(frozen=True)
class StereoBond:
    """Cis/trans configuration of a double bond.

    ``ref_a``/``ref_b`` are the lowest-index neighbors of ``a``/``b`` (each
    excluding the double-bond partner); ``same_side`` says whether those two
    references are cis.
    """

    a: int
    b: int
    ref_a: int
    ref_b: int
    same_side: bool


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    stereo_bonds: tuple[StereoBond, ...] = ()

    def __post_init__(self) -> None:
        seen: set[tuple[int, int]] = set()
        n = len(self.atoms)
        for bond in self.bonds:
            if bond.a == bond.b:
                raise ValueError(f"self-loop bond on atom {bond.a}")
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise ValueError(f"bond endpoint out of range: {bond}")
            key = (min(bond.a, bond.b), max(bond.a, bond.b))
            if key in seen:
                raise ValueError(f"duplicate bond between atoms {key}")
            seen.add(key)

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if a.element != "H")

    @property
    def fragment_count(self) -> int:
        return len(connected_components(self))

    def neighbors(self, idx: int) -> list[int]:
        return self._adjacency()[idx]

    def bond_between(self, a: int, b: int) -> Bond | None:
        return self._bond_table().get((min(a, b), max(a, b)))

    def _adjacency(self) -> list[list[int]]:
        adj = getattr(self, "_adj_cache", None)
        if adj is None:
            adj = [[] for _ in self.atoms]
            for bond in self.bonds:
                adj[bond.a].append(bond.b)
                adj[bond.b].append(bond.a)
            object.__setattr__(self, "_adj_cache", adj)
        return adj

    def _bond_table(self) -> dict[tuple[int, int], Bond]:
        table = getattr(self, "_bond_cache", None)
        if table is None:
            table = {(min(b.a, b.b), max(b.a, b.b)): b for b in self.bonds}
            object.__setattr__(self, "_bond_cache", table)
        return table


def implicit_h_count(graph: MolecularGraph, idx: int) -> int:
    """Hydrogens implied by normal valence for a bare (non-bracket) atom."""
    atom = graph.atoms[idx]
    if atom.bracket or atom.element not in _DEFAULT_VALENCES:
        return 0
    half = 0
    for nbr in graph.neighbors(idx):
        bond = graph.bond_between(idx, nbr)
        half += _HALF_ORDER[bond.order]
    used = (half + 1) // 2
    for valence in _DEFAULT_VALENCES[atom.element]:
        if valence >= used:
            return valence - used
    return 0


def total_h_count(graph: MolecularGraph, idx: int) -> int:
    """Attached hydrogens: implicit + bracket H + explicit H neighbors."""
    atom = graph.atoms[idx]
    explicit_nbrs = sum(
        1 for n in graph.neighbors(idx) if graph.atoms[n].element == "H"
    )
    if atom.bracket:
        return atom.explicit_h_count + explicit_nbrs
    return implicit_h_count(graph, idx) + explicit_nbrs


def connected_components(graph: MolecularGraph) -> list[list[int]]:
    """Atom indices per fragment, in ascending order within each."""
    n = len(graph.atoms)
    seen = [False] * n
    comps: list[list[int]] = []
    for start in range(n):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        comp = []
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in graph.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def subgraph(graph: MolecularGraph, atom_indices: Sequence[int]) -> MolecularGraph:
    """Induced subgraph with atoms renumbered in ascending index order.

    The monotone renumbering preserves the ascending-index conventions used
    by the stored stereo descriptors, so they carry over unchanged.
    """
    index = {old: new for new, old in enumerate(sorted(atom_indices))}
    atoms = tuple(graph.atoms[old] for old in sorted(atom_indices))
    bonds = tuple(
        Bond(index[b.a], index[b.b], b.order)
        for b in graph.bonds
        if b.a in index and b.b in index
    )
    stereo = tuple(
        StereoBond(index[s.a], index[s.b], index[s.ref_a], index[s.ref_b], s.same_side)
        for s in graph.stereo_bonds
        if s.a in index and s.b in index and s.ref_a in index and s.ref_b in index
    )
    return MolecularGraph(atoms, bonds, stereo)


def largest_fragment(graph: MolecularGraph) -> MolecularGraph:
    """Connected component with the most heavy atoms.

    Ties break by total atom count, then by lexicographically smaller
    canonical SMILES, so the result is deterministic.
    """
    comps = connected_components(graph)
    if len(comps) == 1:
        return graph
    frags = [subgraph(graph, comp) for comp in comps]

    def key(frag: MolecularGraph) -> tuple:
        return (-frag.heavy_atom_count, -len(frag.atoms), write_canonical_smiles(frag))

    return min(frags, key=key)


def passes_drug_filter(graph: MolecularGraph) -> bool:
    """At most 70 heavy atoms and only elements from the allowed set."""
    if graph.heavy_atom_count > 70:
        return False
    return all(a.element in ALLOWED_ELEMENTS for a in graph.atoms)


def read_corpus(path) -> Iterator[str]:
    """Yield SMILES lines from a corpus file.

    Lines starting with '#' are ignored; surrounding whitespace is stripped;
    blank lines are skipped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield line


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_EXTENDED_STEREO = ("TH", "AL", "SP", "TB", "OH")

_BOND_CHARS = {"-", "=", "#", ":", "/", "\\"}


def _permutation_parity(perm: Sequence[int]) -> int:
    """0 for even, 1 for odd."""
    inversions = 0
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                inversions += 1
    return inversions & 1


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[Atom] = []
        self.bonds: list[tuple[int, int, BondOrder]] = []
        self.bond_set: set[tuple[int, int]] = set()
        # Per-atom neighbor slots in order of appearance; entries are
        # ('a', atom), ('h',) for a bracket hydrogen, or ('r', ring_num)
        # placeholders resolved at ring closure.
        self.slots: list[list[tuple]] = []
        self.raw_chirality: list[str | None] = []
        # Directional single bonds: (from_atom, to_atom, char) in written order.
        self.directional: list[tuple[int, int, str]] = []
        self.prev: int | None = None
        self.pending: str | None = None
        self.branch_stack: list[int] = []
        self.ring_open: dict[int, tuple[int, str | None, int]] = {}

    def fail(self, message: str) -> None:
        raise SmilesSyntaxError(f"{message} at position {self.pos}: {self.text!r}")

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _add_atom(self, atom: Atom, chirality_mark: str | None) -> int:
        idx = len(self.atoms)
        self.atoms.append(atom)
        self.slots.append([])
        self.raw_chirality.append(chirality_mark)
        if self.prev is not None:
            self._add_bond(self.prev, idx, self.pending)
            self.slots[self.prev].append(("a", idx))
            self.slots[idx].append(("a", self.prev))
        elif self.pending is not None:
            self.fail("bond symbol with no preceding atom")
        if atom.bracket and atom.explicit_h_count:
            self.slots[idx].append(("h",))
        self.pending = None
        self.prev = idx
        return idx

    def _resolve_order(self, symbol: str | None, a: int, b: int) -> BondOrder:
        if symbol is None:
            both_aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            return BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        return {
            "-": BondOrder.SINGLE,
            "/": BondOrder.SINGLE,
            "\\": BondOrder.SINGLE,
            "=": BondOrder.DOUBLE,
            "#": BondOrder.TRIPLE,
            ":": BondOrder.AROMATIC,
        }[symbol]

    def _add_bond(self, a: int, b: int, symbol: str | None) -> None:
        if a == b:
            self.fail("ring closure bonds an atom to itself")
        key = (min(a, b), max(a, b))
        if key in self.bond_set:
            self.fail(f"duplicate bond between atoms {a} and {b}")
        self.bond_set.add(key)
        order = self._resolve_order(symbol, a, b)
        self.bonds.append((a, b, order))
        if symbol in ("/", "\\"):
            self.directional.append((a, b, symbol))

    def _parse_ring_digit(self) -> None:
        ch = self.peek()
        if ch == "%":
            digits = self.text[self.pos + 1 : self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                self.fail("'%' ring closure needs two digits")
            num = int(digits)
            self.pos += 3
        else:
            num = int(ch)
            self.pos += 1
        if self.prev is None:
            self.fail("ring closure digit with no preceding atom")
        if num in self.ring_open:
            opener, open_sym, slot_pos = self.ring_open.pop(num)
            close_sym = self.pending
            sym: str | None
            if open_sym is not None and close_sym is not None:
                norm = lambda s: "-" if s in ("/", "\\") else s
                if norm(open_sym) != norm(close_sym):
                    self.fail(f"ring closure {num} has conflicting bond symbols")
                sym = open_sym
            else:
                sym = open_sym if open_sym is not None else close_sym
            self._add_bond(opener, self.prev, sym)
            self.slots[opener][slot_pos] = ("a", self.prev)
            self.slots[self.prev].append(("a", opener))
            self.pending = None
        else:
            self.ring_open[num] = (self.prev, self.pending, len(self.slots[self.prev]))
            self.slots[self.prev].append(("r", num))
            self.pending = None

    def _parse_bracket_atom(self) -> None:
        self.pos += 1  # consume '['
        text = self.text
        # isotope (ignored)
        while self.peek().isdigit():
            self.pos += 1
        element, aromatic = self._parse_bracket_element()
        chirality_mark = None
        if self.peek() == "@":
            self.pos += 1
            if text[self.pos : self.pos + 2] in _EXTENDED_STEREO:
                self.fail("extended stereo descriptors are not supported")
            if self.peek() == "@":
                self.pos += 1
                chirality_mark = "@@"
            else:
                chirality_mark = "@"
        h_count = 0
        if self.peek() == "H":
            self.pos += 1
            digits = ""
            while self.peek().isdigit():
                digits += self.peek()
                self.pos += 1
            h_count = int(digits) if digits else 1
        charge = 0
        if self.peek() in "+-":
            sign = 1 if self.peek() == "+" else -1
            symbol = self.peek()
            self.pos += 1
            digits = ""
            while self.peek().isdigit():
                digits += self.peek()
                self.pos += 1
            if digits:
                charge = sign * int(digits)
            else:
                charge = sign
                while self.peek() == symbol:
                    charge += sign
                    self.pos += 1
        if self.peek() == ":":  # atom map, ignored
            self.pos += 1
            if not self.peek().isdigit():
                self.fail("atom map ':' needs digits")
            while self.peek().isdigit():
                self.pos += 1
        if self.peek() != "]":
            self.fail("expected ']'")
        self.pos += 1
        atom = Atom(
            element=element,
            formal_charge=charge,
            aromatic=aromatic,
            explicit_h_count=h_count,
            bracket=True,
        )
        self._add_atom(atom, chirality_mark)

    def _parse_bracket_element(self) -> tuple[str, bool]:
        two = self.text[self.pos : self.pos + 2]
        one = self.peek()
        if two and two[0].islower():
            for sym in AROMATIC_BRACKET:
                if len(sym) == 2 and two == sym:
                    self.pos += 2
                    return sym.capitalize(), True
            if one in ORGANIC_AROMATIC:
                self.pos += 1
                return one.upper(), True
            self.fail(f"unknown aromatic symbol {one!r}")
        if len(two) == 2 and two[0].isupper() and two[1].islower() and two in _ELEMENTS:
            self.pos += 2
            return two, False
        if one.isupper() and one in _ELEMENTS:
            self.pos += 1
            return one, False
        self.fail(f"unknown atom symbol {one!r}")
        raise AssertionError  # unreachable

    def _parse_organic_atom(self) -> None:
        two = self.text[self.pos : self.pos + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            self._add_atom(Atom(element=two), None)
            return
        ch = self.peek()
        if ch in ("B", "C", "N", "O", "P", "S", "F", "I"):
            self.pos += 1
            self._add_atom(Atom(element=ch), None)
            return
        if ch in ORGANIC_AROMATIC:
            self.pos += 1
            self._add_atom(Atom(element=ch.upper(), aromatic=True), None)
            return
        self.fail(f"unknown atom symbol {ch!r}")

    def parse(self) -> None:
        while self.pos < len(self.text):
            ch = self.peek()
            if ch == "[":
                self._parse_bracket_atom()
            elif ch == "(":
                if self.prev is None:
                    self.fail("branch with no root atom")
                self.branch_stack.append(self.prev)
                self.pos += 1
            elif ch == ")":
                if not self.branch_stack:
                    self.fail("unbalanced ')'")
                if self.pending is not None:
                    self.fail("dangling bond symbol before ')'")
                self.prev = self.branch_stack.pop()
                self.pos += 1
            elif ch in _BOND_CHARS:
                if self.pending is not None:
                    self.fail("two consecutive bond symbols")
                self.pending = ch
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                self._parse_ring_digit()
            elif ch == ".":
                if self.branch_stack:
                    self.fail("'.' inside a branch")
                if self.pending is not None:
                    self.fail("bond symbol before '.'")
                self.prev = None
                self.pos += 1
            elif ch.isspace():
                self.fail("whitespace inside SMILES")
            else:
                self._parse_organic_atom()
        if self.branch_stack:
            self.fail("unbalanced '('")
        if self.ring_open:
            nums = sorted(self.ring_open)
            self.fail(f"unpaired ring closure digit(s) {nums}")
        if self.pending is not None:
            self.fail("dangling bond symbol at end of input")
        if not self.atoms:
            self.fail("no atoms")

    # -- post-parse normalization ------------------------------------------

    def normalized_chirality(self, idx: int) -> Chirality:
        mark = self.raw_chirality[idx]
        if mark is None:
            return Chirality.NONE
        keys = []
        for slot in self.slots[idx]:
            if slot[0] == "a":
                keys.append(slot[1])
            elif slot[0] == "h":
                keys.append(idx)  # virtual hydrogen keyed by the center
            else:
                return Chirality.NONE  # unresolved ring placeholder: malformed
        if len(keys) not in (3, 4) or len(set(keys)) != len(keys):
            return Chirality.NONE
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        parity = _permutation_parity(order)
        sense = Chirality.CCW if mark == "@" else Chirality.CW
        if parity:
            sense = Chirality.CW if sense is Chirality.CCW else Chirality.CCW
        return sense

    def extract_stereo_bonds(self, graph: MolecularGraph) -> tuple[StereoBond, ...]:
        # dir value of a directional bond, seen from x toward y:
        # '/' written x->y is +1, '\' is -1; reversed traversal flips sign.
        by_atom: dict[int, list[tuple[int, int]]] = {}
        for a, b, sym in self.directional:
            val = 1 if sym == "/" else -1
            by_atom.setdefault(a, []).append((b, -val))  # from b toward a
            by_atom.setdefault(b, []).append((a, val))   # from a toward b

        def side_value(center: int, exclude: int) -> tuple[int, int] | None:
            entries = [
                (nbr, val) for nbr, val in by_atom.get(center, []) if nbr != exclude
            ]
            if not entries:
                return None
            if len(entries) == 2 and entries[0][1] == entries[1][1]:
                self.fail(
                    f"conflicting bond directions around atom {center}"
                )
            return entries[0]

        stereo: list[StereoBond] = []
        for bond in graph.bonds:
            if bond.order is not BondOrder.DOUBLE:
                continue
            a, b = bond.a, bond.b
            ea = side_value(a, b)
            eb = side_value(b, a)
            if ea is None or eb is None:
                continue
            (n, dn), (m, dm) = ea, eb
            same = dn == dm
            ref_a = min(x for x in graph.neighbors(a) if x != b)
            ref_b = min(x for x in graph.neighbors(b) if x != a)
            if ref_a != n:
                same = not same
            if ref_b != m:
                same = not same
            if a > b:
                a, b, ref_a, ref_b = b, a, ref_b, ref_a
            stereo.append(StereoBond(a, b, ref_a, ref_b, same))
        return tuple(stereo)


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a SMILES string into a molecular graph.

    Raises SmilesSyntaxError for structural problems (unbalanced branches,
    unpaired rings, unknown symbols).  Valence violations only warn.
    """
    if not text:
        raise SmilesSyntaxError("empty SMILES")
    if not text.isascii():
        raise SmilesSyntaxError("SMILES must be ASCII")
    parser = _Parser(text)
    parser.parse()
    atoms = tuple(
        replace(atom, chirality=parser.normalized_chirality(i))
        if parser.raw_chirality[i]
        else atom
        for i, atom in enumerate(parser.atoms)
    )
    graph = MolecularGraph(
        atoms, tuple(Bond(a, b, order) for a, b, order in parser.bonds)
    )
    stereo = parser.extract_stereo_bonds(graph)
    if stereo:
        graph = MolecularGraph(graph.atoms, graph.bonds, stereo)
    _warn_on_valence(graph, text)
    return graph


def _warn_on_valence(graph: MolecularGraph, text: str) -> None:
    for idx, atom in enumerate(graph.atoms):
        valences = _DEFAULT_VALENCES.get(atom.element)
        if valences is None or atom.formal_charge != 0:
            continue
        half = sum(
            _HALF_ORDER[graph.bond_between(idx, n).order]
            for n in graph.neighbors(idx)
        )
        used = (half + 1) // 2 + (atom.explicit_h_count if atom.bracket else 0)
        if used > valences[-1]:
            warnings.warn(
                f"atom {idx} ({atom.element}) exceeds valence in {text!r}",
                ValenceWarning,
                stacklevel=3,
            )


# ---------------------------------------------------------------------------
# Canonical ranking
# ---------------------------------------------------------------------------

_BOND_RANK_CODE = {
    BondOrder.SINGLE: 1,
    BondOrder.DOUBLE: 2,
    BondOrder.TRIPLE: 3,
    BondOrder.AROMATIC: 4,
}


def _dense_rank(keys: list) -> list[int]:
    order = {key: rank for rank, key in enumerate(sorted(set(keys)))}
    return [order[key] for key in keys]


def refined_ranks(graph: MolecularGraph, seed: Sequence[int] | None = None) -> list[int]:
    """Iterative neighborhood refinement ranks (ties possible).

    Invariant under atom relabeling; the starting invariant covers element,
    charge, degree, attached hydrogens, and aromaticity.
    """
    if seed is None:
        labels = _dense_rank(
            [
                (
                    atom.element,
                    atom.formal_charge,
                    len(graph.neighbors(i)),
                    total_h_count(graph, i),
                    atom.aromatic,
                )
                for i, atom in enumerate(graph.atoms)
            ]
        )
    else:
        labels = _dense_rank(list(seed))
    nclasses = len(set(labels))
    while True:
        signatures = []
        for i in range(len(graph.atoms)):
            nbrs = sorted(
                (_BOND_RANK_CODE[graph.bond_between(i, n).order], labels[n])
                for n in graph.neighbors(i)
            )
            signatures.append((labels[i], tuple(nbrs)))
        labels = _dense_rank(signatures)
        new_classes = len(set(labels))
        if new_classes == nclasses:
            return labels
        nclasses = new_classes


def canonical_ranks(graph: MolecularGraph) -> list[int]:
    """Refined ranks; may contain ties for constitutionally equivalent atoms."""
    return refined_ranks(graph)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _organic_writable(atom: Atom) -> bool:
    if atom.aromatic:
        return atom.element.lower() in ORGANIC_AROMATIC
    return atom.element in ORGANIC_ALIPHATIC


def _written_h(graph: MolecularGraph, idx: int) -> int:
    atom = graph.atoms[idx]
    return atom.explicit_h_count if atom.bracket else implicit_h_count(graph, idx)


def _needs_bracket(graph: MolecularGraph, idx: int, emit_chirality: bool) -> bool:
    atom = graph.atoms[idx]
    if atom.element == "H":
        return True
    if atom.formal_charge != 0 or emit_chirality or not _organic_writable(atom):
        return True
    return _written_h(graph, idx) != implicit_h_count(graph, idx)


class _Writer:
    """Emit one connected fragment given a total atom ordering key."""

    def __init__(self, graph: MolecularGraph, key: Sequence[int], start: int):
        self.g = graph
        self.key = key
        self.start = start
        self.parent: dict[int, int | None] = {}
        self.children: dict[int, list[int]] = {}
        self.visit_pos: dict[int, int] = {}
        self.ring_bonds: list[tuple[int, int]] = []  # (open_atom, close_atom)
        self.ring_digit: dict[tuple[int, int], str] = {}
        self.bond_char: dict[tuple[int, int], str] = {}
        self._plan()
        self._assign_stereo_directions()

    def _plan(self) -> None:
        g, key = self.g, self.key
        seen_bonds: set[tuple[int, int]] = set()
        stack = [(self.start, None)]
        self.parent[self.start] = None
        order = 0
        while stack:
            u, par = stack.pop()
            if u in self.visit_pos:
                continue
            self.visit_pos[u] = order
            order += 1
            self.children[u] = []
            nbrs = sorted(g.neighbors(u), key=lambda v: key[v])
            tree_children = []
            for v in nbrs:
                bkey = (min(u, v), max(u, v))
                if v == par and bkey not in seen_bonds:
                    seen_bonds.add(bkey)
                    continue
                if v in self.visit_pos:
                    if bkey not in seen_bonds:
                        seen_bonds.add(bkey)
                        self.ring_bonds.append((v, u))
                else:
                    tree_children.append(v)
            for v in tree_children:
                if v not in self.parent or v not in self.visit_pos:
                    self.parent[v] = u
            for v in reversed(tree_children):
                stack.append((v, u))
        # Re-derive children now that visit order is final: an atom queued
        # from two branches belongs to the parent whose push won the visit.
        for u in self.visit_pos:
            self.children[u] = []
        for v in sorted(self.visit_pos, key=lambda x: self.visit_pos[x]):
            p = self.parent.get(v)
            if p is not None:
                self.children[p].append(v)
        for u in self.children:
            self.children[u].sort(key=lambda v: self.visit_pos[v])

    def _ring_events(self, u: int) -> list[tuple[int, int, int]]:
        """(partner_visit_pos, open_atom, close_atom) digits written at u."""
        events = []
        for open_atom, close_atom in self.ring_bonds:
            if open_atom == u:
                events.append((self.visit_pos[close_atom], open_atom, close_atom))
            elif close_atom == u:
                events.append((self.visit_pos[open_atom], open_atom, close_atom))
        events.sort()
        return events

    # -- double bond stereo --------------------------------------------------

    def _assign_stereo_directions(self) -> None:
        g = self.g
        # value[bond] in {+1,-1}: dir of the bond read from min-index to
        # max-index endpoint.  Constraints tie pairs of carriers together.
        constraints: list[tuple[tuple[int, int], tuple[int, int], bool]] = []
        for s in g.stereo_bonds:
            ca = self._pick_carrier(s.a, s.b)
            cb = self._pick_carrier(s.b, s.a)
            if ca is None or cb is None:
                continue
            n, m = ca, cb
            same = s.same_side
            if n != s.ref_a:
                same = not same
            if m != s.ref_b:
                same = not same
            ba = (min(s.a, n), max(s.a, n))
            bb = (min(s.b, m), max(s.b, m))
            # dir(n->a) = value[ba] * sgn_a where sgn is +1 when a is the
            # max-index endpoint (reading toward a keeps stored direction).
            sgn_a = 1 if s.a == ba[1] else -1
            sgn_b = 1 if s.b == bb[1] else -1
            # same  <=>  dir(n->a) == dir(m->b)
            equal = same == (sgn_a == sgn_b)
            constraints.append((ba, bb, equal))

        value: dict[tuple[int, int], int] = {}
        adj: dict[tuple[int, int], list[tuple[tuple[int, int], bool]]] = {}
        for ba, bb, equal in constraints:
            adj.setdefault(ba, []).append((bb, equal))
            adj.setdefault(bb, []).append((ba, equal))
        for root in sorted(adj):
            if root in value:
                continue
            value[root] = 1
            queue = [root]
            while queue:
                e = queue.pop()
                for other, equal in adj[e]:
                    want = value[e] if equal else -value[e]
                    if other in value:
                        continue  # consistent inputs never conflict here
                    value[other] = want
                    queue.append(other)
        for (x, y), val in value.items():
            self.bond_char[(x, y)] = "/" if val == 1 else "\\"

    def _pick_carrier(self, center: int, exclude: int) -> int | None:
        g = self.g
        for n in sorted(g.neighbors(center), key=lambda v: self.key[v]):
            if n == exclude:
                continue
            bond = g.bond_between(center, n)
            if bond.order is not BondOrder.SINGLE:
                continue
            pair = (min(center, n), max(center, n))
            if self.parent.get(n) == center or self.parent.get(center) == n:
                return n
        return None

    # -- emission -------------------------------------------------------------

    def _bond_text(self, u: int, v: int) -> str:
        """Bond symbol when writing u then v."""
        g = self.g
        bond = g.bond_between(u, v)
        pair = (min(u, v), max(u, v))
        if pair in self.bond_char:
            ch = self.bond_char[pair]
            if u != pair[0]:  # written against the stored orientation
                ch = "/" if ch == "\\" else "\\"
            return ch
        if bond.order is BondOrder.SINGLE:
            if g.atoms[u].aromatic and g.atoms[v].aromatic:
                return "-"
            return ""
        if bond.order is BondOrder.DOUBLE:
            return "="
        if bond.order is BondOrder.TRIPLE:
            return "#"
        if g.atoms[u].aromatic and g.atoms[v].aromatic:
            return ""
        return ":"

    def _atom_text(self, u: int) -> str:
        g = self.g
        atom = g.atoms[u]
        written_h = _written_h(g, u)
        mark = self._chirality_mark(u, written_h)
        symbol = atom.element.lower() if atom.aromatic else atom.element
        if not _needs_bracket(g, u, mark is not None):
            return symbol
        parts = ["[", symbol]
        if mark:
            parts.append(mark)
        if written_h == 1:
            parts.append("H")
        elif written_h > 1:
            parts.append(f"H{written_h}")
        charge = atom.formal_charge
        if charge == 1:
            parts.append("+")
        elif charge == -1:
            parts.append("-")
        elif charge > 1:
            parts.append(f"+{charge}")
        elif charge < -1:
            parts.append(f"-{-charge}")
        parts.append("]")
        return "".join(parts)

    def _chirality_mark(self, u: int, written_h: int) -> str | None:
        atom = self.g.atoms[u]
        if atom.chirality is Chirality.NONE:
            return None
        keys: list[int] = []
        if self.parent.get(u) is not None:
            keys.append(self.parent[u])
        if written_h == 1:
            keys.append(u)
        for _, open_atom, close_atom in self._ring_events(u):
            keys.append(close_atom if open_atom == u else open_atom)
        keys.extend(self.children[u])
        if len(keys) not in (3, 4) or len(set(keys)) != len(keys) or written_h > 1:
            return None
        order = sorted(range(len(keys)), key=lambda i: keys[i])
        parity = _permutation_parity(order)
        sense = atom.chirality
        if parity:
            sense = Chirality.CW if sense is Chirality.CCW else Chirality.CCW
        return "@" if sense is Chirality.CCW else "@@"

    def emit(self) -> str:
        digits_free = list(range(1, 100))
        open_digit: dict[tuple[int, int], int] = {}
        out: list[str] = []

        def digit_text(d: int) -> str:
            return str(d) if d < 10 else f"%{d:02d}"

        def write_atom(u: int) -> None:
            out.append(self._atom_text(u))
            for _, open_atom, close_atom in self._ring_events(u):
                pair = (open_atom, close_atom)
                if open_atom == u:
                    d = digits_free.pop(0)
                    open_digit[pair] = d
                    out.append(self._bond_text(open_atom, close_atom))
                    out.append(digit_text(d))
                else:
                    d = open_digit.pop(pair)
                    digits_free.insert(0, d)
                    digits_free.sort()
                    out.append(digit_text(d))

        def walk(u: int) -> None:
            write_atom(u)
            kids = self.children[u]
            for i, v in enumerate(kids):
                last = i == len(kids) - 1
                text = self._bond_text(u, v)
                if not last:
                    out.append("(")
                out.append(text)
                walk(v)
                if not last:
                    out.append(")")

        import sys

        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 4 * len(self.g.atoms) + 100))
        try:
            walk(self.start)
        finally:
            sys.setrecursionlimit(old_limit)
        return "".join(out)


def _emit_fragment(graph: MolecularGraph, key: Sequence[int]) -> str:
    start = min(range(len(graph.atoms)), key=lambda i: key[i])
    return _Writer(graph, key, start).emit()


def _canonical_fragment(graph: MolecularGraph) -> str:
    labels = refined_ranks(graph)

    def resolve(labels: list[int]) -> str:
        counts: dict[int, int] = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        tied = sorted(lab for lab, c in counts.items() if c > 1)
        if not tied:
            return _emit_fragment(graph, labels)
        target = tied[0]
        best: str | None = None
        for i, lab in enumerate(labels):
            if lab != target:
                continue
            seed = [2 * l for l in labels]
            seed[i] -= 1
            candidate = resolve(refined_ranks(graph, seed))
            if best is None or candidate < best:
                best = candidate
        assert best is not None
        return best

    return resolve(labels)


def write_canonical_smiles(graph: MolecularGraph) -> str:
    """Canonical SMILES: invariant under relabeling of the input atoms.

    Fragments are canonicalized independently and joined in sorted order.
    """
    comps = connected_components(graph)
    parts = sorted(_canonical_fragment(subgraph(graph, comp)) for comp in comps)
    return ".".join(parts)


def random_smiles(graph: MolecularGraph, rng) -> str:
    """A valid random respelling of the molecule (random start and order)."""
    comps = connected_components(graph)
    parts = []
    for comp in comps:
        frag = subgraph(graph, comp)
        key = list(range(len(frag.atoms)))
        rng.shuffle(key)
        start = rng.randrange(len(frag.atoms))
        parts.append(_Writer(frag, key, start).emit())
    return ".".join(parts)


def canonical_smiles(text: str) -> str:
    """Parse then canonically rewrite; convenience for corpus pipelines."""
    return write_canonical_smiles(parse_smiles(text))
