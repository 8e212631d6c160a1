"""Item response theory primitives.

Defines the item/group/grid/response-data types shared by every DIF method,
the 2PL/3PL response function, and the ICC-based effect-size computations
(area difference and Mantel-Haenszel delta).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PL = "2PL"
THREE_PL = "3PL"

#: Grid used throughout: 41 nodes on [-4, 4] in steps of 0.2.
Q41_NODES = 41
Q41_LO = -4.0
Q41_HI = 4.0


@dataclass(frozen=True)
class ItemParams:
    """Parameters of one dichotomous item.

    a : discrimination (> 0)
    b : difficulty, on the ability scale
    c : pseudo-guessing lower asymptote in [0, 1); must be 0 for 2PL items
    model : "2PL" or "3PL"
    D : logistic scaling constant (1.0 unless overridden)
    """

    a: float
    b: float
    c: float = 0.0
    model: str = TWO_PL
    D: float = 1.0

    def __post_init__(self):
        if self.model not in (TWO_PL, THREE_PL):
            raise ValueError(f"unknown model {self.model!r}")
        if not self.a > 0:
            raise ValueError(f"discrimination must be positive, got {self.a}")
        if not 0.0 <= self.c < 1.0:
            raise ValueError(f"pseudo-guessing must be in [0, 1), got {self.c}")
        if self.model == TWO_PL and self.c != 0.0:
            raise ValueError("2PL items must have c = 0")
        if not self.D > 0:
            raise ValueError(f"scaling constant must be positive, got {self.D}")

    def shifted(self, param: str, delta: float) -> "ItemParams":
        """Return a copy with `param` ("a" or "b") shifted by `delta`."""
        if param not in ("a", "b"):
            raise ValueError(f"can only shift 'a' or 'b', got {param!r}")
        return replace(self, **{param: getattr(self, param) + delta})


@dataclass(frozen=True)
class GroupSpec:
    """A named examinee group: sample size and ability distribution."""

    name: str
    n: int
    mu: float
    sigma: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"group size must be >= 1, got {self.n}")
        if not self.sigma > 0:
            raise ValueError(f"ability SD must be positive, got {self.sigma}")


class QuadratureGrid:
    """Ordered latent-ability nodes with normalized nonnegative weights.

    Weights represent the density mass of some population at each node; they
    are renormalized to sum to one at construction.
    """

    def __init__(self, nodes, weights):
        nodes = np.asarray(nodes, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if weights.shape != nodes.shape:
            raise ValueError("weights must align with nodes")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        total = weights.sum()
        if not total > 0:
            raise ValueError("weights must have positive total mass")
        self.nodes = nodes
        self.weights = weights / total

    def __len__(self):
        return self.nodes.size

    def with_weights(self, weights) -> "QuadratureGrid":
        return QuadratureGrid(self.nodes, weights)

    def mean(self) -> float:
        return float(self.weights @ self.nodes)


def make_grid(n_nodes: int, lo: float, hi: float) -> QuadratureGrid:
    """Equally spaced grid with uniform placeholder weights."""
    if n_nodes < 2:
        raise ValueError("grid needs at least two nodes")
    if not lo < hi:
        raise ValueError(f"invalid grid bounds [{lo}, {hi}]")
    nodes = np.linspace(lo, hi, n_nodes)
    return QuadratureGrid(nodes, np.full(n_nodes, 1.0 / n_nodes))


def default_grid() -> QuadratureGrid:
    """The standard 41-node grid on [-4, 4] (uniform placeholder weights)."""
    return make_grid(Q41_NODES, Q41_LO, Q41_HI)


def normal_weights(grid: QuadratureGrid, mu: float, sigma: float) -> QuadratureGrid:
    """Grid reweighted by a discretized N(mu, sigma^2) density."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = (grid.nodes - mu) / sigma
    return grid.with_weights(np.exp(-0.5 * z * z))


def icc(item: ItemParams, theta):
    """Item characteristic curve: P(X=1 | theta) for a 2PL/3PL item.

    Accepts scalar or array theta; returns the same shape.
    """
    theta = np.asarray(theta, dtype=float)
    z = item.D * item.a * (theta - item.b)
    p = item.c + (1.0 - item.c) / (1.0 + np.exp(-z))
    return p if p.ndim else float(p)


def icc_area_difference(item1: ItemParams, item2: ItemParams,
                        grid: QuadratureGrid) -> float:
    """Unweighted trapezoid integral of |ICC1 - ICC2| over the grid span."""
    if item1.D != item2.D:
        raise ValueError("items must share the scaling constant D")
    gap = np.abs(icc(item1, grid.nodes) - icc(item2, grid.nodes))
    return float(np.trapezoid(gap, grid.nodes))


def ets_flag(delta: float) -> str:
    """ETS severity class for an MH delta: A (|d|<1), B, or C (|d|>=1.5)."""
    d = abs(delta)
    if d < 1.0:
        return "A"
    if d >= 1.5:
        return "C"
    return "B"


def mh_delta_effect_size(item1: ItemParams, item2: ItemParams,
                         ref_pop: QuadratureGrid | None = None,
                         focal_pop: QuadratureGrid | None = None):
    """Mantel-Haenszel effect size between two versions of an item.

    Forms an expected 2x2 table at every node of the reference population's
    grid (one stratum per node): a reference population answering under
    `item1` and a focal population answering under `item2`. Returns
    ``(delta, flag)`` where ``delta = -2.35 * ln(alpha_MH)`` with the common
    odds ratio oriented so that a harder ``item2`` (larger b) gives a
    positive delta, and ``flag`` is the A/B/C severity class.

    Populations default to a standard normal discretized on the 41-node
    [-4, 4] grid.
    """
    if ref_pop is None:
        ref_pop = normal_weights(default_grid(), 0.0, 1.0)
    if focal_pop is None:
        focal_pop = normal_weights(default_grid(), 0.0, 1.0)
    if not np.array_equal(ref_pop.nodes, focal_pop.nodes):
        raise ValueError("reference and focal populations must share nodes")

    nodes = ref_pop.nodes
    p1 = icc(item1, nodes)
    p2 = icc(item2, nodes)
    wr = ref_pop.weights
    wf = focal_pop.weights
    total = wr + wf
    # Common odds ratio of a focal-group correct response relative to the
    # reference group; item2 harder => numerator smaller => alpha < 1.
    num = np.sum(wf * p2 * wr * (1.0 - p1) / total)
    den = np.sum(wr * p1 * wf * (1.0 - p2) / total)
    if num <= 0.0 or den <= 0.0:
        raise ValueError("degenerate strata: odds ratio undefined "
                         "(all-correct or all-wrong everywhere)")
    delta = -2.35 * np.log(num / den)
    return float(delta), ets_flag(delta)


@dataclass
class ResponseMatrix:
    """Dichotomous responses for persons partitioned into groups.

    responses : float array (persons x items); 0.0, 1.0, or NaN for missing
    group_of_person : int array (persons,) indexing into group_names
    item_ids : ordered item identifiers
    group_names : ordered group names
    person_ids : optional person identifiers (generated if omitted)
    """

    responses: np.ndarray
    group_of_person: np.ndarray
    item_ids: list
    group_names: list
    person_ids: list = field(default=None)

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=float)
        self.group_of_person = np.asarray(self.group_of_person, dtype=int)
        if self.responses.ndim != 2:
            raise ValueError("responses must be persons x items")
        n, k = self.responses.shape
        if k < 2:
            raise ValueError("need at least 2 items")
        if len(self.item_ids) != k:
            raise ValueError("item_ids must align with response columns")
        if self.group_of_person.shape != (n,):
            raise ValueError("group_of_person must align with response rows")
        if len(set(self.item_ids)) != k:
            raise ValueError("item ids must be unique")
        if len(set(self.group_names)) != len(self.group_names):
            raise ValueError("group names must be unique")
        if self.group_of_person.size and (
                self.group_of_person.min() < 0
                or self.group_of_person.max() >= len(self.group_names)):
            raise ValueError("every person must map to a declared group")
        observed = ~np.isnan(self.responses)
        valid = np.isnan(self.responses) | (self.responses == 0) | (self.responses == 1)
        if not valid.all():
            raise ValueError("responses must be 0, 1, or missing")
        if n and not observed.any(axis=1).all():
            raise ValueError("every person needs at least one observed response")
        if self.person_ids is None:
            self.person_ids = [f"p{i + 1}" for i in range(n)]
        elif len(self.person_ids) != n:
            raise ValueError("person_ids must align with response rows")

    @property
    def n_persons(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.responses)

    def persons_in_group(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group_of_person == g)

    def item_index(self, item_id) -> int:
        return self.item_ids.index(item_id)

    def to_csv(self, path) -> None:
        """Write `person,group,item_1,...,item_K` rows; missing cells empty."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["person", "group"] + list(self.item_ids))
            for i in range(self.n_persons):
                row = [self.person_ids[i], self.group_names[self.group_of_person[i]]]
                for x in self.responses[i]:
                    row.append("" if np.isnan(x) else str(int(x)))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "ResponseMatrix":
        """Read the CSV format written by :meth:`to_csv`.

        Group order follows first appearance in the file.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if len(header) < 4 or header[0] != "person" or header[1] != "group":
                raise ValueError("expected header person,group,item_1,...")
            item_ids = header[2:]
            person_ids, group_names, group_idx, rows = [], [], [], []
            for row in reader:
                if not row:
                    continue
                person_ids.append(row[0])
                gname = row[1]
                if gname not in group_names:
                    group_names.append(gname)
                group_idx.append(group_names.index(gname))
                rows.append([np.nan if cell == "" else float(cell)
                             for cell in row[2:]])
        return cls(np.array(rows, dtype=float), np.array(group_idx, dtype=int),
                   item_ids, group_names, person_ids)
