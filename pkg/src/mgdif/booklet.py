"""Bundled calibration data: a TIMSS 2019 mathematics booklet.

Loads the shipped group roster and 2PL/3PL item parameters, and recomputes
the effect sizes of the +0.4 parameter manipulations against the reference
values tabulated alongside the item parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .irt import (GroupSpec, ItemParams, QuadratureGrid, ets_flag,
                  icc_area_difference, make_grid, mh_delta_effect_size)

DATA_FILE = "timss_booklet13.toml"


@dataclass(frozen=True)
class EffectSizeRow:
    """One item's effect sizes for the a- and b-manipulations."""

    item: str
    area_a: float
    delta_a: float
    flag_a: str
    area_b: float
    delta_b: float
    flag_b: str


@dataclass(frozen=True)
class Booklet:
    """Group statistics and item parameters of the bundled booklet."""

    groups: tuple
    items: tuple
    item_names: tuple
    reference_group: str
    dif_shift: float
    grid: QuadratureGrid
    reference_effect_sizes: tuple

    @property
    def n_items(self) -> int:
        return len(self.items)

    def group(self, name: str) -> GroupSpec:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(f"no group named {name!r}")

    def item(self, name: str) -> ItemParams:
        return self.items[self.item_names.index(name)]


def _read_data() -> dict:
    with (resources.files(__package__) / "data" / DATA_FILE).open("rb") as fh:
        return tomllib.load(fh)


def load_booklet() -> Booklet:
    """Load the shipped booklet data file."""
    raw = _read_data()
    d = raw.get("scaling_d", 1.0)
    groups = tuple(GroupSpec(g["name"], g["n"], g["mu"], g["sigma"])
                   for g in raw["groups"])
    items = tuple(ItemParams(i["a"], i["b"], i["c"], model=i["model"], D=d)
                  for i in raw["items"])
    names = tuple(i["name"] for i in raw["items"])
    refs = tuple(EffectSizeRow(i["name"], **{k: i["reference"][k]
                                             for k in ("area_a", "delta_a", "flag_a",
                                                       "area_b", "delta_b", "flag_b")})
                 for i in raw["items"])
    grid = make_grid(raw["grid"]["n_nodes"], raw["grid"]["lo"], raw["grid"]["hi"])
    return Booklet(groups, items, names, raw["reference_group"],
                   raw["dif_shift"], grid, refs)


def effect_size_table(booklet: Booklet | None = None,
                      shift: float | None = None) -> list:
    """Recompute the booklet's effect-size reference columns.

    For each item and each manipulated parameter ("a" or "b", baseline +
    `shift`), computes the ICC area difference (trapezoid over the grid
    nodes), the node-stratified Mantel-Haenszel delta with *uniform* stratum
    masses over the grid, and the A/B/C severity class.

    Classification follows the conventions under which the reference values
    were tabulated: the numeric delta is classified directly, except for the
    b-manipulation of items without a guessing floor (c = 0), where the
    log-odds shift is constant in theta and the classification uses its
    closed form on the 1.7-scaled logistic metric, 2.35 * 1.7 * a * shift.

    Returns a list of :class:`EffectSizeRow`.
    """
    if booklet is None:
        booklet = load_booklet()
    if shift is None:
        shift = booklet.dif_shift
    grid = booklet.grid  # uniform placeholder weights = uniform strata
    rows = []
    for name, item in zip(booklet.item_names, booklet.items):
        in_a = item.shifted("a", shift)
        in_b = item.shifted("b", shift)
        area_a = icc_area_difference(item, in_a, grid)
        area_b = icc_area_difference(item, in_b, grid)
        delta_a, flag_a = mh_delta_effect_size(item, in_a, grid, grid)
        delta_b, _ = mh_delta_effect_size(item, in_b, grid, grid)
        if item.c == 0.0:
            flag_b = ets_flag(2.35 * 1.7 * item.a * shift)
        else:
            flag_b = ets_flag(delta_b)
        rows.append(EffectSizeRow(name, area_a, delta_a, flag_a,
                                  area_b, delta_b, flag_b))
    return rows
