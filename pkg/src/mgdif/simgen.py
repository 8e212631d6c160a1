"""Replication dataset generator for the two simulation studies.

Study 1 draws DIF-free data from the booklet's item parameters and group
ability distributions; Study 2 additionally shifts a (discrimination) or b
(difficulty) by +0.4 on a per-replication random subset of items, for the
one designated DIF focal group. Group rosters put the reference group
first, the scenario's DIF focal group second, and fill remaining slots with
a seed-deterministic low/high-ability alternation over the remaining
sufficiently large groups.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .booklet import Booklet, load_booklet
from .irt import GroupSpec, ItemParams, ResponseMatrix, icc

SCENARIO_GROUPS = {
    "small_low": "Kuwait",
    "small_high": "Romania",
    "large_low": "Morocco",
    "large_high": "Australia",
}
STUDIES = ("dif_free", "dif_in_a", "dif_in_b")
N_GROUP_CHOICES = (2, 5, 10, 15)
DIF_COUNTS = {"p20": 6, "p30": 9}
MIN_GROUP_SIZE = 300

ROLE_REFERENCE = "reference"
ROLE_DIF_FOCAL = "dif_focal"
ROLE_CLEAN_FOCAL = "clean_focal"


@dataclass(frozen=True)
class ConditionSpec:
    """One cell of the condition grid."""

    n_groups: int
    scenario: str
    study: str
    dif_proportion: str = None
    seed: int = 0

    def __post_init__(self):
        if self.n_groups not in N_GROUP_CHOICES:
            raise ValueError(f"n_groups must be one of {N_GROUP_CHOICES}")
        if self.scenario not in SCENARIO_GROUPS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}")
        if (self.study == "dif_free") != (self.dif_proportion is None):
            raise ValueError("dif_proportion must be set exactly when the "
                             "study injects DIF")
        if self.dif_proportion is not None and \
                self.dif_proportion not in DIF_COUNTS:
            raise ValueError(f"unknown dif_proportion {self.dif_proportion!r}")

    @property
    def fingerprint(self) -> str:
        p = self.dif_proportion or "none"
        return (f"g{self.n_groups}-{self.scenario}-{self.study}-{p}"
                f"-s{self.seed}")

    def n_dif_items(self) -> int:
        return 0 if self.study == "dif_free" else DIF_COUNTS[self.dif_proportion]


@dataclass
class GeneratedDataset:
    data: ResponseMatrix
    truth: frozenset            # item ids carrying injected DIF
    roster: list                # (GroupSpec, role) in group order
    condition: ConditionSpec
    rep: int
    shifted_param: str = None   # "a" or "b" when DIF was injected


def derive_seed(fingerprint: str, rep: int, purpose: str) -> int:
    """Stable 64-bit stream seed for one (condition, rep, purpose)."""
    digest = hashlib.sha256(f"{fingerprint}|{rep}|{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _rng(cond: ConditionSpec, rep: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(cond.fingerprint, rep, purpose))


def build_roster(cond: ConditionSpec, booklet: Booklet = None):
    """Ordered (GroupSpec, role) list for a condition.

    Reference first, scenario DIF focal second; remaining slots alternate
    low-ability (mu < 0) and high-ability groups, each side shuffled
    deterministically from the condition seed, restricted to groups with
    more than 300 examinees.
    """
    booklet = booklet or load_booklet()
    reference = booklet.group(booklet.reference_group)
    focal = booklet.group(SCENARIO_GROUPS[cond.scenario])
    pool = [g for g in booklet.groups
            if g.name not in (reference.name, focal.name)
            and g.n > MIN_GROUP_SIZE]
    needed = cond.n_groups - 2
    if needed > len(pool):
        raise ValueError(f"condition needs {needed} clean focal groups but "
                         f"only {len(pool)} are available")
    rng = _rng(cond, 0, "roster")
    lows = [g for g in pool if g.mu < 0]
    highs = [g for g in pool if g.mu >= 0]
    rng.shuffle(lows)
    rng.shuffle(highs)
    picked = []
    take_low = True
    while len(picked) < needed:
        side = lows if (take_low and lows) or not highs else highs
        picked.append(side.pop(0))
        take_low = not take_low
    roster = [(reference, ROLE_REFERENCE), (focal, ROLE_DIF_FOCAL)]
    roster.extend((g, ROLE_CLEAN_FOCAL) for g in picked)
    return roster


def draw_dif_items(cond: ConditionSpec, rep: int, booklet: Booklet = None):
    """Per-replication random subset of items receiving the DIF shift."""
    booklet = booklet or load_booklet()
    if cond.study == "dif_free":
        return frozenset()
    rng = _rng(cond, rep, "dif")
    idx = rng.choice(booklet.n_items, size=cond.n_dif_items(), replace=False)
    return frozenset(booklet.item_names[i] for i in sorted(idx))


def inject_dif(items, item_names, cond: ConditionSpec, truth,
               dif_shift: float, n_groups: int):
    """Per-group item parameter lists; only group 1 (DIF focal) is shifted."""
    param = {"dif_in_a": "a", "dif_in_b": "b"}.get(cond.study)
    per_group = []
    for g in range(n_groups):
        if param is None or g != 1:
            per_group.append(list(items))
        else:
            per_group.append([
                it.shifted(param, dif_shift) if name in truth else it
                for it, name in zip(items, item_names)])
    return per_group, param


def generate(cond: ConditionSpec, rep: int,
             booklet: Booklet = None) -> GeneratedDataset:
    """One replication dataset: abilities ~ N(mu_g, sigma_g), responses
    Bernoulli(ICC), with the condition's DIF injection applied to group 1."""
    booklet = booklet or load_booklet()
    roster = build_roster(cond, booklet)
    truth = draw_dif_items(cond, rep, booklet)
    per_group, param = inject_dif(booklet.items, booklet.item_names, cond,
                                  truth, booklet.dif_shift, len(roster))
    rng = _rng(cond, rep, "theta")
    blocks = []
    group_of_person = []
    for g, (gs, _) in enumerate(roster):
        theta = rng.normal(gs.mu, gs.sigma, size=gs.n)
        probs = np.stack([icc(it, theta) for it in per_group[g]], axis=1)
        blocks.append((rng.random(probs.shape) < probs).astype(float))
        group_of_person.extend([g] * gs.n)
    data = ResponseMatrix(np.vstack(blocks),
                          np.asarray(group_of_person, dtype=int),
                          list(booklet.item_names),
                          [gs.name for gs, _ in roster])
    return GeneratedDataset(data, truth, roster, cond, rep, param)
