"""Multi-group marginal maximum likelihood estimation.

One EM engine calibrates 2PL/3PL items across groups with equality
constraints (anchor items shared, studied items free per group), estimates
focal-group ability distributions against a reference fixed at N(0, 1), and
recovers the parameter error covariance from the outer product of per-person
marginal score vectors. Also provides the logistic-regression fitter used by
the score-based DIF tests and the Wald quadratic form used everywhere.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.special import expit, logit
from scipy.stats import chi2

from .irt import THREE_PL, TWO_PL, ItemParams, QuadratureGrid, ResponseMatrix

SHARED = "shared"
FREE = "free"

_P_FLOOR = 1e-12
_A_MIN, _A_MAX = 1e-2, 60.0
_B_MAX = 15.0
_U_MIN, _U_MAX = -9.2, 0.85   # c in about (1e-4, 0.7)
_SIGMA_MIN, _SIGMA_MAX = 0.05, 5.0


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class Convergence:
    """EM stopping rules and Newton damping.

    With `accelerate` on, pairs of EM cycles are extrapolated (squared
    iterative scheme) and the jump is kept only when it does not lower the
    penalized log-likelihood, so the monotonicity guarantee survives.
    """

    max_cycles: int = 500
    tol: float = 1e-6
    max_halvings: int = 10
    newton_steps: int = 3
    accelerate: bool = True


@dataclass
class CPrior:
    """Logit-normal soft prior stabilizing pseudo-guessing estimates."""

    mean_logit: float = float(logit(0.2))
    sd: float = 1.0


@dataclass
class CalibrationSpec:
    """What to estimate: constraints, distributions, grid, priors, stopping.

    constraints : per item, SHARED (one parameter set for all groups) or
        FREE (separate a, b per group; c always shared)
    item_models : per item, "2PL" or "3PL"
    grid : quadrature nodes (weights ignored; group densities are used)
    reference_group : index of the group fixed at N(0, 1)
    estimate_dists : when True, focal-group (mu, sigma) are estimated; when
        False, `fixed_dists` supplies (mu, sigma) for every group
    """

    constraints: list
    item_models: list
    grid: QuadratureGrid
    reference_group: int = 0
    estimate_dists: bool = True
    fixed_dists: list = None
    c_prior: CPrior = field(default_factory=CPrior)
    convergence: Convergence = field(default_factory=Convergence)
    D: float = 1.0
    start: dict = None   # optional warm start: {"a": (K,G), "b": (K,G),
    #                      "c": (K,), "dists": [(mu, sigma), ...]}

    def validate(self, data: ResponseMatrix) -> None:
        if len(self.constraints) != data.n_items:
            raise ValueError("constraints must align with items")
        if len(self.item_models) != data.n_items:
            raise ValueError("item_models must align with items")
        for con in self.constraints:
            if con not in (SHARED, FREE):
                raise ValueError(f"unknown constraint {con!r}")
        for m in self.item_models:
            if m not in (TWO_PL, THREE_PL):
                raise ValueError(f"unknown model {m!r}")
        if self.estimate_dists:
            if not 0 <= self.reference_group < data.n_groups:
                raise ValueError("reference group out of range")
            if SHARED not in self.constraints and data.n_groups > 1:
                raise ValueError("anchored item set may be empty only when "
                                 "all group distributions are fixed")
        else:
            if self.fixed_dists is None or len(self.fixed_dists) != data.n_groups:
                raise ValueError("fixed_dists must supply (mu, sigma) per group")


class ParamIndex:
    """Column layout of the free-parameter vector.

    Entries are ("a"|"b", item, group_or_None), ("c", item, None), or
    ("mu"|"sigma", group, None); shared item parameters use group None.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        self._col = {e: i for i, e in enumerate(self.entries)}

    def __len__(self):
        return len(self.entries)

    def col(self, kind, index, group=None) -> int:
        return self._col[(kind, index, group)]

    def has(self, kind, index, group=None) -> bool:
        return (kind, index, group) in self._col


@dataclass
class CalibrationResult:
    """Estimates, covariance, and per-person posteriors from one calibration."""

    item_ids: list
    group_names: list
    constraints: list
    item_models: list
    params: np.ndarray            # (items, groups, 3): a, b, c
    group_dists: list             # (mu, sigma) per group
    covariance: np.ndarray        # over free parameters
    param_index: ParamIndex
    loglik: float                 # marginal data log-likelihood
    penalized_loglik: float       # + c-prior terms (what EM monotonically improves)
    loglik_trace: list
    converged: bool
    n_cycles: int
    posterior_masses: np.ndarray  # (persons, nodes)
    grid: QuadratureGrid
    D: float
    excluded_items: list = field(default_factory=list)
    covariance_pseudo_inverse: bool = False

    def item_params(self, item, group: int) -> ItemParams:
        k = self.item_ids.index(item) if not isinstance(item, int) else item
        a, b, c = self.params[k, group]
        return ItemParams(a, b, c, model=self.item_models[k], D=self.D)

    def free_estimates(self) -> np.ndarray:
        """Free-parameter vector aligned with `param_index` / `covariance`."""
        out = np.empty(len(self.param_index))
        for i, (kind, idx, grp) in enumerate(self.param_index.entries):
            if kind in ("a", "b", "c"):
                g = 0 if grp is None else grp
                out[i] = self.params[idx, g, "abc".index(kind)]
            elif kind == "mu":
                out[i] = self.group_dists[idx][0]
            else:
                out[i] = self.group_dists[idx][1]
        return out

    def to_json(self) -> str:
        payload = {
            "item_ids": list(self.item_ids),
            "group_names": list(self.group_names),
            "constraints": list(self.constraints),
            "item_models": list(self.item_models),
            "params": self.params.tolist(),
            "group_dists": [list(d) for d in self.group_dists],
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "loglik_trace": list(self.loglik_trace),
            "converged": self.converged,
            "n_cycles": self.n_cycles,
            "excluded_items": list(self.excluded_items),
        }
        return json.dumps(payload, indent=2)


def canonical_person_order(responses, group_of_person):
    """Permutation that sorts persons by (group, response pattern).

    Summations over persons run in this order so that permuting input rows
    cannot change floating-point results: equal response patterns contribute
    identical terms in identical positions.
    """
    enc = np.nan_to_num(np.asarray(responses, dtype=float), nan=-1.0)
    keys = [(int(g), row.tobytes())
            for g, row in zip(np.asarray(group_of_person), enc)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=int)


def _sigmoid(z):
    return expit(z)


def _node_log_weights(nodes, mu, sigma):
    z = (nodes - mu) / sigma
    psi = -0.5 * z * z
    return psi - _logsumexp(psi)


def _logsumexp(v, axis=None):
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if axis is None else np.squeeze(out, axis=axis)


def _item_probs(a, b, c, nodes, D):
    """Node probabilities for stacked parameter arrays (units x nodes)."""
    z = D * a[..., None] * (nodes - b[..., None])
    p = c[..., None] + (1.0 - c[..., None]) * _sigmoid(z)
    return np.clip(p, _P_FLOOR, 1.0 - _P_FLOOR)


def _bernoulli_objective(r, n, p):
    return np.sum(r * np.log(p) + (n - r) * np.log1p(-p), axis=-1)


def _newton_ab(a, b, c, r, n, nodes, D, conv: Convergence):
    """Batched damped Fisher-scoring updates of (a, b) given fixed c.

    a, b, c: (units,); r, n: (units, nodes) expected correct/total counts.
    Maximizes the expected complete-data log-likelihood per unit; candidates
    that fail to improve are step-halved and, past the halving budget,
    discarded.
    """
    a = a.copy()
    b = b.copy()
    for _ in range(conv.newton_steps):
        p = _item_probs(a, b, c, nodes, D)
        s = (p - c[:, None]) / (1.0 - c[:, None])
        pq = p * (1.0 - p)
        e = (r - n * p) / pq
        base = (1.0 - c[:, None]) * s * (1.0 - s)
        dpda = base * D * (nodes - b[:, None])
        dpdb = base * (-D * a[:, None])
        ga = np.sum(e * dpda, axis=1)
        gb = np.sum(e * dpdb, axis=1)
        w = n / pq
        faa = np.sum(w * dpda * dpda, axis=1)
        fbb = np.sum(w * dpdb * dpdb, axis=1)
        fab = np.sum(w * dpda * dpdb, axis=1)
        ridge = 1e-10 + 1e-8 * np.maximum(faa, fbb)
        faa = faa + ridge
        fbb = fbb + ridge
        det = faa * fbb - fab * fab
        ok = det > 1e-30
        da = np.where(ok, (fbb * ga - fab * gb) / np.where(ok, det, 1.0), 0.0)
        db = np.where(ok, (faa * gb - fab * ga) / np.where(ok, det, 1.0), 0.0)
        if np.max(np.abs(da)) < 1e-10 and np.max(np.abs(db)) < 1e-10:
            break
        f_old = _bernoulli_objective(r, n, p)
        step = np.ones_like(a)
        accepted = np.zeros(a.shape, dtype=bool)
        new_a, new_b = a.copy(), b.copy()
        for _ in range(conv.max_halvings + 1):
            active = ~accepted
            if not active.any():
                break
            cand_a = a[active] + step[active] * da[active]
            cand_b = b[active] + step[active] * db[active]
            inb = ((cand_a > _A_MIN) & (cand_a < _A_MAX)
                   & (np.abs(cand_b) < _B_MAX))
            f_new = np.full(cand_a.shape, -np.inf)
            if inb.any():
                pc = _item_probs(cand_a[inb], cand_b[inb], c[active][inb],
                                 nodes, D)
                f_new[inb] = _bernoulli_objective(r[active][inb],
                                                  n[active][inb], pc)
            better = f_new >= f_old[active]
            rows = np.flatnonzero(active)
            good = rows[better]
            new_a[good] = cand_a[better]
            new_b[good] = cand_b[better]
            accepted[good] = True
            step[rows[~better]] *= 0.5
        a, b = new_a, new_b
    return a, b


def _newton_c(u, a, b, r, n, nodes, D, prior: CPrior, conv: Convergence):
    """Batched updates of shared logit-c per 3PL item.

    u: (items3,) logit of c; a, b: (items3, groups); r, n: (items3, groups,
    nodes). The logit-normal prior enters the objective and its derivatives.
    """
    u = u.copy()
    tau2 = prior.sd ** 2

    def objective(uv):
        cv = _sigmoid(uv)
        p = _item_probs(a, b, cv[:, None], nodes, D)
        f = np.sum(r * np.log(p) + (n - r) * np.log1p(-p), axis=(1, 2))
        return f - (uv - prior.mean_logit) ** 2 / (2.0 * tau2)

    for _ in range(conv.newton_steps):
        cvec = _sigmoid(u)
        cb = cvec[:, None, None]
        p = _item_probs(a, b, cvec[:, None], nodes, D)
        s = (p - cb) / (1.0 - cb)
        pq = p * (1.0 - p)
        dpdu = (1.0 - s) * (cvec * (1.0 - cvec))[:, None, None]
        g = np.sum((r - n * p) / pq * dpdu, axis=(1, 2))
        g -= (u - prior.mean_logit) / tau2
        F = np.sum(n / pq * dpdu * dpdu, axis=(1, 2)) + 1.0 / tau2
        du = g / np.maximum(F, 1e-12)
        if np.max(np.abs(du)) < 1e-10:
            break
        f_old = objective(u)
        step = np.ones_like(u)
        accepted = np.zeros(u.shape, dtype=bool)
        new_u = u.copy()
        for _ in range(conv.max_halvings + 1):
            active = ~accepted
            if not active.any():
                break
            cand = np.clip(u[active] + step[active] * du[active],
                           _U_MIN, _U_MAX)
            # evaluate candidates in place within the full arrays
            trial = u.copy()
            trial[active] = cand
            f_new = objective(trial)[active]
            better = f_new >= f_old[active]
            rows = np.flatnonzero(active)
            new_u[rows[better]] = cand[better]
            accepted[rows[better]] = True
            step[rows[~better]] *= 0.5
        u = new_u
    return u


def _dist_psi(nodes, mu, sigma):
    z = (nodes - mu[:, None]) / sigma[:, None]
    return -0.5 * z * z, z


def _dist_objective(m, nodes, mu, sigma):
    psi, _ = _dist_psi(nodes, mu, sigma)
    return np.sum(m * psi, axis=1) - m.sum(axis=1) * _logsumexp(psi, axis=1)


def _newton_dists(m, nodes, mu, sigma, conv: Convergence):
    """Batched (mu, log sigma) updates for free group distributions.

    m: (groups_free, nodes) aggregated posterior masses. Maximizes the exact
    discretized-normal log-likelihood (so EM monotonicity survives the grid
    truncation), starting from the better of the current parameters and the
    posterior-moment update.
    """
    msum = m.sum(axis=1)
    mu_m = (m @ nodes) / msum
    var_m = (m @ (nodes * nodes)) / msum - mu_m ** 2
    sig_m = np.clip(np.sqrt(np.maximum(var_m, 1e-10)),
                    _SIGMA_MIN, _SIGMA_MAX)
    f_cur = _dist_objective(m, nodes, mu, sigma)
    f_mom = _dist_objective(m, nodes, mu_m, sig_m)
    take = f_mom > f_cur
    mu = np.where(take, mu_m, mu)
    sigma = np.where(take, sig_m, sigma)

    for _ in range(conv.newton_steps):
        psi, z = _dist_psi(nodes, mu, sigma)
        w = np.exp(psi - _logsumexp(psi, axis=1)[:, None])
        sig = sigma[:, None]
        dmu = z / sig
        dt = z * z
        msum = m.sum(axis=1)
        g1 = np.sum(m * dmu, axis=1) - msum * np.sum(w * dmu, axis=1)
        g2 = np.sum(m * dt, axis=1) - msum * np.sum(w * dt, axis=1)
        # curvature of psi
        hmm = -1.0 / sig ** 2
        hmt = -2.0 * z / sig
        htt = -2.0 * z * z
        e_dmu = np.sum(w * dmu, axis=1)
        e_dt = np.sum(w * dt, axis=1)
        cov_mm = np.sum(w * dmu * dmu, axis=1) - e_dmu ** 2
        cov_mt = np.sum(w * dmu * dt, axis=1) - e_dmu * e_dt
        cov_tt = np.sum(w * dt * dt, axis=1) - e_dt ** 2
        Hmm = np.sum(m * hmm, axis=1) - msum * (np.sum(w * hmm, axis=1) + cov_mm)
        Hmt = np.sum(m * hmt, axis=1) - msum * (np.sum(w * hmt, axis=1) + cov_mt)
        Htt = np.sum(m * htt, axis=1) - msum * (np.sum(w * htt, axis=1) + cov_tt)
        det = Hmm * Htt - Hmt * Hmt
        ok = np.abs(det) > 1e-30
        dmu_step = np.where(ok, -(Htt * g1 - Hmt * g2) / np.where(ok, det, 1.0), 0.0)
        dt_step = np.where(ok, -(Hmm * g2 - Hmt * g1) / np.where(ok, det, 1.0), 0.0)
        if np.max(np.abs(dmu_step)) < 1e-11 and np.max(np.abs(dt_step)) < 1e-11:
            break
        f_old = _dist_objective(m, nodes, mu, sigma)
        step = np.ones_like(mu)
        accepted = np.zeros(mu.shape, dtype=bool)
        new_mu, new_sig = mu.copy(), sigma.copy()
        for _ in range(conv.max_halvings + 1):
            active = ~accepted
            if not active.any():
                break
            cand_mu = mu[active] + step[active] * dmu_step[active]
            cand_sig = np.clip(sigma[active] * np.exp(step[active] * dt_step[active]),
                               _SIGMA_MIN, _SIGMA_MAX)
            f_new = _dist_objective(m[active], nodes, cand_mu, cand_sig)
            better = f_new >= f_old[active]
            rows = np.flatnonzero(active)
            new_mu[rows[better]] = cand_mu[better]
            new_sig[rows[better]] = cand_sig[better]
            accepted[rows[better]] = True
            step[rows[~better]] *= 0.5
        mu, sigma = new_mu, new_sig
    return mu, sigma


def _start_values(data, spec):
    K, G = data.n_items, data.n_groups
    obs = data.observed_mask()
    x = np.nan_to_num(data.responses)
    with np.errstate(invalid="ignore"):
        pbar = x.sum(axis=0) / np.maximum(obs.sum(axis=0), 1)
    pbar = np.clip(pbar, 0.02, 0.98)
    A = np.ones((K, G))
    B = np.tile(-logit(pbar)[:, None], (1, G))
    C = np.where(np.array(spec.item_models) == THREE_PL, 0.15, 0.0)
    return A, B, C


def _degenerate_items(data):
    """Items whose observed responses are constant within every group."""
    out = []
    obs = data.observed_mask()
    for k in range(data.n_items):
        degenerate = True
        for g in range(data.n_groups):
            idx = data.persons_in_group(g)
            vals = data.responses[idx, k][obs[idx, k]]
            if vals.size and vals.min() != vals.max():
                degenerate = False
                break
        if degenerate:
            out.append(data.item_ids[k])
    return out


def _build_param_index(item_ids, constraints, models, n_groups,
                       estimate_dists, reference_group):
    entries = []
    for k, _ in enumerate(item_ids):
        if constraints[k] == SHARED:
            entries.append(("a", k, None))
            entries.append(("b", k, None))
        else:
            for g in range(n_groups):
                entries.append(("a", k, g))
                entries.append(("b", k, g))
        if models[k] == THREE_PL:
            entries.append(("c", k, None))
    if estimate_dists:
        for g in range(n_groups):
            if g != reference_group:
                entries.append(("mu", g, None))
                entries.append(("sigma", g, None))
    return ParamIndex(entries)


def calibrate(data: ResponseMatrix, spec: CalibrationSpec) -> CalibrationResult:
    """Fit the multi-group IRT model by EM.

    E-step: per-person posterior over the grid nodes under current item
    parameters and group densities. M-step: batched damped Newton updates of
    (a, b) per constraint unit, shared logit-c per 3PL item, then free group
    (mu, sigma) on the discretized-normal likelihood. Stops when the
    penalized marginal log-likelihood changes by less than the tolerance.
    """
    spec.validate(data)
    excluded = _degenerate_items(data)
    if excluded:
        warnings.warn(f"excluding degenerate items: {excluded}")
        keep = [k for k, iid in enumerate(data.item_ids) if iid not in excluded]
        if len(keep) < 2:
            raise NonConvergenceError("fewer than 2 non-degenerate items")
        sub = ResponseMatrix(data.responses[:, keep], data.group_of_person,
                             [data.item_ids[k] for k in keep],
                             data.group_names, data.person_ids)
        substart = spec.start
        if substart is not None:
            substart = dict(substart)
            for key in ("a", "b", "c"):
                substart[key] = np.asarray(substart[key])[keep]
        subspec = CalibrationSpec(
            [spec.constraints[k] for k in keep],
            [spec.item_models[k] for k in keep],
            spec.grid, spec.reference_group, spec.estimate_dists,
            spec.fixed_dists, spec.c_prior, spec.convergence, spec.D,
            substart)
        res = calibrate(sub, subspec)
        res.excluded_items = excluded
        return res

    # run every person-indexed reduction in a canonical order so results do
    # not depend on input row order (bit-identical under person permutation)
    order = canonical_person_order(data.responses, data.group_of_person)
    if not np.array_equal(order, np.arange(data.n_persons)):
        data = ResponseMatrix(data.responses[order],
                              data.group_of_person[order],
                              data.item_ids, data.group_names,
                              [data.person_ids[i] for i in order])
    inverse = np.empty(order.size, dtype=int)
    inverse[order] = np.arange(order.size)

    nodes = spec.grid.nodes
    Q = nodes.size
    N, K, G = data.n_persons, data.n_items, data.n_groups
    models = list(spec.item_models)
    cons = list(spec.constraints)
    conv = spec.convergence
    D = spec.D

    A, B, C = _start_values(data, spec)
    if spec.estimate_dists:
        mus = np.zeros(G)
        sigmas = np.ones(G)
    else:
        mus = np.array([d[0] for d in spec.fixed_dists], dtype=float)
        sigmas = np.array([d[1] for d in spec.fixed_dists], dtype=float)
    if spec.start is not None:
        A = np.array(spec.start["a"], dtype=float).reshape(K, G).copy()
        B = np.array(spec.start["b"], dtype=float).reshape(K, G).copy()
        C = np.array(spec.start["c"], dtype=float).reshape(K).copy()
        C[np.array(models) == TWO_PL] = 0.0
        C = np.clip(C, 0.0, _sigmoid(_U_MAX))
        A = np.clip(A, _A_MIN * 1.01, _A_MAX * 0.99)
        B = np.clip(B, -_B_MAX * 0.99, _B_MAX * 0.99)
        if spec.estimate_dists and spec.start.get("dists") is not None:
            for g, (m0, s0) in enumerate(spec.start["dists"]):
                if g != spec.reference_group:
                    mus[g] = m0
                    sigmas[g] = float(np.clip(s0, _SIGMA_MIN, _SIGMA_MAX))

    obs = data.observed_mask().astype(float)
    Xf = np.nan_to_num(data.responses)
    X0 = obs - Xf  # indicator of observed incorrect
    group_rows = [data.persons_in_group(g) for g in range(G)]

    free_items = [k for k in range(K) if cons[k] == FREE]
    shared_items = [k for k in range(K) if cons[k] == SHARED]
    items3 = [k for k in range(K) if models[k] == THREE_PL]
    free_groups = ([g for g in range(G) if g != spec.reference_group]
                   if spec.estimate_dists else [])

    idx3 = np.array(items3, dtype=int)
    gf = np.array(free_groups, dtype=int)
    ks = np.array(shared_items, dtype=int)
    kf = np.array(free_items, dtype=int)
    tau2 = spec.c_prior.sd ** 2 if spec.c_prior else None

    def prior_term(Cv):
        if not items3 or spec.c_prior is None:
            return 0.0
        uv = logit(np.clip(Cv[idx3], 1e-12, 1 - 1e-12))
        return float(-np.sum((uv - spec.c_prior.mean_logit) ** 2) / (2 * tau2))

    def e_step(st):
        Av, Bv, Cv, muv, sigv = st
        T = np.empty((N, Q))
        r1 = np.empty((G, Q, K))
        n1 = np.empty((G, Q, K))
        gm = np.empty((G, Q))
        loglik = 0.0
        for g in range(G):
            rows = group_rows[g]
            P = _item_probs(Av[:, g], Bv[:, g], Cv, nodes, D)
            joint = Xf[rows] @ np.log(P) + X0[rows] @ np.log1p(-P)
            joint += _node_log_weights(nodes, muv[g], sigv[g])
            lse = _logsumexp(joint, axis=1)
            loglik += float(lse.sum())
            Tg = np.exp(joint - lse[:, None])
            T[rows] = Tg
            r1[g] = Tg.T @ Xf[rows]
            n1[g] = Tg.T @ obs[rows]
            gm[g] = Tg.sum(axis=0)
        return T, r1, n1, gm, loglik + prior_term(Cv)

    def pen_eval(st):
        """Penalized log-likelihood only (no posterior statistics)."""
        Av, Bv, Cv, muv, sigv = st
        loglik = 0.0
        for g in range(G):
            rows = group_rows[g]
            P = _item_probs(Av[:, g], Bv[:, g], Cv, nodes, D)
            joint = Xf[rows] @ np.log(P) + X0[rows] @ np.log1p(-P)
            joint += _node_log_weights(nodes, muv[g], sigv[g])
            loglik += float(_logsumexp(joint, axis=1).sum())
        return loglik + prior_term(Cv)

    def m_step(st, r1, n1, gm):
        Av, Bv, Cv = st[0].copy(), st[1].copy(), st[2].copy()
        muv, sigv = st[3].copy(), st[4].copy()
        # (a, b) units: shared items pooled over groups, free items per group
        unit_r, unit_n, unit_a, unit_b, unit_c = [], [], [], [], []
        if shared_items:
            unit_r.append(r1[:, :, ks].sum(axis=0).T)   # (units, nodes)
            unit_n.append(n1[:, :, ks].sum(axis=0).T)
            unit_a.append(Av[ks, 0])
            unit_b.append(Bv[ks, 0])
            unit_c.append(Cv[ks])
        if free_items:
            for g in range(G):
                unit_r.append(r1[g][:, kf].T)
                unit_n.append(n1[g][:, kf].T)
                unit_a.append(Av[kf, g])
                unit_b.append(Bv[kf, g])
                unit_c.append(Cv[kf])
        a_new, b_new = _newton_ab(
            np.concatenate(unit_a), np.concatenate(unit_b),
            np.concatenate(unit_c), np.concatenate(unit_r, axis=0),
            np.concatenate(unit_n, axis=0), nodes, D, conv)
        pos = 0
        if shared_items:
            Av[ks, :] = a_new[pos:pos + ks.size, None]
            Bv[ks, :] = b_new[pos:pos + ks.size, None]
            pos += ks.size
        if free_items:
            for g in range(G):
                Av[kf, g] = a_new[pos:pos + kf.size]
                Bv[kf, g] = b_new[pos:pos + kf.size]
                pos += kf.size

        # shared c per 3PL item (pooled across groups, per-group a, b)
        if items3:
            u = logit(np.clip(Cv[idx3], 1e-4, _sigmoid(_U_MAX)))
            u = _newton_c(u, Av[idx3], Bv[idx3],
                          r1[:, :, idx3].transpose(2, 0, 1),
                          n1[:, :, idx3].transpose(2, 0, 1),
                          nodes, D, spec.c_prior, conv)
            Cv[idx3] = _sigmoid(u)

        # free group distributions
        if free_groups:
            mu_f, sig_f = _newton_dists(gm[gf], nodes, muv[gf], sigv[gf], conv)
            muv[gf] = mu_f
            sigv[gf] = sig_f
        return (Av, Bv, Cv, muv, sigv)

    def em_cycle(st):
        _, r1, n1, gm, pen = e_step(st)
        return m_step(st, r1, n1, gm), pen

    def pack(st):
        Av, Bv, Cv, muv, sigv = st
        parts = []
        if shared_items:
            parts += [np.log(Av[ks, 0]), Bv[ks, 0]]
        if free_items:
            parts += [np.log(Av[kf, :].ravel()), Bv[kf, :].ravel()]
        if items3:
            parts.append(logit(np.clip(Cv[idx3], 1e-6, 1 - 1e-6)))
        if free_groups:
            parts += [muv[gf], np.log(sigv[gf])]
        return np.concatenate(parts) if parts else np.empty(0)

    def unpack(vec, ref):
        Av, Bv, Cv = ref[0].copy(), ref[1].copy(), ref[2].copy()
        muv, sigv = ref[3].copy(), ref[4].copy()
        pos = 0
        if shared_items:
            Av[ks, :] = np.exp(vec[pos:pos + ks.size, None])
            pos += ks.size
            Bv[ks, :] = vec[pos:pos + ks.size, None]
            pos += ks.size
        if free_items:
            m = kf.size * G
            Av[np.ix_(kf, np.arange(G))] = np.exp(vec[pos:pos + m]).reshape(kf.size, G)
            pos += m
            Bv[np.ix_(kf, np.arange(G))] = vec[pos:pos + m].reshape(kf.size, G)
            pos += m
        if items3:
            Cv[idx3] = _sigmoid(np.clip(vec[pos:pos + idx3.size], _U_MIN, _U_MAX))
            pos += idx3.size
        if free_groups:
            muv[gf] = vec[pos:pos + gf.size]
            pos += gf.size
            sigv[gf] = np.clip(np.exp(vec[pos:pos + gf.size]),
                               _SIGMA_MIN, _SIGMA_MAX)
        np.clip(Av, _A_MIN, _A_MAX, out=Av)
        np.clip(Bv, -_B_MAX, _B_MAX, out=Bv)
        return (Av, Bv, Cv, muv, sigv)

    state = (A, B, C, mus, sigmas)
    trace = []
    converged = False
    cycles = 0
    prev = None
    while cycles < conv.max_cycles:
        next_state, pen0 = em_cycle(state)
        cycles += 1
        trace.append(pen0)
        if prev is not None and abs(pen0 - prev) < conv.tol:
            converged = True
            break
        prev = pen0
        if not (conv.accelerate and cycles + 2 <= conv.max_cycles):
            state = next_state
            continue
        state1 = next_state
        state2, pen1 = em_cycle(state1)
        cycles += 1
        trace.append(pen1)
        if abs(pen1 - pen0) < conv.tol:
            converged = True
            state = state1
            break
        prev = pen1
        # squared-extrapolation jump with a monotone safeguard
        x0, x1, x2 = pack(state), pack(state1), pack(state2)
        rvec = x1 - x0
        vvec = (x2 - x1) - rvec
        vv = float(vvec @ vvec)
        state = state2
        if vv > 1e-30:
            alpha = min(-1.0, -math.sqrt(float(rvec @ rvec) / vv))
            cand = unpack(x0 - 2.0 * alpha * rvec + alpha * alpha * vvec, state2)
            pen_cand = pen_eval(cand)
            cycles += 1
            if math.isfinite(pen_cand) and pen_cand >= pen1:
                state = cand

    # refresh posteriors and likelihood at the final parameter values
    A, B, C, mus, sigmas = state
    T, r1, n1, gm, pen = e_step(state)
    loglik = pen - prior_term(C)
    trace.append(pen)
    cycle = cycles

    index = _build_param_index(data.item_ids, cons, models, G,
                               spec.estimate_dists, spec.reference_group)
    S = _score_matrix(data, spec, index, A, B, C, mus, sigmas, T,
                      group_rows, obs, Xf)
    info = S.T @ S
    pseudo = False
    try:
        cf = linalg.cho_factor(info)
        cov = linalg.cho_solve(cf, np.eye(len(index)))
    except linalg.LinAlgError:
        cov = np.linalg.pinv(info, rcond=1e-10, hermitian=True)
        pseudo = True
    cov = 0.5 * (cov + cov.T)

    params = np.stack([A, B, np.tile(C[:, None], (1, G))], axis=2)
    return CalibrationResult(
        item_ids=list(data.item_ids), group_names=list(data.group_names),
        constraints=cons, item_models=models, params=params,
        group_dists=[(float(mus[g]), float(sigmas[g])) for g in range(G)],
        covariance=cov, param_index=index, loglik=float(loglik),
        penalized_loglik=float(pen), loglik_trace=trace,
        converged=converged, n_cycles=cycle, posterior_masses=T[inverse],
        grid=spec.grid, D=D, covariance_pseudo_inverse=pseudo)


def _score_matrix(data, spec, index, A, B, C, mus, sigmas, T,
                  group_rows, obs, Xf):
    """Per-person marginal score vectors over all free parameters.

    Fisher's identity: the marginal score is the posterior expectation of
    the complete-data score, so every entry is a posterior-weighted sum over
    nodes.
    """
    nodes = spec.grid.nodes
    N, K, G = data.n_persons, data.n_items, data.n_groups
    D = spec.D
    S = np.zeros((N, len(index)))
    for g in range(G):
        rows = group_rows[g]
        if rows.size == 0:
            continue
        Tg = T[rows]
        P = _item_probs(A[:, g], B[:, g], C, nodes, D)
        s_log = (P - C[:, None]) / (1.0 - C[:, None])
        base = (1.0 - C[:, None]) * s_log * (1.0 - s_log)
        dpda = base * D * (nodes - B[:, g][:, None])
        dpdb = base * (-D * A[:, g][:, None])
        pq = P * (1.0 - P)
        for k in range(K):
            grp = None if spec.constraints[k] == SHARED else g
            W = Tg * ((Xf[rows, k][:, None] - P[k]) / pq[k]) * obs[rows, k][:, None]
            S[rows, index.col("a", k, grp)] += W @ dpda[k]
            S[rows, index.col("b", k, grp)] += W @ dpdb[k]
            if spec.item_models[k] == THREE_PL:
                dpdc = 1.0 - s_log[k]
                S[rows, index.col("c", k, None)] += W @ dpdc
        if spec.estimate_dists and g != spec.reference_group:
            z = (nodes - mus[g]) / sigmas[g]
            psi = -0.5 * z * z
            w = np.exp(psi - _logsumexp(psi))
            dmu = z / sigmas[g]
            dsig = (z * z - 0.0) / sigmas[g]  # d psi / d sigma = z^2 / sigma
            S[rows, index.col("mu", g, None)] = Tg @ (dmu - w @ dmu)
            S[rows, index.col("sigma", g, None)] = Tg @ (dsig - w @ dsig)
    return S


# ---------------------------------------------------------------------------
# logistic regression


class SeparationError(RuntimeError):
    """Raised when a logistic fit diverges (complete separation)."""

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


@dataclass
class LogisticFit:
    """Per-group logistic fits of response on matching score."""

    alpha: np.ndarray        # intercept per group
    beta: np.ndarray         # slope per group
    covariance: np.ndarray   # block-diagonal over (alpha_g, beta_g) pairs
    converged: bool


def irls(X, y, max_iter=100, tol=1e-10, group=None):
    """Logistic maximum likelihood for an arbitrary design matrix.

    Returns (coef, cov) with cov the inverse observed information. Raises
    SeparationError on divergence.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    coef = np.zeros(X.shape[1])
    H = None
    for _ in range(max_iter):
        eta = np.clip(X @ coef, -30.0, 30.0)
        p = expit(eta)
        grad = X.T @ (y - p)
        w = p * (1.0 - p)
        H = X.T @ (X * w[:, None])
        try:
            delta = linalg.solve(H + 1e-12 * np.eye(H.shape[0]), grad,
                                 assume_a="pos")
        except linalg.LinAlgError as exc:
            raise SeparationError(f"singular information: {exc}", group) from exc
        coef = coef + delta
        if np.max(np.abs(coef)) > 30.0:
            raise SeparationError("diverging coefficients "
                                  "(complete separation)", group)
        if np.max(np.abs(delta)) < tol:
            cov = linalg.solve(H + 1e-12 * np.eye(H.shape[0]),
                               np.eye(H.shape[0]), assume_a="pos")
            return coef, 0.5 * (cov + cov.T)
    raise SeparationError("logistic fit did not converge", group)


def fit_logistic(scores, responses, group_of_person) -> LogisticFit:
    """Independent per-group logistic regressions of response on score.

    Raises SeparationError naming the offending group when a group's
    responses are constant or its fit diverges.
    """
    scores = np.asarray(scores, dtype=float)
    responses = np.asarray(responses, dtype=float)
    groups = np.asarray(group_of_person, dtype=int)
    G = groups.max() + 1 if groups.size else 0
    alpha = np.empty(G)
    beta = np.empty(G)
    cov = np.zeros((2 * G, 2 * G))
    for g in range(G):
        rows = np.flatnonzero(groups == g)
        y = responses[rows]
        s = scores[rows]
        if y.size == 0 or y.min() == y.max():
            raise SeparationError(f"constant responses in group {g}", group=g)
        if np.unique(s).size < 2:
            raise SeparationError(f"fewer than 2 distinct scores in group {g}",
                                  group=g)
        coef, vg = irls(np.column_stack([np.ones_like(s), s]), y, group=g)
        alpha[g], beta[g] = coef
        cov[2 * g:2 * g + 2, 2 * g:2 * g + 2] = vg
    return LogisticFit(alpha, beta, cov, True)


# ---------------------------------------------------------------------------
# Wald quadratic form


class WaldTest(NamedTuple):
    statistic: float
    df: int
    p: float
    used_pinv: bool


def wald_quadratic_form(estimates, contrast, covariance) -> WaldTest:
    """W = (C g)' (C Sigma C')^{-1} (C g), df = rank(C), chi-square tail.

    Falls back to a pseudo-inverse with reduced degrees of freedom (flagged
    via `used_pinv`) when the contrast covariance is singular.
    """
    g = np.asarray(estimates, dtype=float)
    Cm = np.atleast_2d(np.asarray(contrast, dtype=float))
    Sigma = np.asarray(covariance, dtype=float)
    v = Cm @ g
    M = Cm @ Sigma @ Cm.T
    df = Cm.shape[0]
    if not np.any(v):
        return WaldTest(0.0, df, 1.0, False)
    try:
        cf = linalg.cho_factor(M)
        stat = float(v @ linalg.cho_solve(cf, v))
        if not math.isfinite(stat) or stat < 0:
            raise linalg.LinAlgError("indefinite quadratic form")
        return WaldTest(stat, df, float(chi2.sf(stat, df)), False)
    except linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(M)
        tol = max(M.shape[0] * np.finfo(float).eps * max(vals.max(), 0.0), 1e-300)
        keep = vals > tol
        rank = int(keep.sum())
        if rank == 0:
            return WaldTest(0.0, 0, 1.0, True)
        proj = vecs[:, keep].T @ v
        stat = float(np.sum(proj * proj / vals[keep]))
        return WaldTest(stat, rank, float(chi2.sf(stat, rank)), True)
