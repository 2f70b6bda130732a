"""Stage-wise greedy fitting of rank-one contributions by coordinate ascent.

One factor is added at a time: given the accepted factors, a candidate is
optimized by cycling through closed-form block updates (steps 1-7 below,
plus a latent-residual refresh for truncated data) and is kept only when the
activation-weighted log-posterior favors it over the empty alternative.

Per inner iteration the blocks are:

  1. row loadings u        -- quadratic surrogate of the Student-t loss,
                              tangent at the current value, solved per row
  2. row flags psi         -- exact on/off comparison per row
  3. row coefficients beta -- safeguarded Newton step on the surrogate
  4. column loadings v     -- mirror of step 1 over columns, on vstar = v*eta
  5. column flags phi      -- mirror of step 2
  6. column coefficients gamma -- mirror of step 3
  7. scale eta             -- exact conditional mode of eta^2 given vstar
  8. latent residual       -- truncated-data refresh (latent module)

Every block either maximizes the exact objective over its coordinates or
accepts a surrogate proposal only when the exact objective does not
decrease, so the log-posterior is non-decreasing across steps 1-7.
"""

from dataclasses import dataclass
from math import log, sqrt

import numpy as np

from .latent import LatentState, apply_transform, initial_latent, update_latent
from .model import (
    FactorContribution,
    FitResult,
    HyperParams,
    ObservedMatrix,
    SideInfo,
    Transform,
    beta_prior_mean,
    cell_marginal_loglik,
    frelu,
    log_prior_contribution,
    materialize,
    prior_mode_contribution,
)
from .shrinkage import ShrinkageParams, prob_active

__all__ = [
    "InnerState",
    "inner_logpost",
    "step_u",
    "step_psi",
    "step_beta",
    "step_v",
    "step_phi",
    "step_gamma",
    "step_eta",
    "run_inner",
    "InnerFit",
    "fit_contribution",
    "stopping_decision",
    "fit",
    "predict_matrix",
    "exact_row_loss",
    "minorant_row_loss",
]

GRADIENT_STEP_INIT = 0.1
GRADIENT_MAX_HALVINGS = 20


class InnerState:
    """Mutable candidate state for one factor's coordinate ascent.

    ``ztilde`` is the latent residual after subtracting previously accepted
    factors.  ``fx`` and ``gw`` cache the link values frelu(x'beta) and
    frelu(w'gamma); index sets are derived properties so they always match
    the current parameter values.
    """

    def __init__(self, ztilde, mask, side, hp, h, u, psi, beta, v, phi, gamma, eta):
        self.ztilde = np.asarray(ztilde, dtype=float)
        self.mask = np.asarray(mask, dtype=bool)
        self.side = side
        self.hp = hp
        self.h = h
        self.u = np.asarray(u, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        self.beta = np.asarray(beta, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.phi = np.asarray(phi, dtype=float)
        self.gamma = np.asarray(gamma, dtype=float)
        self.eta = float(eta)
        self.refresh_links()
        self.logpost = inner_logpost(self)

    def refresh_links(self):
        self.fx = frelu(self.side.x @ self.beta, self.hp.eps_frelu)
        self.gw = frelu(self.side.w @ self.gamma, self.hp.eps_frelu)

    @property
    def active_rows(self):
        return (self.psi * self.u) != 0

    @property
    def active_cols(self):
        return (self.phi * self.v) != 0

    @property
    def link_rows(self):
        return (self.side.x @ self.beta) > 0

    @property
    def link_cols(self):
        return (self.side.w @ self.gamma) > 0

    def cells(self):
        return self.eta * np.outer(self.fx * self.psi * self.u,
                                   self.gw * self.phi * self.v)

    def candidate(self, rho: int = 1) -> FactorContribution:
        return FactorContribution(
            u_tilde=self.u.copy(), psi_tilde=self.psi.copy(), beta=self.beta.copy(),
            v_tilde=self.v.copy(), phi_tilde=self.phi.copy(), gamma=self.gamma.copy(),
            eta=self.eta, rho=rho,
        )


def inner_logpost(state: InnerState) -> float:
    """Exact objective for the current candidate: masked data loss plus the
    candidate's log prior (activation term included, rho = 1)."""
    resid = (state.ztilde - state.cells())[state.mask]
    lik = float(np.sum(cell_marginal_loglik(resid, state.hp.a_sigma, state.hp.b_sigma)))
    return lik + log_prior_contribution(state.candidate(rho=1), state.side, state.hp, state.h)


def _masked_loglik_delta(state: InnerState, cells_on: np.ndarray, axis: int) -> np.ndarray:
    """Row (axis=1) or column (axis=0) sums of the loss gain of switching the
    corresponding block on: loss(ztilde) - loss(ztilde - cells_on)."""
    two_b = 2.0 * state.hp.b_sigma
    r_on = state.ztilde - cells_on
    gain = np.where(
        state.mask,
        np.log1p(state.ztilde**2 / two_b) - np.log1p(r_on**2 / two_b),
        0.0,
    )
    return (state.hp.a_sigma + 0.5) * gain.sum(axis=axis)


# ---------------------------------------------------------------------------
# Steps 1-2: row loadings and row flags
# ---------------------------------------------------------------------------

def step_u(state: InnerState) -> InnerState:
    """Row-loading update from the quadratic surrogate, tangent at u^(t-1).

    Treating all rows as flagged on, the per-row closed form is

        u_i = (sum_j zbar_ij / D2_ij) / (sum_j 1 / D2_ij + 1 / (2(a+1/2)))

    with A_ij = eta * frelu(x'beta) * frelu(w'gamma) * v_j over columns with
    effective loading, zbar = ztilde / A and D2 = A^-2 {2b + (zbar - u)^2}.
    Cells with A = 0 carry no information and are excluded.  Rows currently
    flagged on take the proposal (surrogate tangency guarantees ascent);
    rows flagged off adopt it, switching on, only when that strictly
    increases the exact objective.
    """
    hp = state.hp
    col_eff = state.phi * state.v
    if not np.any(col_eff != 0):
        return state
    A = state.eta * np.outer(state.fx, state.gw * col_eff)
    valid = state.mask & (A != 0.0)
    two_b = 2.0 * hp.b_sigma
    r_tan = state.ztilde - A * state.u[:, None]
    denom = two_b + r_tan**2
    w = np.where(valid, A * A / denom, 0.0)
    wz = np.where(valid, A * state.ztilde / denom, 0.0)
    ridge = 1.0 / (2.0 * (hp.a_sigma + 0.5))
    u_prop = wz.sum(axis=1) / (w.sum(axis=1) + ridge)

    active = state.psi == 1.0
    u_new = np.where(active, u_prop, state.u)
    inactive = ~active
    if inactive.any():
        d_lik = _masked_loglik_delta(state, A * u_prop[:, None], axis=1)
        d_post = (
            log(hp.zeta_n / (1.0 - hp.zeta_n))
            + d_lik
            + 0.5 * (state.u**2 - u_prop**2)
        )
        switch_on = inactive & (d_post > 0.0)
        u_new = np.where(switch_on, u_prop, u_new)
        state.psi = np.where(switch_on, 1.0, state.psi)
    state.u = u_new
    return state


def step_psi(state: InnerState) -> InnerState:
    """Exact per-row on/off decision for the sparsity flags.

    A row is flagged on iff the loss gain of its contribution (at the
    current loading) strictly beats the Bernoulli log odds; ties resolve to
    the sparser state.  Loadings of rows flagged off are reset to the prior
    mode zero, which can only raise the objective.
    """
    hp = state.hp
    cells_on = state.eta * np.outer(state.fx * state.u, state.gw * state.phi * state.v)
    d_lik = _masked_loglik_delta(state, cells_on, axis=1)
    on = (log(hp.zeta_n / (1.0 - hp.zeta_n)) + d_lik) > 0.0
    state.psi = on.astype(float)
    state.u = np.where(on, state.u, 0.0)
    return state


# ---------------------------------------------------------------------------
# Steps 3 and 6: coefficient vectors with Newton/gradient safeguard
# ---------------------------------------------------------------------------

def _safeguarded_coef_update(state, design, which: str) -> InnerState:
    """Shared body of the beta/gamma updates.

    Solves the ridge-regularized normal equations of the quadratic
    surrogate, accepts the Newton point only if the exact objective does not
    decrease, and otherwise backtracks along the (sub)gradient, halving the
    step length from 0.1 at most 20 times; if no candidate keeps the
    objective from decreasing the coefficients stay put.
    """
    hp = state.hp
    two_b = 2.0 * hp.b_sigma
    if which == "beta":
        score = state.side.x @ state.beta
        on_axis = (score > 0.0)[:, None]
        other_ok = np.any(state.phi * state.v != 0)
        A = state.eta * np.outer(state.psi * state.u, state.gw * state.phi * state.v)
        link = state.fx[:, None]
        mu = beta_prior_mean(state.side.q_x, hp.eps_frelu)
        coef = state.beta
    else:
        score = state.side.w @ state.gamma
        on_axis = (score > 0.0)[None, :]
        other_ok = np.any(state.psi * state.u != 0)
        A = state.eta * np.outer(state.fx * state.psi * state.u, state.phi * state.v)
        link = state.gw[None, :]
        mu = beta_prior_mean(state.side.q_w, hp.eps_frelu)
        coef = state.gamma
    if not on_axis.any() or not other_ok:
        return state

    valid = state.mask & on_axis & (A != 0.0)
    r_tan = state.ztilde - A * link
    denom = two_b + r_tan**2
    wmat = np.where(valid, A * A / denom, 0.0)
    tmat = np.where(valid, A * state.ztilde / denom, 0.0)
    ridge = 1.0 / (2.0 * (hp.a_sigma + 0.5))
    if which == "beta":
        wvec, tvec = wmat.sum(axis=1), tmat.sum(axis=1)
    else:
        wvec, tvec = wmat.sum(axis=0), tmat.sum(axis=0)
    M = (design * wvec[:, None]).T @ design + ridge * np.eye(design.shape[1])
    rhs = design.T @ tvec + ridge * mu
    newton = np.linalg.solve(M, rhs)

    j_before = inner_logpost(state)

    def try_coef(value) -> float:
        if which == "beta":
            state.beta = value
        else:
            state.gamma = value
        state.refresh_links()
        return inner_logpost(state)

    j_newton = try_coef(newton)
    if j_newton >= j_before:
        state.logpost = j_newton
        return state

    # Newton point rejected: short gradient moves along the subgradient
    # (zero wherever the link is flat).
    try_coef(coef)
    r_cur = state.ztilde - A * link
    gmat = np.where(
        state.mask & on_axis & (A != 0.0),
        2.0 * r_cur * A / (two_b + r_cur**2),
        0.0,
    )
    gsum = gmat.sum(axis=1) if which == "beta" else gmat.sum(axis=0)
    grad = (hp.a_sigma + 0.5) * (design.T @ gsum) - (coef - mu)
    step = GRADIENT_STEP_INIT
    for _ in range(GRADIENT_MAX_HALVINGS + 1):
        j_step = try_coef(coef + step * grad)
        if j_step >= j_before:
            state.logpost = j_step
            return state
        step *= 0.5
    try_coef(coef)
    state.logpost = j_before
    return state


def step_beta(state: InnerState) -> InnerState:
    """Safeguarded Newton update of the row coefficient vector.

    Restricted to rows with positive linear score and columns with effective
    loading; the surrogate's normal matrix always carries the prior ridge,
    so it cannot be singular.
    """
    return _safeguarded_coef_update(state, state.side.x, "beta")


def step_gamma(state: InnerState) -> InnerState:
    """Column mirror of :func:`step_beta`."""
    return _safeguarded_coef_update(state, state.side.w, "gamma")


# ---------------------------------------------------------------------------
# Steps 4-5: column loadings and flags (on the eta-scaled vstar)
# ---------------------------------------------------------------------------

def step_v(state: InnerState) -> InnerState:
    """Column-loading update on vstar = v * eta, whose prior is N(0, eta^2).

    Mirror of :func:`step_u` over columns; the ridge becomes
    1 / (2(a+1/2) eta^2) and the stored loadings are vstar / eta.
    """
    hp = state.hp
    row_eff = state.psi * state.u
    if not np.any(row_eff != 0):
        return state
    A = np.outer(state.fx * row_eff, state.gw)
    valid = state.mask & (A != 0.0)
    two_b = 2.0 * hp.b_sigma
    vstar = state.v * state.eta
    r_tan = state.ztilde - A * vstar[None, :]
    denom = two_b + r_tan**2
    w = np.where(valid, A * A / denom, 0.0)
    wz = np.where(valid, A * state.ztilde / denom, 0.0)
    ridge = 1.0 / (2.0 * (hp.a_sigma + 0.5) * state.eta**2)
    vs_prop = wz.sum(axis=0) / (w.sum(axis=0) + ridge)

    active = state.phi == 1.0
    vs_new = np.where(active, vs_prop, vstar)
    inactive = ~active
    if inactive.any():
        d_lik = _masked_loglik_delta(state, A * vs_prop[None, :], axis=0)
        d_post = (
            log(hp.zeta_p / (1.0 - hp.zeta_p))
            + d_lik
            + (vstar**2 - vs_prop**2) / (2.0 * state.eta**2)
        )
        switch_on = inactive & (d_post > 0.0)
        vs_new = np.where(switch_on, vs_prop, vs_new)
        state.phi = np.where(switch_on, 1.0, state.phi)
    state.v = vs_new / state.eta
    return state


def step_phi(state: InnerState) -> InnerState:
    """Column mirror of :func:`step_psi` with rate zeta_p."""
    hp = state.hp
    cells_on = state.eta * np.outer(state.fx * state.psi * state.u, state.gw * state.v)
    d_lik = _masked_loglik_delta(state, cells_on, axis=0)
    on = (log(hp.zeta_p / (1.0 - hp.zeta_p)) + d_lik) > 0.0
    state.phi = on.astype(float)
    state.v = np.where(on, state.v, 0.0)
    return state


# ---------------------------------------------------------------------------
# Step 7: scale
# ---------------------------------------------------------------------------

def step_eta(state: InnerState) -> InnerState:
    """Exact conditional mode of eta^2 given vstar.

    eta^2 = (b_eta + 0.5 * sum_j vstar_j^2) / (a_eta + 0.5 p + 1); the
    stored loadings are rescaled so vstar, and hence the materialized cells,
    stay fixed.
    """
    hp = state.hp
    vstar = state.v * state.eta
    p = state.v.size
    eta2 = (hp.b_eta + 0.5 * float(np.sum(vstar**2))) / (hp.a_eta + 0.5 * p + 1.0)
    state.eta = sqrt(eta2)
    state.v = vstar / state.eta
    return state


_STEPS = (
    ("u", step_u),
    ("psi", step_psi),
    ("beta", step_beta),
    ("v", step_v),
    ("phi", step_phi),
    ("gamma", step_gamma),
    ("eta", step_eta),
)

_WARMUP_STEPS = tuple((n, f) for n, f in _STEPS if n not in ("psi", "phi"))

WARMUP_MAX_ITERS = 40
WARMUP_REL_TOL = 1e-4


# ---------------------------------------------------------------------------
# Inner loop, restarts, stopping rule, outer loop
# ---------------------------------------------------------------------------

def run_inner(
    state: InnerState,
    data: ObservedMatrix | None = None,
    fitted_prev: np.ndarray | None = None,
    on_step=None,
    warmup: bool = True,
) -> list[float]:
    """Cycles the coordinate steps until the relative objective change drops
    below ``hp.tol`` or ``hp.max_inner_iters`` is reached.

    The first iterations cycle only the continuous blocks with the flags
    held all-on (warm-up): under the heavy-tailed loss a freshly drawn
    candidate fits nothing, and deciding the flags in that regime switches
    every row and column off permanently.  Once the continuous block has
    roughly stabilized the flag steps join and the full cycle 1-7 (plus the
    latent refresh for truncated data) runs to convergence.  Returns the
    per-iteration objective values, starting value included.
    """
    hp = state.hp
    truncated = data is not None and data.transform == Transform.NONNEG_TRUNCATION
    j_prev = inner_logpost(state)
    trace = [j_prev]
    in_warmup = warmup
    warmup_left = WARMUP_MAX_ITERS
    budget = hp.max_inner_iters + (WARMUP_MAX_ITERS if warmup else 0)
    for _ in range(budget):
        steps = _WARMUP_STEPS if in_warmup else _STEPS
        for name, fn in steps:
            fn(state)
            if on_step is not None:
                on_step(name, state)
        if truncated:
            ls = update_latent(
                LatentState(state.ztilde, fitted_prev, fitted_prev + state.cells()),
                data,
            )
            state.ztilde = ls.z_tilde
            if on_step is not None:
                on_step("latent", state)
        j = inner_logpost(state)
        trace.append(j)
        converged = abs(j - j_prev) <= hp.tol * max(1.0, abs(j_prev))
        if in_warmup:
            warmup_left -= 1
            settled = abs(j - j_prev) <= WARMUP_REL_TOL * max(1.0, abs(j_prev))
            if settled or warmup_left <= 0:
                in_warmup = False
        elif converged:
            break
        j_prev = j
    state.logpost = trace[-1]
    return trace


def _draw_initial_state(ztilde, mask, side, hp, h, rng) -> InnerState:
    """Initial candidate: continuous parameters drawn from their priors.

    The sparsity flags start all-on (rho is likewise treated as 1 during the
    inner optimization): flags are re-decided from the first iteration on,
    and starting them at a sparse prior draw would make the all-off
    degenerate candidate an absorbing state for the greedy flag updates.
    """
    n, p = side.x.shape[0], side.w.shape[0]
    tau = rng.gamma(hp.a_eta, 1.0 / hp.b_eta)  # eta^-2 ~ Gamma(a_eta, rate b_eta)
    return InnerState(
        ztilde=ztilde,
        mask=mask,
        side=side,
        hp=hp,
        h=h,
        u=rng.standard_normal(n),
        psi=np.ones(n),
        beta=beta_prior_mean(side.q_x, hp.eps_frelu) + rng.standard_normal(side.q_x),
        v=rng.standard_normal(p),
        phi=np.ones(p),
        gamma=beta_prior_mean(side.q_w, hp.eps_frelu) + rng.standard_normal(side.q_w),
        eta=tau**-0.5,
    )


@dataclass
class InnerFit:
    """Winning restart of one factor's inner optimization."""

    candidate: FactorContribution
    logpost: float
    trace: list
    z_tilde: np.ndarray


def fit_contribution(
    residual: np.ndarray,
    side: SideInfo,
    hp: HyperParams,
    h: int,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
    data: ObservedMatrix | None = None,
    fitted_prev: np.ndarray | None = None,
    on_step=None,
) -> InnerFit:
    """Optimizes one candidate factor from ``n_restarts`` prior draws.

    ``residual`` is the latent matrix minus the previously accepted factors.
    Returns the restart with the highest converged objective (ties keep the
    earliest restart); ``logpost`` is the candidate-block objective, i.e.
    the masked data loss plus this candidate's log prior.
    """
    if mask is None:
        mask = np.ones_like(residual, dtype=bool)
    if not np.all(np.isfinite(residual[mask])):
        raise ValueError("residual contains non-finite observed entries")
    best = None
    for child in rng.spawn(hp.n_restarts):
        sub_rng = np.random.default_rng(child)
        state = _draw_initial_state(residual.copy(), mask, side, hp, h, sub_rng)
        trace = run_inner(state, data=data, fitted_prev=fitted_prev, on_step=on_step)
        if best is None or trace[-1] > best.logpost:
            best = InnerFit(
                candidate=state.candidate(rho=1),
                logpost=trace[-1],
                trace=trace,
                z_tilde=state.ztilde,
            )
    return best


def stopping_decision(
    logpost_active: float,
    logpost_inactive: float,
    h: int,
    shrink: ShrinkageParams,
) -> bool:
    """Keep factor h iff log Pr(active) + logpost_active exceeds
    log Pr(inactive) + logpost_inactive.

    Both log-posteriors must share the data and normalization convention and
    exclude the activation prior mass itself; the inactive value is computed
    with the candidate's parameters at their prior modes.
    """
    q = prob_active(h, shrink)
    return log(q) + logpost_active > log(1.0 - q) + logpost_inactive


def fit(
    data: ObservedMatrix,
    side: SideInfo,
    hp: HyperParams,
    inner_callback=None,
) -> FitResult:
    """Forward stage-wise fit: adds factors until one is rejected.

    Each accepted contribution is sign-normalized so its column loadings sum
    to a nonnegative value (the materialized model is invariant).  For
    truncated data the latent values at observed zeros are carried across
    factors.  ``inner_callback(h, step_name, state, fitted_prev)`` is
    invoked after every inner step when provided (diagnostics hook).
    """
    n, p = data.shape
    if side.x.shape[0] != n or side.w.shape[0] != p:
        raise ValueError(
            f"side info shapes ({side.x.shape[0]}, {side.w.shape[0]}) do not match "
            f"data shape ({n}, {p})"
        )
    latent = initial_latent(data)
    fitted = np.zeros((n, p))
    contributions = []
    trace_vals: list[float] = []
    trace_fids: list[int] = []
    prior_prev = 0.0
    truncated = data.transform == Transform.NONNEG_TRUNCATION
    root = np.random.default_rng(np.random.SeedSequence(hp.seed))

    for h in range(1, hp.max_factors + 1):
        on_step = None
        if inner_callback is not None:
            def on_step(name, state, _h=h):
                inner_callback(_h, name, state, fitted)
        best = fit_contribution(
            latent - fitted,
            side,
            hp,
            h,
            root,
            mask=data.mask,
            data=data if truncated else None,
            fitted_prev=fitted,
            on_step=on_step,
        )
        q = prob_active(h, hp.shrink)
        l_active = best.logpost - log(q)

        # Empty alternative: candidate at prior modes, switched off.
        if truncated:
            ls0 = update_latent(LatentState(latent - fitted, fitted, fitted), data)
            z0 = ls0.z_tilde
        else:
            z0 = latent - fitted
        lik0 = float(np.sum(cell_marginal_loglik(z0[data.mask], hp.a_sigma, hp.b_sigma)))
        mode0 = prior_mode_contribution(side, hp, rho=0)
        l_inactive = lik0 + log_prior_contribution(
            mode0, side, hp, h, include_activation=False
        )

        if not stopping_decision(l_active, l_inactive, h, hp.shrink):
            break

        cand = best.candidate
        if float(np.sum(cand.v_tilde)) < 0.0:
            cand = cand.flip_signs()
        contributions.append(cand)
        trace_vals.extend(v + prior_prev for v in best.trace)
        trace_fids.extend([h] * len(best.trace))
        prior_prev += log_prior_contribution(cand, side, hp, h)
        if truncated:
            zero = data.mask & (data.values == 0)
            latent[zero] = best.z_tilde[zero] + fitted[zero]
        fitted += cand.cells(side, hp.eps_frelu)

    residual = np.where(data.mask, latent - fitted, 0.0)
    return FitResult(
        contributions=tuple(contributions),
        logpost_trace=np.asarray(trace_vals, dtype=float),
        trace_factors=np.asarray(trace_fids, dtype=int),
        latent_residual=residual,
    )


def predict_matrix(fit_result: FitResult, side: SideInfo, eps: float, transform: Transform) -> np.ndarray:
    """Fitted values on the observation scale (latent fit through the transform)."""
    return apply_transform(materialize(fit_result.contributions, side, eps), transform)


# ---------------------------------------------------------------------------
# Surrogate diagnostics (used by the test suite to audit the bound)
# ---------------------------------------------------------------------------

def exact_row_loss(ztilde, A, u, a_sigma: float, b_sigma: float) -> float:
    """Masked Student-t loss of one row as a function of its loading u."""
    r = np.asarray(ztilde, dtype=float) - np.asarray(A, dtype=float) * u
    return float(np.sum(cell_marginal_loglik(r, a_sigma, b_sigma)))


def minorant_row_loss(ztilde, A, u_tan, u, a_sigma: float, b_sigma: float) -> float:
    """Quadratic lower bound of :func:`exact_row_loss`, tangent at ``u_tan``.

    Bounds log(x) by its tangent log(x0) + (x - x0)/x0 inside the loss.
    """
    z = np.asarray(ztilde, dtype=float)
    A = np.asarray(A, dtype=float)
    two_b = 2.0 * b_sigma
    r_tan_sq = (z - A * u_tan) ** 2
    r_sq = (z - A * u) ** 2
    terms = np.log1p(r_tan_sq / two_b) + (r_sq - r_tan_sq) / (two_b + r_tan_sq)
    return float(-(a_sigma + 0.5) * np.sum(terms))
