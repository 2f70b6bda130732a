"""Shared builders for the test suite."""

import numpy as np
import pytest

from xfile.model import FactorContribution, HyperParams, ObservedMatrix, SideInfo
from xfile.optimizer import InnerState
from xfile.shrinkage import ShrinkageParams
from xfile.simulate import _covariate_block


def make_side(n, p, q_x=1, q_w=1, rng=None):
    """Side info with q_x/q_w exogenous columns plus intercepts."""
    if q_x == 1 and q_w == 1:
        return SideInfo.intercept_only(n, p)
    rng = rng or np.random.default_rng(0)
    x = np.column_stack([np.ones(n), rng.standard_normal((n, q_x - 1))])
    w = np.column_stack([np.ones(p), rng.standard_normal((p, q_w - 1))])
    return SideInfo(x=x, w=w)


def make_hp(**kwargs) -> HyperParams:
    defaults = dict(
        a_sigma=1.0, b_sigma=0.5, a_eta=2.0, b_eta=1.0,
        shrink=ShrinkageParams(3.0, 0.0), zeta_n=0.25, zeta_p=0.25,
        max_factors=6, tol=1e-8, max_inner_iters=200, n_restarts=3, seed=0,
    )
    defaults.update(kwargs)
    return HyperParams(**defaults)


def random_contribution(n, p, q_x, q_w, rng, rho=1) -> FactorContribution:
    return FactorContribution(
        u_tilde=rng.standard_normal(n),
        psi_tilde=(rng.random(n) < 0.6).astype(float),
        beta=rng.standard_normal(q_x),
        v_tilde=rng.standard_normal(p),
        phi_tilde=(rng.random(p) < 0.6).astype(float),
        gamma=rng.standard_normal(q_w),
        eta=float(rng.gamma(2.0, 1.0) + 0.1),
        rho=rho,
    )


def random_state(rng, n=8, p=7, q_x=2, q_w=2, hp=None, sparse_frac=0.5) -> InnerState:
    """Random inner state with a mix of on/off flags and a masked residual."""
    hp = hp or make_hp()
    side = make_side(n, p, q_x, q_w, rng)
    ztilde = rng.standard_normal((n, p)) * 2.0
    mask = rng.random((n, p)) > 0.15
    if not mask.any():
        mask[0, 0] = True
    return InnerState(
        ztilde=ztilde,
        mask=mask,
        side=side,
        hp=hp,
        h=1,
        u=rng.standard_normal(n),
        psi=(rng.random(n) > sparse_frac).astype(float),
        beta=rng.standard_normal(q_x) * 0.7 + np.eye(q_x)[0],
        v=rng.standard_normal(p),
        phi=(rng.random(p) > sparse_frac).astype(float),
        gamma=rng.standard_normal(q_w) * 0.7 + np.eye(q_w)[0],
        eta=float(rng.gamma(2.0, 0.6) + 0.2),
    )


def strong_multiplicative_instance(seed, n=50, p=50, q_x=5, q_w=5, noise=0.1,
                                   scales=(25.0, 20.0, 15.0)):
    """Rank-len(scales) data built from the rectified-link loading structure,
    with factor strengths normalized so every factor is well above noise."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), _covariate_block(n, q_x, rng)])
    w = np.column_stack([np.ones(p), _covariate_block(p, q_w, rng)])
    side = SideInfo(x=x, w=w)
    truth = np.zeros((n, p))
    for s in scales:
        while True:
            u = np.maximum(x @ rng.standard_normal(q_x + 1), 0.0) * rng.standard_normal(n)
            v = np.maximum(w @ rng.standard_normal(q_w + 1), 0.0) * rng.standard_normal(p)
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            if nu > 1e-8 and nv > 1e-8:
                break
        truth += s * np.outer(u / nu, v / nv)
    values = truth + noise * rng.standard_normal((n, p))
    data = ObservedMatrix(values=values, mask=np.ones((n, p), dtype=bool))
    return data, side, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
