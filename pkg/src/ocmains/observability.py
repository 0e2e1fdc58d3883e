"""Unobservable-subspace tools and the consistency-preserving filter step.

Odometry-style aiding cannot pin down a body-frame translation or a rotation
about gravity, so the error-state system has a four-dimensional unobservable
subspace.  A filter that linearizes around noisy estimates leaks information
into the heading direction and becomes overconfident.  The remedy implemented
here projects the state-transition Jacobian, block by block, onto the set of
matrices that keep the unobservable subspace invariant, changing each block
as little as possible (minimum Frobenius-norm corrections, with the attitude
block constrained to stay a rotation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filtering import (
    ErrorLayout,
    FilterConfig,
    FParts,
    ImuSample,
    MagSample,
    NominalState,
    StepResult,
    ekf_step,
)
from .geometry import skew, to_rot

__all__ = [
    "ObservabilityWindow",
    "OcContext",
    "nullspace_basis",
    "observability_matrix",
    "numerical_nullity",
    "verify_nullspace",
    "oc_project_row",
    "oc_project_rotation",
    "oc_modify_F",
    "make_oc_modifier",
    "oc_step",
    "constraint_residuals",
    "span_residual",
    "perturbation_error",
]


def nullspace_basis(state: NominalState, gravity: np.ndarray, layout: ErrorLayout) -> np.ndarray:
    """Basis of the unobservable subspace at the given state, shape (n, 4).

    Columns 1-3 are a pure position shift; column 4 combines velocity,
    attitude (and nothing else) into a rotation about the gravity vector.
    Bias and field-coefficient rows are identically zero.
    """
    g = np.asarray(gravity, dtype=float).reshape(3)
    N = np.zeros((layout.dim, 4))
    N[layout.pos, :3] = np.eye(3)
    N[layout.vel, 3] = -skew(state.v) @ g
    N[layout.att, 3] = to_rot(state.q).T @ g
    return N


@dataclass
class ObservabilityWindow:
    """Ordered per-step (F, H) Jacobians over consecutive filter steps."""

    jacobians: list  # list of (F, H) tuples

    def __post_init__(self):
        if len(self.jacobians) < 1:
            raise ValueError("window must contain at least one step")


def observability_matrix(window: ObservabilityWindow) -> np.ndarray:
    """Stack H_k, H_{k+1} F_k, H_{k+2} F_{k+1} F_k, ..."""
    rows = []
    phi = None
    for F, H in window.jacobians:
        rows.append(H if phi is None else H @ phi)
        phi = F if phi is None else F @ phi
    return np.vstack(rows)


def numerical_nullity(M: np.ndarray, ratio: float = 1e-8) -> int:
    """Number of singular values below ``ratio`` times the largest."""
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0:
        return M.shape[1]
    return int(M.shape[1] - np.sum(sv > ratio * sv[0]))


def verify_nullspace(window_or_matrix, N: np.ndarray) -> float:
    """Relative residual ||O N||_F / (||O||_F ||N||_F)."""
    O = (
        observability_matrix(window_or_matrix)
        if isinstance(window_or_matrix, ObservabilityWindow)
        else np.asarray(window_or_matrix)
    )
    return float(np.linalg.norm(O @ N) / (np.linalg.norm(O) * np.linalg.norm(N)))


def oc_project_row(F_blk: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Minimum Frobenius-norm change to F_blk such that F_blk @ u == w."""
    u = np.asarray(u, dtype=float).reshape(3)
    uu = float(u @ u)
    if uu == 0.0:
        raise ValueError("constraint direction u must be nonzero")
    return F_blk - np.outer(F_blk @ u - w, u) / uu


def oc_project_rotation(R_blk: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Smallest rotation correction R* = R_c @ R_blk with R* @ u == w.

    ``u`` and ``w`` must have equal norms (both are gravity seen in two body
    frames); the correction axis is the normalized cross product of
    ``R_blk @ u`` and ``w``.  In the antipodal case the axis is chosen
    perpendicular to ``w``.
    """
    u = np.asarray(u, dtype=float).reshape(3)
    w = np.asarray(w, dtype=float).reshape(3)
    nu, nw = np.linalg.norm(u), np.linalg.norm(w)
    if abs(nu - nw) > 1e-9 * max(nu, nw, 1.0):
        raise ValueError("infeasible constraint: |u| and |w| differ")
    a = R_blk @ u
    c = np.cross(a, w)
    cn = np.linalg.norm(c)
    dot = float(a @ w)
    if cn < 1e-15 * nu * nw:
        if dot >= 0.0:
            return R_blk.copy()
        # antipodal: rotate by pi about an axis perpendicular to w
        k = np.zeros(3)
        k[np.argmin(np.abs(w))] = 1.0
        axis = np.cross(w, k)
        axis /= np.linalg.norm(axis)
        angle = np.pi
    else:
        axis = c / cn
        angle = np.arctan2(cn, dot)
    K = skew(axis)
    R_c = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return R_c @ R_blk


@dataclass
class OcContext:
    """Prior-estimate quantities entering the consistency constraints."""

    v_prior: np.ndarray
    R_prior: np.ndarray
    v_next: np.ndarray
    R_next: np.ndarray
    gravity: np.ndarray
    ts: float

    @classmethod
    def from_states(
        cls, prior: NominalState, next_prior: NominalState, cfg: FilterConfig
    ) -> "OcContext":
        return cls(
            v_prior=prior.v.copy(),
            R_prior=to_rot(prior.q),
            v_next=next_prior.v.copy(),
            R_next=to_rot(next_prior.q),
            gravity=cfg.gravity.copy(),
            ts=cfg.ts,
        )


def oc_modify_F(parts: FParts, ctx: OcContext, general_nullspace: bool = False):
    """Project the three estimate-dependent attitude-coupling blocks of the
    transition Jacobian so the unobservable subspace propagates consistently.

    Only the (dv, eps) block, the (eps, eps) rotation block and the 3x3
    factor inside the (dtheta, eps) block change; every other entry of the
    returned matrix is taken from ``parts.F`` unchanged.  Returns the
    modified matrix and a diagnostics dict with the constraint residuals.
    """
    lay = parts.layout
    g = ctx.gravity
    u = ctx.R_prior.T @ g
    w_vel = skew(ctx.v_prior - ctx.v_next) @ g
    w_att = ctx.R_next.T @ g
    w_fld = skew(ctx.v_prior) @ g

    F12 = oc_project_row(parts.vel_att, u, w_vel)
    F22 = oc_project_rotation(parts.att_att, u, w_att)
    if general_nullspace:
        # allow the constrained product to land anywhere in the nullspace of
        # the field coupling row instead of pinning it to w_fld exactly
        K = parts.field_row
        P = np.linalg.pinv(K) @ K
        d = parts.theta_att_factor @ u - w_fld
        F32 = parts.theta_att_factor - np.outer(P @ d, u) / float(u @ u)
    else:
        F32 = oc_project_row(parts.theta_att_factor, u, w_fld)

    F = parts.F.copy()
    F[lay.vel, lay.att] = F12
    F[lay.att, lay.att] = F22
    F[lay.theta, lay.att] = parts.field_row @ F32

    diagnostics = {
        "res_vel": float(np.linalg.norm(F12 @ u - w_vel)),
        "res_att": float(np.linalg.norm(F22 @ u - w_att)),
        "res_field": float(np.linalg.norm(parts.field_row @ (F32 @ u - w_fld))),
        "att_orthogonality": float(np.max(np.abs(F22.T @ F22 - np.eye(3)))),
        "att_det": float(np.linalg.det(F22)),
        "f_delta_fro": float(np.linalg.norm(F - parts.F)),
        # shift of the basis-mixing column when chaining the transformed
        # bases across this step; the position-attitude coupling term is
        # zero unless the second-order position blocks are enabled
        "a_increment": -ctx.ts * (skew(ctx.v_prior) @ g) + parts.F[lay.pos, lay.att] @ u,
    }
    return F, diagnostics


def constraint_residuals(parts: FParts, ctx: OcContext) -> dict:
    """Residuals of the consistency constraints for unmodified Jacobian blocks.

    Useful as a diagnostic for the baseline filter, whose blocks generally
    violate the constraints once the estimates are noisy.
    """
    g = ctx.gravity
    u = ctx.R_prior.T @ g
    return {
        "res_vel": float(np.linalg.norm(parts.vel_att @ u - skew(ctx.v_prior - ctx.v_next) @ g)),
        "res_att": float(np.linalg.norm(parts.att_att @ u - ctx.R_next.T @ g)),
        "res_field": float(
            np.linalg.norm(parts.field_row @ (parts.theta_att_factor @ u - skew(ctx.v_prior) @ g))
        ),
        "f_delta_fro": 0.0,
    }


def span_residual(F_used: np.ndarray, N_prior: np.ndarray, N_next: np.ndarray) -> float:
    """Worst relative residual of the columns of F @ N_prior after projection
    onto the column span of N_next."""
    mapped = F_used @ N_prior
    coef = np.linalg.solve(N_next.T @ N_next, N_next.T @ mapped)
    resid = mapped - N_next @ coef
    norms = np.linalg.norm(mapped, axis=0)
    norms[norms == 0.0] = 1.0
    return float(np.max(np.linalg.norm(resid, axis=0) / norms))


def make_oc_modifier(record_span: bool = False):
    """Build the ``modify_F`` hook consumed by :func:`ocmains.filtering.ekf_step`."""

    def modifier(parts: FParts, prior: NominalState, next_prior: NominalState, cfg: FilterConfig):
        ctx = OcContext.from_states(prior, next_prior, cfg)
        F, diagnostics = oc_modify_F(parts, ctx, cfg.general_nullspace_projection)
        if record_span:
            lay = parts.layout
            N_prior = nullspace_basis(prior, cfg.gravity, lay)
            N_next = nullspace_basis(next_prior, cfg.gravity, lay)
            diagnostics["span_residual"] = span_residual(F, N_prior, N_next)
        return F, diagnostics

    return modifier


def oc_step(
    state: NominalState,
    cov: np.ndarray,
    imu: ImuSample,
    mag: MagSample,
    cfg: FilterConfig,
    H: np.ndarray | None = None,
    oc: bool = True,
    record_span: bool = False,
) -> StepResult:
    """One filter cycle; with ``oc=False`` this is exactly the baseline step.

    The measurement Jacobian already annihilates the unobservable subspace
    (its leading columns are zero), so only the covariance transition matrix
    is modified.
    """
    modifier = make_oc_modifier(record_span=record_span) if oc else None
    return ekf_step(state, cov, imu, mag, cfg, H=H, modify_F=modifier)


def perturbation_error(
    state: NominalState,
    cfg: FilterConfig,
    translation: np.ndarray | None = None,
    yaw_coeff: float | None = None,
) -> np.ndarray:
    """First-order error vector produced by perturbing the state.

    ``translation`` shifts the platform by a vector Delta (the error is then
    simply -Delta in the position block).  ``yaw_coeff`` rotates the
    navigation frame about the (unnormalized) gravity vector by an angle
    ``yaw_coeff * |g|``; the returned vector is the linearized error, valid
    for small coefficients.
    """
    if (translation is None) == (yaw_coeff is None):
        raise ValueError("specify exactly one of translation or yaw_coeff")
    lay = cfg.layout
    delta = np.zeros(lay.dim)
    if translation is not None:
        delta[lay.pos] = -np.asarray(translation, dtype=float).reshape(3)
        return delta
    g = cfg.gravity
    delta[lay.pos] = -yaw_coeff * skew(state.p) @ g
    delta[lay.vel] = -yaw_coeff * skew(state.v) @ g
    delta[lay.att] = yaw_coeff * to_rot(state.q).T @ g
    return delta
