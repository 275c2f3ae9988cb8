"""Explicit MLS-MPM forward simulator.

One substep is particle-to-grid (quadratic B-splines, APIC affine momentum
fused with the stress term), a symplectic-Euler grid update with boundary
conditions, and grid-to-particle with deformation-gradient update and a
plastic return map.  Elasticity is fixed-corotated; plasticity is either a
viscoplastic von Mises return (yield stress + plastic viscosity) or
Drucker-Prager (friction angle).

Kernels run serially so that trajectories are bitwise reproducible.
"""
from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numba
import numpy as np

from .params import DENSITY, E, ELASTIC_YIELD_CAP, FRICTION, NU, VISC, YIELD, PartParams
from .scene import PLASTICITY_MODES, SceneConfig

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"RMPMTRAJ"
MASS_EPS = 1e-12

# kernel status codes
OK, NONFINITE, INVERTED, LEFT_GRID = 0, 1, 2, 3
_STATUS_TEXT = {
    NONFINITE: "non-finite particle state",
    INVERTED: "det(F) <= 0 (inverted element)",
    LEFT_GRID: "particle left the grid",
}


class SimulationError(RuntimeError):
    """The simulation produced an invalid state and was aborted."""

    def __init__(self, message, substep=None, particle=None):
        super().__init__(message)
        self.substep = substep
        self.particle = particle


@dataclass
class ParticleState:
    x: np.ndarray  # (P, d)
    v: np.ndarray  # (P, d)
    F: np.ndarray  # (P, d, d)
    C: np.ndarray  # (P, d, d)
    mass: np.ndarray  # (P,)
    volume: np.ndarray  # (P,)
    part: np.ndarray  # (P,)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "ParticleState":
        return ParticleState(*(np.array(a, copy=True) for a in
                               (self.x, self.v, self.F, self.C, self.mass, self.volume, self.part)))


@dataclass
class GridState:
    momentum: np.ndarray  # (*res, d)
    mass: np.ndarray  # (*res,)
    velocity: np.ndarray  # (*res, d), zero where mass <= MASS_EPS


@dataclass
class StepInfo:
    """Transfer totals recorded right after P2G, before forces and boundaries."""

    grid_mass: float
    particle_mass: float
    grid_momentum: np.ndarray
    particle_momentum: np.ndarray
    max_speed: float


@dataclass
class Trajectory:
    """Frame ``i`` holds the state after ``(i + 1) * substeps`` substeps."""

    x: np.ndarray  # (T, P, d)
    v: np.ndarray  # (T, P, d)
    F: np.ndarray  # (T, P, d, d)
    C: np.ndarray  # (T, P, d, d)
    mass: np.ndarray
    volume: np.ndarray
    part: np.ndarray
    dt: float
    substeps: int
    warnings: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i) -> ParticleState:
        return ParticleState(self.x[i], self.v[i], self.F[i], self.C[i], self.mass, self.volume, self.part)

    def reversed(self) -> "Trajectory":
        return Trajectory(self.x[::-1], self.v[::-1], self.F[::-1], self.C[::-1], self.mass,
                          self.volume, self.part, self.dt, self.substeps, list(self.warnings))


# ---------------------------------------------------------------------------
# kernels
#
# Kernels are generated per spatial dimension so that the dimension is a
# compile-time constant: small fixed-size loops unroll and the helpers inline,
# which is an order of magnitude faster than runtime-sized loops.


@functools.lru_cache(maxsize=None)
def kernels(D: int):
    """Compile (once per process) the simulator kernels for dimension ``D``."""
    if D not in (2, 3):
        raise ValueError("only 2-D and 3-D simulation is supported")
    inline = numba.njit(inline="always")

    @inline
    def det(A):
        if D == 2:
            return A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
                - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
                + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))

    @inline
    def matmul_bt(A, B, out):
        # out = A @ B.T
        for i in range(D):
            for j in range(D):
                acc = 0.0
                for k in range(D):
                    acc += A[i, k] * B[j, k]
                out[i, j] = acc

    @inline
    def jacobi_eig(S, V, lam):
        # cyclic Jacobi on a symmetric matrix; S is overwritten
        for i in range(D):
            for j in range(D):
                V[i, j] = 1.0 if i == j else 0.0
        for sweep in range(30):
            off = 0.0
            for p in range(D):
                for q in range(p + 1, D):
                    off += S[p, q] * S[p, q]
            if off < 1e-30:
                break
            for p in range(D):
                for q in range(p + 1, D):
                    if S[p, q] == 0.0:
                        continue
                    theta = (S[q, q] - S[p, p]) / (2.0 * S[p, q])
                    t = (1.0 if theta >= 0.0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(D):
                        skp = S[k, p]
                        skq = S[k, q]
                        S[k, p] = c * skp - s * skq
                        S[k, q] = s * skp + c * skq
                    for k in range(D):
                        spk = S[p, k]
                        sqk = S[q, k]
                        S[p, k] = c * spk - s * sqk
                        S[q, k] = s * spk + c * sqk
                    for k in range(D):
                        vkp = V[k, p]
                        vkq = V[k, q]
                        V[k, p] = c * vkp - s * vkq
                        V[k, q] = s * vkp + c * vkq
        for i in range(D):
            lam[i] = S[i, i]

    @inline
    def svd(F, U, sig, V, work):
        """F = U diag(sig) V^T with U, V proper rotations (det(F) > 0 assumed)."""
        if D == 2:
            # polar decomposition F = R S, then eigen-decomposition of the symmetric S
            x = F[0, 0] + F[1, 1]
            y = F[1, 0] - F[0, 1]
            n = math.sqrt(x * x + y * y)
            if n == 0.0:
                cr, sr = 1.0, 0.0
            else:
                cr, sr = x / n, y / n
            a = cr * F[0, 0] + sr * F[1, 0]
            b = cr * F[0, 1] + sr * F[1, 1]
            e = -sr * F[0, 1] + cr * F[1, 1]
            ang = 0.5 * math.atan2(2.0 * b, a - e)
            c = math.cos(ang)
            s = math.sin(ang)
            sig[0] = a * c * c + 2.0 * b * c * s + e * s * s
            sig[1] = a * s * s - 2.0 * b * c * s + e * c * c
            V[0, 0] = c
            V[0, 1] = -s
            V[1, 0] = s
            V[1, 1] = c
            U[0, 0] = cr * c - sr * s
            U[0, 1] = -cr * s - sr * c
            U[1, 0] = sr * c + cr * s
            U[1, 1] = -sr * s + cr * c
            return
        for i in range(D):
            for j in range(D):
                acc = 0.0
                for k in range(D):
                    acc += F[k, i] * F[k, j]
                work[i, j] = acc
        jacobi_eig(work, V, sig)
        if det(V) < 0.0:
            for i in range(D):
                V[i, D - 1] = -V[i, D - 1]
        for j in range(D):
            sig[j] = math.sqrt(max(sig[j], 0.0))
            inv = 1.0 / max(sig[j], 1e-300)
            for i in range(D):
                acc = 0.0
                for k in range(D):
                    acc += F[i, k] * V[k, j]
                U[i, j] = acc * inv

    @inline
    def rotation(F, U, sig, V, work, R):
        if D == 2:
            x = F[0, 0] + F[1, 1]
            y = F[1, 0] - F[0, 1]
            n = math.sqrt(x * x + y * y)
            if n == 0.0:
                cr, sr = 1.0, 0.0
            else:
                cr, sr = x / n, y / n
            R[0, 0] = cr
            R[0, 1] = -sr
            R[1, 0] = sr
            R[1, 1] = cr
            return
        svd(F, U, sig, V, work)
        matmul_bt(U, V, R)

    @inline
    def kirchhoff(F, mu, lam, U, sig, V, work, R, tau):
        # fixed corotated: tau = 2 mu (F - R) F^T + lam (J - 1) J I
        rotation(F, U, sig, V, work, R)
        J = det(F)
        for i in range(D):
            for j in range(D):
                acc = 0.0
                for k in range(D):
                    acc += (F[i, k] - R[i, k]) * F[j, k]
                tau[i, j] = 2.0 * mu * acc
            tau[i, i] += lam * (J - 1.0) * J

    @numba.njit
    def return_map(F, mu, lam, ys, visc, alpha, mode, dt, yield_cap, U, sig, V, work, eps):
        """Project a trial deformation gradient in place; ``mode`` 0 von Mises, 1 Drucker-Prager."""
        if mode == 0 and ys >= yield_cap:
            return
        svd(F, U, sig, V, work)
        tr = 0.0
        for i in range(D):
            eps[i] = math.log(max(sig[i], 1e-8))
            tr += eps[i]
        norm = 0.0
        for i in range(D):
            h = eps[i] - tr / D
            norm += h * h
        norm = math.sqrt(norm)
        if mode == 0:
            excess = norm - ys / (2.0 * mu)
            if excess <= 0.0:
                return
            # Perzyna-type relaxation: full return as visc -> 0, none as visc -> inf
            shrink = excess / (1.0 + visc / (2.0 * mu * dt)) / norm
            for i in range(D):
                eps[i] -= shrink * (eps[i] - tr / D)
        else:
            if tr >= 0.0:
                for i in range(D):
                    eps[i] = 0.0
            else:
                dgamma = norm + (D * lam + 2.0 * mu) / (2.0 * mu) * tr * alpha
                if dgamma <= 0.0:
                    return
                for i in range(D):
                    eps[i] -= dgamma / norm * (eps[i] - tr / D)
        for i in range(D):
            for k in range(D):
                work[i, k] = U[i, k] * math.exp(eps[k])
        matmul_bt(work, V, F)

    @inline
    def weights(x, p, origin, inv_dx, res, base, fx, w):
        for a in range(D):
            g = (x[p, a] - origin[a]) * inv_dx
            if not (g >= 0.5 and g < res[a] - 1.5):
                return False
            b = int(math.floor(g - 0.5))
            base[a] = b
            f = g - b
            fx[a] = f
            w[0, a] = 0.5 * (1.5 - f) ** 2
            w[1, a] = 0.75 - (f - 1.0) ** 2
            w[2, a] = 0.5 * (f - 0.5) ** 2
        return True

    @inline
    def node_index(base, stencil, k, res):
        flat = 0
        for a in range(D):
            flat = flat * res[a] + base[a] + stencil[k, a]
        return flat

    @numba.njit
    def stress(F, mu, lam):
        tau = np.empty((D, D))
        kirchhoff(F, mu, lam, np.empty((D, D)), np.empty(D), np.empty((D, D)),
                  np.empty((D, D)), np.empty((D, D)), tau)
        return tau

    @numba.njit
    def plastic(F, mu, lam, ys, visc, alpha, mode, dt, yield_cap):
        out = F.copy()
        return_map(out, mu, lam, ys, visc, alpha, mode, dt, yield_cap, np.empty((D, D)),
                   np.empty(D), np.empty((D, D)), np.empty((D, D)), np.empty(D))
        return out

    @numba.njit
    def p2g(x, v, F, C, mass, vol, mu, lam, labels, load_part, load_vec, load_t0, load_t1, t,
            res, origin, dx, dt, stencil, grid_m, grid_p, grid_f, diag_row):
        """Scatter particles to the grid; returns the first particle off the grid or -1."""
        P = x.shape[0]
        inv_dx = 1.0 / dx
        n_st = stencil.shape[0]
        base = np.empty(D, dtype=np.int64)
        fx = np.empty(D)
        w = np.empty((3, D))
        dpos = np.empty(D)
        fext = np.empty(D)
        mv = np.empty(D)
        U = np.empty((D, D))
        sig = np.empty(D)
        V = np.empty((D, D))
        work = np.empty((D, D))
        R = np.empty((D, D))
        tau = np.empty((D, D))
        Fp = np.empty((D, D))
        affine = np.empty((D, D))
        grid_m[:] = 0.0
        grid_p[:, :] = 0.0
        grid_f[:, :] = 0.0
        pm = 0.0
        pmom = np.zeros(D)
        vmax = 0.0
        n_loads = load_part.shape[0]
        for p in range(P):
            if not weights(x, p, origin, inv_dx, res, base, fx, w):
                return p
            for a in range(D):
                for b in range(D):
                    Fp[a, b] = F[p, a, b]
            kirchhoff(Fp, mu[p], lam[p], U, sig, V, work, R, tau)
            scale = -dt * vol[p] * 4.0 * inv_dx * inv_dx
            m = mass[p]
            for a in range(D):
                for b in range(D):
                    affine[a, b] = scale * tau[a, b] + m * C[p, a, b]
                fext[a] = 0.0
                mv[a] = m * v[p, a]
            for k in range(n_loads):
                if labels[p] == load_part[k] and t >= load_t0[k] and t < load_t1[k]:
                    for a in range(D):
                        fext[a] += load_vec[k, a] * vol[p]
            pm += m
            sp = 0.0
            for a in range(D):
                pmom[a] += mv[a]
                sp += v[p, a] * v[p, a]
            vmax = max(vmax, math.sqrt(sp))
            for k in range(n_st):
                weight = 1.0
                for a in range(D):
                    o = stencil[k, a]
                    dpos[a] = (o - fx[a]) * dx
                    weight *= w[o, a]
                ni = node_index(base, stencil, k, res)
                grid_m[ni] += weight * m
                for a in range(D):
                    acc = mv[a]
                    for b in range(D):
                        acc += affine[a, b] * dpos[b]
                    grid_p[ni, a] += weight * acc
                    grid_f[ni, a] += weight * fext[a]
        if diag_row.shape[0] > 0:
            gm = 0.0
            gmom = np.zeros(D)
            for ni in range(grid_m.shape[0]):
                gm += grid_m[ni]
                for a in range(D):
                    gmom[a] += grid_p[ni, a]
            diag_row[0] = gm
            diag_row[1] = pm
            for a in range(D):
                diag_row[2 + a] = gmom[a]
                diag_row[2 + D + a] = pmom[a]
            diag_row[2 + 2 * D] = vmax
        return -1

    @numba.njit
    def grid_update(grid_m, grid_p, grid_f, res, gravity, dt, bc_axis, bc_side, bc_type, bc_thick,
                    clamped):
        # grid_p is converted to velocity in place
        node = np.empty(D, dtype=np.int64)
        n_bc = bc_axis.shape[0]
        has_clamp = clamped.shape[0] > 0
        for ni in range(grid_m.shape[0]):
            m = grid_m[ni]
            if m <= MASS_EPS or (has_clamp and clamped[ni]):
                for a in range(D):
                    grid_p[ni, a] = 0.0
                continue
            for a in range(D):
                grid_p[ni, a] = (grid_p[ni, a] + dt * grid_f[ni, a]) / m + dt * gravity[a]
            if n_bc > 0:
                rem = ni
                for a in range(D - 1, -1, -1):
                    node[a] = rem % res[a]
                    rem //= res[a]
                for k in range(n_bc):
                    a = bc_axis[k]
                    if bc_side[k] < 0:
                        hit = node[a] < bc_thick[k]
                    else:
                        hit = node[a] > res[a] - 1 - bc_thick[k]
                    if hit:
                        if bc_type[k] == 0:
                            for b in range(D):
                                grid_p[ni, b] = 0.0
                        elif grid_p[ni, a] * bc_side[k] > 0.0:
                            grid_p[ni, a] = 0.0

    @numba.njit
    def g2p(x, v, F, C, mu, lam, ys, visc, alpha, mode, anchored, x_anchor, v_anchor,
            res, origin, dx, dt, yield_cap, stencil, grid_v):
        """Gather grid velocities and update F; returns (status, particle)."""
        P = x.shape[0]
        inv_dx = 1.0 / dx
        n_st = stencil.shape[0]
        base = np.empty(D, dtype=np.int64)
        fx = np.empty(D)
        w = np.empty((3, D))
        dpos = np.empty(D)
        nv = np.empty(D)
        nC = np.empty((D, D))
        Fn = np.empty((D, D))
        U = np.empty((D, D))
        sig = np.empty(D)
        V = np.empty((D, D))
        work = np.empty((D, D))
        eps = np.empty(D)
        for p in range(P):
            weights(x, p, origin, inv_dx, res, base, fx, w)
            for a in range(D):
                nv[a] = 0.0
                for b in range(D):
                    nC[a, b] = 0.0
            for k in range(n_st):
                weight = 1.0
                for a in range(D):
                    o = stencil[k, a]
                    dpos[a] = (o - fx[a]) * dx
                    weight *= w[o, a]
                ni = node_index(base, stencil, k, res)
                for a in range(D):
                    gv = weight * grid_v[ni, a]
                    nv[a] += gv
                    for b in range(D):
                        nC[a, b] += 4.0 * inv_dx * inv_dx * gv * dpos[b]
            if anchored[p]:
                for a in range(D):
                    v[p, a] = v_anchor[p, a]
                    x[p, a] = x_anchor[p, a]
                    for b in range(D):
                        C[p, a, b] = 0.0
            else:
                for a in range(D):
                    v[p, a] = nv[a]
                    x[p, a] += dt * nv[a]
                    for b in range(D):
                        C[p, a, b] = nC[a, b]
            # F <- (I + dt C) F, then plastic projection
            for a in range(D):
                for b in range(D):
                    acc = F[p, a, b]
                    for k in range(D):
                        acc += dt * nC[a, k] * F[p, k, b]
                    Fn[a, b] = acc
            if mode[p] != 0 or ys[p] < yield_cap:
                return_map(Fn, mu[p], lam[p], ys[p], visc[p], alpha[p], mode[p], dt, yield_cap,
                           U, sig, V, work, eps)
            J = det(Fn)
            finite = np.isfinite(J)
            for a in range(D):
                finite = finite and np.isfinite(x[p, a]) and np.isfinite(v[p, a])
            if not finite:
                return NONFINITE, p
            if J <= 0.0:
                return INVERTED, p
            for a in range(D):
                for b in range(D):
                    F[p, a, b] = Fn[a, b]
        return OK, -1

    @numba.njit
    def substeps(n_sub, step0, x, v, F, C, mass, vol, mu, lam, ys, visc, alpha, mode,
                 anchored, x_anchor, v_anchor, labels,
                 load_part, load_vec, load_t0, load_t1,
                 res, origin, dx, gravity, dt, yield_cap,
                 bc_axis, bc_side, bc_type, bc_thick, clamped,
                 stencil, grid_m, grid_p, grid_f, diag):
        """Advance ``n_sub`` substeps in place; returns (status, substep, particle)."""
        empty = np.zeros(0)
        for s in range(n_sub):
            t = (step0 + s) * dt
            row = diag[s] if diag.shape[0] > 0 else empty
            bad = p2g(x, v, F, C, mass, vol, mu, lam, labels, load_part, load_vec, load_t0, load_t1,
                      t, res, origin, dx, dt, stencil, grid_m, grid_p, grid_f, row)
            if bad >= 0:
                return LEFT_GRID, step0 + s, bad
            grid_update(grid_m, grid_p, grid_f, res, gravity, dt, bc_axis, bc_side, bc_type, bc_thick,
                        clamped)
            status, p = g2p(x, v, F, C, mu, lam, ys, visc, alpha, mode, anchored, x_anchor, v_anchor,
                            res, origin, dx, dt, yield_cap, stencil, grid_p)
            if status != OK:
                return status, step0 + s, p
        return OK, step0 + n_sub, -1

    return SimpleNamespace(stress=stress, plastic=plastic, p2g=p2g, grid_update=grid_update,
                           g2p=g2p, substeps=substeps)


# ---------------------------------------------------------------------------
# Python-facing API


def lame(youngs, poisson):
    youngs = np.asarray(youngs, dtype=np.float64)
    poisson = np.asarray(poisson, dtype=np.float64)
    mu = youngs / (2.0 * (1.0 + poisson))
    lam = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


def _check_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != 6:
        raise ValueError("theta must have 6 entries")
    if np.any(theta <= 0):
        raise ValueError("theta must be positive")
    if np.any(theta[..., NU] >= 0.5):
        raise ValueError("poisson_ratio >= 0.5 (incompressible limit) is not supported")
    return theta


def constitutive_stress(F, theta) -> np.ndarray:
    """Fixed-corotated Kirchhoff stress for one deformation gradient."""
    F = np.ascontiguousarray(F, dtype=np.float64)
    theta = _check_theta(theta)
    if not np.linalg.det(F) > 0:
        raise ValueError("deformation gradient must have det(F) > 0")
    mu, lam = lame(theta[E], theta[NU])
    return kernels(F.shape[0]).stress(F, float(mu), float(lam))


def friction_alpha(angle_deg):
    s = np.sin(np.radians(angle_deg))
    return np.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def apply_plasticity(F_trial, theta, dt, mode: str = "von_mises",
                     yield_cap: float = ELASTIC_YIELD_CAP) -> np.ndarray:
    """Return-map a trial deformation gradient onto the admissible set."""
    F_trial = np.ascontiguousarray(F_trial, dtype=np.float64)
    theta = _check_theta(theta)
    mu, lam = lame(theta[E], theta[NU])
    code = PLASTICITY_MODES.index(mode)
    return kernels(F_trial.shape[0]).plastic(F_trial, float(mu), float(lam), float(theta[YIELD]), float(theta[VISC]),
                       float(friction_alpha(theta[FRICTION])), code, float(dt), float(yield_cap))


def particle_theta(cfg: SceneConfig, params) -> np.ndarray:
    """Resolve part-level, object-level or per-particle parameters to a ``(P, 6)`` table."""
    if isinstance(params, PartParams):
        params = params.theta
    theta = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if theta.shape[0] == cfg.n_particles and theta.shape[0] != cfg.n_parts:
        return _check_theta(theta)
    if theta.shape[0] == 1:
        return _check_theta(np.repeat(theta, cfg.n_particles, axis=0))
    if theta.shape[0] == cfg.n_parts:
        return _check_theta(theta[cfg.labels])
    raise ValueError(f"params with {theta.shape[0]} rows match neither {cfg.n_parts} parts "
                     f"nor {cfg.n_particles} particles")


def initial_state(cfg: SceneConfig, params) -> ParticleState:
    theta = particle_theta(cfg, params)
    P, d = cfg.positions.shape
    volume = np.full(P, float(cfg.particle_volume))
    return ParticleState(
        x=cfg.positions.copy(),
        v=cfg.velocities.copy(),
        F=np.repeat(np.eye(d)[None], P, axis=0),
        C=np.zeros((P, d, d)),
        mass=theta[:, DENSITY] * volume,
        volume=volume,
        part=cfg.labels.copy(),
    )


class _Stepper:
    """Packs scene and parameter arrays for the substep kernel."""

    def __init__(self, cfg: SceneConfig, params, state: ParticleState):
        d = cfg.dim
        theta = particle_theta(cfg, params)
        self.cfg = cfg
        self.mu, self.lam = lame(theta[:, E], theta[:, NU])
        self.ys = np.ascontiguousarray(theta[:, YIELD])
        self.visc = np.ascontiguousarray(theta[:, VISC])
        self.alpha = friction_alpha(theta[:, FRICTION])
        modes = np.array([PLASTICITY_MODES.index(p.plasticity) for p in cfg.parts], dtype=np.int64)
        self.mode = modes[cfg.labels]
        # density is live: mass is recomputed from the current parameters
        state.mass = theta[:, DENSITY] * state.volume
        self.anchored = np.zeros(cfg.n_particles, dtype=np.bool_)
        self.anchored[cfg.anchors] = True
        self.x_anchor = cfg.positions.copy()
        self.v_anchor = cfg.velocities.copy()
        self.load_part = np.array([l.part for l in cfg.loads], dtype=np.int64)
        self.load_vec = np.array([l.force_density for l in cfg.loads], dtype=np.float64).reshape(-1, d)
        self.load_t0 = np.array([l.t_start for l in cfg.loads], dtype=np.float64)
        self.load_t1 = np.array([l.t_end for l in cfg.loads], dtype=np.float64)
        self.res = np.array(cfg.grid.resolution, dtype=np.int64)
        self.origin = np.array(cfg.grid.origin, dtype=np.float64)
        self.bc_axis = np.array([b.axis for b in cfg.boundaries], dtype=np.int64)
        self.bc_side = np.array([b.side for b in cfg.boundaries], dtype=np.int64)
        self.bc_type = np.array([0 if b.type == "sticky" else 1 for b in cfg.boundaries], dtype=np.int64)
        self.bc_thick = np.array([b.thickness for b in cfg.boundaries], dtype=np.int64)
        self.stencil = np.array(np.meshgrid(*[[0, 1, 2]] * d, indexing="ij")).reshape(d, -1).T.copy()
        n_nodes = int(np.prod(self.res))
        self.grid_m = np.zeros(n_nodes)
        self.grid_p = np.zeros((n_nodes, d))
        self.grid_f = np.zeros((n_nodes, d))
        self.clamped = self._clamp_mask(state) if cfg.anchors.size else np.zeros(0, dtype=np.bool_)

    def _clamp_mask(self, state: ParticleState) -> np.ndarray:
        # Anchored particles never move, so the nodes they dominate are fixed
        # once.  Resetting only the particles would leave a soft pivot because
        # shared nodes still carry the free neighbours' momentum.
        rest = _state_arrays(state)
        rest.x[:] = self.x_anchor
        total = np.zeros_like(self.grid_m)
        _p2g_only(rest, self, total, np.zeros_like(self.grid_p))
        rest.mass = np.where(self.anchored, rest.mass, 0.0)
        fixed = np.zeros_like(self.grid_m)
        _p2g_only(rest, self, fixed, np.zeros_like(self.grid_p))
        return fixed > 0.5 * np.maximum(total, MASS_EPS)

    def run(self, state: ParticleState, n_sub: int, step0: int, diag=None):
        cfg = self.cfg
        if diag is None:
            diag = np.zeros((0, 3 + 2 * cfg.dim))
        status, step, particle = kernels(cfg.dim).substeps(
            n_sub, step0, state.x, state.v, state.F, state.C, state.mass, state.volume,
            self.mu, self.lam, self.ys, self.visc, self.alpha, self.mode,
            self.anchored, self.x_anchor, self.v_anchor, cfg.labels,
            self.load_part, self.load_vec, self.load_t0, self.load_t1,
            self.res, self.origin, float(cfg.grid.cell_size),
            cfg.gravity, float(cfg.dt), ELASTIC_YIELD_CAP,
            self.bc_axis, self.bc_side, self.bc_type, self.bc_thick, self.clamped,
            self.stencil, self.grid_m, self.grid_p, self.grid_f, diag,
        )
        if status != OK:
            raise SimulationError(
                f"simulation aborted at substep {step}: {_STATUS_TEXT[status]} (particle {particle})",
                substep=int(step), particle=int(particle))
        return step


def _cfl_warnings(diag, cfg, step0):
    limit = cfg.grid.cell_size / cfg.dt
    out = []
    for i in np.flatnonzero(diag[:, -1] > limit):
        out.append({"substep": int(step0 + i), "max_speed": float(diag[i, -1]),
                    "message": "CFL violation: max |v| * dt exceeds the cell size"})
    return out


def _state_arrays(state: ParticleState) -> ParticleState:
    s = state.copy()
    for name in ("x", "v", "F", "C", "mass", "volume"):
        setattr(s, name, np.ascontiguousarray(getattr(s, name), dtype=np.float64))
    return s


def simulate_step(state: ParticleState, cfg: SceneConfig, params, step_index: int = 0,
                  info: list | None = None) -> ParticleState:
    """Advance one substep and return the new state (the input is not modified).

    ``step_index`` sets the simulation time used for time-windowed loads.  When
    ``info`` is a list, a :class:`StepInfo` and any CFL warning are appended.
    """
    new = _state_arrays(state)
    stepper = _Stepper(cfg, params, new)
    diag = np.zeros((1, 3 + 2 * cfg.dim))
    stepper.run(new, 1, step_index, diag)
    if info is not None:
        d = cfg.dim
        info.append(StepInfo(diag[0, 0], diag[0, 1], diag[0, 2:2 + d].copy(),
                             diag[0, 2 + d:2 + 2 * d].copy(), diag[0, -1]))
        info.extend(_cfl_warnings(diag, cfg, step_index))
    return new


def p2g(state: ParticleState, cfg: SceneConfig, params) -> GridState:
    """Particle-to-grid transfer only (no forces, no boundary handling)."""
    s = _state_arrays(state)
    stepper = _Stepper(cfg, params, s)
    res = tuple(cfg.grid.resolution)
    d = cfg.dim
    grid_m = np.zeros_like(stepper.grid_m)
    grid_p = np.zeros_like(stepper.grid_p)
    _p2g_only(s, stepper, grid_m, grid_p)
    vel = np.where(grid_m[:, None] > MASS_EPS, grid_p / np.maximum(grid_m, MASS_EPS)[:, None], 0.0)
    return GridState(grid_p.reshape(res + (d,)), grid_m.reshape(res), vel.reshape(res + (d,)))


def _p2g_only(s, stepper, grid_m, grid_p):
    cfg = stepper.cfg
    grid_f = np.zeros_like(grid_p)
    bad = kernels(cfg.dim).p2g(s.x, s.v, s.F, s.C, s.mass, s.volume, stepper.mu, stepper.lam, cfg.labels,
               stepper.load_part, stepper.load_vec, stepper.load_t0, stepper.load_t1, 0.0,
               stepper.res, stepper.origin, float(cfg.grid.cell_size), float(cfg.dt),
               stepper.stencil, grid_m, grid_p, grid_f, np.zeros(0))
    if bad >= 0:
        raise SimulationError(f"particle {bad} left the grid", particle=int(bad))


def rollout(cfg: SceneConfig, params, frames: int | None = None, diagnostics: list | None = None,
            state: ParticleState | None = None) -> Trajectory:
    """Simulate ``frames`` frames of ``cfg.substeps`` substeps each.

    ``params`` may be a :class:`PartParams`, an ``(M, 6)`` part table, a single
    shared ``(6,)`` vector or a per-particle ``(P, 6)`` table.  When
    ``diagnostics`` is a list, one :class:`StepInfo` per substep is appended.
    """
    frames = cfg.frames if frames is None else int(frames)
    if frames < 1:
        raise ValueError("frames must be >= 1")
    s = _state_arrays(initial_state(cfg, params) if state is None else state)
    stepper = _Stepper(cfg, params, s)
    P, d = s.x.shape
    xs = np.empty((frames, P, d))
    vs = np.empty((frames, P, d))
    Fs = np.empty((frames, P, d, d))
    Cs = np.empty((frames, P, d, d))
    warnings = []
    step = 0
    for f in range(frames):
        diag = np.zeros((cfg.substeps, 3 + 2 * d))
        step0 = step
        step = stepper.run(s, cfg.substeps, step, diag)
        warnings.extend(_cfl_warnings(diag, cfg, step0))
        if diagnostics is not None:
            for row in diag:
                diagnostics.append(StepInfo(row[0], row[1], row[2:2 + d].copy(),
                                            row[2 + d:2 + 2 * d].copy(), row[-1]))
        xs[f] = s.x
        vs[f] = s.v
        Fs[f] = s.F
        Cs[f] = s.C
    if warnings:
        log.warning("%d substeps violated the CFL condition (first at substep %d)",
                    len(warnings), warnings[0]["substep"])
    return Trajectory(xs, vs, Fs, Cs, s.mass.copy(), s.volume.copy(), s.part.copy(),
                      cfg.dt, cfg.substeps, warnings)


# ---------------------------------------------------------------------------
# trajectory export


def save_trajectory(traj: Trajectory, path) -> None:
    """Write ``<path>`` (magic + float32 frame blocks of x then v) and ``<path>.json``."""
    path = Path(path)
    T, P, d = traj.x.shape
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        for t in range(T):
            fh.write(np.ascontiguousarray(traj.x[t], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(traj.v[t], dtype="<f4").tobytes())
    manifest = {"schema_version": 1, "frames": T, "particle_count": P, "dim": d,
                "dt": traj.dt, "substeps": traj.substeps, "fields": ["x", "v"],
                "mass": traj.mass.tolist(), "part": traj.part.tolist()}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1))


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    if raw[:8] != TRAJ_MAGIC:
        raise ValueError(f"{path}: bad magic header, expected {TRAJ_MAGIC!r}")
    T, P, d = manifest["frames"], manifest["particle_count"], manifest["dim"]
    data = np.frombuffer(raw[8:], dtype="<f4").astype(np.float64)
    if data.size != T * 2 * P * d:
        raise ValueError(f"{path}: expected {T} frames of {P} particles, got {data.size} floats")
    blocks = data.reshape(T, 2, P, d)
    eye = np.broadcast_to(np.eye(d), (T, P, d, d)).copy()
    return Trajectory(blocks[:, 0].copy(), blocks[:, 1].copy(), eye, np.zeros((T, P, d, d)),
                      np.asarray(manifest.get("mass", np.ones(P))), np.ones(P),
                      np.asarray(manifest.get("part", np.zeros(P)), dtype=np.int64),
                      manifest["dt"], manifest["substeps"])
