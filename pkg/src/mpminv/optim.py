"""Log-domain parameter optimization with finite-difference gradients and AdamW.

The trainable variables are ``xi = log(theta)``.  Each iteration clips ``xi``
to the log of the bounds, recovers ``theta = exp(xi)``, rolls out the full
clip, renders it, evaluates the supervision loss, and takes one AdamW step on
the clipped log-domain gradient ``dL/dxi = dL/dtheta * theta``.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dms import DMSConfig, LossReport, dms_loss, reference_spectrum
from .mpm import SimulationError, rollout
from .params import DENSITY, PARAM_NAMES, ParamBounds, ParamLayout, PartParams, param_index
from .render import VideoTensor, render_scene
from .scene import SceneConfig

log = logging.getLogger(__name__)

GRANULARITIES = ("part", "object", "particle")


class OptimizationError(RuntimeError):
    """Optimization aborted; ``diagnostics`` holds the recorded warnings."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


# ---------------------------------------------------------------------------
# log-domain primitives


def log_init(theta, eps: float = 1e-8) -> np.ndarray:
    """``xi = log(max(theta, eps))``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.log(np.maximum(np.asarray(theta, dtype=np.float64), eps))


def clip_and_recover(xi, bounds: ParamBounds, eps: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Clamp ``xi`` to ``[log max(l, eps), log max(u, eps)]`` and return ``(xi, exp(xi))``."""
    eps = bounds.eps if eps is None else eps
    lo = np.log(np.maximum(bounds.lower, eps))
    hi = np.log(np.maximum(bounds.upper, eps))
    xi = np.clip(np.asarray(xi, dtype=np.float64), lo, hi)
    return xi, np.exp(xi)


def grad_to_log(grad_theta, theta) -> np.ndarray:
    """Chain rule through ``theta = exp(xi)``: ``dL/dxi = dL/dtheta * theta``."""
    grad_theta = np.asarray(grad_theta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if grad_theta.shape != theta.shape:
        raise ValueError(f"shape mismatch: {grad_theta.shape} vs {theta.shape}")
    return grad_theta * theta


def _safe_eval(loss_fn, x):
    try:
        value = float(loss_fn(x))
    except (SimulationError, FloatingPointError, ValueError) as exc:
        return None, str(exc)
    if not np.isfinite(value):
        return None, "non-finite loss"
    return value, None


def fd_gradient(loss_fn, theta, h: float = 1e-4, bounds: ParamBounds | None = None,
                warnings: list | None = None, f0: float | None = None, pool=None) -> np.ndarray:
    """Finite-difference gradient with multiplicative steps ``h * |theta_j|``.

    Central differences are used where both probes stay in bounds; at a bound,
    or when one probe fails, a one-sided difference against ``f(theta)`` is
    used.  If both probes fail the coordinate's gradient is 0 and a record is
    appended to ``warnings``.  ``pool`` (an executor) evaluates probes
    concurrently; results do not depend on it.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if h <= 0:
        raise ValueError("h must be positive")
    d = theta.size
    steps = h * np.where(theta != 0, np.abs(theta), 1.0)
    lo = np.full(d, -np.inf) if bounds is None else bounds.lower
    hi = np.full(d, np.inf) if bounds is None else bounds.upper

    probes = []  # (coordinate, sign, point)
    for j in range(d):
        for sign in (1.0, -1.0):
            x = theta.copy()
            x[j] += sign * steps[j]
            if lo[j] <= x[j] <= hi[j]:
                probes.append((j, sign, x))
    mapper = pool.map if pool is not None else map
    results = list(mapper(lambda p: _safe_eval(loss_fn, p[2]), probes))
    value = {(j, sign): r for (j, sign, _), r in zip(probes, results)}

    def base():
        nonlocal f0
        if f0 is None:
            f0, err = _safe_eval(loss_fn, theta)
            if f0 is None:
                raise SimulationError(f"loss undefined at the expansion point: {err}")
        return f0

    grad = np.zeros(d)
    for j in range(d):
        fp = value.get((j, 1.0), (None, "out of bounds"))[0]
        fm = value.get((j, -1.0), (None, "out of bounds"))[0]
        if fp is not None and fm is not None:
            grad[j] = (fp - fm) / (2.0 * steps[j])
        elif fp is not None:
            grad[j] = (fp - base()) / steps[j]
        elif fm is not None:
            grad[j] = (base() - fm) / steps[j]
        elif warnings is not None:
            warnings.append({"coordinate": j, "message": "both finite-difference probes failed; gradient set to 0"})
    return grad


# ---------------------------------------------------------------------------
# AdamW


@dataclass(frozen=True)
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    adam_eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "OptState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def clip_grad_norm(g, max_norm: float) -> np.ndarray:
    """Rescale ``g`` so its Euclidean norm is at most ``max_norm``."""
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if max_norm > 0 and norm > max_norm:
        return g * (max_norm / norm)
    return g


def adamw_step(state: OptState, xi, g, lr: float | None = None) -> tuple[OptState, np.ndarray]:
    """One AdamW update on ``xi`` with global-norm gradient clipping.

    ``lr`` overrides the state's learning rate for this step only.
    """
    xi = np.asarray(xi, dtype=np.float64)
    g = clip_grad_norm(g, state.clip_norm)
    if g.shape != xi.shape or state.m.shape != xi.shape:
        raise ValueError("gradient, moments and variables must have the same shape")
    lr = state.lr if lr is None else lr
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    xi = xi * (1 - lr * state.weight_decay)
    xi = xi - lr * m_hat / (np.sqrt(v_hat) + state.adam_eps)
    return replace(state, m=m, v=v, step=step), xi


# ---------------------------------------------------------------------------
# the optimization loop


@dataclass
class OptimizeOptions:
    iterations: int = 150
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    fd_step: float = 1e-2  # relative step for the parameter probes
    granularity: str = "part"  # "part", "object" or "particle"
    trainable: tuple[str, ...] = PARAM_NAMES
    update_density: bool = True
    loss: DMSConfig = field(default_factory=DMSConfig)
    max_blowups: int = 8
    subspace_dim: int = 8  # random directions per iteration in particle mode
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}; expected one of {GRANULARITIES}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in self.trainable:
            param_index(name)

    def active(self) -> tuple[int, ...]:
        idx = [param_index(n) for n in self.trainable]
        if not self.update_density:
            idx = [i for i in idx if i != DENSITY]
        if not idx:
            raise ValueError("no trainable parameters left")
        return tuple(sorted(idx))

    def to_json(self) -> dict:
        out = asdict(self)
        out["trainable"] = list(self.trainable)
        out["loss"] = self.loss.to_json()
        return out


@dataclass
class OptimizeResult:
    params: PartParams  # best-so-far part table (particle mode: part means)
    best_loss: float
    initial_loss: float
    trace: list
    warnings: list
    wall_time: float
    particle_theta: np.ndarray | None = None  # (P, 6) in particle mode
    best_iteration: int = 0

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "best_loss": self.best_loss,
            "initial_loss": self.initial_loss,
            "best_iteration": self.best_iteration,
            "trace": self.trace,
            "warnings": self.warnings,
            "wall_time_s": self.wall_time,
        }


class _Problem:
    """Maps the flat trainable vector to simulator parameters and a loss report."""

    def __init__(self, cfg: SceneConfig, ref: VideoTensor, init: PartParams, opts: OptimizeOptions):
        self.cfg = cfg
        self.ref = ref
        self.opts = opts
        self.base = init
        self.active = opts.active()
        self.frames = len(ref)
        self.ref_spec = reference_spectrum(ref, opts.loss) if opts.loss.use_spectral else None
        if opts.granularity == "particle":
            self.layout = None
            self.n_groups = cfg.n_particles
            start = init.per_particle(cfg.labels)[:, list(self.active)].reshape(-1)
            idx = list(self.active)
            self.bounds = ParamBounds(np.tile(init.bounds.lower[idx], cfg.n_particles),
                                      np.tile(init.bounds.upper[idx], cfg.n_particles), init.bounds.eps)
        else:
            self.layout = ParamLayout(init.n_parts, self.active, shared=opts.granularity == "object")
            self.n_groups = self.layout.groups
            start = self.layout.flatten(init)
            self.bounds = self.layout.bounds(init.bounds)
        self.start = start

    def params(self, theta_vec):
        if self.layout is not None:
            return self.layout.expand(theta_vec, self.base)
        table = self.base.per_particle(self.cfg.labels)
        table[:, list(self.active)] = np.asarray(theta_vec).reshape(self.cfg.n_particles, len(self.active))
        return table

    def report(self, theta_vec) -> LossReport:
        traj = rollout(self.cfg, self.params(theta_vec), frames=self.frames)
        video = render_scene(traj, self.cfg)
        return dms_loss(video, self.ref, self.opts.loss, self.ref_spec)

    def loss(self, theta_vec) -> float:
        return self.report(theta_vec).total

    def part_table(self, theta_vec) -> PartParams:
        """Part-level summary; particle mode reports each part's geometric mean."""
        if self.layout is not None:
            return self.params(theta_vec)
        table = self.params(theta_vec)
        theta = self.base.theta.copy()
        for m in range(self.base.n_parts):
            sel = self.cfg.labels == m
            if sel.any():
                theta[m] = np.exp(np.log(table[sel]).mean(axis=0))
        return PartParams(theta, self.base.bounds)


def _subspace(n_groups: int, n_active: int, k: int, rng) -> np.ndarray:
    """Orthonormal directions: one uniform mode per parameter, then ``k`` random ones."""
    dim = n_groups * n_active
    uniform = np.zeros((dim, n_active))
    for a in range(n_active):
        uniform[a::n_active, a] = 1.0 / np.sqrt(n_groups)
    k = min(k, dim - n_active)
    if k <= 0:
        return uniform.T
    q, _ = np.linalg.qr(np.hstack([uniform, rng.standard_normal((dim, k))]))
    # QR may flip signs; restore the uniform modes exactly
    q[:, :n_active] = uniform
    return q.T


def subspace_gradient(loss_xi, xi, directions, h: float, warnings: list | None = None,
                      pool=None) -> np.ndarray:
    """Projected central-difference gradient in log space along orthonormal ``directions``."""
    mapper = pool.map if pool is not None else map
    points = [xi + s * h * d for d in directions for s in (1.0, -1.0)]
    vals = list(mapper(lambda x: _safe_eval(loss_xi, x)[0], points))
    grad = np.zeros_like(xi)
    for k, d in enumerate(directions):
        fp, fm = vals[2 * k], vals[2 * k + 1]
        if fp is None or fm is None:
            if warnings is not None:
                warnings.append({"direction": k, "message": "subspace probe failed; direction skipped"})
            continue
        grad += (fp - fm) / (2 * h) * d
    return grad


def optimize(cfg: SceneConfig, ref: VideoTensor, init: PartParams, opts: OptimizeOptions | None = None,
             trace_path=None, callback=None) -> OptimizeResult:
    """Fit part parameters to the reference video.

    Returns the best-so-far parameters by total loss and the per-iteration
    trace.  A simulation failure at a new iterate rejects the step: the
    previous iterate is restored and the step retried at half the learning
    rate.  More than ``opts.max_blowups`` failures raise
    :class:`OptimizationError`.
    """
    opts = opts or OptimizeOptions()
    if len(ref) < 2:
        raise ValueError("the reference video needs at least 2 frames")
    if not init.bounds.contains(init.theta):
        raise ValueError("initial parameters lie outside their bounds")
    t_start = time.perf_counter()
    prob = _Problem(cfg, ref, init, opts)
    rng = np.random.default_rng(int(opts.seed) % 2**64)
    warnings: list = []
    trace: list = []
    sink = open(trace_path, "w") if trace_path is not None else None
    pool = ThreadPoolExecutor(opts.workers) if opts.workers > 1 else None
    state = OptState.zeros(prob.start.size, lr=opts.lr, beta1=opts.beta1, beta2=opts.beta2,
                           weight_decay=opts.weight_decay, clip_norm=opts.clip_norm)
    # the start is inside the bounds; keep it bit-exact instead of round-tripping through log/exp
    xi, theta = log_init(prob.start, prob.bounds.eps), prob.start.copy()
    try:
        report = prob.report(theta)
    except SimulationError as exc:
        raise OptimizationError(f"simulation fails at the initial parameters: {exc}") from exc
    initial = report.total
    best = (report.total, theta.copy(), 0)
    last_good = None  # (state, xi, gradient) before the latest step
    lr_scale = 1.0
    blowups = 0
    try:
        for it in range(opts.iterations + 1):
            record = {"iter": it, **report.to_json(), "lr": opts.lr * lr_scale,
                      "theta": [dict(zip(PARAM_NAMES, row)) for row in prob.part_table(theta).theta.tolist()]}
            if it == opts.iterations:
                _emit(trace, sink, record, callback)
                break
            if prob.layout is not None:
                g_theta = fd_gradient(prob.loss, theta, opts.fd_step, prob.bounds, warnings,
                                      f0=report.total, pool=pool)
                g = grad_to_log(g_theta, theta)
            else:
                dirs = _subspace(prob.n_groups, len(prob.active), opts.subspace_dim, rng)
                g = subspace_gradient(lambda x: prob.loss(clip_and_recover(x, prob.bounds)[1]),
                                      xi, dirs, np.log1p(opts.fd_step), warnings, pool)
            record["grad_norm"] = float(np.linalg.norm(g))
            _emit(trace, sink, record, callback)
            last_good = (state, xi, g)
            lr_scale = 1.0
            while True:
                state, xi_new = adamw_step(last_good[0], last_good[1], last_good[2], opts.lr * lr_scale)
                xi_new, theta_new = clip_and_recover(xi_new, prob.bounds)
                try:
                    report = prob.report(theta_new)
                    break
                except SimulationError as exc:
                    blowups += 1
                    lr_scale *= 0.5
                    warnings.append({"iter": it, "message": f"step rejected ({exc}); learning rate halved",
                                     "lr": opts.lr * lr_scale})
                    log.warning("iteration %d: step rejected, retrying with lr %.3g", it, opts.lr * lr_scale)
                    if blowups > opts.max_blowups:
                        raise OptimizationError(f"aborted after {blowups} simulation failures", warnings) from exc
            xi, theta = xi_new, theta_new
            if report.total < best[0]:
                best = (report.total, theta.copy(), it + 1)
    finally:
        if sink is not None:
            sink.close()
        if pool is not None:
            pool.shutdown()
    best_theta = best[1]
    return OptimizeResult(
        params=prob.part_table(best_theta),
        best_loss=best[0],
        initial_loss=initial,
        trace=trace,
        warnings=warnings,
        wall_time=time.perf_counter() - t_start,
        particle_theta=prob.params(best_theta) if prob.layout is None else None,
        best_iteration=best[2],
    )


def _emit(trace, sink, record, callback):
    trace.append(record)
    if sink is not None:
        sink.write(json.dumps(record) + "\n")
        sink.flush()
    if callback is not None:
        callback(record)
