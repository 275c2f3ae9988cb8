"""Simulation-driven initialization: log-space Latin hypercube search scored by MS-SSIM."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .metrics import ms_ssim
from .mpm import SimulationError, rollout
from .params import ParamBounds, ParamLayout, PartParams
from .render import VideoTensor, render_scene
from .scene import SceneConfig

log = logging.getLogger(__name__)

DEFAULT_CANDIDATES = 32
DEFAULT_INIT_FRAMES = 16


@dataclass
class CandidateSet:
    unit: np.ndarray  # (N, D) samples in [0, 1]
    log_values: np.ndarray  # (N, D) log10 of the parameters
    theta: np.ndarray  # (N, D) physical values
    bounds: ParamBounds
    seed: int
    scores: np.ndarray | None = None  # (N,), -inf for disqualified candidates
    init_frames: int = DEFAULT_INIT_FRAMES
    diagnostics: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def to_json(self) -> dict:
        scores = None if self.scores is None else [s if np.isfinite(s) else None for s in self.scores.tolist()]
        return {
            "seed": self.seed,
            "init_frames": self.init_frames,
            "bounds": self.bounds.to_json(),
            "unit": self.unit.tolist(),
            "log10_theta": self.log_values.tolist(),
            "theta": self.theta.tolist(),
            "scores": scores,
            "diagnostics": self.diagnostics,
        }


def lhs_sample(bounds: ParamBounds, n: int = DEFAULT_CANDIDATES, seed: int = 0) -> CandidateSet:
    """Latin hypercube sample of ``n`` points, uniform in log10 of each parameter.

    Each dimension is cut into ``n`` equal strata of the unit interval; every
    stratum receives exactly one jittered sample, and strata are shuffled
    independently per dimension.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(int(seed) % 2**64)
    d = bounds.dim
    strata = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    unit = (strata + rng.uniform(size=(n, d))) / n
    lo, hi = np.log10(bounds.lower), np.log10(bounds.upper)
    s = lo + (hi - lo) * unit
    theta = np.clip(10.0**s, bounds.lower, bounds.upper)  # guard the last ulp
    return CandidateSet(unit, s, theta, bounds, int(seed))


def candidate_params(vec, cfg: SceneConfig, layout: ParamLayout, base: PartParams | None = None) -> PartParams:
    return layout.expand(vec, cfg.part_params() if base is None else base)


def evaluate_candidate(params: PartParams, cfg: SceneConfig, ref: VideoTensor,
                       init_frames: int = DEFAULT_INIT_FRAMES) -> float:
    """Roll out ``init_frames`` frames and score them against the reference head by MS-SSIM.

    A simulation failure scores ``-inf`` (the candidate is disqualified).
    """
    if init_frames > len(ref):
        raise ValueError(f"init_frames={init_frames} exceeds the reference length {len(ref)}")
    try:
        traj = rollout(cfg, params, frames=init_frames)
    except SimulationError as exc:
        log.info("candidate disqualified: %s", exc)
        return float("-inf")
    return ms_ssim(render_scene(traj, cfg), ref.head(init_frames))


def select_index(scores) -> int:
    """Argmax of the finite scores; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(scores)
    if not finite.any():
        raise ValueError("all candidates were disqualified")
    # np.argmax returns the first maximum, which is the tie rule we want
    return int(np.argmax(np.where(finite, scores, -np.inf)))


def select_init(candidates: CandidateSet) -> tuple[int, np.ndarray]:
    """Index and parameter vector of the best-scoring candidate."""
    if candidates.scores is None:
        raise ValueError("candidates have not been scored")
    k = select_index(candidates.scores)
    return k, candidates.theta[k].copy()


def score_candidates(cands: CandidateSet, cfg: SceneConfig, ref: VideoTensor,
                     layout: ParamLayout | None = None, workers: int = 1) -> CandidateSet:
    """Fill ``cands.scores`` in place (and return ``cands``)."""
    layout = layout or ParamLayout(cfg.n_parts)
    base = cfg.part_params()

    def score(k):
        return evaluate_candidate(layout.expand(cands.theta[k], base), cfg, ref, cands.init_frames)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(score, range(cands.n)))
    else:
        scores = [score(k) for k in range(cands.n)]
    cands.scores = np.array(scores, dtype=np.float64)
    cands.diagnostics = [{"candidate": k, "message": "simulation failed; candidate disqualified"}
                         for k in np.flatnonzero(~np.isfinite(cands.scores)).tolist()]
    return cands


def init_search(cfg: SceneConfig, ref: VideoTensor, n: int = DEFAULT_CANDIDATES,
                init_frames: int = DEFAULT_INIT_FRAMES, seed: int = 0,
                layout: ParamLayout | None = None, workers: int = 1,
                extra: np.ndarray | None = None) -> tuple[CandidateSet, PartParams]:
    """Sample, score and select an initial parameter table.

    ``layout`` picks the searched entries; the default searches all six
    parameters of every part.  Entries outside the layout keep the scene's
    values.  ``extra`` rows (search-space vectors) are appended after the
    LHS candidates, e.g. a known guess to compare against.
    """
    layout = layout or ParamLayout(cfg.n_parts)
    cands = lhs_sample(layout.bounds(cfg.bounds), n, seed)
    cands.init_frames = init_frames
    if extra is not None:
        extra = np.atleast_2d(np.asarray(extra, dtype=np.float64))
        cands.theta = np.vstack([cands.theta, extra])
        cands.log_values = np.vstack([cands.log_values, np.log10(extra)])
        lo, hi = np.log10(cands.bounds.lower), np.log10(cands.bounds.upper)
        cands.unit = np.vstack([cands.unit, (np.log10(extra) - lo) / (hi - lo)])
    score_candidates(cands, cfg, ref, layout, workers)
    k, vec = select_init(cands)
    log.info("selected candidate %d with MS-SSIM %.5f", k, cands.scores[k])
    return cands, layout.expand(vec, cfg.part_params())
