import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpminv.init_search import (
    evaluate_candidate,
    init_search,
    lhs_sample,
    score_candidates,
    select_index,
    select_init,
)
from mpminv.mpm import rollout
from mpminv.params import ParamBounds, ParamLayout
from mpminv.render import render_scene


@pytest.fixture(scope="module")
def beam_head(beam):
    return render_scene(rollout(beam, beam.part_params(), frames=16), beam)


def strata(cands):
    return np.floor(cands.unit * cands.n).astype(int)


@pytest.mark.parametrize("seed", range(10))
def test_lhs_one_sample_per_stratum(seed):
    c = lhs_sample(ParamBounds(), 32, seed)
    assert c.theta.shape == (32, 6)
    for j in range(6):
        assert np.array_equal(np.sort(strata(c)[:, j]), np.arange(32))


def test_lhs_two_points_split_the_decades():
    b = ParamBounds(np.array([1e3]), np.array([1e7]))
    c = lhs_sample(b, 2, 5)
    low, high = np.sort(c.theta[:, 0])
    assert 1e3 <= low < 1e5 <= high <= 1e7


def test_lhs_single_sample_in_bounds():
    b = ParamBounds()
    c = lhs_sample(b, 1, 3)
    assert b.contains(c.theta[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**64 - 1))
def test_lhs_properties(n, seed):
    b = ParamBounds()
    c = lhs_sample(b, n, seed)
    assert all(b.contains(t) for t in c.theta)
    assert np.allclose(np.log10(c.theta), c.log_values)
    for j in range(6):
        assert np.array_equal(np.sort(strata(c)[:, j]), np.arange(n))
    again = lhs_sample(b, n, seed)
    assert np.array_equal(again.theta, c.theta)


def test_lhs_json_serializable():
    c = lhs_sample(ParamBounds(), 4, 0)
    c.scores = np.array([0.5, -np.inf, 0.2, 0.1])
    data = json.loads(json.dumps(c.to_json()))
    assert data["scores"][1] is None
    assert len(data["theta"]) == 4


def test_select_index_rules():
    assert select_index([0.4]) == 0
    assert select_index([0.3, 0.9, 0.5]) == 1
    assert select_index([0.9, 0.9]) == 0
    assert select_index([-np.inf, 0.1, 0.1]) == 1
    with pytest.raises(ValueError):
        select_index([-np.inf, -np.inf])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20, unique=True), st.randoms())
def test_select_permutation_invariant(scores, r):
    order = list(range(len(scores)))
    r.shuffle(order)
    shuffled = [scores[i] for i in order]
    assert shuffled[select_index(shuffled)] == scores[select_index(scores)]


def test_select_init_requires_scores():
    with pytest.raises(ValueError):
        select_init(lhs_sample(ParamBounds(), 3, 0))


def test_truth_scores_nearly_one(beam, beam_head):
    assert evaluate_candidate(beam.part_params(), beam, beam_head, 16) > 0.999


def test_exploding_candidate_is_disqualified(beam, beam_head):
    import dataclasses
    hot = dataclasses.replace(beam, dt=2e-3)
    p = hot.part_params()
    p.theta[0, 0] = 1e7
    p.theta[0, 5] = 1e2
    assert evaluate_candidate(p, hot, beam_head, 16) == -np.inf


def test_matching_candidate_beats_decoy(beam, beam_head):
    layout = ParamLayout.from_names(1, ["youngs_modulus", "density"])
    truth = layout.flatten(beam.part_params())
    c = lhs_sample(layout.bounds(beam.bounds), 1, 0)
    c.theta = np.vstack([truth * [20.0, 0.2], truth])
    c.init_frames = 8
    score_candidates(c, beam, beam_head, layout)
    assert c.scores[1] > c.scores[0]
    assert select_init(c)[0] == 1


def test_init_search_end_to_end(beam, beam_head):
    layout = ParamLayout.from_names(1, ["youngs_modulus"])
    truth = layout.flatten(beam.part_params())
    cands, params = init_search(beam, beam_head, n=4, init_frames=8, seed=1, layout=layout, extra=truth)
    assert cands.n == 5
    assert np.all(np.isfinite(cands.scores))
    assert params.theta[0, 0] == pytest.approx(truth[0])
    # untouched entries keep the scene's values
    assert np.array_equal(params.theta[0, 1:], beam.part_params().theta[0, 1:])


def test_init_frames_longer_than_reference(beam, beam_head):
    with pytest.raises(ValueError):
        evaluate_candidate(beam.part_params(), beam, beam_head, 17)
