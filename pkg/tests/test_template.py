import itertools

import numpy as np
import pytest

from tpsqr.event_data import LagWindows, SubjectSequence, Timespan
from tpsqr.template import Template, build_theta, pair_from_index, pair_index

EXAMPLE = SubjectSequence(
    "1", (Timespan(1, 1, 1), Timespan(121, 2, 1), Timespan(231, 3, 2), Timespan(361, 1, 0))
)
W100 = LagWindows((0, 100, 200, 300))


def random_template(p, windows, seed=0):
    rng = np.random.default_rng(seed)
    return Template(windows, rng.normal(size=p), rng.normal(size=(p, p, windows.L)))


def test_pair_index_examples():
    assert pair_index(1, 1, 1, 3, 2) == 0
    assert pair_index(1, 2, 1, 3, 2) == 2
    assert pair_index(3, 3, 2, 3, 2) == 3 * 3 * 2 - 1


def test_pair_index_enumerates_layout():
    p, L = 3, 2
    expected = list(itertools.product(range(1, p + 1), range(1, p + 1), range(1, L + 1)))
    assert [pair_from_index(i, p, L) for i in range(p * p * L)] == expected
    for i, (k, k2, l) in enumerate(expected):
        assert pair_index(k, k2, l, p, L) == i


@pytest.mark.parametrize("args", [(0, 1, 1), (1, 4, 1), (1, 1, 0), (1, 1, 3)])
def test_pair_index_out_of_range(args):
    with pytest.raises(IndexError):
        pair_index(*args, 3, 2)


def test_single_span_theta():
    tpl = random_template(3, W100)
    theta = build_theta(tpl, SubjectSequence("x", (Timespan(5, 2, 0),)))
    assert theta.shape == (1, 1)
    assert theta[0, 0] == tpl.omega[1]


def test_far_apart_spans_give_diagonal_theta():
    tpl = random_template(3, W100)
    seq = SubjectSequence("x", (Timespan(0, 1, 0), Timespan(300, 2, 0), Timespan(700, 3, 0)))
    theta = build_theta(tpl, seq)
    assert np.array_equal(theta, np.diag(tpl.omega[[0, 1, 2]]))


def test_example_theta_entries():
    tpl = random_template(3, W100, seed=3)
    theta = build_theta(tpl, EXAMPLE)
    # lag 120 -> window 2, lag 230 -> window 3, lag 360 -> none
    assert theta[0, 1] == tpl.w[0, 1, 1]
    assert theta[0, 2] == tpl.w[0, 2, 2]
    assert theta[0, 3] == 0.0
    assert theta[1, 2] == tpl.w[1, 2, 1]
    assert theta[2, 3] == tpl.w[2, 0, 1]
    assert np.array_equal(np.diag(theta), tpl.omega[[0, 1, 2, 0]])


def test_theta_exactly_symmetric():
    tpl = random_template(3, W100, seed=7)
    theta = build_theta(tpl, EXAMPLE)
    assert np.array_equal(theta, theta.T)


def test_direction_matters():
    seq = SubjectSequence("x", (Timespan(0, 1, 0), Timespan(50, 2, 0)))
    w = np.zeros((2, 2, 3))
    w[0, 1, 0] = 0.7
    forward = build_theta(Template(W100, np.zeros(2), w), seq)
    backward = build_theta(Template(W100, np.zeros(2), w.transpose(1, 0, 2)), seq)
    assert forward[0, 1] == 0.7
    assert backward[0, 1] == 0.0


def test_type_out_of_range():
    tpl = random_template(2, W100)
    with pytest.raises(ValueError):
        build_theta(tpl, SubjectSequence("x", (Timespan(0, 3, 0),)))


def test_dimension_checks():
    with pytest.raises(ValueError):
        Template(W100, np.zeros(2), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        Template(W100, np.zeros(2), np.full((2, 2, 3), np.nan))


def test_json_round_trip(tmp_path):
    w = np.zeros((3, 3, 3))
    w[0, 2, 1] = -0.25
    w[2, 0, 2] = 1.5
    tpl = Template(W100, np.array([0.1, -np.inf, 2.0]), w)
    d = tpl.to_dict()
    assert d["w"] == [[1, 3, 2, -0.25], [3, 1, 3, 1.5]]
    assert d["omega"] == [0.1, None, 2.0]
    tpl.save(tmp_path / "t.json")
    back = Template.load(tmp_path / "t.json")
    assert np.array_equal(back.w, tpl.w)
    assert np.array_equal(back.omega, tpl.omega)
    assert back.windows == tpl.windows


def test_flat_layout_matches_pair_index():
    tpl = random_template(3, W100, seed=11)
    for i in range(tpl.coef.size):
        k, k2, l = pair_from_index(i, 3, 3)
        assert tpl.coef[i] == tpl.w[k - 1, k2 - 1, l - 1]
