import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voxseg.io import LabelMap
from voxseg.metrics import (
    aggregate,
    dsc,
    evaluate,
    largest_component_filter,
    majority_vote_baseline,
    mean_foreground_dsc,
    mhd,
)

NEIGHBORS = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]


def flood_fill_lcc(labels):
    """Largest 26-connected component per class by BFS; ties to the smallest C-order start."""
    out = labels.copy()
    for c in np.unique(labels):
        if c == 0:
            continue
        seen = np.zeros(labels.shape, dtype=bool)
        best = []
        for start in zip(*np.nonzero(labels == c)):  # C order
            if seen[start]:
                continue
            comp, queue = [], deque([start])
            seen[start] = True
            while queue:
                v = queue.popleft()
                comp.append(v)
                for d in NEIGHBORS:
                    n = tuple(a + b for a, b in zip(v, d))
                    if all(0 <= n[i] < labels.shape[i] for i in range(3)) and not seen[n] and labels[n] == c:
                        seen[n] = True
                        queue.append(n)
            if len(comp) > len(best):
                best = comp
        keep = np.zeros(labels.shape, dtype=bool)
        keep[tuple(np.array(best).T)] = True
        out[(labels == c) & ~keep] = 0
    return out


def brute_dsc(a, b):
    na, nb = a.sum(), b.sum()
    if na + nb == 0:
        return 1.0
    return 2 * np.sum(a & b) / (na + nb)


def brute_hausdorff(a, b, spacing):
    pa = np.argwhere(a) * spacing
    pb = np.argwhere(b) * spacing
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_satellite_removed_and_idempotent():
    lab = np.zeros((12, 12, 12), dtype=int)
    lab[2:7, 2:7, 2:6] = 3  # 100 voxels
    lab[10, 10, 9:12] = 3  # 3-voxel satellite
    lab[9:11, 1:3, 1:3] = 5
    out = largest_component_filter(LabelMap(lab))
    assert np.sum(out.labels == 3) == 100
    assert np.all(out.labels[10, 10, 9:12] == 0)
    assert np.array_equal(out.labels == 5, lab == 5)
    assert largest_component_filter(out) == out


def test_tie_keeps_first_component_in_scan_order():
    lab = np.zeros((5, 5, 5), dtype=int)
    lab[4, 0, 0] = lab[4, 0, 1] = 2
    lab[0, 4, 3] = lab[0, 4, 4] = 2
    out = largest_component_filter(LabelMap(lab)).labels
    assert out[0, 4, 3] == 2 and out[4, 0, 0] == 0


def test_diagonal_neighbors_connect():
    lab = np.zeros((4, 4, 4), dtype=int)
    lab[0, 0, 0] = lab[1, 1, 1] = lab[3, 3, 3] = 1
    assert np.sum(largest_component_filter(LabelMap(lab)).labels == 1) == 2
    assert np.sum(largest_component_filter(LabelMap(lab), connectivity=6).labels == 1) == 1


@pytest.mark.parametrize("seed", range(15))
def test_lcc_matches_flood_fill(seed):
    r = np.random.default_rng(seed)
    lab = r.integers(0, 4, size=(7, 6, 8)) * (r.random((7, 6, 8)) < 0.35)
    lmap = LabelMap(lab, 4)
    assert np.array_equal(largest_component_filter(lmap).labels, flood_fill_lcc(lab))


def test_dsc_fixtures():
    a = np.zeros((3, 3, 3), dtype=bool)
    b = np.zeros((3, 3, 3), dtype=bool)
    a.flat[:8] = True
    b.flat[4:12] = True
    assert dsc(a, b) == 0.5
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0
    assert dsc(np.zeros_like(a), np.zeros_like(a)) == 1.0
    assert dsc(a, np.zeros_like(a)) == 0.0
    with pytest.raises(ValueError):
        dsc(a, np.zeros((2, 3, 3), dtype=bool))


def test_mhd_fixtures():
    a = np.zeros((6, 6, 6), dtype=bool)
    b = np.zeros((6, 6, 6), dtype=bool)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert mhd(a, b) == 3.0
    assert mhd(a, b, spacing=(0.5, 1, 1)) == 1.5
    assert mhd(a, a) == 0.0
    with pytest.raises(ValueError, match="undefined distance"):
        mhd(a, np.zeros_like(a))


@pytest.mark.parametrize("seed", range(200))
def test_metrics_match_brute_force(seed):
    r = np.random.default_rng(seed)
    a = r.random((6, 6, 6)) < r.uniform(0.02, 0.5)
    b = r.random((6, 6, 6)) < r.uniform(0.02, 0.5)
    a.flat[r.integers(216)] = True
    b.flat[r.integers(216)] = True
    spacing = np.array([1.0, 1.0, 1.0]) if seed % 2 else r.uniform(0.5, 2.0, 3)
    assert abs(dsc(a, b) - brute_dsc(a, b)) <= 1e-9
    assert abs(mhd(a, b, spacing) - brute_hausdorff(a, b, spacing)) <= 1e-9


masks = arrays(bool, (4, 4, 4), elements=st.booleans())


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_metric_symmetry_and_zero_distance(a, b):
    assert dsc(a, b) == dsc(b, a)
    assert 0.0 <= dsc(a, b) <= 1.0
    if a.any() and b.any():
        assert mhd(a, b) == mhd(b, a)
        assert (mhd(a, b) == 0) == bool(np.array_equal(a, b))


def test_dsc_monotone_in_intersection():
    ref = np.zeros(20, dtype=bool)
    ref[:10] = True
    prev = -1.0
    for k in range(11):  # |auto| fixed at 10, overlap grows
        auto = np.zeros(20, dtype=bool)
        auto[10 - k:20 - k] = True
        d = dsc(ref.reshape(4, 5, 1), auto.reshape(4, 5, 1))
        assert d >= prev
        prev = d


def test_majority_vote():
    z = np.zeros((1, 1, 2), dtype=int)
    maps = [LabelMap(z + v) for v in ([[[1, 3]]], [[[1, 2]]], [[[2, 3]]])]
    assert majority_vote_baseline(maps).labels.tolist() == [[[1, 3]]]
    tie = [LabelMap(np.full((1, 1, 1), 1)), LabelMap(np.full((1, 1, 1), 2))]
    assert majority_vote_baseline(tie).labels.item() == 1
    with pytest.raises(ValueError):
        majority_vote_baseline([LabelMap(np.zeros((1, 1, 1), int)), LabelMap(np.zeros((1, 1, 2), int))])


def test_evaluate_two_class_fixture():
    ref = np.zeros((3, 3, 3), dtype=int)
    auto = np.zeros((3, 3, 3), dtype=int)
    ref[0] = 1  # 9 voxels
    auto[0, :2] = 1  # 6 voxels, all inside ref
    auto[2, 2, 2] = 1
    rep = evaluate(LabelMap(ref, 2), LabelMap(auto, 2))
    s = rep[1]
    assert s.name == "thalamus_l"
    assert s.dsc == pytest.approx(2 * 6 / (9 + 7))
    # worst nearest distance: auto voxel (2,2,2) to ref plane x=0 is 2; ref (0,2,*) to auto is 1
    assert s.mhd_mm == pytest.approx(2.0)


def test_evaluate_identity_and_missing_structures():
    lab = np.zeros((4, 4, 4), dtype=int)
    lab[0, 0, 0] = 1
    lab[3, 3, 3] = 2
    rep = evaluate(LabelMap(lab), LabelMap(lab))
    assert rep[1].dsc == 1 and rep[1].mhd_mm == 0
    assert rep[5].dsc == 1 and np.isnan(rep[5].mhd_mm)
    assert mean_foreground_dsc(LabelMap(lab), LabelMap(lab)) == 1.0


def test_aggregate_population_std():
    reports = []
    for d in (0.8, 0.9, 1.0):
        n = round(d * 10)
        ref = np.zeros((1, 1, 20), dtype=int)
        ref[0, 0, :10] = 1
        auto = np.zeros((1, 1, 20), dtype=int)
        auto[0, 0, 10 - n:20 - n] = 1
        reports.append(evaluate(LabelMap(ref, 2), LabelMap(auto, 2)))
    summary = aggregate(reports)["thalamus_l"]
    assert summary["dsc_mean"] == pytest.approx(0.9)
    assert summary["dsc_std"] == pytest.approx(np.sqrt(((0.1) ** 2 * 2) / 3))
    assert summary["n"] == 3 and summary["mhd_undefined"] == 0
