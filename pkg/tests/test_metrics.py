import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medcontext.errors import ContractError, ShapeError
from medcontext.metrics import (
    LabelMask,
    aggregate,
    boundary,
    dsc,
    evaluate_volume,
    hausdorff,
    hd95,
    percentile,
    write_report,
)


def boundary_oracle(m):
    out = set()
    shape = m.shape
    for idx in zip(*np.nonzero(m)):
        for axis, step in itertools.product(range(3), (-1, 1)):
            n = list(idx)
            n[axis] += step
            if not 0 <= n[axis] < shape[axis] or not m[tuple(n)]:
                out.add(tuple(int(i) for i in idx))
                break
    return sorted(out)


def hd95_oracle(y, f, spacing=(1.0, 1.0, 1.0), q=95.0):
    by, bf = boundary_oracle(y), boundary_oracle(f)
    if not by or not bf:
        return None

    def directed(src, dst):
        ds = []
        for a in src:
            best = min(
                sum(((a[k] * spacing[k]) - (b[k] * spacing[k])) ** 2 for k in range(3)) for b in dst
            )
            ds.append(math.sqrt(best))
        ds.sort()
        rank = q / 100 * (len(ds) - 1)
        lo = math.floor(rank)
        hi = min(lo + 1, len(ds) - 1)
        return ds[lo] + (rank - lo) * (ds[hi] - ds[lo])

    return max(directed(bf, by), directed(by, bf))


def test_dsc_hand_cases():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :4] = True
    assert dsc(a, a) == 1.0
    b = np.zeros_like(a)
    b[3, 3, :] = True
    assert dsc(a, b) == 0.0
    f = np.zeros_like(a)
    f[0, 0, 1:4] = True
    f[1, 1, 0:3] = True  # |F| = 6, overlap 3 with |Y| = 4
    assert dsc(a, f) == 0.6
    assert dsc(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ShapeError):
        dsc(a, a[:3])


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (4, 3, 3)), arrays(bool, (4, 3, 3)))
def test_dsc_symmetric_and_bounded(y, f):
    d = dsc(y, f)
    assert d == dsc(f, y)
    assert 0.0 <= d <= 1.0


def test_boundary_cases():
    single = np.zeros((5, 5, 5), bool)
    single[2, 2, 2] = True
    assert np.array_equal(boundary(single).mask, single)
    cube = np.zeros((5, 5, 5), bool)
    cube[1:4, 1:4, 1:4] = True
    shell = boundary(cube).mask
    assert shell.sum() == 26 and not shell[2, 2, 2]
    assert not boundary(np.zeros((3, 3, 3), bool)).mask.any()
    full = np.ones((3, 3, 3), bool)
    assert boundary(full).mask.sum() == 26  # the array border counts as outside


def test_hd95_simple_cases():
    a = np.zeros((6, 6, 6), bool)
    a[1, 1, 1] = True
    b = np.zeros_like(a)
    b[4, 1, 1] = True
    assert hd95(a, b) == 3.0
    assert hd95(a, a) == 0.0
    assert hd95(a, np.zeros_like(a)) is None
    with pytest.raises(ShapeError):
        hd95(LabelMask(a, (1, 1, 1)), LabelMask(b, (2, 1, 1)))


def random_pair(seed):
    gen = np.random.default_rng(seed)
    y = gen.random((8, 8, 8)) < gen.uniform(0.05, 0.5)
    f = gen.random((8, 8, 8)) < gen.uniform(0.05, 0.5)
    return y, f


def test_hd95_equals_brute_force_on_100_pairs():
    for seed in range(100):
        y, f = random_pair(seed)
        assert [tuple(p) for p in np.argwhere(boundary(y).mask)] == boundary_oracle(y)
        assert hd95(y, f) == hd95_oracle(y, f)


def test_hd95_anisotropic_spacing_matches_oracle():
    sp = (1.5, 0.5, 2.0)
    for seed in range(5):
        y, f = random_pair(seed)
        assert hd95(LabelMask(y, sp), LabelMask(f, sp)) == pytest.approx(hd95_oracle(y, f, sp), abs=1e-12)


def test_spacing_doubling_doubles_hd95():
    for seed in range(20):
        y, f = random_pair(seed)
        base = hd95(y, f)
        doubled = hd95(LabelMask(y, (2, 2, 2)), LabelMask(f, (2, 2, 2)))
        assert doubled == 2 * base
        assert dsc(LabelMask(y, (2, 2, 2)), LabelMask(f, (2, 2, 2))) == dsc(y, f)


def test_hd95_symmetric_and_bounded_by_hausdorff():
    for seed in range(20):
        y, f = random_pair(seed)
        assert hd95(y, f) == hd95(f, y)
        assert hd95(y, f) <= hausdorff(y, f)


def test_percentile_convention():
    v = np.arange(1.0, 11.0)
    assert percentile(v, 95) == pytest.approx(np.percentile(v, 95, method="linear"))
    assert percentile([4.0], 95) == 4.0
    assert percentile(v, 100) == 10.0
    with pytest.raises(ValueError):
        percentile([], 50)


def test_label_mask_spacing_contract():
    with pytest.raises(ContractError):
        LabelMask(np.zeros((2, 2, 2)), (1, 0, 1))


def evaluate_oracle(Y, F, C):
    out = []
    for c in range(1, C):
        y, f = Y == c, F == c
        inter = sum(1 for v in zip(*np.nonzero(y)) if f[v])
        tot = int(y.sum()) + int(f.sum())
        out.append((1.0 if tot == 0 else 2 * inter / tot, hd95_oracle(y, f), bool(y.any())))
    return out


def test_evaluate_volume_matches_oracle():
    gen = np.random.default_rng(0)
    Y = gen.integers(0, 4, (6, 6, 6))
    F = gen.integers(0, 4, (6, 6, 6))
    rep = evaluate_volume(Y, F, 4)
    for r, (d, h, present) in zip(rep.classes, evaluate_oracle(Y, F, 4)):
        assert r.dsc == pytest.approx(d, abs=1e-15) and r.hd95 == h and r.present == present
    assert rep.mean_dsc == pytest.approx(np.mean([c.dsc for c in rep.classes]))


def test_evaluate_volume_perfect_and_missed():
    Y = np.zeros((8, 8, 8), np.uint8)
    Y[1:4, 1:4, 1:4] = 1
    Y[5:7, 5:7, 5:7] = 2
    rep = evaluate_volume(Y, Y, 3)
    assert all(c.dsc == 1.0 and c.hd95 == 0.0 for c in rep.classes)
    F = Y.copy()
    F[F == 2] = 0
    rep = evaluate_volume(Y, F, 3)
    assert rep.classes[1].dsc == 0.0 and rep.classes[1].hd95 is None and not rep.classes[1].hd95_defined
    with pytest.raises(ContractError):
        evaluate_volume(Y, Y + 3, 3)


def test_absent_class_excluded_from_means():
    Y = np.zeros((8, 8, 8), np.uint8)
    Y[1:4, 1:4, 1:4] = 1
    rep = evaluate_volume(Y, Y, 3)
    assert not rep.classes[1].present
    assert rep.mean_dsc == 1.0


def test_report_json_mean_equals_csv_rows(tmp_path):
    gen = np.random.default_rng(1)
    reports = [evaluate_volume(gen.integers(0, 3, (6, 6, 6)), gen.integers(0, 3, (6, 6, 6)), 3) for _ in range(3)]
    rows = aggregate(reports, 3)
    summary = write_report(rows, tmp_path / "r.csv", tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "class,dsc,hd95,defined"
    csv_dsc = [float(l.split(",")[1]) for l in lines[1:]]
    assert json.loads((tmp_path / "r.json").read_text())["mean_dsc"] == pytest.approx(np.mean(csv_dsc), abs=1e-15)
    assert summary["mean_dsc"] == pytest.approx(np.mean(csv_dsc), abs=1e-15)
