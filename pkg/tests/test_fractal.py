import math

import mpmath
import numpy as np
import pytest

from octanet.core import DataError
from octanet.fractal import (
    box_count_fd,
    box_counts,
    compare_groups,
    default_sizes,
    write_fd_csv,
    write_quantiles_csv,
)


def carpet(level: int) -> np.ndarray:
    m = np.ones((1, 1), bool)
    for _ in range(level):
        hole = np.zeros_like(m)
        m = np.block([[m, m, m], [m, hole, m], [m, m, m]])
    return m


def test_carpet_counts_are_exact():
    m = carpet(6)
    assert m.shape == (729, 729)
    sizes = [3**k for k in range(1, 6)]
    res = box_count_fd(m, sizes)
    assert res.counts == [8 ** (6 - k) for k in range(1, 6)]
    assert res.fd == pytest.approx(math.log(8) / math.log(3), abs=1e-9)
    assert res.fd == pytest.approx(1.8928, abs=0.05)
    assert res.r2 == pytest.approx(1.0)


def test_filled_square_and_line():
    sq = np.zeros((256, 256), bool)
    sq[:192, :192] = True
    assert box_count_fd(sq).fd == pytest.approx(2.0, abs=0.05)
    line = np.zeros((256, 256), bool)
    line[100, :] = True
    assert box_count_fd(line).fd == pytest.approx(1.0, abs=0.05)


def test_default_sizes():
    assert default_sizes((304, 304)) == [2, 4, 8, 16, 32, 64]
    assert default_sizes((64, 100)) == [2, 4, 8, 16]


def test_partial_edge_cells_and_offsets():
    m = np.zeros((10, 10), bool)
    m[9, 9] = True
    assert box_counts(m, 4) == 1
    m[0, 0] = True
    assert box_counts(m, 4) == 2
    assert box_counts(m, 4, (2, 2)) == 2


def test_multi_anchor_averaging_is_close():
    m = carpet(5)
    single = box_count_fd(m, [3, 9, 27]).fd
    multi = box_count_fd(m, [3, 9, 27], anchors=3).fd
    assert single != multi
    assert abs(single - multi) < 0.1


def test_fd_errors():
    with pytest.raises(DataError):
        box_count_fd(np.zeros((64, 64)))
    with pytest.raises(DataError):
        box_count_fd(np.ones((64, 64)), sizes=[2, 4])
    with pytest.raises(DataError):
        box_count_fd(np.ones((64, 64)), sizes=[2, 4, 128])
    with pytest.raises(DataError):
        box_count_fd(np.ones(64))


def _student_p(t, dof):
    t = mpmath.mpf(t)
    return float(mpmath.betainc(dof / 2, mpmath.mpf(1) / 2, 0, dof / (dof + t * t), regularized=True))


def test_identical_groups_tie():
    res = compare_groups([1.5, 1.5, 1.5], [1.5, 1.5, 1.5])
    assert res.tie and res.p == 1.0 and res.t == 0.0


def test_separated_groups_against_oracle():
    rng = np.random.default_rng(3)
    a = rng.normal(1.5, 0.02, 10)
    b = rng.normal(1.7, 0.02, 10)
    res = compare_groups(a, b, ("control", "case"))
    na, nb = len(a), len(b)
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    t = (a.mean() - b.mean()) / math.sqrt(sp2 * (1 / na + 1 / nb))
    assert res.t == pytest.approx(t, rel=1e-9)
    assert res.p == pytest.approx(_student_p(t, na + nb - 2), rel=1e-6, abs=1e-300)
    assert res.p < 0.001
    assert res.quantiles["control"]["median"] == pytest.approx(np.median(a))


def test_ranksum_and_errors():
    res = compare_groups([1.1, 1.2, 1.3, 1.25], [1.5, 1.6, 1.55, 1.7], test="ranksum")
    assert res.test == "ranksum" and res.p < 0.05
    with pytest.raises(DataError):
        compare_groups([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        compare_groups([1.0, 1.1], [1.0, 2.0], test="anova")
    shifted = compare_groups([1.0, 1.0], [2.0, 2.0])
    assert shifted.tie and shifted.p == 0.0


def test_csv_exports(tmp_path):
    sq = np.ones((64, 64), bool)
    res = box_count_fd(sq)
    write_fd_csv(tmp_path / "fd.csv", [("A", "s1", res)])
    assert (tmp_path / "fd.csv").read_text().splitlines()[1].startswith("A,s1,2.000000")
    cmp = compare_groups([1.5, 1.6, 1.55], [1.4, 1.45, 1.5])
    write_quantiles_csv(tmp_path / "q.csv", cmp)
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0].startswith("group,n,mean") and len(lines) == 3
