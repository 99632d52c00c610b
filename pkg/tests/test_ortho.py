"""Orthogonal-update counterexamples and the randomized study."""

import csv
import math
import os

import numpy as np
import pytest

from amlora.errors import ConfigError
from amlora.ortho import (NONLINEARITIES, counterexample_1d,
                          counterexample_2d, counterexample_nd,
                          format_summary, random_orthogonality_study,
                          write_ortho_report)


def test_1d_sine_exact_values():
    c = counterexample_1d()
    assert c.residual == 0.0
    assert c.out_a.tolist() == [1.0]
    assert c.out_ab.tolist() == [-1.0]
    assert c.deviation == 2.0


def test_2d_exact_values():
    c = counterexample_2d()
    assert c.residual == 0.0
    assert c.out_a.tolist() == [1.0, 0.0]
    assert c.out_ab.tolist() == [0.0, 1.0]
    assert c.deviation == math.sqrt(2.0)


def test_nd_exact_values():
    for n in (2, 3, 4, 8, 16):
        c = counterexample_nd(n)
        assert c.residual == 0.0
        e1 = np.zeros(n); e1[0] = 1.0
        en = np.zeros(n); en[-1] = 1.0
        assert np.array_equal(c.out_a, e1)
        assert np.array_equal(c.out_ab, en)
        assert c.deviation == math.sqrt(2.0)


def test_2d_is_nd_at_two():
    a, b = counterexample_2d(), counterexample_nd(2)
    assert np.array_equal(a.out_a, b.out_a)
    assert np.array_equal(a.out_ab, b.out_ab)


def test_nd_validation():
    with pytest.raises(ConfigError):
        counterexample_nd(1)


def test_study_orthogonality_and_deviation():
    for f in NONLINEARITIES:
        trials, summary = random_orthogonality_study(8, 25, f, seed=0)
        assert len(trials) == 25
        assert summary.max_residual < 1e-10
        assert summary.min_deviation > 0.0
        assert summary.mean_deviation > 1e-6
        assert 0.0 <= summary.label_flip_rate <= 1.0
        assert summary.max_deviation >= summary.mean_deviation \
            >= summary.min_deviation


def test_study_deterministic():
    a, sa = random_orthogonality_study(4, 10, "relu", seed=3)
    b, sb = random_orthogonality_study(4, 10, "relu", seed=3)
    c, _ = random_orthogonality_study(4, 10, "relu", seed=4)
    assert [t.deviation for t in a] == [t.deviation for t in b]
    assert sa == sb
    assert [t.deviation for t in a] != [t.deviation for t in c]


def test_study_validation():
    with pytest.raises(ConfigError):
        random_orthogonality_study(1, 10, "sin")
    with pytest.raises(ConfigError):
        random_orthogonality_study(4, 0, "sin")
    with pytest.raises(ConfigError):
        random_orthogonality_study(4, 10, "tanh")


def test_format_summary_mentions_everything():
    cases = [counterexample_1d(), counterexample_2d()]
    _, summary = random_orthogonality_study(4, 5, "sin", seed=0)
    text = format_summary(cases, [summary])
    assert "1d-sin" in text and "2d-linear" in text
    assert "label_flip_rate" in text
    assert text.endswith("unchanged.\n")


def test_write_ortho_report(tmp_path):
    trials, summary = random_orthogonality_study(4, 6, "relu", seed=1)
    text = format_summary([counterexample_1d()], [summary])
    write_ortho_report(trials, text, str(tmp_path))
    with open(tmp_path / "ortho_report.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6
    # repr round-trip: floats survive the CSV exactly
    assert [float(r["deviation"]) for r in rows] == \
        [t.deviation for t in trials]
    assert set(rows[0]) == {"trial", "n", "nonlinearity", "residual",
                            "deviation", "label_flip"}
    assert open(tmp_path / "ortho_summary.txt").read() == text
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]
