import numpy as np
import pytest

from eegkd.errors import DomainError, ParseError, ValidationError
from eegkd.teacher import (
    PosteriorTable,
    SyntheticTeacherConfig,
    class_similarity,
    load_posteriors,
    synthetic_posterior,
    synthetic_table,
    write_posteriors,
)


def test_round_trip_is_exact(tmp_path, rng):
    table = PosteriorTable({i: rng.dirichlet(np.ones(5)) for i in range(20)}, "resnet")
    path = tmp_path / "post.tsv"
    write_posteriors(table, path)
    back = load_posteriors(path)
    assert back.teacher_name == "resnet"
    assert back.num_classes == 5
    for i in range(20):
        np.testing.assert_array_equal(back[i], table[i])


def test_comments_and_blank_lines(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("# teacher: t0\n\n# note\n3\t0.25 0.75\n")
    t = load_posteriors(path)
    assert len(t) == 1 and 3 in t and t.teacher_name == "t0"


def test_bad_sum_names_the_row(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("0\t0.5 0.5\n1\t0.5 0.4\n")
    with pytest.raises(ValidationError, match="row 2.*image 1"):
        load_posteriors(path)


def test_negative_entry(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("0\t1.5 -0.5\n")
    with pytest.raises(ValidationError):
        load_posteriors(path)


@pytest.mark.parametrize("body", ["0 0.5 0.5\n", "x\t0.5 0.5\n", "0\t0.5 abc\n", "0\t1.0\n0\t1.0\n"])
def test_malformed_lines(tmp_path, body):
    path = tmp_path / "p.tsv"
    path.write_text(body)
    with pytest.raises(ParseError):
        load_posteriors(path)


def test_ragged_lengths(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("0\t0.5 0.5\n1\t0.2 0.3 0.5\n")
    with pytest.raises(ValidationError):
        load_posteriors(path)


def test_restrict_renormalizes():
    t = PosteriorTable({0: np.array([0.5, 0.3, 0.2])})
    np.testing.assert_allclose(t.restrict([1, 2])[0], [0.6, 0.4])


def test_synthetic_posterior_shape_and_mass():
    cfg = SyntheticTeacherConfig(6, fidelity=0.7, seed=3)
    p = synthetic_posterior(2, cfg)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert p[2] == pytest.approx(0.7)
    assert np.argmax(p) == 2


def test_synthetic_posterior_fidelity_one_is_one_hot():
    p = synthetic_posterior(1, SyntheticTeacherConfig(4, fidelity=1.0))
    np.testing.assert_array_equal(p, [0, 1, 0, 0])


def test_similarity_symmetric_and_seeded():
    s = class_similarity(5, 1)
    np.testing.assert_array_equal(s, s.T)
    np.testing.assert_array_equal(s, class_similarity(5, 1))


def test_synthetic_table_deterministic():
    cfg = SyntheticTeacherConfig(3, seed=2)
    a = synthetic_table({0: 0, 1: 2}, cfg)
    b = synthetic_table({0: 0, 1: 2}, cfg)
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("kw", [dict(fidelity=0.0), dict(fidelity=1.5), dict(confusion_temperature=0.0)])
def test_config_validation(kw):
    with pytest.raises(DomainError):
        SyntheticTeacherConfig(3, **kw)
