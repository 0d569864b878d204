import numpy as np
import pytest
import tensorflow as tf

from app.errors import DegenerateEmbeddingError
from app.models.models import Triplet
from app.services.metric import (
    certify,
    certify_batch,
    classify,
    cosine_distance,
    decisions_from_logits,
    distance,
    hinge_loss,
    make_certificate,
    margin,
    pixel_decisions,
    pixel_distance,
    robustness_gap,
)


def test_cosine_distance_range():
    a = tf.constant([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], tf.float64)
    b = tf.constant([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]], tf.float64)
    np.testing.assert_allclose(cosine_distance(a, b).numpy(), [0.0, 1.0, 2.0], atol=1e-15)


def test_ties_decide_for_x1():
    assert decisions_from_logits(np.array([[0.3, 0.3]]))[0] == 1
    assert decisions_from_logits(np.array([[0.2, 0.3]]))[0] == 1
    assert decisions_from_logits(np.array([[0.4, 0.3]]))[0] == 0


def test_identical_distortion_is_chosen(tiny_model, rng):
    x = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    other = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    logits, decision = classify(tiny_model, Triplet(x=x, x0=other, x1=x, y=1))
    assert logits[0] == pytest.approx(0.0, abs=1e-12)
    assert decision == 1


def test_margin_is_antisymmetric_under_swap(tiny_model, rng):
    images = rng.uniform(size=(3, 3, 8, 8)).astype(np.float32)
    t = Triplet(x=images[0], x0=images[1], x1=images[2], y=1)
    assert margin(tiny_model, t) == pytest.approx(-margin(tiny_model, t.swapped()), abs=1e-12)


def test_hinge_loss_at_zero_margin(tiny_model, rng):
    x = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    same = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    t = Triplet(x=x, x0=same, x1=same, y=1)
    assert hinge_loss(tiny_model, t, 0.5) == pytest.approx(0.5, abs=1e-12)


def test_distance_is_symmetric_and_bounded(tiny_model, rng):
    a, b = rng.uniform(size=(2, 3, 8, 8))
    d = distance(tiny_model, a, b)
    assert 0.0 <= d <= 2.0
    assert d == pytest.approx(distance(tiny_model, b, a), abs=1e-12)
    assert distance(tiny_model, a, a) == pytest.approx(0.0, abs=1e-12)


def test_distance_rejects_zero_embedding(identity_model):
    with pytest.raises(DegenerateEmbeddingError):
        distance(identity_model, np.zeros((3, 2, 2)), np.ones((3, 2, 2)))


def test_certificate_rules():
    cert = make_certificate(0.2, 0.5, [1.2, 1.0, 3.0], correct=True)
    assert cert.radius == pytest.approx(0.4)
    assert cert.valid
    assert cert.generic_radius == pytest.approx(0.1)

    assert make_certificate(-0.1, 0.5, [2.0, 2.0, 2.0], correct=False).radius == 0.0
    assert not make_certificate(0.2, 0.5, [0.9, 2.0, 2.0], correct=True).valid

    degenerate = make_certificate(0.0, 0.0, [2.0, 2.0, 2.0], correct=True)
    assert degenerate.radius == 0.0
    assert degenerate.degenerate_gap
    assert not degenerate.valid


def test_certify_batch_matches_single(tiny_model, rng):
    images = rng.uniform(size=(3, 4, 3, 8, 8)).astype(np.float32)
    y = np.array([1, 0, 1, 0])
    batch = certify_batch(tiny_model, images[0], images[1], images[2], y, ["a", "b", "c", "d"])
    single = certify(tiny_model, Triplet(x=images[0][1], x0=images[1][1], x1=images[2][1], y=0, id="b"))
    assert batch[1].id == "b"
    assert batch[1].margin == pytest.approx(single.margin, abs=1e-12)
    assert batch[1].radius == pytest.approx(single.radius, abs=1e-12)


def test_certified_radius_is_at_least_generic(tiny_model, rng):
    # ||f(x0) - f(x1)|| <= 2 inside the unit ball
    images = rng.uniform(size=(3, 20, 3, 8, 8)).astype(np.float32)
    for cert in certify_batch(tiny_model, images[0], images[1], images[2], np.ones(20, dtype=np.int64)):
        if cert.margin > 0 and not cert.degenerate_gap:
            assert cert.radius >= cert.generic_radius - 1e-12


def test_robustness_gap_holds_for_valid_norms(trained, rng):
    images = np.concatenate([trained.test.x, trained.test.x0, trained.test.x1])
    checked = 0
    for _ in range(200):
        a, b = images[rng.choice(len(images), size=2, replace=False)]
        delta = rng.normal(size=a.shape) * rng.uniform(0.001, 0.05)
        gap = robustness_gap(trained.model, a, b, delta)
        if gap.verifiable:
            checked += 1
            assert gap.lhs <= gap.rhs + 1e-9
    assert checked > 0


def test_pixel_baseline():
    x = np.zeros((1, 3, 2, 2))
    near = np.full((1, 3, 2, 2), 0.1)
    far = np.ones((1, 3, 2, 2))
    assert pixel_decisions(x, far, near)[0] == 1
    assert pixel_decisions(x, near, far)[0] == 0
    assert pixel_distance(x[0], far[0]) == pytest.approx(np.sqrt(12))


def test_pixel_decisions_follow_pixel_distance(rng):
    x, x0, x1 = rng.uniform(size=(3, 25, 3, 4, 4))
    expected = [int(pixel_distance(a, b1) <= pixel_distance(a, b0)) for a, b0, b1 in zip(x, x0, x1)]
    np.testing.assert_array_equal(pixel_decisions(x, x0, x1), expected)


@pytest.mark.parametrize("scales", [(2.0, 1.0), (0.3, 7.0), (1e-3, 1e3)])
def test_distance_ignores_positive_rescaling(identity_model, rng, scales):
    a, b = rng.normal(size=(2, 3, 2, 2))
    scaled = distance(identity_model, scales[0] * a, scales[1] * b)
    assert scaled == pytest.approx(distance(identity_model, a, b), abs=1e-12)
