import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvis import tensor as tn
from stvis.decoder import DecoderConfig, LayerPrediction, PredictionSet
from stvis.encoder import EncoderConfig
from stvis.losses import (GroundTruth, LossWeights, MatchAssignment, contrastive_loss, dice_loss, focal_loss,
                          giou, giou_tensor, hungarian_match, infonce_pair, matching_cost, total_loss)
from stvis.model import VideoModel
from stvis.synthclip import generate_clip, ground_truth
from stvis.tensor import Tensor

import oracles
from conftest import autodiff, fd_grad, rel_err


def test_default_weights_follow_reference_recipe():
    w = LossWeights()
    assert (w.cls, w.l1, w.giou, w.dice, w.focal) == (2.0, 5.0, 2.0, 5.0, 2.0)
    assert w.tau == 0.07 and (w.focal_alpha, w.focal_gamma) == (0.25, 2.0)
    with pytest.raises(ValueError):
        LossWeights(tau=0.0).validate()
    with pytest.raises(ValueError):
        LossWeights(l1=-1.0).validate()


# matching


def test_hungarian_small_cases():
    cost = 1.0 - np.eye(4)
    assert hungarian_match(cost).slots.tolist() == [0, 1, 2, 3]
    m = hungarian_match([[1.0, 2.0], [2.0, 1.0]])
    assert m.slots.tolist() == [0, 1] and m.cost == 2.0
    with pytest.raises(ValueError, match="cannot match"):
        hungarian_match(np.zeros((3, 2)))


def test_hungarian_matches_enumeration(rng):
    for _ in range(300):
        n_gt = int(rng.integers(1, 5))
        n_q = int(rng.integers(n_gt, 6))
        cost = rng.normal(size=(n_gt, n_q))
        best, _ = oracles.brute_force_assignment(cost)
        m = hungarian_match(cost)
        assert abs(m.cost - best) < 1e-12
        assert len(set(m.slots.tolist())) == n_gt


def test_slot_labels_mark_unmatched_as_no_object():
    labels = MatchAssignment(np.array([2, 0]), 4).slot_labels()
    assert labels.tolist() == [1, -1, 0, -1]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2), st.floats(0.1, 100.0), st.integers(0, 2**31 - 1))
def test_hungarian_scale_invariance(n_gt, extra, scale, seed):
    cost = np.random.default_rng(seed).normal(size=(n_gt, n_gt + extra))
    assert np.array_equal(hungarian_match(cost).slots, hungarian_match(cost * scale).slots)


# focal, GIoU, dice


def test_focal_hand_values():
    assert abs(float(focal_loss([0.0], [1.0]).data) - 0.25 * 0.25 * math.log(2)) < 1e-15
    assert abs(0.25 * 0.25 * math.log(2) - 0.04332) < 1e-5
    assert float(focal_loss([40.0], [1.0]).data) < 1e-15
    logits = np.array([-1.3, 0.2, 2.5])
    y = np.array([1.0, 0.0, 1.0])
    bce = sum(-(t * math.log(oracles.sigmoid(v)) + (1 - t) * math.log(1 - oracles.sigmoid(v))) for v, t in zip(logits, y))
    assert abs(float(focal_loss(logits, y, alpha=0.5, gamma=0.0).data) - 0.5 * bce) < 1e-12


def test_focal_normalizer_and_gradient(rng):
    logits, y = rng.normal(size=6), (rng.random(6) > 0.5).astype(float)
    assert abs(float(focal_loss(logits, y, normalizer=3.0).data) * 3 - float(focal_loss(logits, y).data)) < 1e-12
    (g,) = autodiff(lambda t: focal_loss(t, y), logits)
    assert rel_err(g, fd_grad(lambda v: float(focal_loss(v, y).data), logits)) < 1e-7


def test_giou_cases():
    box = np.array([0.4, 0.5, 0.2, 0.3])
    assert giou(box, box) == 1.0
    assert float(giou_tensor(box, box).data) == 1.0
    assert giou([0.1, 0.1, 0.2, 0.2], [0.9, 0.9, 0.2, 0.2]) < 0
    # [0,2]x[0,2] vs [1,3]x[1,2]: inter 1, union 4 + 2 - 1 = 5, hull 3*2 = 6
    a, b = [1.0, 1.0, 2.0, 2.0], [2.0, 1.5, 2.0, 1.0]
    assert abs(giou(a, b) - (1 / 5 - (6 - 5) / 6)) < 1e-15
    assert giou([0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=8, max_size=8))
def test_giou_range_and_tensor_agreement(v):
    a, b = np.array(v[:4]), np.array(v[4:])
    g = giou(a, b)
    assert -1.0 <= g <= 1.0
    assert abs(float(giou_tensor(a, b).data) - g) < 1e-12
    assert abs(g - oracles.giou_box(a, b)) < 1e-12


def test_dice_cases(rng):
    n = 16
    sat = np.full(n, 50.0)
    assert abs(float(dice_loss(sat, np.ones(n)).data) - (1 - 2 * n / (2 * n + 1))) < 1e-12
    assert abs(float(dice_loss(sat, np.zeros(n)).data) - 1.0) < 1e-12
    for _ in range(20):
        logits, target = rng.normal(size=(8, 8)), (rng.random((8, 8)) > 0.5).astype(float)
        assert abs(float(dice_loss(logits, target).data) - oracles.dice(logits, target)) < 1e-12


# contrastive


def test_infonce_examples(rng):
    assert float(infonce_pair(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), 0.07).data) == 0.0
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(float(infonce_pair(a, a, 1.0).data) - (-math.log(math.e / (math.e + 1)))) < 1e-12
    assert abs(-math.log(math.e / (math.e + 1)) - 0.31326) < 1e-5
    for _ in range(20):
        x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        assert abs(float(infonce_pair(x, y, 0.07).data) - oracles.infonce_pair(x, y, 0.07)) < 1e-10


def test_infonce_zero_vector_has_zero_similarity():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(float(infonce_pair(a, b, 1.0).data) - oracles.infonce_pair(a, b, 1.0)) < 1e-12


def test_contrastive_pair_enumeration(rng):
    assert float(contrastive_loss(rng.normal(size=(1, 3, 4)), 0.1).data) == 0.0
    lat = rng.normal(size=(2, 3, 4))
    two = infonce_pair(lat[0], lat[1], 0.1).data + infonce_pair(lat[1], lat[0], 0.1).data
    assert abs(float(contrastive_loss(lat, 0.1).data) - float(two)) < 1e-12
    lat = rng.normal(size=(3, 3, 4))
    six = sum(oracles.infonce_pair(lat[t], lat[s], 0.1) for t in range(3) for s in range(3) if s != t)
    assert abs(float(contrastive_loss(lat, 0.1).data) - six) < 1e-10


def test_contrastive_slot_permutation_invariance_and_gradient(rng):
    lat = rng.normal(size=(3, 4, 5))
    perm = np.array([2, 3, 0, 1])
    assert abs(float(contrastive_loss(lat, 0.2).data) - float(contrastive_loss(lat[:, perm], 0.2).data)) < 1e-12
    (g,) = autodiff(lambda t: contrastive_loss(t, 0.2), lat)
    assert rel_err(g, fd_grad(lambda v: float(contrastive_loss(v, 0.2).data), lat)) < 1e-7


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_infonce_nonnegative(q, seed):
    r = np.random.default_rng(seed)
    assert float(infonce_pair(r.normal(size=(q, 3)), r.normal(size=(q, 3)), 0.07).data) >= -1e-12


def test_infonce_decreases_with_positive_similarity():
    losses = []
    for angle in np.linspace(1.2, 0.0, 5):
        a = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        b = np.array([[math.cos(angle), 0.0, math.sin(angle)], [0.0, 1.0, 0.0]])
        losses.append(float(infonce_pair(a, b, 0.5).data))
    assert all(x > y for x, y in zip(losses, losses[1:]))


# total


def small_setup(seed=0, contrastive=True):
    enc = EncoderConfig(hidden_dim=16, ffn_dim=32)
    dec = DecoderConfig(n_queries=4, ffn_dim=32, mask_dim=8)
    model = VideoModel(enc, dec, seed=seed, contrastive=contrastive)
    clip = generate_clip(seed, "plain", n_frames=3, height=16, width=16, n_instances=2)
    return model, ground_truth(clip), clip


def test_total_loss_matches_term_by_term_oracle():
    for seed in range(3):
        model, gt, clip = small_setup(seed)
        preds = model(clip.frames)
        weights = LossWeights()
        loss, report = total_loss(preds, gt, weights)
        expected = oracles.total_loss(preds, gt, weights, report.matches)
        assert abs(float(loss.data) - expected) < 1e-10
        assert len(report.layers) == 2
        assert abs(sum(sum(v for k, v in lyr.items() if k not in ("layer", "assignment"))
                       for lyr in report.layers) - report.total) < 1e-10


def test_total_loss_zero_weights():
    model, gt, clip = small_setup()
    zero = LossWeights(cls=0, l1=0, giou=0, dice=0, focal=0, contrastive=0)
    assert float(total_loss(model(clip.frames), gt, zero)[0].data) == 0.0


def test_total_loss_contrastive_only_on_last_layer_when_aux_off():
    model, gt, clip = small_setup()
    preds = model(clip.frames)
    _, report = total_loss(preds, gt, LossWeights(contrastive_aux=False))
    assert report.layers[0]["cl"] == 0.0 and report.layers[1]["cl"] > 0.0


def test_perfect_predictions_under_identity_matching():
    n_frames, n_q, side = 2, 3, 4
    gt_boxes = np.array([[[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]]] * n_frames)
    masks = np.zeros((n_frames, 2, side, side))
    masks[:, 0, :2, :2] = 1
    masks[:, 1, 2:, 1:] = 1
    gt = GroundTruth(np.array([0, 2]), gt_boxes, masks, np.ones((n_frames, 2), bool))
    logits = np.full((n_q, 4), -60.0)
    logits[0, 0] = logits[1, 2] = logits[2, 3] = 60.0
    boxes = np.concatenate([gt_boxes, np.full((n_frames, 1, 4), 0.5)], axis=1)
    mask_logits = np.concatenate([np.where(masks > 0, 60.0, -60.0), np.zeros((n_frames, 1, side, side))], axis=1)
    pred = LayerPrediction(Tensor(np.zeros((n_frames, n_q, 4))), Tensor(np.zeros((n_q, 4))),
                           Tensor(np.full((n_frames, n_q), 0.5)), Tensor(logits), Tensor(boxes), Tensor(mask_logits))
    match = MatchAssignment(np.array([0, 1]), n_q)
    assert hungarian_match(matching_cost(pred, gt, LossWeights())).slots.tolist() == [0, 1]
    _, report = total_loss(PredictionSet([pred]), gt, LossWeights(), [match])
    layer = report.layers[0]
    assert layer["cls"] < 1e-20 and layer["l1"] == 0.0 and abs(layer["giou"]) < 1e-15 and layer["focal"] < 1e-20
    # dice keeps its epsilon floor: 1 - 2N/(2N+1) per instance
    n0, n1 = masks[0, 0].sum(), masks[0, 1].sum()
    expected = 5.0 * ((1 - 2 * n0 / (2 * n0 + 1)) + (1 - 2 * n1 / (2 * n1 + 1))) / 2
    assert abs(layer["dice"] - expected) < 1e-12


def test_total_loss_gradient_vs_fd():
    model, gt, clip = small_setup(1)
    rng = np.random.default_rng(9)
    for p in model.parameters():
        p.data += rng.normal(0, 0.01, size=p.shape)
    weights = LossWeights()
    _, report = total_loss(model(clip.frames), gt, weights)
    params = model.parameters()
    with tn.Tape() as tape:
        loss = total_loss(model(clip.frames), gt, weights, report.matches)[0]
    tape.backward(loss, params)
    eps = 1e-5
    for p in (model.decoder.query_embed, model.encoder.layers[0].temporal.offset_proj.weight,
              model.decoder.heads.kernel.weight):
        k = int(np.argmax(np.abs(p.grad)))
        flat = p.data.reshape(-1)
        old = flat[k]
        flat[k] = old + eps
        hi = float(total_loss(model(clip.frames), gt, weights, report.matches)[0].data)
        flat[k] = old - eps
        lo = float(total_loss(model(clip.frames), gt, weights, report.matches)[0].data)
        flat[k] = old
        fd = (hi - lo) / (2 * eps)
        g = p.grad.reshape(-1)[k]
        assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g))


def test_matching_cost_uses_present_frames_only():
    gt = GroundTruth(np.array([0]), np.array([[[0.5, 0.5, 0.2, 0.2]], [[0.0, 0.0, 0.0, 0.0]]]),
                     np.zeros((2, 1, 2, 2)), np.array([[True], [False]]))
    boxes = np.array([[[0.5, 0.5, 0.2, 0.2]], [[0.9, 0.9, 0.1, 0.1]]])
    pred = LayerPrediction(None, None, None, Tensor(np.zeros((1, 2))), Tensor(boxes), None)
    cost = matching_cost(pred, gt, LossWeights(cls=0.0))
    assert abs(cost[0, 0]) < 1e-15
