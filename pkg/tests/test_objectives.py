import math

import numpy as np
import pytest
import torch

from meduniseg.errors import ShapeError
from meduniseg.objectives import (
    DICE_SMOOTH,
    LabelError,
    MetricReport,
    aggregate,
    dice_score,
    downsample_labels,
    inverse_frequency_weights,
    masked_loss,
    scale_weights,
    weighted_dice,
    weighted_dice_from_images,
)

# published universal-model results: 11 3D datasets, 6 2D datasets, then 3D / 2D / overall means
PUBLISHED_ROW = [
    79.9, 86.9, 70.2, 71.0, 54.2, 72.6, 96.4, 86.3, 89.9, 83.5, 68.7,
    89.2, 91.3, 91.6, 80.4, 78.8, 77.5,
    78.1, 84.8, 80.5,
]


def test_scale_weights_halve_and_normalise():
    w = scale_weights(4)
    assert math.isclose(sum(w), 1.0)
    for a, b in zip(w, w[1:]):
        assert math.isclose(a, 2 * b)
    assert math.isclose(w[0], 8 / 15)


def test_perfect_prediction_loss_is_small():
    labels = torch.randint(0, 3, (2, 4, 6, 6))
    logits = torch.nn.functional.one_hot(labels, 5).movedim(-1, 1).double() * 40
    report = masked_loss(logits, labels, 3, weights=[1.0])
    assert report.value <= 1e-3


def test_two_voxel_hand_oracle():
    # two voxels, two classes; labels [0, 1]
    logits = torch.tensor([[[[[0.3, -0.2]]], [[[0.1, 0.5]]]]], dtype=torch.float64)  # [1, 2, 1, 1, 2]
    labels = torch.tensor([[[[0, 1]]]])
    report = masked_loss(logits, labels, 2, weights=[1.0])

    def softmax(a, b):
        m = max(a, b)
        ea, eb = math.exp(a - m), math.exp(b - m)
        return ea / (ea + eb), eb / (ea + eb)

    p0 = softmax(0.3, 0.1)
    p1 = softmax(-0.2, 0.5)
    ce = -(math.log(p0[0]) + math.log(p1[1])) / 2
    inter = p1[1]
    denom = (p0[1] + p1[1]) + 1
    dice = 1 - (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    assert abs(report.value - (ce + dice)) <= 1e-9


def test_masked_channels_receive_no_gradient():
    logits = torch.randn(2, 5, 4, 6, 6, requires_grad=True)
    labels = torch.randint(0, 2, (2, 4, 6, 6))
    masked_loss(logits, labels, 2, weights=[1.0]).total.backward()
    assert torch.count_nonzero(logits.grad[:, 2:]) == 0
    assert logits.grad[:, :2].abs().sum() > 0


def test_deep_supervision_uses_every_scale():
    scales = [(4, 8, 8), (2, 4, 4), (1, 2, 2)]
    logits = [torch.randn(1, 3, *s, requires_grad=True) for s in scales]
    labels = torch.randint(0, 3, (1, 4, 8, 8))
    report = masked_loss(logits, labels, 3)
    report.total.backward()
    assert all(lg.grad.abs().sum() > 0 for lg in logits)
    assert len(report.dice) == 3


def test_downsample_labels_nearest():
    labels = torch.arange(16).view(1, 1, 4, 4) % 3
    out = downsample_labels(labels, (1, 2, 2))
    assert out.tolist() == [[[[0, 2], [2, 1]]]]
    assert out.dtype == torch.long


@pytest.mark.parametrize("labels_max,class_count", [(3, 3), (1, 1), (1, 6)])
def test_label_errors(labels_max, class_count):
    logits = torch.randn(1, 5, 1, 2, 2)
    labels = torch.full((1, 1, 2, 2), labels_max)
    with pytest.raises(LabelError):
        masked_loss(logits, labels, class_count)


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    logits = torch.randn(2, 4, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 3, (2, 2, 3, 3))
    assert torch.autograd.gradcheck(lambda x: masked_loss(x, labels, 3, weights=[1.0]).total, (logits,), eps=1e-6, atol=1e-7)


# -- metrics ------------------------------------------------------------------


def test_dice_sixty_percent():
    true = np.zeros(20, np.uint8)
    pred = np.zeros(20, np.uint8)
    true[:6] = 1
    pred[3:7] = 1  # 4 predicted, 3 overlap -> 2*3/(4+6)
    assert dice_score(pred, true, 2)[0] == pytest.approx(60.0, abs=1e-12)


def test_dice_symmetric_and_empty_convention():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 3, (4, 5, 6))
    b = rng.integers(0, 3, (4, 5, 6))
    np.testing.assert_array_equal(dice_score(a, b, 3), dice_score(b, a, 3))
    empty = np.zeros((2, 2), np.uint8)
    assert dice_score(empty, empty, 3).tolist() == [100.0, 100.0]
    assert dice_score(np.ones((2, 2)), empty, 2)[0] == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_score(np.zeros((2, 3)), np.zeros((3, 2)), 2)


def test_inverse_frequency_weights_siim_counts():
    w0, w1 = inverse_frequency_weights(290, 1082)
    assert abs(w0 - 1082 / 1372) <= 1e-12
    assert abs(w1 - 290 / 1372) <= 1e-12
    assert math.isclose(w0 + w1, 1.0)


def test_weighted_dice_plug_in():
    wd = weighted_dice(100.0, 0.0, 290, 1082)
    assert wd.value == pytest.approx(78.863, abs=5e-4)


def test_weighted_dice_matches_per_image_recomputation():
    rng = np.random.default_rng(1)
    normal = rng.uniform(0, 100, 290)
    lesion = rng.uniform(0, 100, 1082)
    got = weighted_dice_from_images(normal.tolist(), lesion.tolist()).value
    # brute force: each image contributes its Dice times (subset weight / subset size)
    num = sum(d / 290 for d in normal) * (1 / 290) + sum(d / 1082 for d in lesion) * (1 / 1082)
    brute = num / (1 / 290 + 1 / 1082)
    assert abs(got - brute) <= 1e-9


def test_weighted_dice_rejects_empty_subset():
    with pytest.raises(ValueError):
        weighted_dice(1.0, 1.0, 0, 3)


def test_aggregate_reproduces_published_means():
    values, (m3, m2, m) = PUBLISHED_ROW[:17], PUBLISHED_ROW[17:]
    dims = {f"d{i}": "3D" if i < 11 else "2D" for i in range(17)}
    report = aggregate({f"d{i}": v for i, v in enumerate(values)}, dims)
    assert round(report.mean_3d, 1) == m3
    assert round(report.mean_2d, 1) == m2
    assert round(report.mean, 1) == m
    # averaging the two group means would give a different figure
    assert round((report.mean_3d + report.mean_2d) / 2, 1) != m
    assert report.mean == pytest.approx(80.494, abs=1e-3)


def test_aggregate_empty_group():
    report = aggregate({"a": 70.0, "b": 80.0}, {"a": "3D", "b": "3D"})
    assert report.mean_2d is None and report.omitted_groups == ["2D"]
    assert report.mean == 75.0


def test_aggregate_requires_tags():
    with pytest.raises(ValueError):
        aggregate({"a": 1.0}, {})


def test_csv_layout_round_trip():
    report = aggregate({"b2": 90.0, "a3": 70.0, "c3": 80.0}, {"b2": "2D", "a3": "3D", "c3": "3D"}, weighted={"b2": 88.5})
    text = report.to_csv("Mine")
    header = text.splitlines()[0].split(",")
    assert header == ["Method", "a3", "c3", "b2", "b2 (WDice)", "3D Mean", "2D Mean", "Mean"]
    back = MetricReport.read_csv(text)
    assert back["3D Mean"] == 75.0 and back["2D Mean"] == 90.0 and back["Mean"] == 80.0
    assert back["b2 (WDice)"] == 88.5
