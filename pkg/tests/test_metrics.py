import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import overlap_oracle, surface_oracle
from sdmessenger.errors import ContractError
from sdmessenger.metrics import MetricReport, class_metrics, dice, evaluate, jaccard, surface_distances

masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def test_identity_and_disjoint():
    m = np.zeros((6, 6), bool)
    m[1:4, 2:5] = True
    assert dice(m, m) == jaccard(m, m) == 1.0
    other = np.zeros_like(m)
    other[5, 5] = True
    assert dice(m, other) == jaccard(m, other) == 0.0
    assert dice(np.zeros_like(m), np.zeros_like(m)) == 1.0


def test_worked_overlap_example():
    g = np.zeros((4, 4), bool)
    g[0, 0:4] = True
    p = np.zeros((4, 4), bool)
    p[0, 0:3] = True
    p[2, 2] = True
    assert dice(p, g) == 0.75
    assert jaccard(p, g) == 0.6


def test_surface_identity_and_forced_geometry():
    m = np.zeros((8, 8), bool)
    m[2:6, 1:7] = True
    assert surface_distances(m, m) == (0.0, 0.0)
    a = np.zeros((5, 9), bool)
    b = np.zeros((5, 9), bool)
    a[2, 1] = True
    b[2, 4] = True
    assert surface_distances(a, b) == (3.0, 3.0)


def test_empty_mask_is_undefined_not_zero():
    m = np.zeros((4, 4), bool)
    m[1, 1] = True
    asd, hd = surface_distances(m, np.zeros_like(m))
    assert math.isnan(asd) and math.isnan(hd)


def test_shape_mismatch():
    with pytest.raises(ContractError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


@given(p=masks, data=st.data())
@settings(max_examples=150, deadline=None)
def test_against_brute_force_oracles(p, data):
    g = data.draw(arrays(np.bool_, st.just(p.shape)))
    d, j = overlap_oracle(p, g)
    assert dice(p, g) == d and jaccard(p, g) == j
    assert abs(jaccard(p, g) - dice(p, g) / (2 - dice(p, g))) < 1e-12
    assert dice(p, g) == dice(g, p)
    if p.any() and g.any():
        asd, hd = surface_distances(p, g)
        oasd, ohd = surface_oracle(p, g)
        assert abs(asd - oasd) < 1e-9 and abs(hd - ohd) < 1e-9
        asd2, hd2 = surface_distances(g, p)
        assert abs(asd - asd2) < 1e-12 and abs(hd - hd2) < 1e-12


@given(p=masks, data=st.data())
@settings(max_examples=50, deadline=None)
def test_adding_correct_pixel_never_lowers_dice(p, data):
    g = data.draw(arrays(np.bool_, st.just(p.shape)))
    missing = np.argwhere(g & ~p)
    if len(missing):
        r, c = missing[0]
        p2 = p.copy()
        p2[r, c] = True
        assert dice(p2, g) >= dice(p, g)


class _Model(torch.nn.Module):
    """Predicts through a fixed function of the batch index order."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def predict(self, images):
        classes = self.fn(images)
        return None, classes


class _Data:
    def __init__(self, labels):
        self._labels = labels
        self._images = torch.arange(labels.shape[0], dtype=torch.float32).view(-1, 1, 1, 1).expand(
            -1, 1, *labels.shape[-2:]).clone()

    def images(self, split):
        return self._images

    def labels(self, split):
        return self._labels

    def samples(self, split):
        return []


def _labels(seed, n=5, num_classes=3, size=12):
    g = torch.Generator().manual_seed(seed)
    classes = torch.randint(num_classes, (n, size, size), generator=g)
    return torch.nn.functional.one_hot(classes, num_classes).permute(0, 3, 1, 2).float()


def test_oracle_model_is_perfect():
    labels = _labels(0)
    model = _Model(lambda x: labels[x[:, 0, 0, 0].long()].argmax(1))
    rep = evaluate(model, _Data(labels))
    assert rep.mean["dice"] == 1.0 and rep.mean["asd"] == 0.0 and rep.mean["hd95"] == 0.0


def test_background_model_scores_zero():
    labels = _labels(1)
    model = _Model(lambda x: torch.zeros(x.shape[0], *x.shape[-2:], dtype=torch.long))
    rep = evaluate(model, _Data(labels))
    assert all(v["dice"] == 0.0 for v in rep.per_class.values())
    assert all(math.isnan(v["asd"]) for v in rep.per_class.values())


def test_report_means_equal_hand_average():
    labels = _labels(2, n=7)
    g = torch.Generator().manual_seed(5)
    preds = torch.randint(3, (7, 12, 12), generator=g)
    model = _Model(lambda x: preds[x[:, 0, 0, 0].long()])
    rep = evaluate(model, _Data(labels), batch_size=3)
    per = [class_metrics(p.numpy(), t.argmax(0).numpy(), 3) for p, t in zip(preds, labels)]
    for c in (1, 2):
        for m in ("dice", "jaccard", "asd", "hd95"):
            vals = [s[c][m] for s in per if not math.isnan(s[c][m])]
            assert rep.per_class[c][m] == pytest.approx(np.mean(vals), abs=1e-12)
    assert rep.mean["dice"] == pytest.approx((rep.per_class[1]["dice"] + rep.per_class[2]["dice"]) / 2, abs=1e-12)
    back = MetricReport.from_csv(rep.to_csv())
    assert back.per_class == rep.per_class and back.mean == rep.mean


def test_report_invariants():
    labels = _labels(3, n=4)
    g = torch.Generator().manual_seed(6)
    preds = torch.randint(3, (4, 12, 12), generator=g)
    rep = evaluate(_Model(lambda x: preds[x[:, 0, 0, 0].long()]), _Data(labels))
    for v in rep.per_class.values():
        assert 0 <= v["jaccard"] <= v["dice"] <= 1
        assert v["asd"] >= 0 and v["hd95"] >= 0
