import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdmessenger.errors import ContractError
from sdmessenger.l2u import PatchSpec, mix, select_patch


def one_hot_map(classes, num_classes):
    return torch.nn.functional.one_hot(classes, num_classes).permute(2, 0, 1).float()[None]


def random_inputs(seed, h=16, w=16, num_classes=3):
    g = torch.Generator().manual_seed(seed)
    xu = torch.rand(1, 1, h, w, generator=g)
    xl = torch.rand(1, 1, h, w, generator=g)
    yu = one_hot_map(torch.randint(num_classes, (h, w), generator=g), num_classes)
    yl = one_hot_map(torch.randint(num_classes, (h, w), generator=g), num_classes)
    return xu, yu, xl, yl


def test_all_background_falls_back_to_valid_position(gen):
    label = one_hot_map(torch.zeros(64, 64, dtype=torch.long), 3)
    seen = set()
    for _ in range(200):
        p = select_patch(label, 8, gen)
        p.validate(64, 64)
        seen.add((p.p_h, p.p_w))
    assert len(seen) > 100


def test_single_foreground_pixel_is_covered_for_every_location():
    # exhaustive over every pixel position and several patch sizes
    h = w = 12
    for s in (1, 2, 3, 4, 7, 12):
        for r, c in itertools.product(range(h), range(w)):
            classes = torch.zeros(h, w, dtype=torch.long)
            classes[r, c] = 2
            p = select_patch(one_hot_map(classes, 3), s, torch.Generator().manual_seed(0))
            p.validate(h, w)
            assert p.p_h <= r < p.p_h + s and p.p_w <= c < p.p_w + s


def test_specific_corner_case(gen):
    classes = torch.zeros(64, 64, dtype=torch.long)
    classes[10, 10] = 1
    p = select_patch(one_hot_map(classes, 3), 4, gen)
    assert p == PatchSpec(8, 8, 4)


def test_full_size_patch_is_forced(gen):
    label = one_hot_map(torch.randint(3, (16, 16), generator=gen), 3)
    assert select_patch(label, 16, gen) == PatchSpec(0, 0, 16)


def test_patch_contains_foreground(gen):
    for _ in range(50):
        classes = torch.zeros(32, 32, dtype=torch.long)
        r, c = torch.randint(32, (2,), generator=gen).tolist()
        classes[r:r + 3, c:c + 2] = 1
        p = select_patch(one_hot_map(classes, 2), 6, gen)
        rows, cols = p.region()
        assert classes[rows, cols].sum() > 0


def test_zero_patch_does_not_consume_rng():
    g = torch.Generator().manual_seed(5)
    before = g.get_state()
    select_patch(torch.ones(1, 2, 8, 8), 0, g)
    assert torch.equal(before, g.get_state())


def test_zero_patch_is_identity():
    xu, yu, xl, yl = random_inputs(0)
    x2, y2 = mix(xu, yu, xl, yl, PatchSpec(0, 0, 0))
    assert torch.equal(x2, xu) and torch.equal(y2, yu)


def test_full_overwrite():
    xu, yu, xl, yl = random_inputs(1)
    x2, y2 = mix(xu, yu, xl, yl, PatchSpec(0, 0, 16))
    assert torch.equal(x2, xl) and torch.equal(y2, yl)


@given(seed=st.integers(0, 10_000), s=st.integers(0, 16), ph=st.integers(0, 16), pw=st.integers(0, 16))
@settings(max_examples=60, deadline=None)
def test_changed_pixels_lie_in_patch(seed, s, ph, pw):
    ph, pw = min(ph, 16 - s), min(pw, 16 - s)
    xu, yu, xl, yl = random_inputs(seed)
    before = (xu.clone(), yu.clone(), xl.clone(), yl.clone())
    patch = PatchSpec(ph, pw, s)
    x2, y2 = mix(xu, yu, xl, yl, patch)
    changed = 0
    for r in range(16):
        for c in range(16):
            inside = ph <= r < ph + s and pw <= c < pw + s
            if x2[0, 0, r, c] != xu[0, 0, r, c]:
                changed += 1
                assert inside
            if inside:
                assert x2[0, 0, r, c] == xl[0, 0, r, c]
                assert torch.equal(y2[0, :, r, c], yl[0, :, r, c])
            else:
                assert torch.equal(y2[0, :, r, c], yu[0, :, r, c])
    assert changed <= s * s
    # one-hot survives, inputs untouched, idempotent
    assert (y2.sum(1) == 1).all()
    for a, b in zip(before, (xu, yu, xl, yl)):
        assert torch.equal(a, b)
    x3, y3 = mix(x2, y2, xl, yl, patch)
    assert torch.equal(x3, x2) and torch.equal(y3, y2)


def test_shape_mismatch_rejected():
    xu, yu, xl, yl = random_inputs(2)
    with pytest.raises(ContractError):
        mix(xu, yu, xl[..., :8], yl, PatchSpec(0, 0, 4))
    with pytest.raises(ContractError):
        mix(xu, yu, xl, yl, PatchSpec(14, 0, 4))
