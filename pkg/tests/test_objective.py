import io
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fmisynth import objective as ob
from fmisynth.net import build_discriminator, forward_discriminator
from fmisynth.prep import MaskPipelineParams
from fmisynth.volgrid import BinaryMask


def _rand(shape, seed, dtype=torch.float64):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_lsgan_values():
    one, zero = torch.ones(2, 1, 4, 4, 2), torch.zeros(2, 1, 4, 4, 2)
    assert float(ob.lsgan_d_loss(one, zero)) == 0.0
    assert float(ob.lsgan_d_loss(one * 0.5, one * 0.5)) == 0.25
    assert float(ob.lsgan_g_loss(one)) == 0.0
    assert float(ob.lsgan_g_loss(zero)) == 0.5


def test_lsgan_random_logits_match_formula():
    r, f = _rand((3, 1, 4, 4, 2), 0) * 4 - 2, _rand((3, 1, 4, 4, 2), 1) * 4 - 2
    rn, fn = r.numpy().ravel(), f.numpy().ravel()
    d = 0.5 * math.fsum((v - 1) ** 2 for v in rn) / rn.size + 0.5 * math.fsum(v * v for v in fn) / fn.size
    g = 0.5 * math.fsum((v - 1) ** 2 for v in fn) / fn.size
    assert abs(float(ob.lsgan_d_loss(r, f)) - d) < 1e-12
    assert abs(float(ob.lsgan_g_loss(f)) - g) < 1e-12


def test_lsgan_shape_mismatch():
    with pytest.raises(ValueError):
        ob.lsgan_d_loss(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 2, 2, 1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_lsgan_nonnegative(a, b):
    ta = torch.tensor(a, dtype=torch.float64)
    tb = torch.tensor(b[: len(a)] + [0.0] * (len(a) - len(b)), dtype=torch.float64)
    assert float(ob.lsgan_d_loss(ta, tb)) >= 0 and float(ob.lsgan_g_loss(tb)) >= 0


def test_l1_examples_and_oracle():
    t = _rand((1, 1, 8, 8, 8), 2)
    assert float(ob.l1_loss(t, t)) == 0.0
    assert float(ob.l1_loss(t + 0.1, t)) == pytest.approx(0.1, abs=1e-12)
    p = _rand((1, 1, 8, 8, 8), 3)
    m = _rand((1, 1, 8, 8, 8), 4) > 0.5
    pn, tn, mn = p.numpy().ravel(), t.numpy().ravel(), m.numpy().ravel()
    ref = math.fsum(abs(a - b) for a, b, k in zip(pn, tn, mn) if k) / mn.sum()
    assert abs(float(ob.l1_loss(p, t, m)) - ref) < 1e-12


def test_l1_empty_mask_raises():
    t = torch.zeros(1, 1, 4, 4, 4)
    with pytest.raises(ValueError):
        ob.l1_loss(t, t, torch.zeros_like(t, dtype=torch.bool))


def test_mask_disagreement_constructed():
    region = torch.zeros(8, 8, 8, dtype=torch.bool)
    region[2:6, 2:6, 2:6] = True  # 64 voxels
    a = torch.zeros(8, 8, 8, dtype=torch.float64)
    a[2:6, 2:6, 2:4] = 1.0
    assert float(ob.mask_disagreement(a, 1 - a, region)) == 1.0
    b = a.clone()
    idx = region.nonzero()[:16]  # 25% of the region
    b[tuple(idx.T)] = 1 - b[tuple(idx.T)]
    assert float(ob.mask_disagreement(b, a, region)) == 0.25
    outside = a.clone()
    outside[0, 0, 0] = 1.0
    assert float(ob.mask_disagreement(outside, a, region)) == 0.0


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_focus_identical_prediction(seed):
    from fmisynth.phantom import PhantomSpec, generate_case

    c = generate_case(PhantomSpec(seed=seed))
    p = torch.tensor(c.pet.data)
    assert float(ob.tumor_focus_loss(p, p, c.tumor_mask, mode="eval_hard")) == 0.0
    for tau in (0.05, 0.01):
        params = MaskPipelineParams(soft_tau=tau)
        assert 0 <= float(ob.tumor_focus_loss(p, p, c.tumor_mask, params)) <= 2 * tau
    assert float(ob.tumor_focus_loss(1 - p, p, c.tumor_mask, mode="eval_hard")) == 1.0


def test_focus_empty_mask_zero_with_zero_gradient():
    pred = _rand((8, 8, 8), 5).requires_grad_(True)
    loss = ob.tumor_focus_loss(pred, _rand((8, 8, 8), 6), BinaryMask(np.zeros((8, 8, 8), bool)))
    loss.backward()
    assert float(loss.detach()) == 0.0
    assert torch.count_nonzero(pred.grad) == 0


def test_focus_rejects_bad_inputs():
    v = _rand((8, 8, 8), 0)
    with pytest.raises(ValueError):
        ob.tumor_focus_loss(v, v, BinaryMask(np.ones((8, 8, 8), bool)), mode="soft")
    with pytest.raises(ValueError):
        ob.tumor_focus_loss(v[None], v[None], BinaryMask(np.ones((8, 8, 8), bool)))


def test_total_loss_weights():
    comp = {"gan": 0.25, "l1": 0.02, "focus": 0.01}
    assert ob.total_loss(comp, ob.LossWeights(1, 100, 100)) == 3.25
    assert ob.total_loss(comp, ob.LossWeights(1, 100, 0)) == 0.25 + 2.0
    nan = dict(comp, focus=float("nan"))
    assert ob.total_loss(nan, ob.LossWeights(1, 100, 0)) == 2.25
    with pytest.raises(ValueError):
        ob.LossWeights(1, -1, 0)


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(*[st.floats(0, 10)] * 3),
    st.tuples(*[st.floats(0, 100)] * 3),
    st.floats(0, 5),
)
def test_total_loss_linear(c, w, k):
    comp = dict(zip(("gan", "l1", "focus"), c))
    a = ob.total_loss(comp, ob.LossWeights(*w))
    scaled = ob.total_loss({key: k * v for key, v in comp.items()}, ob.LossWeights(*w))
    assert scaled == pytest.approx(k * a, rel=1e-9, abs=1e-9)
    assert a >= 0


def test_zero_weight_removes_gradient():
    x = torch.tensor(2.0, requires_grad=True)
    comp = {"gan": x * 0 + 1, "l1": x * 0 + 1, "focus": x**2}
    ob.total_loss(comp, ob.LossWeights(1, 1, 0)).backward()
    assert float(x.grad) == 0.0


def _tumor_case_8():
    rng = np.random.default_rng(7)
    true = np.clip(rng.normal(0.3, 0.05, (8, 8, 8)), 0, 1)
    true[3:6, 3:6, 3:6] = 0.9
    tumor = np.zeros((8, 8, 8), bool)
    tumor[4, 4, 4] = True
    return torch.tensor(true), BinaryMask(tumor)


def test_total_loss_gradient_matches_finite_differences():
    true, tumor = _tumor_case_8()
    x = _rand((1, 4, 8, 8, 8), 11)
    d = build_discriminator(5, layers=2, rng=3, dtype=torch.float64)
    pred = (0.5 * _rand((1, 1, 8, 8, 8), 12) + 0.25).requires_grad_(True)
    brain = torch.ones(1, 1, 8, 8, 8, dtype=torch.bool)

    def f(p):
        _, s = forward_discriminator(d, x, p)
        comp = {
            "gan": ob.lsgan_g_loss(s),
            "l1": ob.l1_loss(p, true[None, None], brain),
            "focus": ob.tumor_focus_loss(p[0, 0], true, tumor),
        }
        return ob.total_loss(comp)

    f(pred).backward()
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(12):
        idx = (0, 0, *map(int, rng.integers(2, 7, size=3)))
        with torch.no_grad():
            a, b = pred.detach().clone(), pred.detach().clone()
            a[idx] += h
            b[idx] -= h
            num = (f(a) - f(b)).item() / (2 * h)
        ana = pred.grad[idx].item()
        assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num)), (idx, ana, num)


def test_log_losses_line():
    buf = io.StringIO()
    rec = ob.log_losses(buf, 3, torch.tensor(0.5), 0.25, 0.1, 0.0, 10.5, 1e-4)
    line = json.loads(buf.getvalue())
    assert line == rec
    assert list(line) == ["iter", "gan_g", "gan_d", "l1", "focus", "total", "lr"]
