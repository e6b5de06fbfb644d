import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fmisynth import regqc
from fmisynth.volgrid import BinaryMask, Volume


def test_transform_wrapping_and_vector():
    t = regqc.RigidTransform((3 * math.pi, -math.pi, 0.5), (1, 2, 3))
    assert np.isclose(t.rotations[0], math.pi) and np.isclose(t.rotations[1], math.pi)
    assert regqc.RigidTransform.from_vector(t.as_vector()) == t
    with pytest.raises(ValueError):
        regqc.RigidTransform((math.nan, 0, 0))


def test_rotation_matrix_orthonormal_and_centered():
    t = regqc.RigidTransform((0.3, -0.2, 0.7), (0, 0, 0))
    r = t.rotation_matrix()
    assert np.allclose(r @ r.T, np.eye(3)) and np.isclose(np.linalg.det(r), 1)
    c = np.array([5.0, 6.0, 7.0])
    m = t.matrix(c)
    assert np.allclose(m[:3, :3] @ c + m[:3, 3], c)


def test_apply_identity(small_case):
    out = regqc.apply_rigid(small_case.pet, regqc.RigidTransform(), small_case.pet.geometry)
    assert np.allclose(out.data, small_case.pet.data)


def test_nmi_self_is_two_and_symmetric(small_case):
    m = small_case.brain_mask
    t1, t2 = small_case.channel("t1"), small_case.channel("t2")
    assert regqc.nmi(t1, t1, m) == 2.0
    assert regqc.nmi(t1, t2, m) == regqc.nmi(t2, t1, m)


def test_nmi_matches_direct_oracle():
    r = np.random.default_rng(100)
    a = r.random((16, 16, 16))
    b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
    m = BinaryMask(np.ones(a.shape, bool))
    frozen = 1.1844895355286844
    assert math.isclose(oracles.nmi_direct(a.ravel(), b.ravel()), frozen, rel_tol=1e-12)
    assert math.isclose(regqc.nmi(Volume(a), Volume(b), m), frozen, rel_tol=1e-12)


def test_nmi_independent_noise_near_one():
    m = BinaryMask(np.ones((32, 32, 32), bool))
    for seed in range(20):
        r = np.random.default_rng(seed)
        v = regqc.nmi(Volume(r.random(m.shape)), Volume(r.random(m.shape)), m)
        assert 1.0 <= v <= 1.05


def test_nmi_drops_under_shift(small_case):
    v, m = small_case.channel("t1"), small_case.brain_mask
    shifted = v.with_data(np.roll(v.data, 5, axis=0))
    assert regqc.nmi(v, shifted, m) < regqc.nmi(v, v, m)


def test_nmi_constant_raises():
    m = BinaryMask(np.ones((4, 4, 4), bool))
    with pytest.raises(ValueError):
        regqc.nmi(Volume(np.ones((4, 4, 4))), Volume(np.random.default_rng(0).random((4, 4, 4))), m)


def test_dice_examples():
    a = np.zeros(200, bool)
    b = np.zeros(200, bool)
    a[:100] = True
    b[50:150] = True
    A, B = BinaryMask(a.reshape(10, 20, 1)), BinaryMask(b.reshape(10, 20, 1))
    assert regqc.dice(A, B) == 0.5
    assert regqc.dice(A, A) == 1.0
    assert regqc.dice(A, ~A) == 0.0
    empty = BinaryMask(np.zeros((2, 2, 2), bool))
    assert regqc.dice(empty, empty) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_properties(seed):
    r = np.random.default_rng(seed)
    a = BinaryMask(r.random((5, 5, 5)) < 0.3)
    b = BinaryMask(r.random((5, 5, 5)) < 0.3)
    d = regqc.dice(a, b)
    assert d == regqc.dice(b, a) and 0 <= d <= 1
    assert (d == 1.0) == np.array_equal(a.data, b.data)


def test_register_identity(small_case):
    res = regqc.rigid_register(small_case.pet, small_case.pet, small_case.brain_mask, return_result=True)
    assert np.all(np.abs(res.transform.rotations) <= 0.01)
    assert np.all(np.abs(res.transform.translations) <= 0.1)
    for level in res.trace:
        assert all(b >= a for a, b in zip(level, level[1:]))


def test_register_constant_raises(small_case):
    flat = small_case.pet.with_data(np.zeros(small_case.pet.shape))
    with pytest.raises(ValueError):
        regqc.rigid_register(flat, small_case.pet, small_case.brain_mask)


def test_qc_accepts_registered_phantom(small_case):
    for name in ("t1", "t1gd", "flair"):
        r = regqc.qc_gate(small_case.channel(name), small_case.channel("t2"), small_case.brain_mask)
        assert r.accept, (name, r)
    assert regqc.qc_gate(small_case.pet, small_case.channel("t2"), small_case.brain_mask).accept


def test_qc_rejects_shuffled_on_nmi(small_case):
    m = small_case.brain_mask.data
    t1 = small_case.channel("t1").data.copy()
    vals = t1[m]
    np.random.default_rng(0).shuffle(vals)
    t1[m] = vals
    r = regqc.qc_gate(small_case.pet.with_data(t1), small_case.channel("t2"), small_case.brain_mask)
    assert not r.accept and r.nmi < regqc.QcThresholds().min_nmi


def test_vacuous_gate_accepts(small_case):
    th = regqc.QcThresholds(1.0, 0.0)
    noise = small_case.pet.with_data(np.random.default_rng(1).random(small_case.pet.shape))
    assert regqc.qc_gate(noise, small_case.channel("t2"), small_case.brain_mask, th).accept


def test_decision_is_pure_function_of_metrics():
    th = regqc.QcThresholds()
    assert regqc.decide(1.10, 0.85, th) and not regqc.decide(1.0999, 0.9, th) and not regqc.decide(1.2, 0.849, th)


def test_qc_json_shape():
    line = regqc.QcResult(True, 1.2, 0.9).to_json("case-1")
    assert json.loads(line) == {"case": "case-1", "nmi": 1.2, "dice": 0.9, "decision": "accept"}


def test_threshold_validation():
    with pytest.raises(ValueError):
        regqc.QcThresholds(min_nmi=0.9)
    with pytest.raises(ValueError):
        regqc.QcThresholds(min_dice=1.5)
