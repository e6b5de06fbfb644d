import numpy as np
import pytest

from fmisynth import phantom as ph
from fmisynth.prep import dilate
from fmisynth.regqc import qc_gate
from fmisynth.volgrid import CHANNELS, Tracer


def _core_mask(spec):
    labels, *_ = ph._labels(spec, np.random.default_rng(spec.seed if spec.anatomy_seed is None else spec.anatomy_seed))
    return labels == "core", labels


def test_same_seed_bit_identical():
    a, b = ph.generate_case(ph.PhantomSpec(seed=11)), ph.generate_case(ph.PhantomSpec(seed=11))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.mri + (a.pet,), b.mri + (b.pet,)))
    assert np.array_equal(a.tumor_mask.data, b.tumor_mask.data)
    assert (a.patient_id, a.mri_date, a.pet_date) == (b.patient_id, b.mri_date, b.pet_date)


@pytest.mark.parametrize("seed", range(8))
def test_fmiso_rim_more_than_twice_normal_brain(seed):
    spec = ph.PhantomSpec(seed=seed)
    c = ph.generate_case(spec)
    core, _ = _core_mask(spec)
    brain = c.brain_mask.data
    dil = dilate(c.tumor_mask, 3).data
    rim_region = dil & brain & ~core
    normal = brain & ~dil
    assert c.pet.data[rim_region].mean() > 2 * c.pet.data[normal].mean()


def test_noise_free_volumes_use_table_values():
    spec = ph.PhantomSpec(noise_std=0.0, tumor=False, seed=4)
    c = ph.generate_case(spec)
    _, labels = _core_mask(spec)
    for ch, name in enumerate(CHANNELS):
        for tissue in ("wm", "gm", "csf"):
            sel = labels == tissue
            assert sel.any()
            assert np.all(c.mri[ch].data[sel] == ph.INTENSITY[tissue][ch])
        assert np.all(c.mri[ch].data[~c.brain_mask.data] == 0)
    assert not c.tumor_mask.data.any()


def test_channel_ordering_matches_table():
    spec = ph.PhantomSpec(seed=6, noise_std=0.02)
    c = ph.generate_case(spec)
    _, labels = _core_mask(spec)
    for ch in range(4):
        means = {t: c.mri[ch].data[labels == t].mean() for t in ("wm", "gm", "csf")}
        table = {t: ph.INTENSITY[t][ch] for t in means}
        assert sorted(means, key=means.get) == sorted(table, key=table.get)


@pytest.mark.parametrize("tracer", list(Tracer))
def test_masks_nested_and_hot_region_placement(tracer):
    spec = ph.PhantomSpec(seed=2, tracer=tracer, noise_std=0.0)
    c = ph.generate_case(spec)
    assert not np.any(c.tumor_mask.data & ~c.brain_mask.data)
    if tracer is Tracer.FMISO_like:
        core, _ = _core_mask(spec)
        hot = c.pet.data >= ph.PET_INTENSITY[tracer]["hypoxic"]
        assert np.any(hot & dilate(c.tumor_mask, 3).data)
        assert not np.any(hot & core)


def test_radius_range_validation():
    with pytest.raises(ValueError):
        ph.PhantomSpec(radius_range=(3, 2))
    with pytest.raises(ValueError):
        ph.PhantomSpec(shape=(4, 32, 32))


def test_dates_within_pairing_window():
    for tracer, days in ((Tracer.FMISO_like, 30), (Tracer.FDG_like, 90)):
        for s in range(10):
            assert ph.generate_case(ph.PhantomSpec(seed=s, tracer=tracer)).date_gap_days <= days


def test_dataset_structure():
    cases = ph.generate_dataset(51, base_seed=0, duplicate_fraction=4 / 47, template=ph.PhantomSpec(shape=(16, 16, 8)))
    ids = [c.patient_id for c in cases]
    assert len(cases) == 51 and len(set(ids)) == 47
    assert len({c.case_id for c in cases}) == 51
    for pid in set(ids):
        group = [c for c in cases if c.patient_id == pid]
        if len(group) == 2:
            a, b = group
            assert np.array_equal(a.tumor_mask.data, b.tumor_mask.data)
            assert not np.array_equal(a.pet.data, b.pet.data)


def test_single_case_dataset_deterministic():
    a = ph.generate_dataset(1, base_seed=9)
    b = ph.generate_dataset(1, base_seed=9)
    assert len(a) == 1 and a[0].case_id == b[0].case_id == "P0009-000-v0"


def test_dataset_cases_pass_default_qc():
    for c in ph.generate_dataset(6, base_seed=30):
        ref = c.channel("t2")
        for v in [c.channel(n) for n in ("t1", "t1gd", "flair")] + [c.pet]:
            assert qc_gate(v, ref, c.brain_mask).accept
