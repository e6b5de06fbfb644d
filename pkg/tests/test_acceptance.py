"""One test per acceptance criterion; tolerances and time limits as specified."""

import dataclasses
import datetime as dt
import json
import time

import numpy as np
import pytest
import torch

import oracles
from pipeline import TOY, run_pipeline
from fmisynth import evaluation as ev
from fmisynth import net, objective as ob, prep, regqc, train as tr, volgrid
from fmisynth.net import GeneratorSpec
from fmisynth.phantom import PhantomSpec, generate_case, generate_dataset
from fmisynth.volgrid import BinaryMask, Tracer, Volume


def test_otsu_oracle():
    t0 = time.perf_counter()
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.gamma(1.0 + seed % 5, 1.0, (16, 16, 16)) + rng.normal(0, 0.1, (16, 16, 16))
        k, thr = oracles.otsu_exhaustive(x)
        assert prep.otsu_threshold(Volume(x)) == thr, seed
    assert time.perf_counter() - t0 < 5.0


def test_metric_oracles():
    t0 = time.perf_counter()
    full = BinaryMask(np.ones((16, 16, 16), bool))
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.random((16, 16, 16))
        b = np.clip(a + rng.normal(0, 0.05 + 0.01 * seed, a.shape), 0, 1)
        m = BinaryMask(rng.random(a.shape) > 0.25) if seed % 2 else full
        assert abs(ev.psnr(Volume(b), Volume(a), m) - oracles.psnr_direct(b, a, m.data)) < 1e-9
        assert abs(ev.ssim(Volume(b), Volume(a), m) - oracles.ssim_direct(b, a, m.data)) < 1e-6
        assert ev.ssim(Volume(a), Volume(a), m) == 1.0
        assert ev.psnr(Volume(a), Volume(a), m) == ev.PSNR_IDENTICAL
    assert time.perf_counter() - t0 < 10.0


def test_dilation_oracle():
    t0 = time.perf_counter()
    for seed in range(20):
        m = np.random.default_rng(seed).random((16, 16, 16)) > 0.97
        assert np.array_equal(prep.dilate(BinaryMask(m), 3).data, oracles.dilate_bruteforce(m, 3)), seed
    single = np.zeros((16, 16, 16), bool)
    single[8, 8, 8] = True
    assert prep.dilate(BinaryMask(single), 3).count == 343
    assert time.perf_counter() - t0 < 5.0


def _fd_close(analytic, numeric, tol=1e-3):
    return abs(analytic - numeric) <= tol * max(abs(analytic), abs(numeric))


def test_gradient_checks():
    t0 = time.perf_counter()
    h = 1e-6
    rng = np.random.default_rng(0)

    # total_loss (train_soft) with respect to the generator output
    true = np.clip(rng.normal(0.3, 0.05, (8, 8, 8)), 0, 1)
    true[3:6, 3:6, 3:6] = 0.9
    true_t = torch.tensor(true)
    tumor = np.zeros((8, 8, 8), bool)
    tumor[4, 4, 4] = True
    tumor = BinaryMask(tumor)
    x = torch.tensor(rng.random((1, 4, 8, 8, 8)))
    d = net.build_discriminator(5, layers=2, rng=3, dtype=torch.float64)
    brain = torch.ones(1, 1, 8, 8, 8, dtype=torch.bool)

    def objective(p):
        _, s = net.forward_discriminator(d, x, p)
        return ob.total_loss(
            {"gan": ob.lsgan_g_loss(s), "l1": ob.l1_loss(p, true_t[None, None], brain), "focus": ob.tumor_focus_loss(p[0, 0], true_t, tumor)}
        )

    pred = torch.tensor(0.25 + 0.5 * rng.random((1, 1, 8, 8, 8)), requires_grad=True)
    objective(pred).backward()
    for _ in range(10):
        idx = (0, 0, *map(int, rng.integers(1, 8, size=3)))
        with torch.no_grad():
            a, b = pred.detach().clone(), pred.detach().clone()
            a[idx] += h
            b[idx] -= h
            num = (objective(a) - objective(b)).item() / (2 * h)
        assert _fd_close(pred.grad[idx].item(), num), (idx, pred.grad[idx].item(), num)

    # through a small generator with respect to its parameters
    spec = GeneratorSpec(in_channels=2, base_width=2, n_down=1, n_art=1, n_heads=2, volume_shape=(8, 8, 8))
    g = net.build_generator(spec, rng=4, dtype=torch.float64)
    assert net.count_parameters(g) <= 5000
    # a random point where every path carries signal well above double-precision roundoff
    draw = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in g.parameters():
            p.normal_(0.0, 0.3, generator=draw)
    gx = torch.tensor(rng.random((1, 2, 8, 8, 8)))
    target = torch.tensor(rng.random((1, 1, 8, 8, 8)))

    weights = torch.tensor(rng.random((1, 1, 8, 8, 8)))

    def loss():
        # smooth in the output, so the difference quotient is not spoiled by kinks
        out = net.forward_generator(g, gx)
        return (weights * out).mean() + ((out - target) ** 2).mean()

    g.zero_grad()
    loss().backward()
    hp = 1e-5
    checked = 0
    for name, p in g.named_parameters():
        flat = p.detach().view(-1)
        for j in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            ana = p.grad.view(-1)[j].item()
            with torch.no_grad():
                orig = flat[j].item()
                flat[j] = orig + hp
                up = loss().item()
                flat[j] = orig - hp
                dn = loss().item()
                flat[j] = orig
            num = (up - dn) / (2 * hp)
            if abs(ana) < 1e-12:
                # biases followed by instance normalization have no effect
                assert abs(num) < 1e-9, (name, num)
                continue
            assert _fd_close(ana, num), (name, int(j), ana, num)
            checked += 1
    assert checked >= 60
    assert time.perf_counter() - t0 < 120.0


def test_lsgan_arithmetic():
    one, zero = torch.ones(1, 1, 4, 4, 2), torch.zeros(1, 1, 4, 4, 2)
    assert float(ob.lsgan_d_loss(one, zero)) == 0.0
    assert float(ob.lsgan_d_loss(0.5 * one, 0.5 * one)) == 0.25
    assert float(ob.lsgan_g_loss(one)) == 0.0
    assert ob.total_loss({"gan": 0.25, "l1": 0.02, "focus": 0.01}, ob.LossWeights(1, 100, 100)) == 3.25


def test_shape_and_lifting():
    toy = GeneratorSpec()
    g = net.build_generator(toy)
    with torch.no_grad():
        assert tuple(net.forward_generator(g, torch.rand(1, 4, 32, 32, 16)).shape) == (1, 1, 32, 32, 16)

    paper = GeneratorSpec.paper_scale()
    meta = net.build_generator(paper, device="meta")
    assert tuple(meta(torch.empty(1, 4, 256, 256, 128, device="meta")).shape) == (1, 1, 256, 256, 128)
    assert net.count_parameters(meta) == net.expected_parameter_count(paper)

    s2 = GeneratorSpec(base_width=8, volume_shape=(32, 32))
    s3 = GeneratorSpec(base_width=8, volume_shape=(32, 32, 16))
    g2 = net.build_generator(s2, rng=5)
    g3 = net.inflate_2d_weights(g2, s3)
    x2 = torch.rand(1, 4, 32, 32, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        y2 = g2(x2)
        y3 = g3(x2.unsqueeze(-1).expand(1, 4, 32, 32, 16).contiguous())
    assert float((y3 - y2.unsqueeze(-1)).abs().max()) < 1e-5


def _bbox_psnr(pred, case):
    return ev.psnr(Volume(pred), case.pet, ev.tumor_bbox_region(case.tumor_mask, case.brain_mask))


@pytest.mark.slow
def test_overfit_smoke():
    t0 = time.perf_counter()
    cases = generate_dataset(2, base_seed=11)
    assert all(c.pet.shape == (32, 32, 16) for c in cases)
    cfg = tr.TrainConfig(epochs_fixed=100, epochs_decay=0, lr0=1e-4, seed=0)
    res = tr.train(cases, cfg, spec=GeneratorSpec())
    assert len(res.log) == 200
    l1 = np.array([r["l1"] for r in res.log])
    first = l1[[r["epoch"] == 0 for r in res.log]].mean()
    final_epoch = l1[[r["epoch"] == cfg.n_epochs - 1 for r in res.log]].mean()
    assert final_epoch <= 0.2 * first, (first, final_epoch)
    for c in cases:
        gain = _bbox_psnr(tr.predict(res.checkpoint, c), c) - _bbox_psnr(np.zeros(c.pet.shape), c)
        assert gain >= 3.0, gain
    assert time.perf_counter() - t0 < 600.0


@pytest.mark.slow
def test_pretrain_finetune_contract():
    fdg = generate_dataset(4, base_seed=100, template=PhantomSpec(tracer=Tracer.FDG_like))
    fmiso = generate_dataset(6, base_seed=200)
    train_set, test_set = fmiso[:4], fmiso[4:]
    cfg_pre = tr.TrainConfig(epochs_fixed=25, epochs_decay=0, channels=("t1", "t2", "flair"), seed=1)
    cfg_fine = tr.TrainConfig(epochs_fixed=20, epochs_decay=5, seed=2)

    # transfer: everything outside the stem carries over bit-exactly
    pre = tr.train(fdg, dataclasses.replace(cfg_pre, epochs_fixed=1, weights=ob.LossWeights(1, 100, 0)), spec=GeneratorSpec(in_channels=3))
    for spec, dch in ((GeneratorSpec(in_channels=3), 4), (GeneratorSpec(), 5)):
        init = tr.transfer_weights(pre.checkpoint, spec, dch, seed=2)
        same = spec.in_channels == 3
        for k, v in pre.checkpoint.generator_state.items():
            if same or not k.startswith("stem."):
                assert np.array_equal(v, init.generator_state[k]), k
        for k, v in pre.checkpoint.discriminator_state.items():
            if same or not k.startswith("net.0."):
                assert np.array_equal(v, init.discriminator_state[k]), k

    pretrained = tr.pretrain_finetune(fdg, train_set, cfg_pre, cfg_fine)
    fresh = tr.train(train_set, cfg_fine)
    p_pre = np.mean([_bbox_psnr(tr.predict(pretrained.checkpoint, c), c) for c in test_set])
    p_fresh = np.mean([_bbox_psnr(tr.predict(fresh.checkpoint, c), c) for c in test_set])
    assert p_pre >= p_fresh - 0.5, (p_pre, p_fresh)

    fine_log = pretrained.log[len(fdg) * cfg_pre.n_epochs :]
    first = lambda log: np.mean([r["l1"] for r in log if r["epoch"] == 0])  # noqa: E731
    assert first(fine_log) <= first(fresh.log)


def test_split_and_pairing():
    base = generate_case(PhantomSpec(shape=(16, 16, 16)))
    fix = lambda days, tracer: dataclasses.replace(base, tracer=tracer, pet_date=base.mri_date + dt.timedelta(days=days))  # noqa: E731
    fmiso, fdg = tr.PairingPolicy.for_tracer(Tracer.FMISO_like), tr.PairingPolicy.for_tracer(Tracer.FDG_like)
    assert (fmiso.max_days, fdg.max_days) == (30, 90)
    for days, policy, kept in ((25, fmiso, True), (30, fmiso, True), (31, fmiso, False), (40, fmiso, False), (60, fdg, True), (90, fdg, True), (91, fdg, False)):
        tracer = Tracer.FMISO_like if policy is fmiso else Tracer.FDG_like
        assert bool(tr.select_pairs([fix(days, tracer)], policy)) is kept, days

    cohort = generate_dataset(51, base_seed=0, duplicate_fraction=4 / 47, template=PhantomSpec(shape=(16, 16, 16)))
    assert len({c.patient_id for c in cohort}) == 47
    for seed in range(100):
        a_train, a_test = tr.split_dataset(cohort, 0.10, seed)
        b_train, b_test = tr.split_dataset(cohort, 0.10, seed)
        assert not {c.patient_id for c in a_train} & {c.patient_id for c in a_test}
        assert len(a_test) >= 6
        assert [c.case_id for c in a_test] == [c.case_id for c in b_test]
        assert [c.case_id for c in a_train] == [c.case_id for c in b_train]


def test_registration_recovery():
    t0 = time.perf_counter()
    c = generate_case(PhantomSpec(shape=(64, 64, 32), seed=5))
    cases = [
        (regqc.RigidTransform((0, 0, 0), (5, 0, 0)), "translation"),
        (regqc.RigidTransform((0, 0, 0.1), (0, 0, 0)), "rotation"),
    ]
    for truth, kind in cases:
        fixed = regqc.apply_rigid(c.channel("t2"), truth, c.pet.geometry)
        mask = regqc.apply_rigid(c.brain_mask, truth, c.pet.geometry)
        res = regqc.rigid_register(c.channel("t1"), fixed, mask, return_result=True)
        err = res.transform.as_vector() - truth.as_vector()
        if kind == "translation":
            assert np.all(np.abs(err[3:]) <= 0.5), err
        else:
            assert np.all(np.abs(err[:3]) <= 0.02), err
        for level in res.trace:
            assert all(b >= a for a, b in zip(level, level[1:]))
    assert time.perf_counter() - t0 < 120.0


def test_determinism_and_round_trips(tmp_path):
    c = generate_case(PhantomSpec(seed=9))
    volgrid.write_case(c, tmp_path / "case")
    back = volgrid.read_case(tmp_path / "case")
    for a, b in zip(c.mri + (c.pet,), back.mri + (back.pet,)):
        # files hold 32-bit reals
        assert np.array_equal(a.data.astype(np.float32), b.data) and np.array_equal(a.affine, b.affine) and a.spacing == b.spacing
    assert np.array_equal(c.tumor_mask.data, back.tumor_mask.data)
    assert np.array_equal(c.brain_mask.data, back.brain_mask.data)
    volgrid.write_case(back, tmp_path / "again")
    for f in sorted((tmp_path / "case").iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes(), f.name

    g, d = net.build_generator(GeneratorSpec(), rng=1), net.build_discriminator(5, rng=2)
    ck = net.Checkpoint.from_modules(g, d, epoch=4, fingerprint="f")
    loaded = net.load_checkpoint(net.save_checkpoint(ck, tmp_path / "ck"))
    for k, v in ck.generator_state.items():
        assert np.array_equal(v, loaded.generator_state[k])
    x = torch.rand(1, 4, 32, 32, 16)
    with torch.no_grad():
        assert torch.equal(g(x), loaded.generator()(x))

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TOY))
    runs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        assert run_pipeline(root, str(cfg)) == [0] * 10
        runs.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    assert runs[0].keys() == runs[1].keys()
    assert runs[0] == runs[1]
