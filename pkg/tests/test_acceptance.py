"""Acceptance suite: one test per criterion, each printing a PASS line
with its measured values (run with ``pytest tests/test_acceptance.py -v -s``).

The desk-scale replication experiments (criteria 4 and 5) share one
synthetic dataset and one pretrained localizer, built by the module
fixture below.
"""

import math
import time

import numpy as np
import pytest

from odseg import cli
from odseg import data as D
from odseg import evaluate as E
from odseg import experiment as X
from odseg import model as M
from odseg import tensor as T
from odseg import train as TR
from odseg.model import extend_to_unet, save_model
from odseg.preprocess import PreprocessConfig, clahe

from clahe_reference import clahe_reference
from conftest import student_t_two_sided_p_oracle

JOBS = 2  # worker processes for fold/fraction cells


def rel_err_ok(analytic, numeric, rtol=1e-4):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(1.0, float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) <= rtol * scale


def fd_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


# -- criterion 1: gradient suite ------------------------------------------------


def _check_op(rng, build_args, apply_op, n_instances=20):
    """FD-check every differentiable argument of one op over random
    instances; returns the number of argument checks performed."""
    checks = 0
    for _ in range(n_instances):
        arg_values = build_args(rng)
        proj = rng.standard_normal(apply_op(*[T.Tensor(a) for a in arg_values]).shape)

        tensors = [T.Tensor(a, requires_grad=True) for a in arg_values]
        (apply_op(*tensors) * T.Tensor(proj)).sum().backward()

        for idx, arg in enumerate(arg_values):
            def loss(v, idx=idx):
                probe = [T.Tensor(v if j == idx else a) for j, a in enumerate(arg_values)]
                return float((apply_op(*probe).values * proj).sum())

            assert rel_err_ok(tensors[idx].grad, fd_grad(loss, arg.copy())), \
                f"gradient mismatch in argument {idx}"
            checks += 1
    return checks


def test_criterion_1_gradient_suite():
    start = time.time()
    rng = np.random.default_rng(20240809)
    total = 0

    total += _check_op(rng, lambda r: (r.standard_normal((1, 2, 4, 4)),
                                       r.standard_normal((2, 2, 3, 3)),
                                       r.standard_normal(2)),
                       lambda x, w, b: T.conv2d(x, w, b))
    total += _check_op(rng, lambda r: (r.standard_normal((1, 3, 3, 3)),
                                       r.standard_normal((2, 3, 1, 1)),
                                       r.standard_normal(2)),
                       lambda x, w, b: T.conv1x1(x, w, b))
    total += _check_op(rng, lambda r: (0.37 * r.permutation(16).astype(float).reshape(1, 1, 4, 4),),
                       lambda x: T.maxpool2(x))
    total += _check_op(rng, lambda r: (r.standard_normal((2, 2, 3, 3)),
                                       r.standard_normal(2) + 1.5,
                                       r.standard_normal(2)),
                       lambda x, g, b: T.batch_norm(x, g, b, T.BatchNormState(2), "train"))
    # relu checked away from its kink at 0
    total += _check_op(rng, lambda r: (np.sign(r.standard_normal((3, 4)))
                                       * (0.05 + np.abs(r.standard_normal((3, 4)))),),
                       lambda x: T.relu(x))
    total += _check_op(rng, lambda r: (r.standard_normal((3, 4)),), lambda x: T.sigmoid(x))
    total += _check_op(rng, lambda r: (r.standard_normal((3, 4)),),
                       lambda x: T.dropout(x, 0.4, "train", np.random.default_rng(99)))
    total += _check_op(rng, lambda r: (r.standard_normal((3, 4)),
                                       r.standard_normal((2, 4)),
                                       r.standard_normal(2)),
                       lambda x, w, b: T.linear(x, w, b))
    total += _check_op(rng, lambda r: (r.standard_normal((1, 2, 3, 3)),),
                       lambda x: T.upsample2(x))
    total += _check_op(rng, lambda r: (r.standard_normal((1, 2, 3, 3)),
                                       r.standard_normal((1, 1, 3, 3))),
                       lambda a, b: T.concat_channels(a, b))

    # both losses (scalar outputs: projection is a 0-d array)
    for _ in range(20):
        pred = rng.standard_normal((4, 2))
        target = rng.standard_normal((4, 2))
        pt = T.Tensor(pred, requires_grad=True)
        TR.mse_loss(pt, T.Tensor(target)).backward()
        num = fd_grad(lambda v: TR.mse_loss(T.Tensor(v), T.Tensor(target)).item(), pred.copy())
        assert rel_err_ok(pt.grad, num)
        total += 1

        prob = np.clip(rng.random((1, 1, 4, 4)), 0.05, 0.95)
        mask = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        qt = T.Tensor(prob, requires_grad=True)
        TR.neg_log_soft_dice_loss(qt, T.Tensor(mask)).backward()
        num = fd_grad(lambda v: TR.neg_log_soft_dice_loss(T.Tensor(v), T.Tensor(mask)).item(),
                      prob.copy())
        assert rel_err_ok(qt.grad, num)
        total += 1

    elapsed = time.time() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s (budget 60s)"
    print(f"\nPASS criterion 1: {total} gradient checks across 10 ops + 2 losses, "
          f"rel err <= 1e-4, {elapsed:.1f}s")


# -- criterion 2: freeze invariant ----------------------------------------------

FREEZE_MODEL = M.ModelConfig(input_size=16, levels=2, base_filters=4, dropout_rate=0.1)
FREEZE_SPEC = D.SyntheticSpec(size=16, radius_lo=0.15, radius_hi=0.3, vessel_count=1,
                              distractor_count=1, noise_sigma=3.0)
FREEZE_PRE = PreprocessConfig(target_size=16, clahe_tiles=2)


def test_criterion_2_freeze_invariant():
    start = time.time()
    samples = D.prepare_samples(D.make_dataset(FREEZE_SPEC, 14, seed=31), FREEZE_PRE)
    epochs, batch = 8, 2
    steps = epochs * math.ceil(len(samples) / batch)
    assert steps >= 50

    localizer = M.build_localizer(FREEZE_MODEL, np.random.default_rng(1))
    extended = extend_to_unet(localizer, np.random.default_rng(2))
    before = extended.encoder_bytes()
    cfg = TR.TrainConfig(phase="segment", learning_rate=2e-3, batch_size=batch,
                         epochs=epochs, seed=3, patience=0)
    TR.train_segmenter(samples, cfg, extended)
    assert extended.encoder_bytes() == before, "frozen encoder drifted during phase 2"

    base_cfg = TR.TrainConfig(phase="baseline", learning_rate=2e-3, batch_size=batch,
                              epochs=epochs, seed=3, patience=0)
    result = TR.train_baseline(samples, base_cfg, FREEZE_MODEL, np.random.default_rng(2))
    fresh = M.build_baseline(FREEZE_MODEL, np.random.default_rng(2))
    assert result.model.encoder_bytes() != fresh.encoder_bytes(), \
        "baseline encoder (parameters + running stats) should change"

    elapsed = time.time() - start
    assert elapsed < 120.0, f"freeze check took {elapsed:.1f}s (budget 120s)"
    print(f"\nPASS criterion 2: encoder bytes stable over {steps} phase-2 steps, "
          f"baseline encoder updates, {elapsed:.1f}s")


# -- criterion 3: overfit smoke tests -------------------------------------------

OVERFIT_SPEC = D.SyntheticSpec(size=64, noise_sigma=6.0, texture_amplitude=25.0,
                               vessel_count=3, distractor_count=2)
OVERFIT_PRE = PreprocessConfig(target_size=64, clahe_tiles=8)


def test_criterion_3_overfit_smoke():
    start = time.time()

    # (a) localizer memorizes 16 images to MSE <= 4 px^2
    mcfg = M.ModelConfig(input_size=64, levels=3, base_filters=8, dropout_rate=0.0)
    sixteen = D.prepare_samples(D.make_dataset(OVERFIT_SPEC, 16, seed=77), OVERFIT_PRE)
    net = M.build_localizer(mcfg, np.random.default_rng(5))
    cfg = TR.TrainConfig(phase="localize", learning_rate=1e-3, batch_size=8, epochs=200,
                         seed=9, patience=0)
    result = TR.train_localizer(sixteen, cfg, net)
    train_mse = E.mse_localization_report(result.model, sixteen).mse
    assert train_mse <= 4.0, f"localizer overfit MSE {train_mse:.2f} px^2 > 4"

    # (b) both segmentation schemes memorize 4 images to Dice >= 0.95
    seg_mcfg = M.ModelConfig(input_size=64, levels=3, base_filters=8, dropout_rate=0.1)
    four = D.prepare_samples(D.make_dataset(OVERFIT_SPEC, 4, seed=88), OVERFIT_PRE)
    loc = M.build_localizer(seg_mcfg, np.random.default_rng(6))
    TR.train_localizer(four, TR.TrainConfig(phase="localize", learning_rate=1e-3,
                                            batch_size=4, epochs=30, seed=2, patience=0), loc)
    pre_model = extend_to_unet(loc, np.random.default_rng(7))
    seg_cfg = TR.TrainConfig(phase="segment", learning_rate=2e-3, batch_size=4,
                             epochs=150, seed=3, patience=0)
    pre_dice = TR.train_segmenter(four, seg_cfg, pre_model).best_metric
    assert pre_dice >= 0.95, f"pretrained overfit Dice {pre_dice:.3f} < 0.95"

    base_cfg = TR.TrainConfig(phase="baseline", learning_rate=2e-3, batch_size=4,
                              epochs=150, seed=3, patience=0)
    base_dice = TR.train_baseline(four, base_cfg, seg_mcfg,
                                  np.random.default_rng(8)).best_metric
    assert base_dice >= 0.95, f"baseline overfit Dice {base_dice:.3f} < 0.95"

    elapsed = time.time() - start
    assert elapsed < 600.0, f"overfit smoke took {elapsed:.1f}s (budget 600s)"
    print(f"\nPASS criterion 3: localizer MSE {train_mse:.3f} px^2, overfit Dice "
          f"pretrained {pre_dice:.3f} / baseline {base_dice:.3f}, {elapsed:.1f}s")


# -- shared desk-scale experiment (criteria 4 and 5) -----------------------------

DESK_SPEC = D.SyntheticSpec(size=32, radius_lo=0.10, radius_hi=0.22, noise_sigma=10.0,
                            texture_amplitude=35.0, vessel_count=4, distractor_count=3)
DESK_PRE = PreprocessConfig(target_size=32, clahe_tiles=4)
DESK_MODEL = M.ModelConfig(input_size=32, levels=3, base_filters=6, dropout_rate=0.2)
DESK_SEG_CFG = TR.TrainConfig(phase="segment", learning_rate=2e-3, batch_size=4,
                              epochs=50, patience=8)
DESK_BASE_CFG = TR.TrainConfig(phase="baseline", learning_rate=2e-3, batch_size=4,
                               epochs=50, patience=8)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Synthetic datasets plus the shared pretrained localizer."""
    loc = D.prepare_samples(D.make_dataset(DESK_SPEC, 640, seed=1001), DESK_PRE)
    seg = D.prepare_samples(D.make_dataset(DESK_SPEC, 92, seed=1002), DESK_PRE)

    net = M.build_localizer(DESK_MODEL, np.random.default_rng(41))
    cfg = TR.TrainConfig(phase="localize", learning_rate=1e-3, batch_size=16, epochs=30,
                         seed=42, patience=8)
    result = TR.train_localizer(loc[:576], cfg, net, loc[576:])
    report = E.mse_localization_report(result.model, loc[576:])

    ckpt = tmp_path_factory.mktemp("desk") / "localizer.ckpt"
    save_model(result.model, ckpt)
    return {"seg": seg, "ckpt": ckpt, "loc_euclid": report.mean_euclidean}


def test_criterion_4_pretraining_beats_baseline_at_full_data(desk):
    start = time.time()
    pre_cv = X.cross_validate(desk["seg"], X.PRETRAINED, DESK_MODEL, DESK_SEG_CFG, k=5,
                              base_seed=0, localizer_path=desk["ckpt"], jobs=JOBS)
    base_cv = X.cross_validate(desk["seg"], X.BASELINE, DESK_MODEL, DESK_BASE_CFG, k=5,
                               base_seed=0, jobs=JOBS)
    elapsed = time.time() - start
    assert pre_cv.mean >= base_cv.mean, (
        f"pretrained mean Dice {pre_cv.mean:.3f} < baseline {base_cv.mean:.3f}")
    assert elapsed < 1800.0, f"five-fold comparison took {elapsed:.1f}s (budget 1800s)"
    print(f"\nPASS criterion 4: pretrained {pre_cv.mean:.3f}±{pre_cv.std:.3f} >= "
          f"baseline {base_cv.mean:.3f}±{base_cv.std:.3f} "
          f"(92 samples, 5-fold CV, localizer err {desk['loc_euclid']:.2f}px), {elapsed:.0f}s")


def test_criterion_5_low_sample_significance(desk):
    verdicts = []
    for base_seed in (0, 1, 2):
        start = time.time()
        report = X.efficiency_sweep(desk["seg"], desk["ckpt"], DESK_MODEL, DESK_SEG_CFG,
                                    DESK_BASE_CFG, fractions=D.VALID_FRACTIONS, k=5,
                                    base_seed=base_seed, jobs=JOBS)
        elapsed = time.time() - start
        assert elapsed < 5400.0, f"sweep took {elapsed:.1f}s (budget 5400s)"
        row10 = report.rows[0]
        row100 = report.rows[-1]
        gap10 = row10.mean_pre - row10.mean_base
        gap100 = row100.mean_pre - row100.mean_base
        ok = (row10.p < 0.05) and (gap10 > 0.0) and (gap10 > gap100)
        verdicts.append(ok)
        print(f"\ncriterion 5 seed {base_seed}: gap@10={gap10:+.3f} (p={row10.p:.2e}), "
              f"gap@100={gap100:+.3f}, {'ok' if ok else 'FAILED'}, {elapsed:.0f}s")
    passed = sum(verdicts)
    assert passed >= 2, f"low-sample significance held for only {passed}/3 base seeds"
    print(f"\nPASS criterion 5: pretraining advantage largest and significant at the "
          f"10% fraction for {passed}/3 base seeds")


# -- criterion 6: statistics oracle ----------------------------------------------


def test_criterion_6_statistics_oracle():
    rng = np.random.default_rng(606)
    checked = 0
    worst = 0.0
    while checked < 100:
        n = int(rng.integers(2, 60))
        pre = rng.normal(0.8, 0.08, n)
        base = pre - rng.normal(rng.uniform(-0.05, 0.05), rng.uniform(0.01, 0.1), n)
        res = E.paired_t_test(pre, base)
        if not math.isfinite(res.t):
            continue
        oracle = student_t_two_sided_p_oracle(res.t, res.df)
        worst = max(worst, abs(res.p - oracle))
        assert abs(res.p - oracle) < 1e-6, (res.t, res.df, res.p, oracle)
        checked += 1

    worked = E.paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert worked.t == pytest.approx(3.4641, abs=1e-4)
    assert worked.p == pytest.approx(0.0742, abs=1e-4)
    print(f"\nPASS criterion 6: {checked} p-values within 1e-6 of the quadrature oracle "
          f"(worst {worst:.2e}); worked example t={worked.t:.4f}, p={worked.p:.4f}")


# -- criterion 7: CLAHE oracle ---------------------------------------------------


def test_criterion_7_clahe_oracle():
    rng = np.random.default_rng(707)
    for i in range(20):
        img = rng.integers(0, 256, size=(16, 16)).astype(np.uint8)
        tiles = 2 if i % 2 == 0 else 4
        clip = 2.0 if i % 3 else 3.5
        ours = clahe(img, tiles=tiles, clip_limit=clip)
        ref = np.array(clahe_reference(img.tolist(), tiles, clip), dtype=np.uint8)
        assert np.array_equal(ours, ref), f"CLAHE mismatch on instance {i}"

    uniform = np.full((16, 16), 123, dtype=np.uint8)
    out = clahe(uniform, tiles=2, clip_limit=2.0)
    assert out.min() == out.max(), "uniform image must stay uniform"
    print("\nPASS criterion 7: 20 random images byte-exact against the scalar "
          "reference; uniform image stays uniform")


# -- criterion 8: end-to-end determinism ------------------------------------------

DETERMINISM_CONFIG = """\
synth.size = 16
synth.n_localize = 12
synth.n_segment = 10
synth.radius_lo = 0.15
synth.radius_hi = 0.3
synth.vessels = 1
synth.distractors = 1
synth.noise_sigma = 3.0
pre.target_size = 16
pre.clahe_tiles = 2
model.levels = 2
model.base_filters = 2
model.dropout = 0.1
loc.batch_size = 4
loc.epochs = 2
loc.patience = 0
seg.batch_size = 4
seg.epochs = 3
seg.patience = 0
cv.k = 2
sweep.fractions = 50,100
run.base_seed = 11
"""


def test_criterion_8_sweep_determinism(tmp_path, capsys):
    config = tmp_path / "exp.cfg"
    config.write_text(DETERMINISM_CONFIG + f"run.out_dir = {tmp_path / 'out'}\n")
    assert cli.main(["gen", "-c", str(config)]) == 0
    assert cli.main(["train-localizer", "-c", str(config)]) == 0
    ckpt = tmp_path / "out" / "localizer.ckpt"

    digests = []
    for jobs in ("1", "2", "1"):
        assert cli.main(["sweep", "-c", str(config), "--pretrained", str(ckpt),
                         "--jobs", jobs]) == 0
        sweep_dir = tmp_path / "out" / "sweep"
        digests.append(((sweep_dir / "report.csv").read_bytes(),
                        (sweep_dir / "scores.csv").read_bytes(),
                        (sweep_dir / "sweep.svg").read_bytes()))
    capsys.readouterr()
    assert digests[0] == digests[1] == digests[2], \
        "sweep outputs differ across reruns / --jobs values"
    print("\nPASS criterion 8: report.csv, scores.csv and sweep.svg byte-identical "
          "across reruns with --jobs 1 and --jobs 2")
