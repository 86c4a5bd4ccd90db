from dataclasses import replace

import numpy as np
import pytest

from homwarp import data as D
from homwarp import geometry as geo
from homwarp import model as M
from homwarp.errors import DivergedTraining, NonFiniteUpdate
from homwarp.pipeline import cascade as C
from homwarp.pipeline import sequence as S
from homwarp.pipeline.evaluate import evaluate, loss_weight_sweep, sweep_csv
from homwarp.pipeline.metrics import corner_errors
from homwarp.pipeline.schedule import TrainConfig, lr_at, sgd_momentum_step
from homwarp.pipeline.timing import TimingReport, bench_timing
from homwarp.pipeline.training import train_hierarchical, train_sequence, train_single

from conftest import central_diff, random_hbar, rel_err

DESK = D.DataConfig.desk()


@pytest.fixture(scope="module")
def corpus():
    images = D.synthetic_corpus(6, 3, DESK)
    return images, D.generate_dataset(images, 2, 4, DESK)


def quick(**kw):
    return TrainConfig.desk(**{"warmup_steps": 3, "total_steps": 7, "batch_size": 4, **kw})


def tiny_model():
    return replace(M.RegressorConfig.desk(), filters=(2, 2, 2, 2), fc1=8)


def test_lr_schedule():
    cfg = TrainConfig(base_lr=1.0, warmup_steps=10, total_steps=100)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == 0.5
    assert lr_at(10, cfg) == 1.0
    assert lr_at(60, cfg) == pytest.approx(0.5)
    assert lr_at(110, cfg) == 0.0 and lr_at(500, cfg) == 0.0
    assert cfg.steps == 110
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_momentum_step():
    p, v = {"w": np.array([1.0])}, {"w": np.array([2.0])}
    sgd_momentum_step(p, {"w": np.array([1.0])}, v, 0.1, 0.9)
    np.testing.assert_allclose(v["w"], 2.8)
    np.testing.assert_allclose(p["w"], 1.0 - 0.28)
    with pytest.raises(NonFiniteUpdate):
        sgd_momentum_step(p, {"w": np.array([np.inf])}, v, 0.1, 0.9)


def test_corner_errors_pixels():
    t = geo.normalize_matrix(np.array([[1.0, 0, 3], [0, 1, 4], [0, 0, 1]]), 32, 32)
    np.testing.assert_allclose(corner_errors(t[None], np.eye(3)[None], 32), [5.0])


def test_merge_is_canonical_product():
    rng = np.random.default_rng(0)
    r, p = random_hbar(rng), random_hbar(rng)
    m = S.merge_homographies(r * 3.0, p)
    np.testing.assert_allclose(m, geo.compose(geo.Homography3(r), geo.Homography3(p)).matrix,
                               atol=1e-12)


def test_merge_gradients():
    rng = np.random.default_rng(1)
    r, p = random_hbar(rng), random_hbar(rng)
    up = rng.standard_normal((3, 3))
    gr, gp = S.merge_backward(up, r, p)
    f = lambda: float((S.merge_homographies(r, p) * up).sum())
    assert rel_err(gr.ravel(), central_diff(f, r, range(9))) < 1e-7
    assert rel_err(gp.ravel(), central_diff(f, p, range(9))) < 1e-7


def test_sequence_end_to_end_gradients(corpus):
    _, ds = corpus
    cfg = replace(tiny_model(), dropout=0.0)
    stages = [M.init_params(cfg, s, np.float64) for s in (1, 2)]
    a, b, at = ds.float_patches(range(3), np.float64)
    tgt = ds.hbar[:3]
    mask = np.ones(3, bool)

    def loss():
        out = S.sequence_forward(stages, a, b)
        return S.sequence_losses(out, at, tgt, mask, 1.0, 1.0)[0].total

    out = S.sequence_forward(stages, a, b, train=True)
    _, gm, gw = S.sequence_losses(out, at, tgt, mask, 1.0, 1.0)
    S.sequence_backward(stages, out, a, gm, gw)
    rng = np.random.default_rng(3)
    for st in stages:
        for name in ("conv0.w", "fc1.w", "fc2.b"):
            v = st.values[name]
            idx = rng.choice(v.size, min(4, v.size), replace=False)
            assert rel_err(st.grads[name].ravel()[idx], central_diff(loss, v, idx, 1e-7)) < 1e-4


def test_oracle_cascades_are_exact(corpus):
    images, ds = corpus
    rep = evaluate([C.OracleStage(), C.OracleStage()], ds, "hierarchical", images)
    assert rep.mean < 0.1
    rep = evaluate([C.OracleStage()], ds, "sequence")
    assert rep.mean < 1e-9


def test_identity_cascade_scores_the_displacement(corpus):
    images, ds = corpus
    rep = evaluate([C.IdentityStage()], ds, "hierarchical", images)
    expected = corner_errors(np.broadcast_to(np.eye(3), (len(ds), 3, 3)),
                             geo.free_to_matrix(ds.hbar), 32)
    np.testing.assert_allclose(rep.errors, expected)
    csv = rep.csv().splitlines()
    assert csv[0] == "index,image_index,corner_error_px" and csv[-2].startswith("# mean")


def test_hierarchical_chain_folds_stage_estimates(corpus):
    images, ds = corpus
    rng = np.random.default_rng(5)
    fixed = [C.FixedStage(geo.canonical_matrix(random_hbar(rng, 0.05)).ravel()[:8])
             for _ in range(3)]
    rec = ds.record(0)
    res = C.hierarchical_infer(fixed, D.quantize(images[rec.image_index]), rec.patch_b, rec.rect)
    m = [geo.free_to_matrix(s.free) for s in fixed]
    explicit = m[2] @ m[1] @ m[0]
    np.testing.assert_allclose(res.chain.total.matrix, explicit / explicit[2, 2], atol=1e-12)
    assert len(res.patches) == 4


def test_prepare_stage_data(corpus):
    images, ds = corpus
    same = C.hierarchical_prepare_stage_data(C.IdentityStage(), ds, images)
    np.testing.assert_allclose(same.hbar, ds.hbar, atol=1e-12)
    np.testing.assert_array_equal(same.patch_b, ds.patch_b)
    solved = C.hierarchical_prepare_stage_data(C.OracleStage(), ds, images)
    np.testing.assert_allclose(solved.hbar, np.tile(geo.IDENTITY_FREE, (len(ds), 1)), atol=1e-9)
    inner = (slice(None), slice(4, 28), slice(4, 28))
    diff = np.abs(solved.patch_a.astype(int) - solved.patch_b.astype(int))[inner].mean()
    assert diff < 3.0   # aligned up to quantization and resampling


def test_load_stages(tmp_path):
    assert isinstance(C.load_stages("oracle")[0], C.OracleStage)
    for i in range(2):
        M.save_checkpoint(M.init_params(tiny_model(), i), tmp_path / f"stage_{i}.stnh")
    stages = C.load_stages(tmp_path)
    assert len(stages) == 2 and isinstance(stages[1], C.NetworkStage)
    assert len(C.load_stages(tmp_path / "stage_1.stnh")) == 1


def test_training_lowers_loss_and_is_reproducible(corpus):
    _, ds = corpus
    cfg = quick(base_lr=0.005, warmup_steps=5, total_steps=25)
    r1 = train_single(ds, cfg, tiny_model())
    r2 = train_single(ds, cfg, tiny_model())
    assert M.checkpoint_bytes(r1.stages[0]) == M.checkpoint_bytes(r2.stages[0])
    assert r1.curve == r2.curve
    assert np.mean([c[2] for c in r1.curve[-5:]]) < np.mean([c[2] for c in r1.curve[:5]])
    lines = r1.curve_csv().splitlines()
    assert lines[0] == "step,lr,loss,l2,l1,batch_corner_error_px" and len(lines) == 31


def test_withheld_targets_train_on_photometric_loss(corpus):
    _, ds = corpus
    r = train_single(ds, quick(withhold_fraction=1.0), tiny_model())
    assert all(c[3] == 0.0 for c in r.curve)
    assert all(np.isnan(c[5]) for c in r.curve)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(corpus):
    _, ds = corpus
    with pytest.raises((DivergedTraining, NonFiniteUpdate)):
        train_single(ds, quick(base_lr=1e12, warmup_steps=1), tiny_model())


def test_sequence_and_hierarchical_training(corpus):
    images, ds = corpus
    seq = train_sequence(ds, quick(), tiny_model(), k=2)
    assert len(seq.stages) == 2
    hier = train_hierarchical(ds, images, quick(), tiny_model(), k=2)
    assert len(hier.stages) == 2 and len(hier.datasets) == 2
    single = train_single(ds, quick(), tiny_model())
    assert M.checkpoint_bytes(single.stages[0]) == M.checkpoint_bytes(hier.stages[0])


def test_loss_weight_sweep(corpus):
    _, ds = corpus
    rows = loss_weight_sweep(ds, ds, quick(), tiny_model(), [(1.0, 1.0)])
    assert [(r.weight_l2, r.weight_l1) for r in rows] == [(1.0, 1.0), (1.0, 0.0)]
    text = sweep_csv(rows, {"seed": 0})
    assert "weight_l2,weight_l1,mean_corner_error_px" in text


def test_timing_report_arithmetic(corpus):
    rep = TimingReport(0.002, 0.001, 3, 0.01, 10)
    assert rep.d_e_model == pytest.approx(0.009)
    assert rep.relative_gap == pytest.approx(0.1)
    assert "reference only" in rep.text()
    images, ds = corpus
    rec = ds.record(0)
    with pytest.raises(ValueError):
        bench_timing(C.IdentityStage(), images[0], rec.patch_b, rec.rect, 1, reps=3)


def test_lr_is_continuous_then_non_increasing():
    cfg = TrainConfig.desk()
    lrs = [lr_at(s, cfg) for s in range(cfg.steps + 1)]
    w = cfg.warmup_steps
    assert abs(lrs[w + 1] - lrs[w]) < 1e-3 * cfg.base_lr
    assert all(b <= a for a, b in zip(lrs[w:], lrs[w + 1:]))


def test_stored_target_patch_matches_warp(corpus):
    _, ds = corpus
    from homwarp.warp import warp_patch
    for i in range(len(ds)):
        rec = ds.record(i)
        w = warp_patch(rec.patch_a, geo.free_to_matrix(rec.hbar))
        inner = (slice(6, 26), slice(6, 26))
        assert np.abs(w - rec.patch_a_t)[inner].max() <= 0.5 / 255 + 1e-12
