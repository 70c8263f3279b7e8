import dataclasses
import io

import numpy as np
import pytest

from mapchange import scenegen, train as tr
from mapchange.metrics import TransitionScheme
from mapchange.net import FusionOp, ModelConfig, SegmentationNetwork, TripletNetwork
from mapchange.nn import Module
from mapchange.scenegen import Dataset
from mapchange.tensor import Parameter
from mapchange.train import OptimConfig, TrainState


@pytest.fixture(scope="module")
def data():
    cfg = scenegen.GenConfig(tile=16, n_train=6, n_val=0, n_test=3, seed=1)
    samples = scenegen.generate_dataset(cfg)
    return (
        Dataset.from_samples([s for s in samples if s.split == "train"]),
        Dataset.from_samples([s for s in samples if s.split == "test"]),
    )


def model_cfg(**kw):
    base = dict(num_classes=5, base_channels=4, encoder_stages=2, seed=2)
    base.update(kw)
    return ModelConfig(**base)


def optim(**kw):
    base = dict(batch_size=2, total_iters=6, seed=2)
    base.update(kw)
    return OptimConfig(**base)


# ---------------------------------------------------------------- schedule and optimizer


def test_poly_lr_endpoints_and_monotone():
    cfg = OptimConfig()
    assert tr.poly_lr(0, cfg) == 0.03
    assert tr.poly_lr(cfg.total_iters, cfg) == 0.0
    values = [tr.poly_lr(i, cfg) for i in range(cfg.total_iters + 1)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert tr.poly_lr(750, cfg) == pytest.approx(0.03 * 0.5**0.9, abs=1e-15)
    with pytest.raises(ValueError):
        tr.poly_lr(cfg.total_iters + 1, cfg)


class _One(Module):
    def __init__(self, shape):
        self.w = Parameter("w", shape)


def test_sgd_step_matches_scalar_recurrence():
    cfg = OptimConfig(base_lr=0.05, momentum=0.9, weight_decay=1e-3, total_iters=25)
    rng = np.random.default_rng(0)
    model = _One((4,))
    model.w.data = rng.standard_normal(4)
    state = TrainState(model)
    w_ref, v_ref = model.w.data.copy().tolist(), [0.0] * 4
    for it in range(25):
        g = rng.standard_normal(4)
        model.w.grad = g.copy()
        lr = tr.poly_lr(it, cfg)
        tr.sgd_step(state, lr, cfg)
        for j in range(4):
            gj = float(g[j]) + cfg.weight_decay * w_ref[j]
            v_ref[j] = cfg.momentum * v_ref[j] + gj
            w_ref[j] = w_ref[j] - lr * v_ref[j]
    assert np.abs(model.w.data - np.array(w_ref)).max() <= 1e-12
    assert np.abs(state.velocity["w"] - np.array(v_ref)).max() <= 1e-12


def test_sgd_zero_lr_keeps_weights():
    model = _One((3,))
    model.w.data = np.ones(3)
    model.w.grad = np.ones(3)
    tr.sgd_step(TrainState(model), 0.0, OptimConfig())
    assert np.array_equal(model.w.data, np.ones(3))


def test_sgd_rejects_shape_mismatch():
    model = _One((3,))
    model.w.grad = np.ones(4)
    with pytest.raises(ValueError, match="w"):
        tr.sgd_step(TrainState(model), 0.1, OptimConfig())


def test_batches_cover_each_epoch_once():
    seen = np.concatenate([tr.batch_indices(10, 5, 0, it) for it in range(2)])
    assert sorted(seen.tolist()) == list(range(10))
    assert np.array_equal(tr.batch_indices(10, 5, 0, 3), tr.batch_indices(10, 5, 0, 3))
    assert not np.array_equal(
        np.concatenate([tr.batch_indices(10, 5, 0, i) for i in range(2)]),
        np.concatenate([tr.batch_indices(10, 5, 0, i) for i in range(2, 4)]),
    )


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(momentum=1.0)
    with pytest.raises(ValueError):
        OptimConfig(total_iters=0)


# ---------------------------------------------------------------- training


def _train(data, n=6, **kw):
    log = io.StringIO()
    state = tr.train(TrainState(TripletNetwork(model_cfg(**kw))), data, optim(total_iters=n), log=log)
    return state, log.getvalue()


def test_training_log_and_determinism(data):
    state_a, log_a = _train(data[0])
    state_b, log_b = _train(data[0])
    assert log_a == log_b
    lines = log_a.splitlines()
    assert len(lines) == 6 and lines[0].startswith("iter=1 lr=0.03 l_cls1=")
    keys = [kv.split("=")[0] for kv in lines[0].split()]
    assert keys == ["iter", "lr", "l_cls1", "l_cls2", "l_dice", "l_bce", "total"]
    for name, p in state_a.model.named_parameters().items():
        assert np.array_equal(p.data, state_b.model.named_parameters()[name].data)


def test_training_reduces_loss(data):
    _, log = _train(data[0], n=25)
    totals = [float(line.split("total=")[1]) for line in log.splitlines()]
    assert np.mean(totals[-5:]) < np.mean(totals[:5])


def test_checkpoint_resume_matches_uninterrupted(data, tmp_path):
    cfg = optim(total_iters=6)
    full = tr.train(TrainState(TripletNetwork(model_cfg())), data[0], cfg)
    part = tr.train(TrainState(TripletNetwork(model_cfg())), data[0], cfg, stop_at=3, checkpoint_dir=tmp_path)
    assert part.iteration == 3
    resumed, loaded_cfg = tr.load_checkpoint(tmp_path / "final")
    assert loaded_cfg == cfg and resumed.iteration == 3
    tr.train(resumed, data[0], loaded_cfg)
    for name, p in full.model.named_parameters().items():
        assert np.array_equal(p.data, resumed.model.named_parameters()[name].data), name
        assert np.array_equal(full.velocity[name], resumed.velocity[name]), name


def test_checkpoint_layout_and_errors(data, tmp_path):
    state = TrainState(TripletNetwork(model_cfg(fusion_op=FusionOp.TSTADD)))
    tr.save_checkpoint(tmp_path / "ck", state, optim())
    manifest = (tmp_path / "ck" / "manifest.txt").read_text().splitlines()
    assert manifest[:3] == ["kind=mapchange", "iteration=0", "seed=2"]
    assert "model.fusion_op=TstAdd" in manifest
    assert (tmp_path / "ck" / "params" / "tst.q.weight.mct").is_file()
    loaded, _ = tr.load_checkpoint(tmp_path / "ck")
    assert loaded.model.config == state.model.config
    (tmp_path / "ck" / "manifest.txt").write_text("\n".join(m for m in manifest if not m.startswith("param=tst.q.w")))
    with pytest.raises(ValueError, match="parameter set"):
        tr.load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        tr.load_checkpoint(tmp_path / "missing")


def test_periodic_checkpoints(data, tmp_path):
    tr.train(TrainState(TripletNetwork(model_cfg())), data[0], optim(total_iters=4, checkpoint_every=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final", "iter_000002", "iter_000004"]


def test_non_finite_loss_is_reported(data):
    state = TrainState(TripletNetwork(model_cfg()))
    state.model.named_parameters()["change_decoder.head.weight"].data[:] = np.nan
    with pytest.raises(tr.NonFiniteLoss, match="iteration 1"):
        tr.train(state, data[0], optim())


# ---------------------------------------------------------------- inference


def test_inference_uses_map_as_source_and_strict_threshold(data):
    _, test = data
    model = TripletNetwork(model_cfg())
    scm, prob, pred_t2 = tr.infer_mapchange(model, test.image_t1, test.image_t2, test.map_t1, threshold=0.5)
    scheme = TransitionScheme(5)
    changed = prob > 0.5
    assert np.array_equal(scm, np.where(changed, scheme.encode(test.map_t1, pred_t2), 0))
    # a threshold equal to a pixel's probability leaves that pixel unchanged
    t = float(prob.ravel()[0])
    scm_t, _, _ = tr.infer_mapchange(model, test.image_t1, test.image_t2, test.map_t1, threshold=t)
    assert scm_t.ravel()[0] == 0
    all_on, _, _ = tr.infer_mapchange(model, test.image_t1, test.image_t2, test.map_t1, threshold=-1.0)
    assert np.array_equal(all_on, scheme.encode(test.map_t1, pred_t2))


def test_changed_pixels_decode_to_map_and_t2_classes(data):
    _, test = data
    model = TripletNetwork(model_cfg())
    scheme = TransitionScheme(5)
    for hist in (test.map_t1, (test.map_t1 + 1) % 5):
        scm, prob, pred_t2 = tr.infer_mapchange(model, test.image_t1, test.image_t2, hist, threshold=-1.0)
        for i in zip(*np.nonzero(scm)):
            assert scheme.decode(int(scm[i])) == (hist[i], pred_t2[i])
        assert np.array_equal(scm == 0, hist == pred_t2)


def test_evaluate_mapchange_and_pcc(data):
    train_data, test = data
    rep = tr.evaluate(TripletNetwork(model_cfg()), test)
    assert rep.label == "MapChange" and rep.extra["pixels"] == test.gt_t1.size
    seg = SegmentationNetwork(model_cfg())
    p1, p2, change = tr.pcc_predict(seg, test.image_t1, test.image_t2)
    assert np.array_equal(change, p1 != p2)
    rep = tr.evaluate(seg, test)
    assert rep.label == "PCC" and 0 <= rep.oa <= 1


def test_pcc_training_uses_both_epochs(data):
    log = io.StringIO()
    state = tr.train(TrainState(SegmentationNetwork(model_cfg())), data[0], optim(total_iters=3), log=log)
    assert state.iteration == 3
    line = log.getvalue().splitlines()[0]
    assert "l_cls2=0.0" in line and "l_dice=0.0" in line
    idx = tr.batch_indices(12, 4, 2, 0)
    assert idx.max() < 12


def test_small_ablation_is_reproducible(data):
    train_data, test = data
    cfg = optim(total_iters=2)
    a = tr.ablate_fusion(train_data, test, model_cfg(), cfg)
    b = tr.ablate_fusion(train_data, test, model_cfg(), cfg)
    assert [r.label for r in a] == ["TST-Add", "Add", "Cat"]
    for r in a + b:
        assert float(r.extra.pop("seconds")) >= 0
    assert [r.as_dict() for r in a] == [r.as_dict() for r in b]


def test_plain_sgd_without_momentum_or_decay():
    cfg = OptimConfig(momentum=0.0, weight_decay=0.0)
    model = _One((3,))
    model.w.data = np.array([1.0, -2.0, 0.5])
    model.w.grad = np.array([0.5, 0.5, -1.0])
    tr.sgd_step(TrainState(model), 0.1, cfg)
    assert np.array_equal(model.w.data, np.array([1.0, -2.0, 0.5]) - 0.1 * np.array([0.5, 0.5, -1.0]))
    model.w.grad = np.zeros(3)
    before = model.w.data.copy()
    tr.sgd_step(TrainState(model), 0.1, cfg)
    assert np.array_equal(model.w.data, before)


def test_two_steps_on_a_quadratic():
    # loss = 0.5 * a * w^2, so g = a * w
    cfg = OptimConfig(momentum=0.9, weight_decay=1e-4)
    a, lr = 3.0, 0.05
    model = _One((1,))
    model.w.data = np.array([2.0])
    state = TrainState(model)
    w, v = 2.0, 0.0
    for _ in range(2):
        model.w.grad = a * model.w.data
        tr.sgd_step(state, lr, cfg)
        v = 0.9 * v + (a * w + 1e-4 * w)
        w = w - lr * v
    assert abs(model.w.data[0] - w) <= 1e-12


def test_logged_lr_matches_schedule(data):
    cfg = optim(total_iters=5)
    log = io.StringIO()
    tr.train(TrainState(TripletNetwork(model_cfg())), data[0], cfg, log=log)
    lrs = [float(line.split()[1].split("=")[1]) for line in log.getvalue().splitlines()]
    assert lrs == [tr.poly_lr(i, cfg) for i in range(5)]


def test_low_change_probability_gives_all_no_change(data):
    _, test = data
    model = TripletNetwork(model_cfg())
    model.named_parameters()["change_decoder.head.bias"].data[:] = -100.0
    scm, prob, _ = tr.infer_mapchange(model, test.image_t1, test.image_t2, test.map_t1)
    assert prob.max() < 0.5 and not scm.any()


def test_pcc_identical_epochs_predict_no_change(data):
    _, test = data
    _, _, change = tr.pcc_predict(SegmentationNetwork(model_cfg()), test.image_t1, test.image_t1)
    assert not change.any()


@pytest.mark.slow
def test_desk_scale_training_reduces_loss(tmp_path):
    from mapchange.config import benchmark_config

    cfg = benchmark_config(0)
    train_data = Dataset.from_samples([scenegen.make_sample(cfg.gen, f"train_{i:04d}") for i in range(cfg.gen.n_train)])
    log = io.StringIO()
    tr.train(TrainState(TripletNetwork(cfg.model)), train_data, dataclasses.replace(cfg.optim, total_iters=200), log=log)
    totals = [float(line.split("total=")[1]) for line in log.getvalue().splitlines()]
    assert len(totals) == 200
    assert totals[-1] < totals[0]
