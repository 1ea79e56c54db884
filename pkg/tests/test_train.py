import numpy as np
import pytest

from conftest import tiny_space
from oneshot_nas.data import DatasetSpec, generate
from oneshot_nas.errors import DataError, NumericError, StageError, UsageError
from oneshot_nas.heads import HEAD_PREFIX, attach_head, classification_head, detach_head
from oneshot_nas.nn import softmax_cross_entropy
from oneshot_nas.space import Genotype, enumerate_genotypes
from oneshot_nas.supernet import SubnetView, export_standalone, init_weight_store
from oneshot_nas.train import (
    TrainConfig,
    ensemble_step,
    finetune,
    finetune_config,
    make_optimizer,
    metrics_csv,
    pretrain,
    retrain_standalone,
    sandwich_finetune_step,
    sandwich_schedule,
)

LR = 0.05


def _store(space, seed=0):
    return init_weight_store(space, seed=seed, dtype=np.float64, head=classification_head(space))


def _batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 8, 8, 3)), rng.integers(0, 3, n)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(DatasetSpec(num_classes=3, n_train=24, n_val=12, n_test=12, resolution=8))


def _path_grad(store, g, x, y):
    """Gradient of one path, computed on an exported copy and scattered back."""
    model = export_standalone(store, g)
    view = SubnetView(model, g)
    _, dout = softmax_cross_entropy(view.forward(x, "train"), y)
    view.backward(dout)
    local = {}
    view.accumulate_grads(local)
    refs = SubnetView(store, g).param_refs()
    full = {}
    for key, gk in local.items():
        full[key] = np.zeros_like(store.params[key])
        full[key][refs[key]] = gk
    return full


def _manual_sgd(params, grads, cfg):
    """Reference first update from zero momentum: ``p -= lr (g + wd p)``."""
    out = {k: v.copy() for k, v in params.items()}
    for key, g in grads.items():
        wd = 0.0 if key.endswith((".gamma", ".beta", ".b", ".b1", ".b2")) else cfg.weight_decay
        out[key] = params[key] - LR * (g + wd * params[key])
    return out


def test_single_path_step_equals_plain_sgd():
    sp = tiny_space()
    store = _store(sp)
    g = Genotype(((5, 3.0), (3, 2.0)))
    x, y = _batch()
    cfg = TrainConfig(subnets_per_step=1)
    expected = _manual_sgd(store.params, _path_grad(store, g, x, y), cfg)
    report = ensemble_step(store, x, y, make_optimizer(cfg), None, LR, cfg, genotypes=[g])
    assert report.executions == 1
    for key in store.params:
        np.testing.assert_allclose(store.params[key], expected[key], atol=1e-12, err_msg=key)


def test_ensemble_step_averages_all_paths():
    """With B equal to the number of topologies the step is a full average."""
    sp = tiny_space(expansions=(3.0,))
    topologies = list(enumerate_genotypes(sp))
    assert len(topologies) == 4
    store = _store(sp)
    x, y = _batch(1)
    per_path = [_path_grad(store, g, x, y) for g in topologies]
    avg = {}
    for grads in per_path:
        for k, v in grads.items():
            avg[k] = avg.get(k, 0.0) + v / len(topologies)
    cfg = TrainConfig(subnets_per_step=4)
    expected = _manual_sgd(store.params, avg, cfg)
    ensemble_step(store, x, y, make_optimizer(cfg), np.random.default_rng(0), LR, cfg)
    for key in store.params:
        np.testing.assert_allclose(store.params[key], expected[key], atol=1e-12, err_msg=key)


def test_ensemble_step_samples_distinct_full_width_paths():
    sp = tiny_space(layers=(2, 2))
    store = _store(sp)
    x, y = _batch()
    cfg = TrainConfig(subnets_per_step=5)
    rng = np.random.default_rng(3)
    for _ in range(5):
        report = ensemble_step(store, x, y, make_optimizer(cfg), rng, LR, cfg)
        assert len(set(report.genotypes)) == 5 == report.executions
        assert all(e == sp.max_expansion for g in report.genotypes for _, e in g)


def test_unsampled_slots_untouched_including_decay_and_momentum():
    sp = tiny_space()
    store = _store(sp)
    before = {k: v.tobytes() for k, v in store.params.items()}
    cfg = TrainConfig(subnets_per_step=1, weight_decay=0.1)
    state = make_optimizer(cfg)
    g = Genotype(((3, 3.0), (3, 3.0)))
    x, y = _batch()
    for _ in range(3):
        ensemble_step(store, x, y, state, None, LR, cfg, genotypes=[g])
    for key, raw in before.items():
        if key.startswith(("L0.k5", "L1.k5")):
            assert store.params[key].tobytes() == raw, key
            assert key not in state.buffers
        else:
            assert store.params[key].tobytes() != raw, key


def test_sandwich_schedule_per_subnet():
    sp = tiny_space(layers=(2, 1), expansions=(2.0, 3.0, 4.0))
    cfg = finetune_config(subnets_per_step=3, width_list=(2.0, 3.0, 4.0))
    runs = sandwich_schedule(sp, cfg, np.random.default_rng(0))
    assert len(runs) == 9
    for i in range(3):
        lo, hi, rnd = runs[3 * i:3 * i + 3]
        assert lo.kernels == hi.kernels == rnd.kernels
        assert set(lo.expansions) == {2.0} and set(hi.expansions) == {4.0}
        assert set(rnd.expansions) <= {2.0, 3.0, 4.0}


def test_sandwich_schedule_per_step():
    sp = tiny_space(layers=(2, 1), expansions=(2.0, 3.0, 4.0))
    cfg = finetune_config(subnets_per_step=3, width_list=(2.0, 4.0), sandwich="per_step")
    runs = sandwich_schedule(sp, cfg, np.random.default_rng(0))
    assert len(runs) == 5
    assert set(runs[0].expansions) == {2.0} and set(runs[1].expansions) == {4.0}
    assert all(set(r.expansions) <= {2.0, 4.0} for r in runs[2:])


def test_sandwich_random_widths_cover_choices():
    sp = tiny_space(layers=(2, 2), expansions=(2.0, 3.0, 4.0))
    cfg = finetune_config(subnets_per_step=1, width_list=(2.0, 3.0, 4.0))
    rng = np.random.default_rng(1)
    counts = {2.0: 0, 3.0: 0, 4.0: 0}
    for _ in range(500):
        for e in sandwich_schedule(sp, cfg, rng)[2].expansions:
            counts[e] += 1
    for c in counts.values():  # 2000 draws, p = 1/3: sigma ~ 21
        assert abs(c - 2000 / 3) < 4 * 21


def test_degenerate_single_width_is_full_width_training():
    sp = tiny_space(expansions=(2.0, 6.0))
    cfg = finetune_config(subnets_per_step=2, width_list=(6.0,))
    runs = sandwich_schedule(sp, cfg, np.random.default_rng(0))
    assert all(set(r.expansions) == {6.0} for r in runs)
    assert len(runs) == 6


@pytest.mark.parametrize("widths", [(), (1.0, 2.0), (2.0, 7.0), (2.0, 5.0)])
def test_width_list_validation(widths):
    sp = tiny_space(expansions=(2.0, 3.0, 6.0))
    with pytest.raises(UsageError):
        sandwich_schedule(sp, finetune_config(width_list=widths), np.random.default_rng(0))


def test_non_finite_loss_raises():
    sp = tiny_space()
    store = _store(sp)
    store.params["head.fc.w"][:] = np.nan
    x, y = _batch()
    cfg = TrainConfig(subnets_per_step=1)
    with pytest.raises(NumericError):
        ensemble_step(store, x, y, make_optimizer(cfg), np.random.default_rng(0), LR, cfg)


@pytest.mark.parametrize("kw", [{"subnets_per_step": 0}, {"epochs": 0}, {"lr0": 0.0},
                                {"sandwich": "both"}])
def test_config_validation(kw):
    with pytest.raises(UsageError):
        TrainConfig(**kw)


def _quick(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 8, "lr0": 0.1, "subnets_per_step": 2,
                          "val_subnets": 1, "recal_batches": 1, "width_list": (2.0, 3.0),
                          **kw})


def test_pretrain_is_deterministic(tiny_data):
    sp = tiny_space()
    a, rows_a = pretrain(_store(sp), tiny_data, _quick())
    b, rows_b = pretrain(_store(sp), tiny_data, _quick())
    assert rows_a == rows_b
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert a.stage == "pretrained"
    assert metrics_csv(rows_a).splitlines()[0] == "epoch,avg_loss,lr,val_metric"
    c, _ = pretrain(_store(sp), tiny_data, _quick(seed=1))
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_finetune_requires_pretrained_stage(tiny_data):
    sp = tiny_space()
    store = _store(sp)
    with pytest.raises(StageError):
        finetune(store, "classification", tiny_data, _quick())
    finetune(store, "classification", tiny_data, _quick(), allow_scratch=True)
    assert store.stage == "finetuned:classification"


def test_finetune_task_and_class_checks(tiny_data):
    sp = tiny_space()
    store = _store(sp)
    store.stage = "pretrained"
    with pytest.raises(DataError):
        finetune(store, "segmentation", tiny_data, _quick())
    detach_head(store)
    attach_head(store, classification_head(sp, num_classes=4))
    with pytest.raises(DataError):
        finetune(store, "classification", tiny_data, _quick())


def test_head_only_finetune_freezes_backbone(tiny_data):
    sp = tiny_space()
    store = _store(sp)
    store.stage = "pretrained"
    backbone = {k: v.tobytes() for k, v in store.backbone_items().items()}
    head = {k: v.copy() for k, v in store.params.items() if k.startswith(HEAD_PREFIX)}
    finetune(store, "classification", tiny_data, _quick(), head_only=True)
    assert store.stage == "headtuned:classification"
    for k, raw in backbone.items():
        if k in store.params:
            assert store.params[k].tobytes() == raw, k
    assert any(not np.array_equal(store.params[k], v) for k, v in head.items())


def test_sandwich_step_touches_both_width_extremes():
    sp = tiny_space(expansions=(2.0, 3.0))
    store = _store(sp)
    x, y = _batch()
    cfg = finetune_config(subnets_per_step=1, width_list=(2.0, 3.0), weight_decay=0.0)
    before = store.params["L0.k3.dw.w"].copy()
    report = sandwich_finetune_step(store, x, y, make_optimizer(cfg), np.random.default_rng(0),
                                    LR, cfg, topologies=[Genotype(((3, 3.0), (3, 3.0)))])
    assert report.executions == 3
    changed = ~np.isclose(store.params["L0.k3.dw.w"], before, rtol=0, atol=0)
    assert changed[..., :8].any() and changed[..., 8:].any()  # channels of e=2 and e=3 both move


def test_retrain_standalone_ignores_template_weights(tiny_data):
    sp = tiny_space()
    g = Genotype(((5, 2.0), (3, 3.0)))
    cfg = _quick(subnets_per_step=1)
    t1, t2 = _store(sp, seed=0), _store(sp, seed=9)
    m1, r1, _ = retrain_standalone(t1, g, tiny_data, cfg)
    m2, r2, _ = retrain_standalone(t2, g, tiny_data, cfg)
    assert r1 == r2 and m1.stage == "standalone"
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)
    m3, _, _ = retrain_standalone(t2, g, tiny_data, cfg, inherit=True)
    assert any(m1.params[k].tobytes() != m3.params[k].tobytes() for k in m1.params)


def test_degenerate_sandwich_gradient_equals_ensemble_step():
    """With width_list {6} the 3B executions are B paths run three times each."""
    sp = tiny_space(expansions=(2.0, 6.0))
    topologies = [Genotype(((3, 6.0), (5, 6.0))), Genotype(((5, 6.0), (5, 6.0)))]
    x, y = _batch(4)
    a, b = _store(sp), _store(sp)
    cfg = finetune_config(subnets_per_step=2, width_list=(6.0,))
    sandwich_finetune_step(a, x, y, make_optimizer(cfg), np.random.default_rng(0), LR, cfg,
                           topologies=topologies)
    ensemble_step(b, x, y, make_optimizer(cfg), None, LR, cfg, genotypes=topologies)
    for key in a.params:
        np.testing.assert_allclose(a.params[key], b.params[key], atol=1e-6, rtol=0)


def test_accumulation_is_order_independent():
    sp = tiny_space(expansions=(3.0,))
    paths = list(enumerate_genotypes(sp))
    x, y = _batch(5)
    store = init_weight_store(sp, seed=0, head=classification_head(sp))  # f32
    from oneshot_nas.train import accumulate_gradients
    g1, _ = accumulate_gradients(store, paths, x, y)
    g2, _ = accumulate_gradients(store, paths[::-1], x, y)
    g3, _ = accumulate_gradients(store, paths, x, y)
    for k in g1:
        scale = max(np.abs(g1[k]).max(), 1e-12)
        assert np.abs(g1[k] - g2[k]).max() / scale < 1e-5, k
        assert g1[k].tobytes() == g3[k].tobytes(), k  # same order: bit-identical


def test_one_update_per_step():
    sp = tiny_space(layers=(2, 2))
    store = _store(sp)
    cfg = TrainConfig(subnets_per_step=5)
    state = make_optimizer(cfg)
    x, y = _batch()
    rng = np.random.default_rng(0)
    for _ in range(3):
        report = ensemble_step(store, x, y, state, rng, LR, cfg)
        assert len(report.losses) == report.executions == 5
    assert state.num_updates == 3


def test_standalone_parameter_count_matches_analytic(tiny_data):
    from oneshot_nas.space import count_resources
    sp = tiny_space()
    for g in enumerate_genotypes(sp):
        model = export_standalone(_store(sp), g)
        assert sum(v.size for v in model.params.values()) == count_resources(sp, g).params


def test_first_epoch_loss_starts_near_uniform(tiny_data):
    sp = tiny_space()
    store = _store(sp)
    x, y = tiny_data.train.images[:24], tiny_data.train.labels[:24]
    from oneshot_nas.train import accumulate_gradients
    _, losses = accumulate_gradients(store, [Genotype(((3, 2.0), (3, 2.0)))], x, y)
    assert abs(losses[0] - np.log(3)) < 0.5
