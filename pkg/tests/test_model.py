import dataclasses

import numpy as np
import pytest

from ldlreid.ldl_engine import LDLEngine
from ldlreid.losses import softmax
from ldlreid.model import (
    NonFiniteGradient,
    ShapeMismatch,
    StaleCache,
    TrainConfig,
    adam_step,
    backward,
    expand_variant,
    forward,
    init_params,
    load_checkpoint,
    make_engine,
    save_checkpoint,
    scheduled_lr,
    train,
)
from ldlreid.synth_data import SyntheticSpec, generate

from gradcheck import model_gradient_error, total_loss_and_grads

TINY_SPEC = SyntheticSpec(domain_count=3, classes_per_domain=4, samples_per_class=8, latent_dim=4, input_dim=8)
TINY_TRAIN = TrainConfig(total_epochs=3, decay_epochs=(1, 2), ids_per_domain_per_batch=2, images_per_id=4,
                         hidden_dim=16, feature_dim=8)


@pytest.fixture(scope="module")
def tiny_source():
    return generate(TINY_SPEC)[0]


def params_for(seed=0, c=5):
    return init_params(6, 10, 4, c, np.random.default_rng(seed))


# ----- forward -----

def test_forward_zero_weights_gives_uniform_softmax():
    p = params_for()
    for w in p.weights.values():
        w[...] = 0.0
    _, logits, _ = forward(p, np.ones((3, 6)))
    assert np.all(logits == 0.0)
    assert np.allclose(softmax(logits), 0.2)


def test_forward_batch_independence():
    p = params_for()
    x = np.random.default_rng(1).standard_normal((8, 6))
    f8, l8, _ = forward(p, x)
    f1, l1, _ = forward(p, x[3:4])
    assert np.allclose(f1[0], f8[3], atol=1e-14) and np.allclose(l1[0], l8[3], atol=1e-14)


def test_forward_deterministic():
    x = np.random.default_rng(1).standard_normal((4, 6))
    a, b = forward(params_for(7), x), forward(params_for(7), x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(params_for(), np.zeros((2, 5)))


# ----- backward -----

def test_backward_zero_upstream():
    p = params_for()
    f, logits, cache = forward(p, np.ones((2, 6)))
    grads = backward(p, cache, np.zeros_like(logits), np.zeros_like(f))
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(2)
    p = params_for()
    f, logits, cache = forward(p, rng.standard_normal((3, 6)))
    gl, gf = rng.standard_normal(logits.shape), rng.standard_normal(f.shape)
    g1, g2 = backward(p, cache, gl, gf), backward(p, cache, 2 * gl, 2 * gf)
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], atol=1e-14)


def test_backward_stale_cache():
    p = params_for()
    f, logits, cache = forward(p, np.ones((2, 6)))
    adam_step(p, {k: np.ones_like(w) for k, w in p.weights.items()}, 1e-3)
    with pytest.raises(StaleCache):
        backward(p, cache, logits, f)
    with pytest.raises(StaleCache):
        backward(params_for(), cache, logits, f)


@pytest.mark.parametrize("variant", ["baseline", "LDL-3", "pinned", "onehot"])
def test_full_model_gradient(variant):
    rng = np.random.default_rng(99)
    worst = max(model_gradient_error(rng, variant) for _ in range(5))
    assert worst < 1e-4


# ----- adam -----

def test_adam_zero_gradient_keeps_params():
    p = params_for()
    before = {k: w.copy() for k, w in p.weights.items()}
    for _ in range(5):
        adam_step(p, {k: np.zeros_like(w) for k, w in p.weights.items()}, 1e-3)
    assert all(np.array_equal(p.weights[k], before[k]) for k in before)
    assert p.step_count == 5


def test_adam_first_step_hand_value():
    from ldlreid.model import ModelParams

    p = ModelParams({"w": np.array([0.0])})
    adam_step(p, {"w": np.array([1.0])}, 0.01)
    # bias-corrected m = 1 and v = 1 on the first step
    assert p.weights["w"][0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-18)


def test_adam_zero_lr():
    p = params_for()
    before = {k: w.copy() for k, w in p.weights.items()}
    adam_step(p, {k: np.ones_like(w) for k, w in p.weights.items()}, 0.0)
    assert all(np.array_equal(p.weights[k], before[k]) for k in before)


def test_adam_rejects_nonfinite():
    p = params_for()
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"w1": np.full_like(p.weights["w1"], np.nan)}, 1e-3)
    assert p.step_count == 0


# ----- schedule and config -----

@pytest.mark.parametrize("epoch,lr", [(0, 3.5e-4), (29, 3.5e-4), (30, 3.5e-5), (49, 3.5e-5), (50, 3.5e-6), (59, 3.5e-6)])
def test_scheduled_lr(epoch, lr):
    assert scheduled_lr(TrainConfig(), epoch) == lr


def test_default_config_snapshot():
    d = TrainConfig().to_dict()
    assert d["learning_rate"] == 3.5e-4 and d["decay_epochs"] == [30, 50] and d["decay_factor"] == 0.1
    assert d["total_epochs"] == 60 and d["momentum_m"] == 0.2 and d["lam"] == 1.0
    assert d["ids_per_domain_per_batch"] == 16 and d["images_per_id"] == 4


@pytest.mark.parametrize("changes", [
    {"decay_epochs": (50, 30)}, {"decay_epochs": (30, 60)}, {"learning_rate": 0.0},
    {"momentum_m": 1.5}, {"lam": -1.0}, {"variant": "LDL-9"}, {"images_per_id": 1},
])
def test_config_validation(changes):
    with pytest.raises(ValueError):
        dataclasses.replace(TrainConfig(), **changes)


def test_expand_variant():
    assert expand_variant("onehot-compare") == ["onehot", "pinned"]
    assert expand_variant("LDL-2") == ["LDL-2"]
    with pytest.raises(ValueError):
        expand_variant("nope")


# ----- train -----

def test_train_baseline_has_no_ldl_component(tiny_source):
    cfg = dataclasses.replace(TINY_TRAIN, variant="baseline", lam=5.0)
    _, hist = train(cfg, tiny_source)
    assert len(hist) == cfg.total_epochs
    assert all(h["loss"]["ldl"] == 0.0 and h["ldl"] == {} for h in hist)


def test_train_is_deterministic(tiny_source):
    cfg = dataclasses.replace(TINY_TRAIN, variant="LDL-3", seed=4)
    p1, h1 = train(cfg, tiny_source)
    p2, h2 = train(cfg, tiny_source)
    assert h1 == h2
    assert all(np.array_equal(p1.weights[k], p2.weights[k]) for k in p1.weights)


def test_first_epoch_targets_are_uniform(tiny_source):
    cfg = dataclasses.replace(TINY_TRAIN, variant="LDL-3", total_epochs=2, decay_epochs=(1,))
    engine = make_engine(cfg, tiny_source)
    seen = []
    original = engine.targets

    def recording(labels):
        seen.append((engine.committed_epoch, original(labels)))
        return seen[-1][1]

    engine.targets = recording
    train(cfg, tiny_source, engine)
    c = tiny_source.layout.class_count
    first = [t for epoch, t in seen if epoch == 0]
    assert first and all(np.all(t == 1.0 / c) for t in first)
    assert any(epoch == 1 and not np.all(t == 1.0 / c) for epoch, t in seen)


def test_train_ldl3_diagnostics(tiny_source):
    _, hist = train(dataclasses.replace(TINY_TRAIN, variant="LDL-3"), tiny_source)
    for h in hist:
        assert h["ldl"]["mass_law_residual"] < 1e-9
        assert h["ldl"]["same_domain_max"] == 0.0
        assert h["ldl"]["row_sum_error"] < 1e-9


def test_train_pinned_keeps_diagonal(tiny_source):
    cfg = dataclasses.replace(TINY_TRAIN, variant="pinned")
    engine = make_engine(cfg, tiny_source)
    _, hist = train(cfg, tiny_source, engine)
    assert np.allclose(np.diag(engine.label_dist), 0.88)
    assert all(h["loss"]["cls"] == 0.0 for h in hist)


def test_train_loss_descends():
    src = generate(TINY_SPEC)[0]
    cfg = dataclasses.replace(TINY_TRAIN, variant="LDL-3", learning_rate=1e-2)
    rng = np.random.default_rng(0)
    params = init_params(8, 16, 8, src.layout.class_count, rng)
    engine = LDLEngine(src.layout)
    idx = np.concatenate([np.flatnonzero(src.class_ids == c)[:4] for c in range(src.layout.class_count)])
    x, y = src.x[idx], src.class_ids[idx]
    targets = engine.targets(y)
    start, _ = total_loss_and_grads(params, cfg, x, y, targets, "LDL-3")
    for _ in range(50):
        _, grads = total_loss_and_grads(params, cfg, x, y, targets, "LDL-3")
        adam_step(params, grads, cfg.learning_rate)
    end, _ = total_loss_and_grads(params, cfg, x, y, targets, "LDL-3")
    assert end < start


def test_train_rejects_compare_pair(tiny_source):
    with pytest.raises(ValueError):
        train(dataclasses.replace(TINY_TRAIN, variant="onehot-compare"), tiny_source)


# ----- checkpoints -----

def test_checkpoint_roundtrip(tmp_path):
    p = params_for(3)
    adam_step(p, {k: np.ones_like(w) for k, w in p.weights.items()}, 1e-3)
    save_checkpoint(tmp_path / "c.json", p, {"variant": "LDL-3"})
    back, extra = load_checkpoint(tmp_path / "c.json")
    assert extra == {"variant": "LDL-3"} and back.step_count == 1
    for d1, d2 in ((p.weights, back.weights), (p.adam_m, back.adam_m), (p.adam_v, back.adam_v)):
        assert all(np.array_equal(d1[k], d2[k]) and d1[k].shape == d2[k].shape for k in d1)


def test_checkpoint_version_check(tmp_path):
    (tmp_path / "c.json").write_text('{"format_version": 99}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.json")
