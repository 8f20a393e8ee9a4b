import subprocess
import sys

import numpy as np
import pytest

from oriole import datagen, embedder
from oriole.errors import DimensionError, InputError

from reference import central_diff, conv_forward_loops, rel_err


@pytest.fixture(scope="module")
def model():
    return embedder.EmbeddingModel.init(seed=11)


def test_param_count_is_fixed_by_architecture():
    arch = embedder.Architecture()
    # 8*9+8 + 16*8*9+16 + 16*7*7*32+32
    assert arch.n_params == 80 + 1168 + 25120
    assert embedder.EmbeddingModel.init(0).params.shape == (arch.n_params,)


def test_zero_model_zero_image():
    m = embedder.EmbeddingModel.zeros()
    np.testing.assert_array_equal(embedder.forward(m, np.zeros((32, 32))), np.zeros(32))


def test_forward_matches_naive_loops(model):
    x = np.random.default_rng(0).random((32, 32))
    np.testing.assert_allclose(
        embedder.forward(model, x), conv_forward_loops(model.unpack(), x), rtol=1e-12, atol=1e-12
    )


def test_forward_is_pure(model):
    x = np.random.default_rng(1).random((32, 32))
    before = model.params.copy()
    a = embedder.forward(model, x)
    b = embedder.forward(model, x)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(model.params, before)


def test_forward_batch_invariant(model):
    xs = np.random.default_rng(2).random((40, 32, 32))
    full = embedder.forward(model, xs)
    np.testing.assert_array_equal(embedder.forward(model, xs[3]), full[3])
    np.testing.assert_array_equal(embedder.forward(model, xs[10:17]), full[10:17])


def test_forward_shape_error(model):
    with pytest.raises(DimensionError):
        embedder.forward(model, np.zeros((31, 32)))


_DET_SCRIPT = """
import numpy as np, sys
from oriole import embedder
m = embedder.EmbeddingModel.init(42)
x = np.linspace(0, 1, 1024).reshape(32, 32)
sys.stdout.write(embedder.forward(m, x).tobytes().hex())
"""


def test_forward_identical_across_processes():
    outs = [
        subprocess.run([sys.executable, "-c", _DET_SCRIPT], capture_output=True, text=True, check=True).stdout
        for _ in range(2)
    ]
    assert outs[0] == outs[1] and len(outs[0]) == 32 * 16


def test_input_gradient_zero_upstream(model):
    x = np.random.default_rng(3).random((32, 32))
    np.testing.assert_array_equal(embedder.input_gradient(model, x, np.zeros(32)), np.zeros((32, 32)))


def test_input_gradient_finite_differences(model):
    gen = np.random.default_rng(4)
    x = gen.random((32, 32))
    up = gen.standard_normal(32)
    grad = embedder.input_gradient(model, x, up)
    f = lambda xx: float(embedder.forward(model, xx) @ up)  # noqa: E731
    for p in gen.integers(0, 32, size=(20, 2)):
        p = tuple(p)
        assert rel_err(grad[p], central_diff(f, x, p)) <= 1e-4


def test_param_gradient_finite_differences(model):
    gen = np.random.default_rng(5)
    x = gen.random((3, 32, 32))
    up = gen.standard_normal((3, 32))
    grad = embedder.param_gradient(model, x, up)

    def f(params):
        return float((embedder.forward(embedder.EmbeddingModel(model.arch, params), x) * up).sum())

    for i in gen.integers(0, model.arch.n_params, size=20):
        assert rel_err(grad[i], central_diff(f, model.params, int(i))) <= 1e-4


def test_dead_relu_gives_zero_gradient(model):
    dead = model.copy()
    dead.unpack()["b1"][...] = -10.0
    dead.unpack()["b2"][...] = -10.0
    x = np.random.default_rng(6).random((32, 32))
    g = embedder.input_gradient(dead, x, np.ones(32))
    np.testing.assert_array_equal(g, np.zeros((32, 32)))


def _toy(n_ids, per_id, seed=0):
    spec = datagen.SyntheticSpec(
        n_public_identities=n_ids, n_attacker_identities=1, images_per_identity=per_id,
        n_user_images=2, identity_signal=0.25, noise_sigma=0.08, seed=seed,
    )
    return datagen.generate(spec).with_role(datagen.ROLE_PUBLIC)


def test_training_reaches_high_accuracy():
    ds = _toy(4, 25)
    cfg = embedder.TrainConfig(epochs=30, batch_size=16, learning_rate=0.05, seed=3)
    clf = embedder.train_classifier(ds, cfg)
    assert (clf.predict(ds.images) == ds.labels).mean() >= 0.95


def test_training_lowers_loss_and_is_deterministic():
    ds = _toy(4, 25)
    cfg = embedder.TrainConfig(epochs=5, batch_size=16, learning_rate=0.05, seed=8)
    clf = embedder.train_classifier(ds, cfg)
    again = embedder.train_classifier(ds, cfg)
    assert clf.flat_params().tobytes() == again.flat_params().tobytes()
    one_step = embedder.train_classifier(ds, embedder.TrainConfig(epochs=1, batch_size=10**6, learning_rate=1e-12, seed=8))
    initial = embedder.dataset_loss(one_step, ds.images, ds.labels)
    assert embedder.dataset_loss(clf, ds.images, ds.labels) < initial


def test_single_class_dataset():
    ds = _toy(1, 20)
    clf = embedder.train_classifier(ds, embedder.TrainConfig(epochs=3, seed=0))
    probs = clf.predict_proba(np.random.default_rng(0).random((10, 32, 32)))
    assert (probs[:, 0] >= 0.99).all()


def test_softmax_sums_to_one(model):
    clf = embedder.ClassifierModel(model, np.random.default_rng(0).standard_normal((32, 5)), np.zeros(5), tuple(range(5)))
    p = clf.predict_proba(np.random.default_rng(1).random((7, 32, 32)))
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_frozen_backbone_is_untouched():
    ds = _toy(3, 10)
    init = embedder.EmbeddingModel.init(5)
    cfg = embedder.TrainConfig(epochs=2, seed=1, backbone_lr_scale=0.0)
    clf = embedder.train_classifier(ds, cfg, init_backbone=init)
    np.testing.assert_array_equal(clf.backbone.params, init.params)
    assert clf.backbone is not init


def test_training_errors():
    empty = datagen.LabeledDataset(np.zeros((0, 32, 32)), np.zeros(0))
    with pytest.raises(InputError):
        embedder.train_classifier(empty, embedder.TrainConfig())
    ds = _toy(2, 3)
    with pytest.raises(InputError):
        embedder.train_classifier(ds, embedder.TrainConfig(), class_labels=(0,))
    with pytest.raises(InputError):
        embedder.TrainConfig(epochs=0)


def test_pretrained_features_separate_new_identities():
    # default data: a head on frozen pretrained features, fit on half of each
    # held-out identity, classifies the other half
    ds = datagen.generate(datagen.SyntheticSpec())
    cfg = embedder.TrainConfig(epochs=10, seed=1)
    phi = embedder.pretrain_feature_extractor(ds.with_role(datagen.ROLE_PUBLIC), cfg)
    held = ds.with_role(datagen.ROLE_ATTACKER)
    first = np.arange(len(held)) % 100 < 50
    head_cfg = embedder.TrainConfig(epochs=60, seed=2, backbone_lr_scale=0.0)
    clf = embedder.train_classifier(held.subset(first), head_cfg, init_backbone=phi)
    test = held.subset(~first)
    assert (clf.predict(test.images) == test.labels).mean() >= 0.9
    again = embedder.pretrain_feature_extractor(ds.with_role(datagen.ROLE_PUBLIC), cfg)
    np.testing.assert_array_equal(phi.params, again.params)
