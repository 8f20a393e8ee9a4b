import math
from dataclasses import replace

import numpy as np
import pytest

from oriole import cloakgen, datagen, embedder, pipeline
from oriole.errors import InputError

SPEC = datagen.SyntheticSpec(
    n_public_identities=6, n_attacker_identities=2, images_per_identity=10, n_user_images=10,
    noise_sigma=0.12, identity_signal=0.12, seed=1,
)
CFG = pipeline.ScenarioConfig(
    cloak=cloakgen.CloakConfig(iterations=10),
    train=embedder.TrainConfig(epochs=5, learning_rate=0.05, backbone_lr_scale=0.0),
    m=3,
    fawkes_candidates=3,
)


@pytest.fixture(scope="module")
def data():
    return pipeline.prepare(SPEC, embedder.TrainConfig(epochs=2, seed=1))


class _Stub:
    def __init__(self, preds, labels):
        self._preds = np.asarray(preds)
        self.class_labels = tuple(labels)

    def predict(self, images):
        return self._preds[: len(images)]


def test_evaluate_hand_fixture():
    truth = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2]
    preds = [0, 1, 0, 1, 1, 2, 1, 2, 0, 2]
    test = datagen.LabeledDataset(np.zeros((10, 4, 4)), truth)
    acc, recall = pipeline.evaluate(_Stub(preds, (0, 1, 2)), test)
    assert acc == 7 / 10
    assert recall == {0: 2 / 3, 1: 3 / 4, 2: 2 / 3}


def test_evaluate_constant_predictor():
    truth = np.repeat([0, 1, 2, 3], 5)
    test = datagen.LabeledDataset(np.zeros((20, 4, 4)), truth)
    acc, _ = pipeline.evaluate(_Stub(np.zeros(20, dtype=int), range(4)), test)
    assert acc == 1 / 4


def test_evaluate_perfect_and_mismatch():
    truth = [3, 5, 5]
    test = datagen.LabeledDataset(np.zeros((3, 4, 4)), truth)
    assert pipeline.evaluate(_Stub(truth, (3, 5)), test)[0] == 1.0
    with pytest.raises(InputError):
        pipeline.evaluate(_Stub(truth, (3,)), test)


def test_runs_are_deterministic(data):
    a = pipeline.run(data, CFG)
    fresh = pipeline.prepare(SPEC, embedder.TrainConfig(epochs=2, seed=1))
    b = pipeline.run(fresh, CFG)
    assert a == b


@pytest.mark.parametrize("R", [0.1, 0.5, 1.0])
def test_multi_cloak_fraction_is_exact(data, R):
    cfg = replace(CFG, split=datagen.SplitSpec(leak_ratio=R))
    rep = pipeline.run(data, cfg)
    n_ua = 5
    assert rep.multi_cloak_fraction == cfg.m * math.ceil(R * n_ua) / rep.n_train


def test_zero_budget_fawkes_equals_basic(data):
    cfg = replace(CFG, cloak=replace(CFG.cloak, rho=0.0))
    basic, m_basic = pipeline.run_basic(data, cfg, return_model=True)
    fawkes, m_fawkes = pipeline.run_fawkes(data, cfg, return_model=True)
    assert basic.user_recall == fawkes.user_recall
    assert basic.overall_accuracy == fawkes.overall_accuracy
    np.testing.assert_array_equal(m_basic.head_w, m_fawkes.head_w)


def test_split_shapes(data):
    sp = pipeline.make_split(data, CFG)
    assert len(sp.user_train) == len(sp.user_test) == 5
    assert set(sp.leaked) <= set(sp.user_train)
    assert len(sp.attacker_train) == len(sp.attacker_test) == 10
    assert not set(sp.attacker_train) & set(sp.attacker_test)


def test_audit_covers_every_cloak(data):
    audit = []
    pipeline.run(data, CFG, audit=audit)
    kinds = [a["kind"] for a in audit]
    assert kinds.count("upload") == 5 and kinds.count("query") == 5
    assert kinds.count("multi_cloak") == 3 * 5
    assert all(a["achieved_dssim"] <= CFG.cloak.rho for a in audit)


def test_include_targets_adds_public_classes(data):
    _, model = pipeline.run(data, replace(CFG, include_targets=True), return_model=True)
    assert model.class_labels == tuple(range(6)) + (6, 7, 8)
    _, model = pipeline.run(data, CFG, return_model=True)
    assert model.class_labels == (6, 7, 8)


def test_empty_attacker_pool(data):
    keep = data.dataset.roles != datagen.ROLE_ATTACKER
    empty = replace(data, dataset=data.dataset.subset(keep), cache={})
    with pytest.raises(InputError):
        pipeline.run_basic(empty, CFG)


def test_config_validation():
    with pytest.raises(InputError):
        pipeline.ScenarioConfig(scenario="nope")
    with pytest.raises(InputError):
        pipeline.ScenarioConfig(m=0)
    pipeline.ScenarioConfig(scenario="basic", m=0)
