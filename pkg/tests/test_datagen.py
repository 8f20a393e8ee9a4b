import numpy as np
import pytest

from oriole import datagen
from oriole.errors import InputError

SMALL = datagen.SyntheticSpec(
    n_public_identities=3, n_attacker_identities=2, images_per_identity=6, n_user_images=10, seed=5
)


def test_label_ranges_and_counts():
    ds = datagen.generate(SMALL)
    assert len(ds) == 5 * 6 + 10
    assert sorted(set(ds.with_role(datagen.ROLE_PUBLIC).labels)) == [0, 1, 2]
    assert sorted(set(ds.with_role(datagen.ROLE_ATTACKER).labels)) == [3, 4]
    assert set(ds.with_role(datagen.ROLE_USER).labels) == {SMALL.user_label} == {5}
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_generation_is_deterministic_and_seeded():
    a, b = datagen.generate(SMALL), datagen.generate(SMALL)
    assert a.images.tobytes() == b.images.tobytes()
    from dataclasses import replace

    c = datagen.generate(replace(SMALL, seed=6))
    assert not np.array_equal(a.images, c.images)


def test_identity_images_share_a_pattern():
    ds = datagen.generate(SMALL)
    means = {lab: ds.images[ds.labels == lab].mean(axis=0) for lab in range(3)}
    within = np.abs(ds.images[ds.labels == 0] - means[0]).mean()
    between = np.abs(means[0] - means[1]).mean()
    assert between > within / 3


@pytest.mark.parametrize("n,ratio,expected", [(100, 1.0, 50), (100, 9.0, 90), (100, 1 / 9, 10), (2, 0.01, 1), (2, 100, 1)])
def test_train_test_counts(n, ratio, expected):
    assert datagen.SplitSpec(train_test_ratio=ratio).n_train(n) == expected


@pytest.mark.parametrize("R,n,expected", [(1.0, 50, 50), (0.1, 50, 5), (0.3, 50, 15), (0.01, 50, 1), (0.5, 7, 4)])
def test_leak_counts(R, n, expected):
    assert datagen.n_leaked(R, n) == expected


def test_split_user_partitions():
    imgs = np.arange(100)[:, None, None] * np.ones((1, 4, 4)) / 100
    ua, ub, leaked = datagen.split_user(imgs, datagen.SplitSpec(leak_ratio=0.2), seed=3)
    ids = lambda arr: set(np.round(arr[:, 0, 0] * 100).astype(int).tolist())  # noqa: E731
    assert len(ua) == len(ub) == 50 and len(leaked) == 10
    assert ids(ua).isdisjoint(ids(ub)) and ids(ua) | ids(ub) == set(range(100))
    assert ids(leaked) <= ids(ua)


def test_split_errors():
    with pytest.raises(InputError):
        datagen.SplitSpec(leak_ratio=0.0)
    with pytest.raises(InputError):
        datagen.SplitSpec(train_test_ratio=-1)
    with pytest.raises(InputError):
        datagen.split_indices(1, datagen.SplitSpec(), 0)
    with pytest.raises(InputError):
        datagen.SyntheticSpec(n_public_identities=0)


def test_dataset_helpers():
    ds = datagen.generate(SMALL)
    both = datagen.LabeledDataset.concat([ds.with_labels([0]), ds.with_labels([4])])
    assert sorted(set(both.labels.tolist())) == [0, 4]
    with pytest.raises(InputError):
        datagen.LabeledDataset(np.zeros((2, 4, 4)), np.zeros(3))
