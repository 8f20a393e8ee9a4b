"""Deterministic synthetic identities.

Each identity owns a smooth base pattern (a mixture of low-frequency 2-D
sinusoids drawn from a stream keyed by (seed, identity)); its images are
the base pattern plus i.i.d. Gaussian pixel noise, clamped to [0, 1].

Labels occupy disjoint ranges::

    public    0 .. P-1
    attacker  P .. P+A-1
    user      P+A
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .rng import stream

ROLE_PUBLIC = "public"
ROLE_ATTACKER = "attacker"
ROLE_USER = "user"

N_COMPONENTS = 6
MAX_FREQ = 3


@dataclass(frozen=True)
class SyntheticSpec:
    n_public_identities: int = 20
    n_attacker_identities: int = 10
    images_per_identity: int = 100
    n_user_images: int = 100
    image_size: int = 32
    identity_signal: float = 0.12
    noise_sigma: float = 0.12
    seed: int = 0

    def __post_init__(self):
        for name in (
            "n_public_identities",
            "n_attacker_identities",
            "images_per_identity",
            "n_user_images",
            "image_size",
        ):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if not self.noise_sigma > 0:
            raise InputError("noise_sigma must be > 0")
        if not self.identity_signal > 0:
            raise InputError("identity_signal must be > 0")

    @property
    def user_label(self):
        return self.n_public_identities + self.n_attacker_identities

    def public_labels(self):
        return list(range(self.n_public_identities))

    def attacker_labels(self):
        p = self.n_public_identities
        return list(range(p, p + self.n_attacker_identities))


@dataclass(frozen=True)
class SplitSpec:
    train_test_ratio: float = 1.0
    leak_ratio: float = 1.0

    def __post_init__(self):
        if not 0 < self.leak_ratio <= 1:
            raise InputError(f"leak_ratio must lie in (0, 1], got {self.leak_ratio}")
        if not self.train_test_ratio > 0:
            raise InputError("train_test_ratio must be > 0")

    def n_train(self, n):
        """Training share of `n` items under train:test = ratio:1."""
        k = int(round(n * self.train_test_ratio / (1.0 + self.train_test_ratio)))
        return min(max(k, 1), n - 1)

    def n_leaked(self, n_train):
        return n_leaked(self.leak_ratio, n_train)


def n_leaked(leak_ratio, n_train):
    # the epsilon keeps 0.3 * 50 = 15.000000000000002 from rounding up
    return max(1, min(n_train, math.ceil(leak_ratio * n_train - 1e-9)))


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    roles: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.roles is None:
            self.roles = np.full(len(self.labels), "", dtype=object)
        self.roles = np.asarray(self.roles, dtype=object)
        if not (len(self.images) == len(self.labels) == len(self.roles)):
            raise InputError("images, labels and roles differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, mask_or_index):
        return LabeledDataset(
            self.images[mask_or_index],
            self.labels[mask_or_index],
            self.roles[mask_or_index],
        )

    def with_role(self, role):
        return self.subset(self.roles == role)

    def with_labels(self, labels):
        return self.subset(np.isin(self.labels, list(labels)))

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise InputError("nothing to concatenate")
        return LabeledDataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.roles for p in parts]),
        )


def base_pattern(seed, identity, size, signal):
    gen = stream(seed, "identity-pattern", identity)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    acc = np.zeros((size, size))
    for _ in range(N_COMPONENTS):
        fy, fx = gen.integers(0, MAX_FREQ + 1, size=2)
        if fy == 0 and fx == 0:
            fx = 1
        phase = gen.uniform(0, 2 * np.pi)
        amp = gen.uniform(0.5, 1.0)
        acc += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    acc /= np.abs(acc).max()
    return np.clip(0.5 + signal * acc, 0.0, 1.0)


def _identity_images(spec, label, count):
    base = base_pattern(spec.seed, label, spec.image_size, spec.identity_signal)
    noise = stream(spec.seed, "identity-noise", label).standard_normal(
        (count, spec.image_size, spec.image_size)
    )
    return np.clip(base + spec.noise_sigma * noise, 0.0, 1.0)


def generate(spec):
    """Build the full dataset: public pool, attacker pool and the user."""
    images, labels, roles = [], [], []
    groups = [(lab, ROLE_PUBLIC, spec.images_per_identity) for lab in spec.public_labels()]
    groups += [(lab, ROLE_ATTACKER, spec.images_per_identity) for lab in spec.attacker_labels()]
    groups.append((spec.user_label, ROLE_USER, spec.n_user_images))
    for label, role, count in groups:
        images.append(_identity_images(spec, label, count))
        labels.append(np.full(count, label))
        roles.append(np.full(count, role, dtype=object))
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), np.concatenate(roles))


def split_indices(n, split, seed):
    """Index form of `split_user`: (train_idx, test_idx, leaked_idx)."""
    if n < 2:
        raise InputError(f"need at least 2 user images, got {n}")
    perm = stream(seed, "user-split").permutation(n)
    k = split.n_train(n)
    train, test = perm[:k], perm[k:]
    leaked = stream(seed, "leak-shuffle").permutation(train)[: split.n_leaked(k)]
    return train, test, leaked


def split_user(user_images, split, seed):
    """Split the user's images into (U_A, U_B, leaked subset of U_A)."""
    user_images = np.asarray(user_images, dtype=np.float64)
    train, test, leaked = split_indices(len(user_images), split, seed)
    return user_images[train], user_images[test], user_images[leaked]
