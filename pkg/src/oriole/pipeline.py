"""End-to-end Basic / Fawkes / Oriole scenarios.

    basic   train: attacker pool + clean U_A          test: clean U_B
    fawkes  train: attacker pool + cloaked U_A        test: clean U_B
    oriole  train: attacker pool + cloaked U_A + S_O  test: cloaked U_B (S_F)

U_A is what the user uploaded (cloaked in the fawkes and oriole scenarios);
S_O holds m multi-cloaks of each leaked clean image, all labelled as the
user.  Each attacker identity is also split train/test so that the overall
accuracy covers more than the user.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cloakgen, datagen, embedder, targetsel
from .errors import InputError
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

SCENARIOS = ("basic", "fawkes", "oriole")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "oriole"
    cloak: cloakgen.CloakConfig = field(default_factory=cloakgen.CloakConfig)
    # the attacker trains a softmax head on top of the shared, frozen extractor
    train: embedder.TrainConfig = field(
        default_factory=lambda: embedder.TrainConfig(epochs=60, learning_rate=0.05, backbone_lr_scale=0.0)
    )
    split: datagen.SplitSpec = field(default_factory=datagen.SplitSpec)
    m: int = 20
    seed: int = 0
    # add every public identity (hence every possible target) to the attacker's training pool
    include_targets: bool = False
    # "set": one Fawkes target per image set; "image": one per image
    fawkes_scope: str = "set"
    # Fawkes draws its target from this many most-dissimilar classes
    fawkes_candidates: int = 10
    # start the attacker's classifier from the shared feature extractor
    attacker_init: str = "phi"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InputError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "oriole" and self.m < 1:
            raise InputError("oriole needs m >= 1")
        if self.fawkes_scope not in ("set", "image"):
            raise InputError(f"unknown fawkes_scope {self.fawkes_scope!r}")
        if self.fawkes_candidates < 1:
            raise InputError("fawkes_candidates must be >= 1")
        if self.attacker_init not in ("phi", "fresh"):
            raise InputError(f"unknown attacker_init {self.attacker_init!r}")


@dataclass
class MetricsReport:
    scenario: str
    user_recall: float
    overall_accuracy: float
    multi_cloak_fraction: float
    n_train: int
    n_test: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("user_recall", "overall_accuracy", "multi_cloak_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class ExperimentData:
    """Generated dataset plus the shared feature extractor and public centroids."""

    spec: datagen.SyntheticSpec
    dataset: datagen.LabeledDataset
    phi: embedder.EmbeddingModel
    public_table: targetsel.CentroidTable
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def user_label(self):
        return self.spec.user_label


DEFAULT_PRETRAIN = embedder.TrainConfig(epochs=10, learning_rate=0.05, seed=1)


def prepare(spec, pretrain=DEFAULT_PRETRAIN, phi=None):
    """Generate data and (unless given) pretrain phi on the public pool."""
    dataset = datagen.generate(spec)
    public = dataset.with_role(datagen.ROLE_PUBLIC)
    if phi is None:
        phi = embedder.pretrain_feature_extractor(public, pretrain)
    table = targetsel.compute_centroids(public, phi)
    return ExperimentData(spec, dataset, phi, table)


# --------------------------------------------------------------------------
# cloak bookkeeping


def _cloak_key(cfg):
    return (cfg.rho, cfg.iterations, cfg.step_size, cfg.penalty_weight, cfg.dssim)


def cloak_many(data, image_index, target_labels, cfg, audit=None, kind=""):
    """Cloak dataset images toward public-table targets, with memoisation.

    A cloak is a pure function of (image, target, phi, cfg), so results are
    cached on `data` by (image index, target label, cfg).  Returns an
    (N, S, S) array in input order.
    """
    image_index = np.asarray(image_index, dtype=np.int64)
    key = _cloak_key(cfg)
    store = data.cache.setdefault(("cloaks", key), {})
    pairs = list(zip(image_index.tolist(), list(target_labels)))
    missing = sorted({p for p in pairs if p not in store})
    if missing:
        idx = np.array([i for i, _ in missing])
        feats = np.stack([data.public_table[t] for _, t in missing])
        log.info("solving %d cloaks (rho=%g)", len(missing), cfg.rho)
        res = cloakgen.cloak_batch(data.dataset.images[idx], feats, data.phi, cfg)
        for k, pair in enumerate(missing):
            store[pair] = {name: res[name][k] for name in res}
    if audit is not None:
        for i, t in pairs:
            r = store[(i, t)]
            audit.append(
                {
                    "kind": kind,
                    "image": i,
                    "target": t,
                    "rho": cfg.rho,
                    "achieved_dssim": float(r["achieved_dssim"]),
                    "initial_feature_dist": float(r["initial_feature_dist"]),
                    "final_feature_dist": float(r["final_feature_dist"]),
                    "iterations": int(r["iterations_run"]),
                }
            )
    if not pairs:
        return np.zeros((0,) + data.dataset.images.shape[1:])
    return np.stack([store[p]["cloaked"] for p in pairs])


def cached_cloak(data, cfg, image, target):
    """A cloak already solved by `cloak_many` (KeyError if it was not)."""
    return data.cache[("cloaks", _cloak_key(cfg))][(image, target)]["cloaked"]


def _features(data, index):
    store = data.cache.setdefault("features", {})
    missing = [i for i in np.asarray(index).tolist() if i not in store]
    if missing:
        f = embedder.forward(data.phi, data.dataset.images[missing])
        store.update(zip(missing, f))
    return np.stack([store[i] for i in np.asarray(index).tolist()])


def fawkes_targets(data, index, scope, candidates=1, seed=0, phase=""):
    """Fawkes target label for each image in `index`.

    scope "set" picks one target from the whole set (the user choosing in
    advance); scope "image" picks per image.  Random draws (candidates > 1)
    come from streams keyed by (seed, phase, image index).
    """
    feats = _features(data, index)
    index = np.asarray(index).tolist()

    def pick(f, key):
        dist = targetsel.distance_set(None, data.public_table, features=f)
        gen = stream(seed, "fawkes-target", phase, key)
        t = cloakgen.choose_fawkes_target(dist, data.public_table, data.user_label, candidates, gen)
        return t.labels[0]

    if scope == "set":
        return [pick(feats, "set")] * len(index)
    return [pick(f[None], i) for f, i in zip(feats, index)]


def oriole_targets(data, leaked_index, m):
    feats = _features(data, leaked_index)
    dist = targetsel.distance_set(None, data.public_table, features=feats)
    return targetsel.select_targets(dist, m, exclude=data.user_label, table=data.public_table)


# --------------------------------------------------------------------------
# splits and training


@dataclass
class Split:
    attacker_train: np.ndarray
    attacker_test: np.ndarray
    user_train: np.ndarray  # U_A
    user_test: np.ndarray  # U_B
    leaked: np.ndarray


def make_split(data, cfg):
    ds = data.dataset
    user_idx = np.flatnonzero(ds.roles == datagen.ROLE_USER)
    a, b, leak = datagen.split_indices(len(user_idx), cfg.split, cfg.seed)
    att_train, att_test = [], []
    for lab in data.spec.attacker_labels():
        idx = np.flatnonzero((ds.labels == lab) & (ds.roles == datagen.ROLE_ATTACKER))
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise InputError(f"attacker identity {lab} needs at least 2 images")
        perm = stream(cfg.seed, "attacker-split", lab).permutation(idx)
        k = cfg.split.n_train(len(idx))
        att_train.append(perm[:k])
        att_test.append(perm[k:])
    if not att_train:
        raise InputError("empty attacker pool")
    return Split(
        np.concatenate(att_train),
        np.concatenate(att_test),
        user_idx[a],
        user_idx[b],
        user_idx[leak],
    )


def _train(data, cfg, images, labels):
    ds = data.dataset
    class_labels = list(data.spec.attacker_labels())
    if cfg.include_targets:
        class_labels = list(data.spec.public_labels()) + class_labels
    class_labels.append(data.user_label)
    train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, "attacker-train"))
    init = data.phi if cfg.attacker_init == "phi" else None
    train_set = datagen.LabeledDataset(images, labels)
    return embedder.train_classifier(train_set, train_cfg, init, tuple(class_labels))


def evaluate(model, test):
    """Argmax classification of `test`; returns (overall accuracy, per-label recall)."""
    labels = np.asarray(test.labels)
    if len(labels) == 0:
        raise InputError("empty test set")
    unknown = set(labels.tolist()) - set(model.class_labels)
    if unknown:
        raise InputError(f"test labels {sorted(unknown)} unknown to the model")
    pred = model.predict(test.images)
    correct = pred == labels
    recall = {lab: float(correct[labels == lab].mean()) for lab in sorted(set(labels.tolist()))}
    return float(correct.mean()), recall


def run(data, cfg, audit=None, return_model=False):
    """Run one scenario end to end and score it."""
    ds = data.dataset
    sp = make_split(data, cfg)
    user = data.user_label
    train_imgs = [ds.images[sp.attacker_train]]
    train_labels = [ds.labels[sp.attacker_train]]
    if cfg.include_targets:
        pub = np.flatnonzero(ds.roles == datagen.ROLE_PUBLIC)
        train_imgs.append(ds.images[pub])
        train_labels.append(ds.labels[pub])

    if cfg.scenario == "basic":
        uploads = ds.images[sp.user_train]
    else:
        tgt = fawkes_targets(
            data, sp.user_train, cfg.fawkes_scope, cfg.fawkes_candidates, cfg.seed, "upload"
        )
        uploads = cloak_many(data, sp.user_train, tgt, cfg.cloak, audit, "upload")
    train_imgs.append(uploads)
    train_labels.append(np.full(len(uploads), user))

    n_multi = 0
    if cfg.scenario == "oriole":
        targets = oriole_targets(data, sp.leaked, cfg.m)
        idx = np.repeat(sp.leaked, len(targets))
        labs = list(targets.labels) * len(sp.leaked)
        s_o = cloak_many(data, idx, labs, cfg.cloak, audit, "multi_cloak")
        train_imgs.append(s_o)
        train_labels.append(np.full(len(s_o), user))
        n_multi = len(s_o)

    images = np.concatenate(train_imgs)
    labels = np.concatenate(train_labels)
    model = _train(data, cfg, images, labels)

    if cfg.scenario == "oriole":
        # the attacker runs Fawkes on each query image separately
        tgt = fawkes_targets(
            data, sp.user_test, "image", cfg.fawkes_candidates, cfg.seed, "query"
        )
        user_test = cloak_many(data, sp.user_test, tgt, cfg.cloak, audit, "query")
    else:
        user_test = ds.images[sp.user_test]
    test = datagen.LabeledDataset(
        np.concatenate([ds.images[sp.attacker_test], user_test]),
        np.concatenate([ds.labels[sp.attacker_test], np.full(len(user_test), user)]),
    )
    acc, recall = evaluate(model, test)
    report = MetricsReport(
        scenario=cfg.scenario,
        user_recall=recall[user],
        overall_accuracy=acc,
        multi_cloak_fraction=n_multi / len(labels),
        n_train=len(labels),
        n_test=len(test),
        config=config_echo(cfg),
    )
    return (report, model) if return_model else report


def run_basic(data, cfg, **kw):
    return run(data, replace(cfg, scenario="basic"), **kw)


def run_fawkes(data, cfg, **kw):
    return run(data, replace(cfg, scenario="fawkes"), **kw)


def run_oriole(data, cfg, **kw):
    return run(data, replace(cfg, scenario="oriole"), **kw)


def config_echo(cfg):
    return {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "rho": cfg.cloak.rho,
        "m": cfg.m,
        "leak_ratio": cfg.split.leak_ratio,
        "train_test_ratio": cfg.split.train_test_ratio,
        "include_targets": cfg.include_targets,
        "fawkes_scope": cfg.fawkes_scope,
        "fawkes_candidates": cfg.fawkes_candidates,
        "attacker_init": cfg.attacker_init,
        "cloak_iterations": cfg.cloak.iterations,
        "cloak_step_size": cfg.cloak.step_size,
        "penalty_weight": cfg.cloak.penalty_weight,
        "epochs": cfg.train.epochs,
        "batch_size": cfg.train.batch_size,
        "learning_rate": cfg.train.learning_rate,
        "backbone_lr_scale": cfg.train.backbone_lr_scale,
        "weight_decay": cfg.train.weight_decay,
    }
