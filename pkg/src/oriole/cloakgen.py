"""Budgeted feature-space cloaks.

A cloak moves an image's features toward a target feature vector while
keeping DSSIM(x, cloaked) within the budget rho.  The optimizer runs
Adam-scaled gradient steps on

    ||phi(clip(x + delta)) - target||^2 + lam * max(0, DSSIM(x, clip(x + delta)) - rho)^2

from delta = 0, followed by a binary search on a scale factor when the
final iterate still breaks the budget.  Everything is batched over images
so the pipeline can solve hundreds of cloaks in one loop.
"""

from dataclasses import dataclass

import numpy as np

from . import embedder, imgmath, targetsel
from .errors import DimensionError, InputError, NumericError

SCALE_SEARCH_STEPS = 12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class CloakConfig:
    rho: float = 0.008
    iterations: int = 200
    step_size: float = 0.005
    penalty_weight: float = 1e5
    seed: int = 0
    dssim: imgmath.DssimConfig = imgmath.DEFAULT_DSSIM

    def __post_init__(self):
        if not 0 <= self.rho <= 1:
            raise InputError(f"rho must lie in [0, 1], got {self.rho}")
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if not self.step_size > 0 or not self.penalty_weight > 0:
            raise InputError("step_size and penalty_weight must be > 0")


@dataclass
class CloakResult:
    cloaked: np.ndarray
    achieved_dssim: float
    initial_feature_dist: float
    final_feature_dist: float
    iterations_run: int
    target_label: object = None


def _feature_dist(model, imgs, targets):
    f = embedder.forward(model, imgs)
    return np.sqrt(((f - targets) ** 2).sum(axis=1))


def cloak_batch(xs, target_features, model, cfg):
    """Solve one cloak per row of `xs` (N, S, S) toward `target_features` (N, d).

    Returns a dict of arrays: cloaked, achieved_dssim, initial_feature_dist,
    final_feature_dist, iterations_run.  Rows are solved independently.
    """
    xs = np.asarray(xs, dtype=np.float64)
    targets = np.asarray(target_features, dtype=np.float64)
    if xs.ndim != 3:
        raise DimensionError(f"expected (N, S, S) images, got {xs.shape}")
    if targets.shape != (len(xs), model.feature_dim):
        raise DimensionError(
            f"targets {targets.shape} do not match {len(xs)} images x d={model.feature_dim}"
        )
    dcfg = cfg.dssim
    lam = cfg.penalty_weight

    def feature_loss(feats):
        diff = feats - targets
        return (diff * diff).sum(axis=1), 2.0 * diff

    delta = np.zeros_like(xs)
    m1 = np.zeros_like(xs)
    m2 = np.zeros_like(xs)
    init_dist = None
    for it in range(cfg.iterations):
        raw = xs + delta
        b = np.clip(raw, 0.0, 1.0)
        _, floss, g = embedder.value_and_input_gradient(model, b, feature_loss)
        if init_dist is None:
            init_dist = np.sqrt(floss)
        ds = imgmath.dssim(xs, b, dcfg)
        excess = np.maximum(ds - cfg.rho, 0.0)
        loss = floss + lam * excess**2
        if not np.all(np.isfinite(loss)):
            raise NumericError(f"non-finite cloak loss at iteration {it}")
        active = excess > 0
        if np.any(active):
            g[active] += (2.0 * lam * excess[active])[:, None, None] * imgmath.dssim_gradient(
                xs[active], b[active], dcfg
            )
        # clip passes gradient only where it is not saturated
        g *= (raw > 0.0) & (raw < 1.0)
        m1 = ADAM_BETA1 * m1 + (1 - ADAM_BETA1) * g
        m2 = ADAM_BETA2 * m2 + (1 - ADAM_BETA2) * g * g
        m1_hat = m1 / (1 - ADAM_BETA1 ** (it + 1))
        m2_hat = m2 / (1 - ADAM_BETA2 ** (it + 1))
        delta -= cfg.step_size * m1_hat / (np.sqrt(m2_hat) + ADAM_EPS)

    # keep delta consistent with what the image actually shows
    delta = np.clip(xs + delta, 0.0, 1.0) - xs
    delta = _fit_budget(xs, delta, cfg)
    cloaked = np.clip(xs + delta, 0.0, 1.0)
    final = _feature_dist(model, cloaked, targets)
    worse = final > init_dist
    if np.any(worse):
        cloaked[worse] = xs[worse]
        final[worse] = init_dist[worse]
    achieved = imgmath.dssim(xs, cloaked, dcfg)
    return {
        "cloaked": cloaked,
        "achieved_dssim": np.atleast_1d(achieved),
        "initial_feature_dist": init_dist,
        "final_feature_dist": final,
        "iterations_run": np.full(len(xs), cfg.iterations),
    }


def _fit_budget(xs, delta, cfg):
    """Scale down rows of delta whose DSSIM exceeds rho."""
    over = imgmath.dssim(xs, np.clip(xs + delta, 0.0, 1.0), cfg.dssim) > cfg.rho
    if not np.any(over):
        return delta
    x_o, d_o = xs[over], delta[over]
    lo = np.zeros(len(x_o))
    hi = np.ones(len(x_o))
    for _ in range(SCALE_SEARCH_STEPS):
        mid = (lo + hi) / 2
        ok = imgmath.dssim(x_o, np.clip(x_o + mid[:, None, None] * d_o, 0, 1), cfg.dssim) <= cfg.rho
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    delta = delta.copy()
    delta[over] = lo[:, None, None] * d_o
    return delta


def _results(batch, labels):
    out = []
    for i, lab in enumerate(labels):
        out.append(
            CloakResult(
                cloaked=batch["cloaked"][i],
                achieved_dssim=float(batch["achieved_dssim"][i]),
                initial_feature_dist=float(batch["initial_feature_dist"][i]),
                final_feature_dist=float(batch["final_feature_dist"][i]),
                iterations_run=int(batch["iterations_run"][i]),
                target_label=lab,
            )
        )
    return out


def cloak_to_target(x, target_feature, model, cfg, target_label=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a single image, got {x.shape}")
    t = np.asarray(target_feature, dtype=np.float64)[None]
    return _results(cloak_batch(x[None], t, model, cfg), [target_label])[0]


def multi_cloaks(x, targets, model, cfg):
    """One cloak of `x` per target in `targets`, in target order."""
    if len(targets) == 0:
        raise InputError("no targets")
    x = np.asarray(x, dtype=np.float64)
    xs = np.broadcast_to(x, (len(targets),) + x.shape).copy()
    return _results(cloak_batch(xs, targets.features, model, cfg), list(targets.labels))


def fawkes_target(leaked_or_own, table, model, exclude=None, candidates=1, rng=None):
    """The Fawkes target as a one-element TargetSet.

    With candidates=1 this is the most dissimilar class.  With candidates=K
    the target is drawn uniformly by `rng` from the K most dissimilar.
    """
    dist = targetsel.distance_set(leaked_or_own, table, model)
    return choose_fawkes_target(dist, table, exclude, candidates, rng)


def choose_fawkes_target(dist, table, exclude=None, candidates=1, rng=None):
    n_cands = len([lab for lab in dist if lab != exclude])
    k = min(candidates, n_cands)
    top = targetsel.select_targets(dist, k, exclude=exclude, table=table)
    if k == 1:
        return top
    if rng is None:
        raise InputError("a random generator is required when candidates > 1")
    i = int(rng.integers(k))
    return targetsel.TargetSet((top.labels[i],), top.features[i : i + 1], (top.scores[i],))


def fawkes_cloak(x, leaked_or_own, table, model, cfg, exclude=None, candidates=1, rng=None):
    """User-side cloak: pick the Fawkes target, then cloak toward it."""
    targets = fawkes_target(leaked_or_own, table, model, exclude, candidates, rng)
    return multi_cloaks(x, targets, model, cfg)[0]
