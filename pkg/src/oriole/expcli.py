"""Command-line harness: datasets, scenario runs, sweeps, fits and exports.

Subcommands::

    generate       write a synthetic dataset (PGM images + manifest) under --out
    pretrain       train the shared feature extractor on the dataset's public pool
    run            run one scenario on the dataset in --out
    sweep          sweep one axis (rho, R, m or split_ratio) with repeated seeds
    pca            2-D PCA export of clean, cloaked and target features
    fit-eq5        fit accuracy = k * R * m / rho through the origin
    reproduce-all  every table and figure CSV of the acceptance suite

Exit codes: 0 success, 1 input error (bad flag, missing file, bad value),
2 numeric error.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
See CONFIG_KEYS for the accepted keys.
"""

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datagen, embedder, io, pipeline, targetsel
from .errors import InputError, NumericError, OrioleError
from .rng import stream

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
AXES = ("rho", "R", "m", "split_ratio")
METRICS = ("user_recall", "overall_accuracy")

# --------------------------------------------------------------------------
# committed desk-scale configuration

DEFAULT_DATA = datagen.SyntheticSpec()
DEFAULT_SCENARIO = pipeline.ScenarioConfig()
M_VALUES = (1, 4, 8, 20)
R_VALUES = (0.1, 0.5, 1.0)
RHO_VALUES = (0.002, 0.004, 0.008, 0.016)
SPLIT_VALUES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
PCA_M = 4


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repeats: int = 3
    base: pipeline.ScenarioConfig = field(default_factory=pipeline.ScenarioConfig)
    data: datagen.SyntheticSpec = field(default_factory=datagen.SyntheticSpec)
    metric: str = "user_recall"

    def __post_init__(self):
        if self.axis not in AXES:
            raise InputError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
        vals = tuple(self.values)
        if not vals:
            raise InputError("sweep needs at least one value")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise InputError("sweep values must be strictly increasing")
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")
        if self.metric not in METRICS:
            raise InputError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "values", vals)


def apply_axis(cfg, axis, value):
    if axis == "rho":
        return replace(cfg, cloak=replace(cfg.cloak, rho=float(value)))
    if axis == "R":
        return replace(cfg, split=replace(cfg.split, leak_ratio=float(value)))
    if axis == "m":
        if int(value) != value:
            raise InputError(f"m must be an integer, got {value}")
        return replace(cfg, m=int(value))
    if axis == "split_ratio":
        return replace(cfg, split=replace(cfg.split, train_test_ratio=float(value)))
    raise InputError(f"unknown sweep axis {axis!r}")


class DataPool:
    """Prepared experiment data per seed, shared so cloaks are solved once."""

    def __init__(self, spec=DEFAULT_DATA, pretrain=pipeline.DEFAULT_PRETRAIN):
        self.spec = spec
        self.pretrain = pretrain
        self._data = {}

    def get(self, seed):
        if seed not in self._data:
            log.info("preparing data for seed %d", seed)
            self._data[seed] = pipeline.prepare(replace(self.spec, seed=seed), self.pretrain)
        return self._data[seed]

    def seeds(self):
        return sorted(self._data)


def repeat_seeds(base_seed, repeats):
    return [base_seed + r for r in range(repeats)]


@dataclass
class SweepTable:
    axis: str
    metric: str
    values: tuple
    seeds: tuple
    per_repeat: np.ndarray  # (len(values), repeats)

    @property
    def means(self):
        return [sum(row) / len(row) for row in self.per_repeat.tolist()]

    @property
    def stds(self):
        return [float(np.std(row)) for row in self.per_repeat]

    def header(self):
        return ["axis", "value", "metric", "mean", "std"] + [f"repeat_{i}" for i in range(len(self.seeds))]

    def rows(self):
        out = []
        for v, mean, std, reps in zip(self.values, self.means, self.stds, self.per_repeat.tolist()):
            out.append([self.axis, float(v), self.metric, mean, std] + reps)
        return out

    def csv(self):
        return io.csv_text(self.header(), self.rows())


def run_sweep(spec, pool=None, out=None):
    """Run the pipeline at every axis value for `repeats` seeds.

    Repeat r uses seed base.seed + r for both the data and the scenario.
    With `out` given, rows are appended to that CSV as they finish, so a
    failure leaves the completed rows on disk.
    """
    pool = pool or DataPool(spec.data)
    seeds = repeat_seeds(spec.base.seed, spec.repeats)
    results = np.zeros((len(spec.values), spec.repeats))
    table = SweepTable(spec.axis, spec.metric, spec.values, tuple(seeds), results)
    fh = None
    if out is not None:
        fh = open(out, "w", encoding="utf-8", newline="")
        fh.write(io.csv_text(table.header(), []))
    try:
        for i, v in enumerate(spec.values):
            point = apply_axis(spec.base, spec.axis, v)
            for r, seed in enumerate(seeds):
                rep = pipeline.run(pool.get(seed), replace(point, seed=seed))
                results[i, r] = getattr(rep, spec.metric)
            if fh is not None:
                fh.write(io.csv_text(table.header(), [table.rows()[i]]).split("\n", 1)[1])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return table


# --------------------------------------------------------------------------
# accuracy = k R m / rho


@dataclass(frozen=True)
class FitResult:
    k: float
    residual: float
    r_squared: float


def fit_eq5(points):
    """Least squares of accuracy on z = R*m/rho through the origin.

    `points` is an iterable of (R, m, rho, accuracy).  r_squared is the
    usual 1 - SS_res/SS_tot, clamped to [0, 1].
    """
    pts = [tuple(float(v) for v in p) for p in points]
    if len(pts) < 2:
        raise InputError("need at least 2 grid points")
    if any(p[2] <= 0 for p in pts):
        raise InputError("rho must be > 0 in every grid point")
    z = np.array([r * m / rho for r, m, rho, _ in pts])
    a = np.array([p[3] for p in pts])
    if not np.any(z != 0):
        raise InputError("degenerate grid: every R*m/rho is 0")
    k = float((a * z).sum() / (z * z).sum())
    resid = float(((a - k * z) ** 2).sum())
    ss_tot = float(((a - a.mean()) ** 2).sum())
    if ss_tot == 0:
        r2 = 1.0 if resid == 0 else 0.0
    else:
        r2 = min(max(1.0 - resid / ss_tot, 0.0), 1.0)
    return FitResult(k, resid, r2)


# --------------------------------------------------------------------------
# PCA


PCA_TOL = 1e-10
PCA_MAX_ITER = 10000
# eigenvalues below this fraction of the total variance count as zero
PCA_RANK_TOL = 1e-12


@dataclass
class PcaResult:
    coords: np.ndarray  # (N, 2)
    roles: list
    components: np.ndarray  # (2, d)
    eigenvalues: np.ndarray  # (2,)
    rank_warning: bool

    def rows(self):
        flag = "true" if self.rank_warning else "false"
        return [[x, y, role, flag] for (x, y), role in zip(self.coords.tolist(), self.roles)]

    def csv(self):
        return io.csv_text(["x", "y", "role", "rank_warning"], self.rows())


def _power_iteration(a, v0):
    v = v0 / np.linalg.norm(v0)
    for _ in range(PCA_MAX_ITER):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < PCA_TOL:
            v = w
            break
        v = w
    return v, float(v @ a @ v)


def _fix_sign(v):
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def pca_export(features, roles, seed=0):
    """Top-2 principal components by power iteration with deflation."""
    x = np.asarray(features, dtype=np.float64)
    roles = list(roles)
    if x.ndim != 2 or len(x) < 3:
        raise InputError("pca needs at least 3 feature vectors")
    if len(roles) != len(x):
        raise InputError("one role tag per feature vector")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(x)
    total = float(np.trace(cov))
    gen = stream(seed, "pca-start")
    comps, eigs = [], []
    work = cov.copy()
    warn = False
    for _ in range(2):
        v, lam = _power_iteration(work, gen.standard_normal(len(cov)))
        if total == 0.0 or lam <= PCA_RANK_TOL * total:
            warn = True
            comps.append(np.zeros(len(cov)))
            eigs.append(0.0)
            continue
        v = _fix_sign(v)
        comps.append(v)
        eigs.append(lam)
        work = work - lam * np.outer(v, v)
    comps = np.stack(comps)
    return PcaResult(xc @ comps.T, roles, comps, np.array(eigs), warn)


def pca_features(data, cfg, m=PCA_M):
    """Features of the leaked clean images, their multi-cloaks, the cloaked
    test images and the target classes' public images, with role tags."""
    sp = pipeline.make_split(data, cfg)
    targets = pipeline.oriole_targets(data, sp.leaked, m)
    idx = np.repeat(sp.leaked, len(targets))
    labs = list(targets.labels) * len(sp.leaked)
    s_o = pipeline.cloak_many(data, idx, labs, cfg.cloak)
    tgt = pipeline.fawkes_targets(data, sp.user_test, "image", cfg.fawkes_candidates, cfg.seed, "query")
    s_f = pipeline.cloak_many(data, sp.user_test, tgt, cfg.cloak)
    ds = data.dataset
    pub = np.flatnonzero(np.isin(ds.labels, list(targets.labels)) & (ds.roles == datagen.ROLE_PUBLIC))
    parts = [
        (ds.images[sp.leaked], ["user_clean"] * len(sp.leaked)),
        (s_o, [f"multi_cloak_{t}" for t in labs]),
        (s_f, [f"user_cloaked_{t}" for t in tgt]),
        (ds.images[pub], [f"target_{lab}" for lab in ds.labels[pub].tolist()]),
    ]
    feats = embedder.forward(data.phi, np.concatenate([p[0] for p in parts]))
    roles = [r for p in parts for r in p[1]]
    return feats, roles


# --------------------------------------------------------------------------
# config files


_SCENARIO_KEYS = {
    "scenario": str,
    "m": int,
    "seed": int,
    "include_targets": "bool",
    "fawkes_scope": str,
    "fawkes_candidates": int,
    "attacker_init": str,
}
_CLOAK_KEYS = {"rho": float, "cloak_iterations": int, "cloak_step_size": float, "penalty_weight": float}
_SPLIT_KEYS = {"leak_ratio": float, "train_test_ratio": float}
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "backbone_lr_scale": float,
    "weight_decay": float,
}
_DATA_KEYS = {
    "n_public_identities": int,
    "n_attacker_identities": int,
    "images_per_identity": int,
    "n_user_images": int,
    "image_size": int,
    "identity_signal": float,
    "noise_sigma": float,
}
_SWEEP_KEYS = {"axis": str, "values": "floats", "repeats": int, "metric": str}
_OTHER_KEYS = {"pretrain_epochs": int, "table": str}
CONFIG_KEYS = {
    **_SCENARIO_KEYS,
    **_CLOAK_KEYS,
    **_SPLIT_KEYS,
    **_TRAIN_KEYS,
    **_DATA_KEYS,
    **_SWEEP_KEYS,
    **_OTHER_KEYS,
}


def _convert(key, raw):
    kind = CONFIG_KEYS[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError:
        raise InputError(f"bad value for {key}: {raw!r}") from None


def parse_config(text):
    """Parse ``key = value`` lines into a dict of typed values."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise InputError(f"config line {n}: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def config_text(mapping):
    return "".join(f"{k} = {io.fmt(v)}\n" for k, v in mapping.items())


def build_data_spec(opts, seed=None):
    kw = {k: opts[k] for k in _DATA_KEYS if k in opts}
    spec = replace(DEFAULT_DATA, **kw)
    return replace(spec, seed=seed) if seed is not None else spec


def build_scenario(opts):
    cfg = DEFAULT_SCENARIO
    cfg = replace(cfg, **{k: opts[k] for k in _SCENARIO_KEYS if k in opts})
    cloak_kw = {
        "rho": opts.get("rho", cfg.cloak.rho),
        "iterations": opts.get("cloak_iterations", cfg.cloak.iterations),
        "step_size": opts.get("cloak_step_size", cfg.cloak.step_size),
        "penalty_weight": opts.get("penalty_weight", cfg.cloak.penalty_weight),
    }
    split_kw = {k: opts[k] for k in _SPLIT_KEYS if k in opts}
    train_kw = {k: opts[k] for k in _TRAIN_KEYS if k in opts}
    return replace(
        cfg,
        cloak=replace(cfg.cloak, **cloak_kw),
        split=replace(cfg.split, **split_kw),
        train=replace(cfg.train, **train_kw),
    )


def build_pretrain(opts):
    if "pretrain_epochs" in opts:
        return replace(pipeline.DEFAULT_PRETRAIN, epochs=opts["pretrain_epochs"])
    return pipeline.DEFAULT_PRETRAIN


def data_echo(spec):
    return {
        "n_public_identities": spec.n_public_identities,
        "n_attacker_identities": spec.n_attacker_identities,
        "images_per_identity": spec.images_per_identity,
        "n_user_images": spec.n_user_images,
        "image_size": spec.image_size,
        "identity_signal": spec.identity_signal,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
    }


# --------------------------------------------------------------------------
# on-disk dataset
#
#   <out>/dataset/dataset.txt        generator settings (key = value)
#   <out>/dataset/manifest.csv       path,label,role (paths relative to dataset/)
#   <out>/dataset/images/<role>/<label>/<nnnn>.pgm
#   <out>/phi.bin                    feature extractor (after `pretrain`)


def write_dataset(root, spec, ds):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "dataset.txt").write_text(config_text(data_echo(spec)), encoding="utf-8")
    rows = []
    counters = {}
    for img, lab, role in zip(ds.images, ds.labels.tolist(), ds.roles.tolist()):
        n = counters.get(lab, 0)
        counters[lab] = n + 1
        rel = f"images/{role}/{lab}/{n:04d}.pgm"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        io.write_pgm(root / rel, img)
        rows.append((rel, lab, role))
    io.write_csv(root / "manifest.csv", ["path", "label", "role"], rows)


def read_dataset(root):
    root = Path(root)
    if not (root / "manifest.csv").is_file() or not (root / "dataset.txt").is_file():
        raise InputError(f"no dataset in {root}; run `generate --out {root.parent}` first")
    opts = parse_config((root / "dataset.txt").read_text(encoding="utf-8"))
    seed = opts.pop("seed")
    spec = build_data_spec(opts, seed)
    header, rows = io.read_csv(root / "manifest.csv")
    if header != ["path", "label", "role"]:
        raise InputError("unexpected manifest header")
    images = np.stack([io.read_pgm(root / p) for p, _, _ in rows])
    labels = np.array([int(r[1]) for r in rows])
    roles = np.array([r[2] for r in rows], dtype=object)
    return spec, datagen.LabeledDataset(images, labels, roles)


# --------------------------------------------------------------------------
# run directories


AUDIT_HEADER = [
    "kind",
    "image",
    "target",
    "rho",
    "achieved_dssim",
    "initial_feature_dist",
    "final_feature_dist",
    "iterations",
]
METRICS_HEADER = ["scenario", "user_recall", "overall_accuracy", "multi_cloak_fraction", "n_train", "n_test"]


def summary_text(report):
    lines = [
        f"scenario              {report.scenario}",
        f"user recall           {report.user_recall:.4f}",
        f"overall accuracy      {report.overall_accuracy:.4f}",
        f"multi-cloak fraction  {report.multi_cloak_fraction:.4f}",
        f"training images       {report.n_train}",
        f"test images           {report.n_test}",
    ]
    return "\n".join(lines) + "\n"


def write_run_dir(out, data, cfg, image_paths=None):
    """Run one scenario and write everything about it under `out`.

    Layout: config.txt, manifest.csv (image, label, split role),
    cloak_audit.csv, cloaks/<kind>_<image>_t<target>.pgm, model.bin,
    metrics.csv, summary.txt.
    """
    out = Path(out)
    (out / "cloaks").mkdir(parents=True, exist_ok=True)
    audit = []
    report, model = pipeline.run(data, cfg, audit=audit, return_model=True)
    (out / "config.txt").write_text(
        config_text({**report.config, **{f"data_{k}": v for k, v in data_echo(data.spec).items()}}),
        encoding="utf-8",
    )
    sp = pipeline.make_split(data, cfg)
    ds = data.dataset
    rows = []
    for role, idx in (
        ("attacker_train", sp.attacker_train),
        ("attacker_test", sp.attacker_test),
        ("user_train", sp.user_train),
        ("user_test", sp.user_test),
        ("leaked", sp.leaked),
    ):
        for i in idx.tolist():
            ref = image_paths[i] if image_paths is not None else str(i)
            rows.append((ref, int(ds.labels[i]), role))
    io.write_csv(out / "manifest.csv", ["image", "label", "split_role"], rows)
    io.write_csv(out / "cloak_audit.csv", AUDIT_HEADER, [[a[k] for k in AUDIT_HEADER] for a in audit])
    for a in audit:
        img = pipeline.cached_cloak(data, cfg.cloak, a["image"], a["target"])
        io.write_pgm(out / "cloaks" / f"{a['kind']}_{a['image']:05d}_t{a['target']}.pgm", img)
    (out / "model.bin").write_bytes(io.encode_classifier(model))
    io.write_csv(out / "metrics.csv", METRICS_HEADER, [[getattr(report, k) for k in METRICS_HEADER]])
    (out / "summary.txt").write_text(summary_text(report), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# reproduce-all


VARIANTS = (("excluded", False), ("included", True))


def _scenario_table(pool, base, seeds, metrics=METRICS):
    header = ["scenario", "metric", "mean", "std"] + [f"repeat_{i}" for i in range(len(seeds))]
    rows, values = [], {}
    for sc in pipeline.SCENARIOS:
        reps = [pipeline.run(pool.get(s), replace(base, scenario=sc, seed=s)) for s in seeds]
        for metric in metrics:
            vals = [getattr(r, metric) for r in reps]
            values[(sc, metric)] = vals
            rows.append([sc, metric, sum(vals) / len(vals), float(np.std(vals))] + vals)
    return header, rows, values


def all_cloak_rows(pool):
    """One audit row per distinct cloak solved in `pool`, in a fixed order."""
    rows = []
    for seed in pool.seeds():
        cache = pool.get(seed).cache
        keys = sorted(k for k in cache if isinstance(k, tuple) and k[0] == "cloaks")
        for key in keys:
            for (img, tgt), r in sorted(cache[key].items()):
                rows.append(
                    [
                        seed,
                        key[1][0],
                        img,
                        tgt,
                        float(r["achieved_dssim"]),
                        float(r["initial_feature_dist"]),
                        float(r["final_feature_dist"]),
                        int(r["iterations_run"]),
                    ]
                )
    return rows


ALL_CLOAKS_HEADER = [
    "seed",
    "rho",
    "image",
    "target",
    "achieved_dssim",
    "initial_feature_dist",
    "final_feature_dist",
    "iterations",
]


def reproduce_all(seed, out, data_spec=DEFAULT_DATA, base=DEFAULT_SCENARIO, repeats=3,
                  pretrain=pipeline.DEFAULT_PRETRAIN, pool=None):
    """Regenerate every table and figure CSV under `out`.

    Returns a dict with the computed tables and wall-clock timings per
    phase (timings are logged, never written, so the tree stays
    byte-identical across runs).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pool = pool or DataPool(data_spec, pretrain)
    seeds = repeat_seeds(seed, repeats)
    base = replace(base, seed=seed)
    res = {"timings": {}, "seeds": seeds}
    clock = time.perf_counter()

    def tick(name):
        nonlocal clock
        now = time.perf_counter()
        res["timings"][name] = now - clock
        log.info("%s done in %.1f s", name, now - clock)
        clock = now

    (out / "VERSION").write_text(f"csv-schema {CSV_SCHEMA_VERSION}\n", encoding="utf-8")
    echo = {**pipeline.config_echo(base), **{f"data_{k}": v for k, v in data_echo(data_spec).items()}}
    echo["repeats"] = repeats
    (out / "config.txt").write_text(config_text(echo), encoding="utf-8")

    def sweep(axis, values, cfg, name, metric="user_recall"):
        spec = SweepSpec(axis, values, repeats, cfg, data_spec, metric)
        table = run_sweep(spec, pool, out / name)
        res[name] = table
        return table

    for variant, inc in VARIANTS:
        cfg = replace(base, include_targets=inc)
        header, rows, values = _scenario_table(pool, cfg, seeds)
        io.write_csv(out / f"scenarios_{variant}.csv", header, rows)
        res[f"scenarios_{variant}"] = values
        tick(f"scenarios_{variant}")
    for variant, inc in VARIANTS:
        cfg = replace(base, include_targets=inc)
        # m cannot exceed the number of candidate target classes
        m_values = tuple(m for m in M_VALUES if m <= data_spec.n_public_identities)
        sweep("m", m_values, cfg, f"sweep_m_{variant}.csv")
        sweep("R", R_VALUES, cfg, f"sweep_R_{variant}.csv")
        tick(f"sweep_m_R_{variant}")
    sweep("rho", RHO_VALUES, base, "sweep_rho_oriole.csv")
    sweep("rho", RHO_VALUES, replace(base, scenario="fawkes"), "sweep_rho_fawkes.csv")
    tick("sweep_rho")
    sweep("split_ratio", SPLIT_VALUES, replace(base, scenario="basic"), "sweep_split_ratio.csv", "overall_accuracy")
    tick("sweep_split_ratio")

    grid = []
    for name, axis in (("sweep_m_excluded.csv", "m"), ("sweep_R_excluded.csv", "R"), ("sweep_rho_oriole.csv", "rho")):
        table = res[name]
        for v, mean in zip(table.values, table.means):
            point = apply_axis(base, axis, v)
            grid.append((point.split.leak_ratio, point.m, point.cloak.rho, mean))
    io.write_csv(out / "eq5_grid.csv", ["leak_ratio", "m", "rho", "user_recall"], grid)
    fit = fit_eq5(grid)
    io.write_csv(out / "eq5_fit.csv", ["k", "residual", "r_squared"], [[fit.k, fit.residual, fit.r_squared]])
    res["eq5_fit"] = fit

    data = pool.get(seed)
    feats, roles = pca_features(data, replace(base, m=PCA_M), PCA_M)
    pca = pca_export(feats, roles, seed)
    (out / "pca.csv").write_text(pca.csv(), encoding="utf-8")
    res["pca"] = pca
    tick("eq5_pca")

    art = out / "artifacts"
    art.mkdir(exist_ok=True)
    (art / f"phi_seed{seed}.bin").write_bytes(io.encode_extractor(data.phi))
    res["run"] = write_run_dir(art / f"oriole_seed{seed}", data, base)
    tick("artifacts")

    io.write_csv(out / "cloak_audit_all.csv", ALL_CLOAKS_HEADER, all_cloak_rows(pool))
    res["pool"] = pool
    return res


# --------------------------------------------------------------------------
# main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def _parser():
    p = _Parser(prog="oriole", description="Oriole vs Fawkes desk-scale experiment harness")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("generate", "pretrain", "run", "sweep", "pca", "fit-eq5", "reproduce-all"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default="out", help="output directory (default: out)")
        s.add_argument("--scenario", choices=pipeline.SCENARIOS)
        s.add_argument("--rho", type=float)
        s.add_argument("--m", type=int)
        s.add_argument("--leak-ratio", type=float)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "fit-eq5":
            s.add_argument("table", nargs="?", help="CSV with leak_ratio,m,rho,user_recall columns")
    return p


def _options(args):
    opts = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file {path} not found")
        opts = parse_config(path.read_text(encoding="utf-8"))
    for key, val in (("seed", args.seed), ("scenario", args.scenario), ("rho", args.rho),
                     ("m", args.m), ("leak_ratio", args.leak_ratio)):
        if val is not None:
            opts[key] = val
    return opts


def _cmd_generate(args, opts, out):
    spec = build_data_spec(opts, opts.get("seed", 0))
    ds = datagen.generate(spec)
    write_dataset(out / "dataset", spec, ds)
    print(f"wrote {len(ds)} images to {out / 'dataset'}")


def _cmd_pretrain(args, opts, out):
    spec, ds = read_dataset(out / "dataset")
    phi = embedder.pretrain_feature_extractor(ds.with_role(datagen.ROLE_PUBLIC), build_pretrain(opts))
    (out / "phi.bin").write_bytes(io.encode_extractor(phi))
    print(f"wrote {out / 'phi.bin'}")


def _cmd_run(args, opts, out):
    spec, ds = read_dataset(out / "dataset")
    phi_path = out / "phi.bin"
    if not phi_path.is_file():
        raise InputError(f"no feature extractor at {phi_path}; run `pretrain --out {out}` first")
    phi = io.decode_extractor(phi_path.read_bytes())
    table = targetsel.compute_centroids(ds.with_role(datagen.ROLE_PUBLIC), phi)
    data = pipeline.ExperimentData(spec, ds, phi, table)
    cfg = build_scenario(opts)
    _, rows = io.read_csv(out / "dataset" / "manifest.csv")
    paths = ["dataset/" + r[0] for r in rows]
    run_dir = out / "runs" / f"{cfg.scenario}_seed{cfg.seed}"
    report = write_run_dir(run_dir, data, cfg, paths)
    sys.stdout.write(summary_text(report))
    print(f"wrote {run_dir}")


def _cmd_sweep(args, opts, out):
    if "axis" not in opts or "values" not in opts:
        raise InputError("sweep needs `axis` and `values` in the --config file")
    spec = SweepSpec(
        opts["axis"],
        opts["values"],
        opts.get("repeats", 3),
        build_scenario(opts),
        build_data_spec(opts),
        opts.get("metric", "user_recall"),
    )
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{spec.axis}.csv"
    pool = DataPool(spec.data, build_pretrain(opts))
    table = run_sweep(spec, pool, path)
    sys.stdout.write(table.csv())


def _cmd_pca(args, opts, out):
    cfg = build_scenario(opts)
    m = opts.get("m", PCA_M)
    data = pipeline.prepare(build_data_spec(opts, cfg.seed), build_pretrain(opts))
    feats, roles = pca_features(data, replace(cfg, m=m), m)
    out.mkdir(parents=True, exist_ok=True)
    result = pca_export(feats, roles, cfg.seed)
    (out / "pca.csv").write_text(result.csv(), encoding="utf-8")
    if result.rank_warning:
        log.warning("feature covariance has fewer than 2 nonzero eigenvalues")
    print(f"wrote {out / 'pca.csv'}")


def _cmd_fit(args, opts, out):
    path = Path(args.table or opts.get("table") or out / "eq5_grid.csv")
    if not path.is_file():
        raise InputError(f"grid table {path} not found")
    header, rows = io.read_csv(path)
    need = ["leak_ratio", "m", "rho", "user_recall"]
    if any(c not in header for c in need):
        raise InputError(f"{path} needs columns {need}")
    cols = [header.index(c) for c in need]
    try:
        pts = [[float(r[c]) for c in cols] for r in rows]
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    fit = fit_eq5(pts)
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "eq5_fit.csv", ["k", "residual", "r_squared"], [[fit.k, fit.residual, fit.r_squared]])
    print(f"k = {fit.k:.6g}  residual = {fit.residual:.6g}  r_squared = {fit.r_squared:.4f}")


def _cmd_reproduce(args, opts, out):
    seed = opts.get("seed", 0)
    res = reproduce_all(
        seed, out, build_data_spec(opts), build_scenario(opts), opts.get("repeats", 3), build_pretrain(opts)
    )
    for name, secs in res["timings"].items():
        log.info("%-18s %7.1f s", name, secs)
    print(f"wrote {out}")


COMMANDS = {
    "generate": _cmd_generate,
    "pretrain": _cmd_pretrain,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "pca": _cmd_pca,
    "fit-eq5": _cmd_fit,
    "reproduce-all": _cmd_reproduce,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parser().parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        opts = _options(args)
        COMMANDS[args.command](args, opts, Path(args.out))
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OrioleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
