"""Experiment driver: training suites, attack sweeps, EOT campaigns, and
calibration reports over a roster of models.

Everything is keyed off one JSON-serializable ExperimentConfig plus a master
seed; given those, every emitted byte is reproducible except wall-time
columns.  Grid points are independent jobs executed by a bounded worker
pool, but results are written in grid order, so output files do not depend
on scheduling.
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, EotConfig
from .calibration import CalibrationReport, PredictionLog, calibration_report, reliability_diagram
from .charts import line_chart_svg
from .data import Dataset, SynthSpec, load_cifar10, synth_dataset
from .models import Model, arch_spec, build_model, load_checkpoint, predict_ensemble, save_checkpoint
from .rng import derive_seed
from .training import TrainConfig, TrainingDiverged, evaluate, train


# ---------------------------------------------------------------------------
# configuration


def _check_keys(d: dict, allowed, path: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        where = f"{path}.{extra[0]}" if path else extra[0]
        raise ValueError(f"unknown config key {where!r}")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"
    class_count: int = 3
    image_size: int = 8
    per_class: int = 250
    noise: float = 0.5
    seed: int = 0
    dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("synth", "cifar10"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "cifar10" and not self.dir:
            raise ValueError("cifar10 dataset requires 'dir'")


@dataclass(frozen=True)
class RosterEntry:
    name: str
    arch: str
    bayesian: bool = False
    epochs: int = 8
    batch_size: int = 32
    lr: float = 3e-3
    beta_kl: float = 0.0
    adversarial: AttackConfig | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("roster entry needs a name")
        # delegate numeric validation
        TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                    beta_kl=self.beta_kl, adversarial=self.adversarial)


def _ascending_nonneg(values, label):
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ValueError(f"{label} grid is empty")
    if any(v < 0 for v in vals):
        raise ValueError(f"{label} grid must be nonnegative")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{label} grid must be strictly ascending")
    return vals


@dataclass(frozen=True)
class AttackGrid:
    linf_eps: tuple = tuple(round(k * 0.01, 2) for k in range(8))
    l2_eps: tuple = tuple(round(k * 0.5, 1) for k in range(9))
    pgd_iters: tuple = (10, 40)
    iter_sweep: tuple = tuple(range(10, 101, 10))
    iter_sweep_eps: float = 0.03
    eot_ensemble: int = 30
    eot_iters: int = 40
    eot_rotation_deg: float = 10.0
    eot_translate_px: int = 2
    grad_samples: int = 2

    def __post_init__(self):
        object.__setattr__(self, "linf_eps", _ascending_nonneg(self.linf_eps, "linf_eps"))
        object.__setattr__(self, "l2_eps", _ascending_nonneg(self.l2_eps, "l2_eps"))
        for label, vals in (("pgd_iters", self.pgd_iters), ("iter_sweep", self.iter_sweep)):
            vals = tuple(int(v) for v in vals)
            if not vals or any(v < 1 for v in vals):
                raise ValueError(f"{label} must hold positive iteration counts")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{label} must be strictly ascending")
            object.__setattr__(self, label, vals)
        if self.iter_sweep_eps < 0:
            raise ValueError("iter_sweep_eps must be >= 0")
        if self.grad_samples < 1:
            raise ValueError("grad_samples must be >= 1")
        # reuse the attack-side validation for EOT fields
        EotConfig(self.eot_ensemble, self.eot_rotation_deg, self.eot_translate_px)
        if self.eot_iters < 1:
            raise ValueError("eot_iters must be >= 1")

    def eot_config(self) -> EotConfig:
        return EotConfig(self.eot_ensemble, self.eot_rotation_deg, self.eot_translate_px)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    models: tuple = ()
    grid: AttackGrid = field(default_factory=AttackGrid)
    eval_count: int = 150
    eval_samples: int = 10
    calibration_bins: int = 10
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate roster names: {sorted(names)}")
        if self.eval_count < 1 or self.eval_samples < 1:
            raise ValueError("eval_count and eval_samples must be >= 1")
        if self.calibration_bins < 1:
            raise ValueError("calibration_bins must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


_ATTACK_KEYS = ("kind", "norm", "eps", "alpha", "iters", "random_start",
                "grad_samples", "resample_draws", "eot")
_EOT_KEYS = ("ensemble", "rotation_deg", "translate_px")


def _attack_from_dict(d: dict, path: str) -> AttackConfig:
    _check_keys(d, _ATTACK_KEYS, path)
    eot = None
    if d.get("eot") is not None:
        _check_keys(d["eot"], _EOT_KEYS, f"{path}.eot")
        eot = EotConfig(**d["eot"])
    kwargs = {k: v for k, v in d.items() if k != "eot"}
    return AttackConfig(eot=eot, **kwargs)


def _attack_to_dict(a: AttackConfig | None):
    if a is None:
        return None
    d = {
        "kind": a.kind, "norm": a.norm, "eps": a.eps, "alpha": a.alpha,
        "iters": a.iters, "random_start": a.random_start,
        "grad_samples": a.grad_samples, "resample_draws": a.resample_draws,
        "eot": None,
    }
    if a.eot is not None:
        d["eot"] = {"ensemble": a.eot.ensemble, "rotation_deg": a.eot.rotation_deg,
                    "translate_px": a.eot.translate_px}
    return d


def config_from_dict(doc: dict) -> ExperimentConfig:
    _check_keys(doc, ("dataset", "models", "attack_grid", "eval_count",
                      "eval_samples", "calibration_bins", "workers", "seed"), "")
    ds_doc = dict(doc.get("dataset", {}))
    _check_keys(ds_doc, ("kind", "class_count", "image_size", "per_class",
                         "noise", "seed", "dir"), "dataset")
    dataset = DataConfig(**ds_doc)

    entries = []
    for i, m_doc in enumerate(doc.get("models", [])):
        m_doc = dict(m_doc)
        path = f"models[{i}]"
        _check_keys(m_doc, ("name", "arch", "bayesian", "epochs", "batch_size",
                            "lr", "beta_kl", "adversarial"), path)
        adv = m_doc.pop("adversarial", None)
        if adv is not None:
            adv = _attack_from_dict(adv, f"{path}.adversarial")
        entries.append(RosterEntry(adversarial=adv, **m_doc))

    grid_doc = dict(doc.get("attack_grid", {}))
    _check_keys(grid_doc, ("linf_eps", "l2_eps", "pgd_iters", "iter_sweep",
                           "iter_sweep_eps", "eot_ensemble", "eot_iters",
                           "eot_rotation_deg", "eot_translate_px", "grad_samples"),
                "attack_grid")
    for key in ("linf_eps", "l2_eps", "pgd_iters", "iter_sweep"):
        if key in grid_doc:
            grid_doc[key] = tuple(grid_doc[key])
    grid = AttackGrid(**grid_doc)

    return ExperimentConfig(
        dataset=dataset,
        models=tuple(entries),
        grid=grid,
        eval_count=doc.get("eval_count", 150),
        eval_samples=doc.get("eval_samples", 10),
        calibration_bins=doc.get("calibration_bins", 10),
        workers=doc.get("workers", 1),
        seed=doc.get("seed", 0),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": {
            "kind": cfg.dataset.kind, "class_count": cfg.dataset.class_count,
            "image_size": cfg.dataset.image_size, "per_class": cfg.dataset.per_class,
            "noise": cfg.dataset.noise, "seed": cfg.dataset.seed, "dir": cfg.dataset.dir,
        },
        "models": [
            {
                "name": m.name, "arch": m.arch, "bayesian": m.bayesian,
                "epochs": m.epochs, "batch_size": m.batch_size, "lr": m.lr,
                "beta_kl": m.beta_kl, "adversarial": _attack_to_dict(m.adversarial),
            }
            for m in cfg.models
        ],
        "attack_grid": {
            "linf_eps": list(cfg.grid.linf_eps), "l2_eps": list(cfg.grid.l2_eps),
            "pgd_iters": list(cfg.grid.pgd_iters), "iter_sweep": list(cfg.grid.iter_sweep),
            "iter_sweep_eps": cfg.grid.iter_sweep_eps,
            "eot_ensemble": cfg.grid.eot_ensemble, "eot_iters": cfg.grid.eot_iters,
            "eot_rotation_deg": cfg.grid.eot_rotation_deg,
            "eot_translate_px": cfg.grid.eot_translate_px,
            "grad_samples": cfg.grid.grad_samples,
        },
        "eval_count": cfg.eval_count,
        "eval_samples": cfg.eval_samples,
        "calibration_bins": cfg.calibration_bins,
        "workers": cfg.workers,
        "seed": cfg.seed,
    }


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def default_config() -> ExperimentConfig:
    """Six-model roster: CNN and densely connected stacks, deterministic and
    Bayesian, plus adversarially trained variants of the dense pair."""
    train_attack = AttackConfig(kind="pgd", norm="linf", eps=0.03, iters=10, grad_samples=1)
    models = (
        RosterEntry("plain_cnn", "plain_cnn"),
        RosterEntry("mini_dense", "mini_dense"),
        RosterEntry("bayes_plain_cnn", "plain_cnn", bayesian=True, epochs=16, beta_kl=2e-4),
        RosterEntry("bayes_mini_dense", "mini_dense", bayesian=True, epochs=16, beta_kl=2e-4),
        RosterEntry("adv_mini_dense", "mini_dense", adversarial=train_attack),
        RosterEntry("bdav_mini_dense", "mini_dense", bayesian=True, epochs=16, beta_kl=2e-4,
                    adversarial=train_attack),
    )
    return ExperimentConfig(models=models)


# ---------------------------------------------------------------------------
# results table


@dataclass(frozen=True)
class Row:
    model: str
    attack: str
    norm: str
    eps: float
    iters: int
    eot: int
    accuracy: float
    wall_time_s: float
    seed: int


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)

    COLUMNS = ("model", "attack", "norm", "eps", "iters", "eot",
               "accuracy", "wall_time_s", "seed")

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.model, r.attack, r.norm, repr(float(r.eps)), r.iters,
                        r.eot, repr(float(r.accuracy)), f"{r.wall_time_s:.3f}", r.seed])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.csv_text())


def _row_seed(master: int, model: str, attack: str, norm: str, eps: float,
              iters: int, eot: int) -> int:
    """Attack randomness for one results row.

    Deliberately independent of eps: every point on an accuracy-vs-eps curve
    shares its posterior draws and transform samples (common random numbers),
    so the curve reflects the budget alone rather than reseeded attack noise.
    """
    del eps
    return derive_seed(master, "row", model, attack, norm, iters, eot)


def _predict_seed(master: int, model: str) -> int:
    return derive_seed(master, "predict", model)


# ---------------------------------------------------------------------------
# data and checkpoints


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind == "synth":
        return synth_dataset(SynthSpec(d.class_count, d.image_size, d.per_class,
                                       d.noise, d.seed))
    return load_cifar10(d.dir)


def _subset(ds: Dataset, k: int) -> Dataset:
    if k >= len(ds):
        return ds
    return Dataset(ds.x[:k], ds.y[:k], ds.class_count)


def checkpoint_paths(cfg: ExperimentConfig, out_dir) -> dict:
    ckdir = Path(out_dir) / "checkpoints"
    return {m.name: ckdir / f"{m.name}.ckpt" for m in cfg.models}


def load_models(cfg: ExperimentConfig, out_dir) -> dict:
    """Load every roster checkpoint; a missing one is rejected by name."""
    out = {}
    for name, path in checkpoint_paths(cfg, out_dir).items():
        if not path.is_file():
            raise FileNotFoundError(f"missing checkpoint for model {name!r}: {path}")
        out[name], _ = load_checkpoint(path)
    return out


def _write_manifest(out_dir, command: str, cfg: ExperimentConfig, outputs,
                    complete: bool, failures=()) -> Path:
    doc = {
        "command": command,
        "complete": bool(complete),
        "config": config_to_dict(cfg),
        "failures": list(failures),
        "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs),
        "seed": cfg.seed,
        "versions": {"bnnlab": __version__, "numpy": np.__version__},
    }
    path = Path(out_dir) / f"manifest_{command}.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# job execution


def _run_jobs(jobs, workers: int):
    """Run callables, returning results in job order regardless of
    completion order."""
    if workers <= 1 or len(jobs) <= 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(j) for j in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# suite runners


def run_training_suite(cfg: ExperimentConfig, out_dir) -> tuple[dict, ResultsTable]:
    """Train the roster, checkpoint every model, and table clean accuracy.

    On divergence, everything finished so far is flushed and the error is
    re-raised with the model name attached.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "reports").mkdir(exist_ok=True)
    train_ds, test_ds = load_data(cfg)
    input_shape = tuple(train_ds.x.shape[1:])
    table = ResultsTable()
    ckpts = {}
    outputs = []

    def flush(complete, failures=()):
        acc_path = out_dir / "clean_accuracy.csv"
        table.to_csv(acc_path)
        _write_manifest(out_dir, "train", cfg, outputs + [acc_path], complete, failures)

    for entry in cfg.models:
        spec = arch_spec(entry.arch, input_shape, train_ds.class_count, entry.bayesian)
        mseed = derive_seed(cfg.seed, "train", entry.name)
        model = build_model(spec, seed=mseed)
        tcfg = TrainConfig(epochs=entry.epochs, batch_size=entry.batch_size,
                           lr=entry.lr, beta_kl=entry.beta_kl,
                           adversarial=entry.adversarial, seed=mseed)
        tic = time.perf_counter()
        try:
            _, report = train(model, train_ds, tcfg)
        except TrainingDiverged as e:
            flush(False, [f"model {entry.name!r}: {e}"])
            raise TrainingDiverged(f"model {entry.name!r}: {e}") from e
        wall = time.perf_counter() - tic

        path = out_dir / "checkpoints" / f"{entry.name}.ckpt"
        save_checkpoint(model, path, meta={"name": entry.name, "arch": entry.arch,
                                           "bayesian": entry.bayesian, "seed": mseed})
        ckpts[entry.name] = path
        rpath = out_dir / "reports" / f"{entry.name}_train.csv"
        report.to_csv(rpath)
        outputs += [path, rpath]

        acc = evaluate(model, test_ds, attack=None, n_samples=cfg.eval_samples,
                       seed=_predict_seed(cfg.seed, entry.name))
        table.rows.append(Row(entry.name, "none", "none", 0.0, 0, 0, acc, wall,
                              _row_seed(cfg.seed, entry.name, "none", "none", 0.0, 0, 0)))

    flush(True)
    return ckpts, table


def _sweep_attacks(grid: AttackGrid):
    out = [("fgsm_linf", "fgsm", "linf", 1)]
    out += [(f"pgd_linf_T{t}", "pgd", "linf", t) for t in grid.pgd_iters]
    out += [(f"pgd_l2_T{t}", "pgd", "l2", t) for t in grid.pgd_iters]
    return out


def _eval_job(model: Model, subset: Dataset, acfg: AttackConfig, cfg: ExperimentConfig,
              entry_name: str, rseed: int, pseed: int, eot_n: int):
    def job() -> Row:
        tic = time.perf_counter()
        acc = evaluate(model, subset, attack=acfg, n_samples=cfg.eval_samples,
                       seed=rseed, predict_seed=pseed)
        return Row(entry_name, acfg.kind, acfg.norm, acfg.eps, acfg.iters, eot_n,
                   acc, time.perf_counter() - tic, rseed)
    return job


def _emit_series(table: ResultsTable, cfg, out_dir, stem: str, x_field: str, by_label):
    """Per-attack plot data: one CSV column (and chart line) per model."""
    plots = Path(out_dir) / "plots"
    plots.mkdir(exist_ok=True)
    written = []
    names = [m.name for m in cfg.models]
    for label, rows in by_label.items():
        xs = sorted({getattr(r, x_field) for r in rows})
        series = {
            n: [next(r.accuracy for r in rows if r.model == n and getattr(r, x_field) == x)
                for x in xs]
            for n in names
        }
        csv_path = plots / f"{stem}_{label}.csv"
        lines = [",".join([x_field] + names)]
        for i, x in enumerate(xs):
            lines.append(",".join([repr(float(x))] + [repr(float(series[n][i])) for n in names]))
        csv_path.write_text("\n".join(lines) + "\n")
        svg_path = line_chart_svg(xs, series, x_field, plots / f"{stem}_{label}.svg")
        written += [csv_path, svg_path]
    return written


def run_epsilon_sweep(cfg: ExperimentConfig, models: dict, out_dir) -> ResultsTable:
    """Every roster model at every (attack, eps) grid point."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test_ds = load_data(cfg)
    subset = _subset(test_ds, cfg.eval_count)

    jobs = []
    for entry in cfg.models:
        pseed = _predict_seed(cfg.seed, entry.name)
        for label, kind, norm, iters in _sweep_attacks(cfg.grid):
            grid_eps = cfg.grid.linf_eps if norm == "linf" else cfg.grid.l2_eps
            for eps in grid_eps:
                acfg = AttackConfig(kind=kind, norm=norm, eps=eps, iters=iters,
                                    grad_samples=cfg.grid.grad_samples)
                rseed = _row_seed(cfg.seed, entry.name, kind, norm, eps, iters, 0)
                jobs.append(_eval_job(models[entry.name], subset, acfg, cfg,
                                      entry.name, rseed, pseed, 0))

    table = ResultsTable(rows=_run_jobs(jobs, cfg.workers))
    csv_path = out_dir / "sweep_eps.csv"
    table.to_csv(csv_path)
    by_label = {}
    for label, kind, norm, iters in _sweep_attacks(cfg.grid):
        by_label[label] = [r for r in table.rows
                           if r.attack == kind and r.norm == norm and r.iters == iters]
    outputs = [csv_path] + _emit_series(table, cfg, out_dir, "eps", "eps", by_label)
    _write_manifest(out_dir, "sweep-eps", cfg, outputs, True)
    return table


def run_iteration_sweep(cfg: ExperimentConfig, models: dict, out_dir) -> ResultsTable:
    """PGD linf at fixed eps, iteration counts from the sweep grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test_ds = load_data(cfg)
    subset = _subset(test_ds, cfg.eval_count)
    eps = cfg.grid.iter_sweep_eps

    jobs = []
    for entry in cfg.models:
        pseed = _predict_seed(cfg.seed, entry.name)
        for iters in cfg.grid.iter_sweep:
            acfg = AttackConfig(kind="pgd", norm="linf", eps=eps, iters=iters,
                                grad_samples=cfg.grid.grad_samples)
            rseed = _row_seed(cfg.seed, entry.name, "pgd", "linf", eps, iters, 0)
            jobs.append(_eval_job(models[entry.name], subset, acfg, cfg,
                                  entry.name, rseed, pseed, 0))

    table = ResultsTable(rows=_run_jobs(jobs, cfg.workers))
    csv_path = out_dir / "sweep_iters.csv"
    table.to_csv(csv_path)
    outputs = [csv_path] + _emit_series(table, cfg, out_dir, "iters", "iters",
                                        {"pgd_linf": table.rows})
    _write_manifest(out_dir, "sweep-iters", cfg, outputs, True)
    return table


def run_eot_campaign(cfg: ExperimentConfig, models: dict, out_dir) -> ResultsTable:
    """EOT FGSM and EOT PGD over the linf eps grid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test_ds = load_data(cfg)
    subset = _subset(test_ds, cfg.eval_count)
    eot = cfg.grid.eot_config()

    attacks = [("eot_fgsm_linf", "fgsm", 1), (f"eot_pgd_linf_T{cfg.grid.eot_iters}",
                                              "pgd", cfg.grid.eot_iters)]
    jobs = []
    for entry in cfg.models:
        pseed = _predict_seed(cfg.seed, entry.name)
        for label, kind, iters in attacks:
            for eps in cfg.grid.linf_eps:
                acfg = AttackConfig(kind=kind, norm="linf", eps=eps, iters=iters,
                                    grad_samples=cfg.grid.grad_samples, eot=eot)
                rseed = _row_seed(cfg.seed, entry.name, kind, "linf", eps, iters,
                                  eot.ensemble)
                jobs.append(_eval_job(models[entry.name], subset, acfg, cfg,
                                      entry.name, rseed, pseed, eot.ensemble))

    table = ResultsTable(rows=_run_jobs(jobs, cfg.workers))
    csv_path = out_dir / "eot.csv"
    table.to_csv(csv_path)
    by_label = {
        label: [r for r in table.rows if r.attack == kind and r.iters == iters]
        for label, kind, iters in attacks
    }
    outputs = [csv_path] + _emit_series(table, cfg, out_dir, "eot", "eps", by_label)
    _write_manifest(out_dir, "eot", cfg, outputs, True)
    return table


def run_calibration_report(cfg: ExperimentConfig, models: dict, out_dir) -> dict:
    """Clean-test reliability data, ECE, and MCE for every roster model."""
    out_dir = Path(out_dir)
    caldir = out_dir / "calibration"
    caldir.mkdir(parents=True, exist_ok=True)
    _, test_ds = load_data(cfg)

    reports: dict[str, CalibrationReport] = {}
    summary = ["model,ece,mce,n_bins,seed"]
    outputs = []
    for entry in cfg.models:
        model = models[entry.name]
        pseed = _predict_seed(cfg.seed, entry.name)
        chunks = []
        for start in range(0, len(test_ds), 256):
            chunks.append(predict_ensemble(model, test_ds.x[start : start + 256],
                                           cfg.eval_samples, seed=pseed))
        log = PredictionLog.from_probs(np.concatenate(chunks), test_ds.y)
        rep = calibration_report(log, cfg.calibration_bins)
        reports[entry.name] = rep
        csv_path, svg_path = reliability_diagram(rep.bins, caldir / f"{entry.name}.csv")
        outputs += [csv_path, svg_path]
        summary.append(
            f"{entry.name},{rep.ece!r},{rep.mce!r},{cfg.calibration_bins},{pseed}"
        )

    sum_path = caldir / "summary.csv"
    sum_path.write_text("\n".join(summary) + "\n")
    _write_manifest(out_dir, "calibrate", cfg, outputs + [sum_path], True)
    return reports


def aggregate_report(out_dir) -> Path:
    """Concatenate whichever result tables exist into one summary CSV with a
    table-name column prefixed."""
    out_dir = Path(out_dir)
    sources = ["clean_accuracy.csv", "sweep_eps.csv", "sweep_iters.csv", "eot.csv",
               "calibration/summary.csv"]
    lines = ["table,row"]
    for rel in sources:
        p = out_dir / rel
        if not p.is_file():
            continue
        body = p.read_text().strip().split("\n")
        for row in body[1:]:
            lines.append(f"{rel},\"{row}\"")
    path = out_dir / "summary.csv"
    path.write_text("\n".join(lines) + "\n")
    return path
