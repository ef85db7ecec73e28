"""The experiment pipeline behind the CLI: train, fine-tune, attack, evaluate, sweep, diagnose.

Every step is a function of (config, seed, files under ``cfg.out``).  Seeds
for model init, batching, fine-tuning and attacks come from named streams of
the global seed (see :func:`lrs.config.stream_seed`).
"""
from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from .attacks import AdvBatch, attack
from .config import ConfigError, ExperimentConfig, stream_seed
from .data import Dataset, load_idx, mnist_subset_to_idx, synth_blobs
from .finetune import DivergenceError, FinetuneReport, LRSConfig, finetune
from .metrics import (EvalReport, asr, correct_mask, empirical_lipschitz, landscape_slice,
                      loss_curves, write_eval_reports)
from .models import Model, ModelSpec, build, load_checkpoint, save_checkpoint
from .reports import write_csv
from .training import train

log = logging.getLogger(__name__)


class GateError(RuntimeError):
    """A trained model missed the clean-accuracy sanity gate."""


# ---------------------------------------------------------------------------
# data


def _idx_paths(root: Path) -> dict:
    return {f"{s}_{k}": root / f"{s}-{k}-idx{3 if k == 'images' else 1}-ubyte"
            for s in ("train", "test") for k in ("images", "labels")}


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "blobs":
        full = synth_blobs(d.blobs_classes, d.blobs_per_class, d.blobs_dim,
                           seed=stream_seed(cfg.seed, "data:blobs"), noise_sigma=d.blobs_noise)
        train_set, test_set = full.split_at(int(0.8 * len(full)))
    else:
        root = Path(d.path) if d.path else cfg.out_dir / "data"
        paths = _idx_paths(root)
        missing = [p for p in paths.values() if not p.is_file()]
        if missing and d.source == "idx":
            raise ConfigError(f"dataset file not found: {missing[0]}")
        if missing:
            paths = mnist_subset_to_idx(root)
        train_set = load_idx(paths["train_images"], paths["train_labels"], "train")
        test_set = load_idx(paths["test_images"], paths["test_labels"], "test")
    if d.n_train:
        train_set = train_set.subset(slice(0, d.n_train))
    if d.n_test:
        test_set = test_set.subset(slice(0, d.n_test))
    return train_set, test_set


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_path(cfg: ExperimentConfig, role: str) -> Path:
    return cfg.out_dir / "checkpoints" / f"{role}.ckpt"


def model_spec(cfg: ExperimentConfig, arch: str, data: Dataset) -> ModelSpec:
    return ModelSpec(arch, data.input_shape, data.num_classes, stream_seed(cfg.seed, f"init:{arch}"))


def _load(cfg: ExperimentConfig, role: str) -> Model:
    path = checkpoint_path(cfg, role)
    if not path.is_file():
        raise ConfigError(f"missing checkpoint {path}; run the earlier pipeline step first")
    return load_checkpoint(path)


def load_models(cfg: ExperimentConfig) -> tuple[Model, dict[str, Model]]:
    return _load(cfg, "surrogate"), {arch: _load(cfg, f"target-{arch}") for arch in cfg.targets}


def lrs_role(cfg: ExperimentConfig) -> str:
    return f"surrogate-{cfg.lrs.variant.lower()}"


# ---------------------------------------------------------------------------
# steps


def train_models(cfg: ExperimentConfig, train_set: Dataset, test_set: Dataset) -> dict[str, Model]:
    """Train surrogate and targets, save checkpoints, and enforce the accuracy gate."""
    t = cfg.train
    models, failures = {}, []
    for role, arch in [("surrogate", cfg.surrogate)] + [(f"target-{a}", a) for a in cfg.targets]:
        model = build(model_spec(cfg, arch, train_set))
        train(model, train_set, t.epochs, t.lr, t.momentum, t.batch_size,
              seed=stream_seed(cfg.seed, f"batches:{arch}"), weight_decay=t.weight_decay)
        acc = model.accuracy(test_set.images, test_set.labels)
        model.meta["test_accuracy"] = acc
        log.info("trained %s (%s): test accuracy %.4f", role, arch, acc)
        if acc < cfg.data.gate:
            failures.append(f"{arch} ({role}) reached {acc:.3f} < gate {cfg.data.gate:.2f}")
        save_checkpoint(model, checkpoint_path(cfg, role))
        models[role] = model
    if failures:
        raise GateError("accuracy gate failed: " + "; ".join(failures))
    return models


def lrs_config(cfg: ExperimentConfig, **changes) -> LRSConfig:
    return dataclasses.replace(cfg.lrs, seed=stream_seed(cfg.seed, "lrs"), **changes)


def finetune_surrogate(cfg: ExperimentConfig, surrogate: Model, train_set: Dataset, test_set: Dataset,
                       lrs: LRSConfig | None = None, save: bool = True) -> tuple[Model, FinetuneReport]:
    lrs = lrs or lrs_config(cfg)
    path = checkpoint_path(cfg, f"surrogate-{lrs.variant.lower()}") if save else None
    out, report = finetune(surrogate, train_set, lrs, test=test_set, checkpoint_path=path)
    if save:
        report.write_csv(cfg.out_dir / "finetune.csv", config=cfg.to_dict(), seed=cfg.seed)
    return out, report


def eval_subset(cfg: ExperimentConfig, test_set: Dataset, models) -> tuple[np.ndarray, np.ndarray]:
    """First ``eval.n`` test samples that every model classifies correctly."""
    x, y = test_set.images[:cfg.eval.n], test_set.labels[:cfg.eval.n]
    keep = correct_mask(models, x, y)
    return x[keep], y[keep]


def craft(cfg: ExperimentConfig, surrogates: dict[str, Model], x, y, save: bool = True) -> dict:
    """Adversarial batches keyed by (surrogate tag, method)."""
    batches = {}
    for tag, model in surrogates.items():
        for method in cfg.methods:
            adv = attack(model, x, y, cfg.attack_for(method))
            batches[tag, method] = adv
            if save:
                stem = cfg.out_dir / "adv" / f"{tag}-{method}"
                adv.save(stem.with_suffix(".bin"), stem.with_name(stem.name + "-manifest.csv"),
                         config=cfg.to_dict(), seed=cfg.seed)
    return batches


def load_batches(cfg: ExperimentConfig, tags) -> dict:
    batches = {}
    for tag in tags:
        for method in cfg.methods:
            path = cfg.out_dir / "adv" / f"{tag}-{method}.bin"
            if not path.is_file():
                raise ConfigError(f"missing adversarial batch {path}; run `lrs attack` first")
            batches[tag, method] = AdvBatch.load(path)
    return batches


def report_batches(cfg: ExperimentConfig, surrogates: dict[str, Model], targets: dict[str, Model],
                   batches: dict, save: bool = True) -> list[EvalReport]:
    reports = []
    for (tag, method), adv in batches.items():
        reports.append(EvalReport(
            tag, method, cfg.attack.eps, len(adv), white_box=asr(surrogates[tag], adv),
            per_target={name: asr(model, adv) for name, model in targets.items()},
            attack=adv.config))
    if save:
        write_eval_reports(cfg.out_dir / "eval_report.csv", reports, config=cfg.to_dict(), seed=cfg.seed)
    return reports


SWEEP_HEADER = ["variant", "lambda", "h", "method", "avg_asr", "white_box", "clean_acc", "n", "status"]


def run_sweep(cfg: ExperimentConfig, surrogate: Model, targets: dict[str, Model],
              train_set: Dataset, test_set: Dataset, save: bool = True) -> list[dict]:
    """Average transfer ASR over a (lambda, h) grid for ``sweep.variant``.

    lambda = 0 means no fine-tuning at all, so those points reproduce the
    pretrained baseline exactly.  A grid point whose fine-tuning diverges is
    kept as a row with status "diverged" and NaN metrics.
    """
    sw = cfg.sweep
    second = sw.variant.upper().replace("-", "") == "LRS2"
    x, y = eval_subset(cfg, test_set, [surrogate, *targets.values()])
    attack_cfg = cfg.attack_for(sw.method)
    baseline = None
    rows = []
    for lam in sw.lambdas:
        for h in sw.hs:
            row = {"variant": sw.variant, "lambda": lam, "h": h, "method": sw.method}
            if lam == 0:
                model = surrogate
                if baseline is None:
                    baseline = attack(model, x, y, attack_cfg)
                adv = baseline
            else:
                changes = {"variant": sw.variant, "lambda2" if second else "lambda1": lam, "h2" if second else "h1": h}
                try:
                    model, _ = finetune_surrogate(cfg, surrogate, train_set, test_set,
                                                  lrs_config(cfg, **changes), save=False)
                except DivergenceError as exc:
                    log.warning("sweep point lambda=%g h=%g diverged: %s", lam, h, exc)
                    rows.append(dict(row, avg_asr=float("nan"), white_box=float("nan"),
                                     clean_acc=float("nan"), n=len(y), status="diverged"))
                    continue
                adv = attack(model, x, y, attack_cfg)
            rows.append(dict(row, avg_asr=float(np.mean([asr(t, adv) for t in targets.values()])),
                             white_box=asr(model, adv), clean_acc=model.accuracy(test_set.images, test_set.labels),
                             n=len(adv), status="ok"))
    if save:
        write_csv(cfg.out_dir / "sweep.csv", SWEEP_HEADER, [[r[k] for k in SWEEP_HEADER] for r in rows],
                  config=cfg.to_dict(), seed=cfg.seed)
    return rows


def diagnostics(cfg: ExperimentConfig, surrogates: dict[str, Model], target: tuple[str, Model],
                test_set: Dataset, save: bool = True) -> dict:
    """Lipschitz estimates, landscape total variation, and loss curves for each surrogate."""
    dg = cfg.diag
    x, y = eval_subset(cfg, test_set, [*surrogates.values(), target[1]])
    out: dict = {"lipschitz": {}, "tv": {}, "curves": {}, "grids": {}}
    lip_x = x[:dg.lipschitz_n]
    for tag, model in surrogates.items():
        out["lipschitz"][tag] = empirical_lipschitz(model, lip_x, dg.lipschitz_eps, dg.lipschitz_steps,
                                                    seed=stream_seed(cfg.seed, "lipschitz"))
        grids = [landscape_slice(model, x[i], y[i], dg.landscape_extent, dg.landscape_resolution,
                                 seed=stream_seed(cfg.seed, f"landscape:{i}"))
                 for i in range(min(dg.landscape_points, len(y)))]
        out["grids"][tag] = grids
        out["tv"][tag] = np.array([g.total_variation() for g in grids])
        out["curves"][tag] = loss_curves(model, target[1], x[:dg.curves_n], y[:dg.curves_n], cfg.attack_for("pgd"))
    if save:
        meta = {"config": cfg.to_dict(), "seed": cfg.seed}
        write_csv(cfg.out_dir / "lipschitz.csv", ["model", "eps", "steps", "mean_Lemp", "std"],
                  [(tag, e.eps, e.steps, e.mean, e.std) for tag, e in out["lipschitz"].items()], **meta)
        write_csv(cfg.out_dir / "landscape_tv.csv", ["model", "points", "mean_tv", "std_tv"],
                  [(tag, len(tv), float(tv.mean()), float(tv.std())) for tag, tv in out["tv"].items()], **meta)
        for tag in surrogates:
            if out["grids"][tag]:
                out["grids"][tag][0].write_csv(cfg.out_dir / f"landscape_{tag}.csv", **meta)
            out["curves"][tag].write_csv(cfg.out_dir / f"curves_{tag}.csv", **meta)
    return out
