"""Stage dispatch, checkpoint hand-over between stages and ablation presets.

Every training entry point (CLI commands, sweeps, the acceptance suite) goes
through :func:`train_stage`, so one stage always runs the same way no matter
who asks for it.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import Config
from ..data.dataset import ReIDDataset
from ..errors import ConfigError, ContractError, MissingDependencyError
from ..evaluation import MetricsReport, evaluate_model
from .checkpoint import Checkpoint, make_checkpoint
from .model import CLIPReIDModel, build_model
from .stages import (
    LossLog,
    TextFeatureCache,
    pretrain_stage0,
    run_baseline,
    run_one_stage,
    run_stage1,
    run_stage1_averaged,
    run_stage2,
    seed_everything,
)

STAGES = ("stage0", "stage1", "stage1-averaged", "stage2", "baseline", "one-stage")
PREREQUISITE = {"stage1": "stage0", "stage1-averaged": "stage0", "stage2": "stage1",
                "baseline": "stage0", "one-stage": "stage0"}
# stages that start from a freshly initialized token bank
_FRESH_BANK = {"stage0", "stage1", "stage1-averaged", "baseline", "one-stage"}
# keys that shape stage 0; prompt and fine-tuning keys do not
_STAGE0_PREFIXES = ("seed", "deterministic", "model.", "text.", "stage0.", "aug.", "loss.tau")


def image_hw(dataset: ReIDDataset) -> tuple:
    return tuple(dataset.split("train").images.shape[1:3])


def new_model(cfg: Config, dataset: ReIDDataset) -> CLIPReIDModel:
    return build_model(cfg, dataset.vocabulary(cfg["text.ctx_len"]), dataset.n_train_ids,
                       dataset.n_cameras, image_hw(dataset), dataset.kind)


def transfer_arrays(model: CLIPReIDModel, arrays: dict, fresh_bank: bool) -> list:
    """Copy checkpoint arrays into ``model`` by name; returns names left at initialization.

    Only the token bank (when ``fresh_bank``) and the camera embedding may be
    missing or differently shaped. Anything else means the checkpoint was
    trained under an incompatible architecture.
    """
    left = []
    state = model.state_dict()
    for key, tensor in state.items():
        name = f"model.{key}"
        value = arrays.get(name)
        ok = value is not None and tuple(value.shape) == tuple(tensor.shape)
        if ok and not (fresh_bank and key.startswith("bank.")):
            with torch.no_grad():
                tensor.copy_(torch.from_numpy(np.array(value)))
            continue
        if (fresh_bank and key.startswith("bank.")) or key.endswith("sie_embed"):
            left.append(key)
            continue
        have = None if value is None else tuple(value.shape)
        raise ContractError(f"checkpoint is incompatible with this config: {name} is {have}, "
                            f"model expects {tuple(tensor.shape)}")
    return left


def check_compatible(ckpt: Checkpoint, dataset: ReIDDataset) -> None:
    if ckpt.n_ids != dataset.n_train_ids or ckpt.n_cameras != dataset.n_cameras:
        raise ContractError(f"checkpoint was trained on {ckpt.n_ids} ids / {ckpt.n_cameras} cameras, "
                            f"dataset has {dataset.n_train_ids} / {dataset.n_cameras}")
    if tuple(ckpt.image_hw) != image_hw(dataset):
        raise ContractError(f"checkpoint image size {tuple(ckpt.image_hw)} differs from the dataset")


def text_cache_of(ckpt: Checkpoint) -> TextFeatureCache:
    if ckpt.text_cache is None:
        raise MissingDependencyError(f"checkpoint from {ckpt.stage!r} carries no stage-1 text feature cache")
    bank = ckpt.arrays.get("model.bank.embeddings")
    return TextFeatureCache(torch.from_numpy(np.array(ckpt.text_cache)),
                            None if bank is None else torch.from_numpy(np.array(bank)))


@dataclass
class StageResult:
    model: CLIPReIDModel
    checkpoint: Checkpoint
    log: LossLog
    seconds: float
    cache: TextFeatureCache | None = None


def train_stage(stage: str, cfg: Config, dataset: ReIDDataset, init: Checkpoint | None = None,
                log_path=None) -> StageResult:
    """Run one training stage from ``init`` (``None`` only for stage 0).

    Raises:
        ConfigError: unknown stage.
        MissingDependencyError: the prerequisite checkpoint or its text cache is absent.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage != "stage0" and init is None:
        raise MissingDependencyError(f"{stage} needs a {PREREQUISITE[stage]} checkpoint")
    cache = text_cache_of(init) if stage == "stage2" else None
    seed_everything(cfg["seed"], cfg["deterministic"])
    model = new_model(cfg, dataset)
    if init is not None:
        check_compatible(init, dataset)
        transfer_arrays(model, init.arrays, fresh_bank=stage in _FRESH_BANK)
    log = LossLog(log_path)
    start = time.perf_counter()
    try:
        if stage == "stage0":
            pretrain_stage0(model, dataset, cfg, log)
        elif stage == "stage1":
            cache = run_stage1(model, dataset, cfg, log)
        elif stage == "stage1-averaged":
            cache = run_stage1_averaged(model, dataset, cfg, log)
        elif stage == "stage2":
            run_stage2(model, dataset, cfg, cache, log)
        elif stage == "baseline":
            run_baseline(model, dataset, cfg, log)
        else:
            run_one_stage(model, dataset, cfg, log)
    finally:
        log.close()
    seconds = time.perf_counter() - start
    ckpt = make_checkpoint(model, cfg, stage, dataset.n_cameras, image_hw(dataset), dataset.kind,
                           step=len(log.trace()), epoch=_epochs(stage, cfg),
                           text_cache=None if cache is None else cache.features)
    return StageResult(model, ckpt, log, seconds, cache)


def _epochs(stage, cfg):
    key = {"stage0": "stage0.epochs", "stage1": "stage1.epochs",
           "stage1-averaged": "stage1.epochs"}.get(stage, "stage2.epochs")
    return cfg[key]


def stage0_key(cfg: Config) -> str:
    """Digest of the settings stage 0 depends on; runs sharing it share one pretraining."""
    keys = {k: v for k, v in cfg.items() if k.startswith(_STAGE0_PREFIXES)}
    return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:12]


def stage0_config(cfg: Config) -> Config:
    # camera embeddings are a fine-tuning addition, pretraining never sees them
    return cfg.updated(**{"sie.enabled": False})


# ---------------------------------------------------------------- ablation presets

TWO_STAGE, TWO_STAGE_AVERAGED = "two-stage", "two-stage-averaged"
_OFF = {"loss.w_i2tce": 0.0, "loss.w_i2t": 0.0, "loss.w_t2i": 0.0}


def olp_stride(cfg: Config) -> int:
    """Overlapping stride used by the presets: three quarters of the patch size."""
    return max(1, cfg["model.patch"] * 3 // 4)


def preset_rows(preset: str, cfg: Config) -> list:
    """``(label, recipe, overrides, columns)`` for every row of a preset table."""
    if preset == "stages":
        return [("baseline", "baseline", {}, {}),
                ("one-stage", "one-stage", {}, {}),
                ("two-stage", TWO_STAGE, {}, {})]
    if preset == "loss-terms":
        rows = []
        for i2tce, i2t, t2i in ((0, 0, 0), (0, 1, 1), (0, 1, 0), (1, 0, 1), (1, 0, 0)):
            over = dict(_OFF)
            if i2tce:
                over["loss.w_i2tce"] = "auto"
            if i2t:
                over["loss.w_i2t"] = 1.0
            if t2i:
                over["loss.w_t2i"] = 1.0
            cols = {"i2tce": bool(i2tce), "i2t": bool(i2t), "t2i": bool(t2i)}
            label = "+".join(k for k, v in cols.items() if v) or "none"
            rows.append((label, TWO_STAGE, over, cols))
        return rows
    if preset == "sie-olp":
        olp = {"model.stride": olp_stride(cfg)}
        sie_all = {"sie.enabled": True, "sie.apply_to": "all_tokens"}
        sie_cls = {"sie.enabled": True, "sie.apply_to": "cls_only"}
        grid = (("none", {}, (0, 0, 0)), ("SIE-all", sie_all, (1, 0, 0)), ("SIE-cls", sie_cls, (0, 1, 0)),
                ("OLP", olp, (0, 0, 1)), ("SIE-cls+OLP", {**sie_cls, **olp}, (0, 1, 1)))
        return [(label, TWO_STAGE, over, dict(zip(("SIE-all", "SIE-cls", "OLP"), map(bool, flags))))
                for label, over, flags in grid]
    raise ConfigError(f"unknown ablation preset {preset!r}")


PRESETS = ("stages", "loss-terms", "sie-olp")


@dataclass
class RecipeResult:
    report: MetricsReport
    results: dict = field(default_factory=dict)   # stage name -> StageResult


class Stage0Pool:
    """Stage-0 checkpoints shared by every recipe whose pretraining settings agree."""

    def __init__(self, dataset: ReIDDataset, directory=None, seeded: dict | None = None):
        self.dataset = dataset
        self.directory = Path(directory) if directory else None
        self._pool = dict(seeded or {})

    def get(self, cfg: Config) -> Checkpoint:
        base = stage0_config(cfg)
        key = stage0_key(base)
        if key not in self._pool:
            where = self.directory / f"stage0-{key}" if self.directory else None
            if where is not None and where.exists():
                self._pool[key] = Checkpoint.load(where)
            else:
                self._pool[key] = train_stage("stage0", base, self.dataset).checkpoint
                if where is not None:
                    self._pool[key].save(where)
        return self._pool[key]

    def seed_with(self, ckpt: Checkpoint) -> None:
        self._pool[stage0_key(stage0_config(Config(ckpt.config)))] = ckpt


def run_recipe(recipe: str, cfg: Config, dataset: ReIDDataset, pool: Stage0Pool) -> RecipeResult:
    """Stage 0 (pooled) followed by the recipe's training stages, then evaluation."""
    init = pool.get(cfg)
    results = {}
    if recipe in (TWO_STAGE, TWO_STAGE_AVERAGED):
        first = "stage1" if recipe == TWO_STAGE else "stage1-averaged"
        results[first] = train_stage(first, cfg, dataset, init)
        results["stage2"] = train_stage("stage2", cfg, dataset, results[first].checkpoint)
        final = results["stage2"]
    elif recipe in ("baseline", "one-stage"):
        results[recipe] = final = train_stage(recipe, cfg, dataset, init)
    else:
        raise ConfigError(f"unknown recipe {recipe!r}")
    report, _ = evaluate_model(final.model, dataset, cfg["eval.feature_mode"], cfg["eval.metric"],
                               cfg["eval.batch"])
    return RecipeResult(report, results)
