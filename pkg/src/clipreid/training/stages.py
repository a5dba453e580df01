"""Training procedures: toy contrastive pretraining, prompt fitting, fine-tuning.

The two-stage recipe is ``pretrain_stage0`` -> ``run_stage1`` (or
``run_stage1_averaged``) -> ``run_stage2``. ``run_baseline`` fine-tunes without
text anchors and ``run_one_stage`` fits prompts and the image encoder together.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..config import Config
from ..data.augment import AugmentationConfig, augment
from ..data.dataset import ReIDDataset
from ..data.sampler import PKSampler
from ..errors import ConfigError, ContractError, FreezeViolationError, TrainingError
from ..losses import (
    loss_i2t,
    loss_i2tce,
    loss_id,
    loss_stage1,
    loss_stage2,
    loss_t2i,
    loss_t2i_multipos,
    loss_t2ice_averaged,
    loss_triplet,
)
from .model import CLIPReIDModel, images_to_tensor, parameter_hashes, stage2_weights, tensor_digest
from .schedule import OptimSchedule, lr_at, set_lr

logger = logging.getLogger(__name__)


class LossLog:
    """Per-step loss components, kept in memory and optionally appended as JSON lines."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        self._fh = open(self.path, "a") if self.path else None

    def log(self, stage: str, step: int, **values):
        for name, value in values.items():
            rec = {"stage": stage, "step": step, "loss": name, "value": float(value)}
            self.records.append(rec)
            if self._fh:
                self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def trace(self, stage: str | None = None, name: str = "total") -> list:
        return [r["value"] for r in self.records
                if r["loss"] == name and (stage is None or r["stage"] == stage)]

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _check_finite(loss, stage, step):
    if not torch.isfinite(loss):
        raise TrainingError(f"{stage}: loss diverged at step {step}", step=step)


def _set_trainable(model: CLIPReIDModel, *groups, exclude=()):
    allowed = set()
    parts = model.parameter_groups()
    for g in groups:
        allowed.update(parts[g])
    allowed.difference_update(exclude)
    for name, p in model.named_parameters():
        p.requires_grad_(name in allowed)
    return [p for name, p in model.named_parameters() if name in allowed]


def _hashes(model: CLIPReIDModel, *groups) -> dict:
    parts = model.parameter_groups()
    return parameter_hashes({n: p for g in groups for n, p in parts[g].items()})


def _audit(before: dict, after: dict, what: str):
    changed = sorted(k for k in before if before[k] != after.get(k))
    if changed:
        raise FreezeViolationError(f"{what} changed during a frozen stage: {changed[:3]}")


def aug_config(cfg: Config) -> AugmentationConfig:
    return AugmentationConfig(flip_p=cfg["aug.flip_p"], pad=cfg["aug.pad"], erase_p=cfg["aug.erase_p"],
                              erase_area=(cfg["aug.erase_min"], cfg["aug.erase_max"]))


def _augmented_batch(images, aug: AugmentationConfig | None, rng, fill):
    x = images.astype(np.float32) / 255.0
    if aug is not None:
        x = np.stack([augment(im, aug, rng, fill) for im in x])
    return images_to_tensor(x)


def _cams(model, camids):
    sie = getattr(model.encoder.image, "sie", None)
    return torch.as_tensor(camids) if sie is not None and sie.enabled else None


# ---------------------------------------------------------------- stage 0


def pretrain_stage0(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config,
                    log: LossLog | None = None) -> LossLog:
    """Contrastive image/caption pretraining of both encoders and projections."""
    log = log or LossLog()
    paths, images, camids = [], [], []
    for split in ("train", "pretrain"):
        s = dataset.split(split)
        for i, p in enumerate(s.paths):
            if p in dataset.captions:
                paths.append(p)
                images.append(s.images[i])
                camids.append(s.camids[i])
    if not paths:
        raise ContractError("stage 0 needs caption pairs")
    images = np.stack(images)
    camids = np.asarray(camids)
    captions = [dataset.captions[p] for p in paths]
    distinct = sorted(set(captions))
    by_caption = {c: [i for i, cc in enumerate(captions) if cc == c] for c in distinct}
    tokens = torch.from_numpy(np.stack([model.vocab.tokenize(c) for c in distinct]))

    params = _set_trainable(model, "image", "text")
    opt = torch.optim.Adam(params, lr=cfg["stage0.lr"])
    epochs = cfg["stage0.epochs"]
    sched = OptimSchedule(base_lr=cfg["stage0.lr"], total_epochs=epochs,
                          warmup_epochs=min(cfg["stage0.warmup_epochs"], epochs),
                          warmup_start_lr=cfg["stage0.lr"] * 0.01, decay="cosine")
    aug = aug_config(cfg) if cfg["stage0.augment"] else None
    fill = dataset.channel_mean()
    batch = min(cfg["stage0.batch"], len(distinct))
    steps = max(1, math.ceil(len(paths) / cfg["stage0.batch"]))
    model.train()
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg["seed"], 0, epoch])
        for it in range(steps):
            set_lr(opt, lr_at(sched, epoch, it / steps))
            chosen = rng.choice(len(distinct), size=batch, replace=False)
            idx = np.array([rng.choice(by_caption[distinct[c]]) for c in chosen])
            x = _augmented_batch(images[idx], aug, rng, fill)
            V = model.encode_image(x, _cams(model, camids[idx])).post
            T = model.encoder.encode_token_ids(tokens[torch.from_numpy(chosen)])
            S = model.sim(V, T)
            l_i2t, l_t2i = loss_i2t(S), loss_t2i(S)
            loss = l_i2t + l_t2i
            _check_finite(loss, "stage0", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.log("stage0", step, i2t=l_i2t.item(), t2i=l_t2i.item(), total=loss.item())
            step += 1
    model.eval()
    return log


# ---------------------------------------------------------------- stage 1


@dataclass
class ImageFeatureCache:
    features: torch.Tensor      # n x D_joint
    labels: torch.Tensor        # n, train label in [0, N)
    paths: list
    means: torch.Tensor         # N x D_joint, per-identity mean feature


@dataclass
class TextFeatureCache:
    features: torch.Tensor      # N x D_joint
    bank: torch.Tensor | None   # token bank snapshot at the end of stage 1

    def digest(self) -> str:
        return tensor_digest(self.features)


@torch.no_grad()
def encode_images(model: CLIPReIDModel, images: np.ndarray, camids, batch: int = 256):
    """Eval-mode feature bundles (``pre, img, post``) for uint8 images, as tensors."""
    was_training = model.training
    model.eval()
    pre, img, post = [], [], []
    for s in range(0, len(images), batch):
        x = images_to_tensor(images[s:s + batch])
        f = model.encode_image(x, _cams(model, np.asarray(camids)[s:s + batch]))
        pre.append(f.pre)
        img.append(f.img)
        post.append(f.post)
    model.train(was_training)
    if not pre:
        raise ContractError("no images to encode")
    return torch.cat(pre), torch.cat(img), torch.cat(post)


def precompute_image_features(model: CLIPReIDModel, dataset: ReIDDataset, batch: int = 256) -> ImageFeatureCache:
    """One eval-mode forward pass over every training image."""
    train = dataset.split("train")
    _, _, post = encode_images(model, train.images, train.camids, batch)
    labels = torch.from_numpy(dataset.train_labels())
    N = dataset.n_train_ids
    means = torch.zeros(N, post.shape[1], dtype=post.dtype)
    means.index_add_(0, labels, post)
    means /= torch.bincount(labels, minlength=N).clamp_min(1).unsqueeze(1).to(post.dtype)
    return ImageFeatureCache(post, labels, list(train.paths), means)


def _stage1_setup(model, cfg, epochs):
    if model.bank is None:
        raise ContractError("stage 1 needs at least one learnable prompt token (M >= 1)")
    params = _set_trainable(model, "bank")
    opt = torch.optim.Adam(params, lr=cfg["stage1.lr"])
    sched = OptimSchedule(base_lr=cfg["stage1.lr"], total_epochs=epochs, decay="cosine")
    return opt, sched


def _finish_stage1(model, before):
    _audit(before, _hashes(model, "image", "text", "heads"), "encoder parameters")
    with torch.no_grad():
        feats = model.all_text_features()
    return TextFeatureCache(feats.detach().clone(), model.bank.embeddings.detach().clone())


def run_stage1(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config, log: LossLog | None = None,
               feats: ImageFeatureCache | None = None) -> TextFeatureCache:
    """Fit the identity prompt tokens with both encoders frozen."""
    log = log if log is not None else LossLog()
    model.eval()
    before = _hashes(model, "image", "text", "heads")
    feats = feats or precompute_image_features(model, dataset, cfg["eval.batch"])
    epochs = cfg["stage1.epochs"]
    opt, sched = _stage1_setup(model, cfg, epochs)
    n = len(feats.labels)
    bs = min(cfg["stage1.batch"], n)
    steps = math.ceil(n / bs)
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg["seed"], 1, epoch])
        perm = torch.from_numpy(rng.permutation(n))
        for it in range(steps):
            set_lr(opt, lr_at(sched, epoch, it / steps))
            idx = perm[it * bs:(it + 1) * bs]
            labels = feats.labels[idx]
            uniq, inv = torch.unique(labels, return_inverse=True)
            T = model.text_features(uniq)
            S = model.sim(feats.features[idx], T[inv])
            loss = loss_stage1(S, labels)
            _check_finite(loss, "stage1", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.log("stage1", step, total=loss.item())
            step += 1
    return _finish_stage1(model, before)


def run_stage1_averaged(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config,
                        log: LossLog | None = None,
                        feats: ImageFeatureCache | None = None) -> TextFeatureCache:
    """Prompt fitting against per-identity mean image features (one N x N softmax per step)."""
    log = log if log is not None else LossLog()
    model.eval()
    before = _hashes(model, "image", "text", "heads")
    feats = feats or precompute_image_features(model, dataset, cfg["eval.batch"])
    epochs = cfg["stage1.epochs"]
    opt, sched = _stage1_setup(model, cfg, epochs)
    steps = cfg["stage1.averaged_steps"]
    targets = torch.arange(model.n_ids)
    step = 0
    for epoch in range(epochs):
        for it in range(steps):
            set_lr(opt, lr_at(sched, epoch, it / steps))
            S = model.sim(feats.means, model.all_text_features())
            loss = loss_t2ice_averaged(S, targets)
            _check_finite(loss, "stage1_averaged", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.log("stage1_averaged", step, total=loss.item())
            step += 1
    return _finish_stage1(model, before)


# ---------------------------------------------------------------- stage 2 family


def _finetune(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config, log: LossLog,
              anchors: str, cache: TextFeatureCache | None, stage: str):
    w_id, w_tri, w_i2tce = stage2_weights(cfg)
    w_i2t, w_t2i = cfg["loss.w_i2t"], cfg["loss.w_t2i"]
    if anchors == "none":
        w_i2tce = w_i2t = w_t2i = 0.0
    text_feats = None
    if anchors == "cache":
        if cache is None:
            raise ContractError("stage 2 needs the stage-1 text feature cache")
        text_feats = cache.features.detach()
        if text_feats.shape[0] != model.n_ids:
            raise ContractError(f"text cache holds {text_feats.shape[0]} identities, "
                                f"model has {model.n_ids}")
    eps, margin = cfg["loss.epsilon"], cfg["loss.margin"]

    exclude = set()
    if not cfg["stage2.train_image_proj"]:
        exclude = {n for n in model.parameter_groups()["image"] if n.startswith("encoder.image.proj.")}
    groups = ("image", "heads") + (("bank",) if anchors == "live" else ())
    params = _set_trainable(model, *groups, exclude=exclude)
    text_proj = set()
    if cfg["stage2.train_text_proj"]:
        if anchors == "cache":
            raise ConfigError("stage2.train_text_proj would leave the cached text features stale")
        for n, p in model.named_parameters():
            if n.startswith("encoder.text.proj."):
                p.requires_grad_(True)
                params.append(p)
                text_proj.add(n)
    frozen_groups = ("text",) + (() if anchors == "live" else ("bank",))

    def frozen_hashes():
        return {k: v for k, v in _hashes(model, *frozen_groups).items() if k not in text_proj}

    frozen_before = frozen_hashes()
    cache_before = cache.digest() if cache is not None else None

    enc_params = [p for p in params if p not in set(model.parameter_groups()["bank"].values())]
    opt = torch.optim.Adam(enc_params, lr=cfg["stage2.lr"], weight_decay=cfg["stage2.weight_decay"])
    epochs = cfg["stage2.epochs"]
    sched = OptimSchedule(base_lr=cfg["stage2.lr"], total_epochs=epochs,
                          warmup_epochs=min(cfg["stage2.warmup_epochs"], epochs),
                          warmup_start_lr=cfg["stage2.warmup_start_lr"], decay="milestones",
                          milestones=cfg.ints("stage2.milestones"), gamma=cfg["stage2.gamma"])
    bank_opt = bank_sched = None
    if anchors == "live":
        bank_opt = torch.optim.Adam(list(model.bank.parameters()), lr=cfg["stage1.lr"])
        bank_sched = OptimSchedule(base_lr=cfg["stage1.lr"], total_epochs=epochs, decay="cosine")

    train = dataset.split("train")
    labels_all = dataset.train_labels()
    sampler = PKSampler(labels_all, cfg["stage2.P"], cfg["stage2.K"], seed=cfg["seed"])
    aug, fill = aug_config(cfg), dataset.channel_mean()
    pre_tri = cfg["loss.pre_triplet"]
    model.train()
    model.encoder.text.eval()
    step = 0
    for epoch in range(epochs):
        batches = sampler.epoch(epoch)
        rng = np.random.default_rng([cfg["seed"], 2, epoch])
        for it, idx in enumerate(batches):
            frac = it / len(batches)
            set_lr(opt, lr_at(sched, epoch, frac))
            if bank_opt is not None:
                set_lr(bank_opt, lr_at(bank_sched, epoch, frac))
            x = _augmented_batch(train.images[idx], aug, rng, fill)
            labels = torch.from_numpy(labels_all[idx])
            feats = model.encode_image(x, _cams(model, train.camids[idx]))
            logits = model.classify(feats)
            l_id = loss_id(logits["img"], labels, eps) + loss_id(logits["post"], labels, eps)
            l_tri = loss_triplet(feats.img, labels, margin) + loss_triplet(feats.post, labels, margin)
            if pre_tri:
                l_tri = l_tri + loss_triplet(feats.pre, labels, margin)
            zero = feats.post.new_zeros(())
            l_i2tce = l_i2t = l_t2i = l_s1 = zero
            anchors_now = text_feats
            if anchors == "live":
                T_all = model.all_text_features()
                # prompts learn from the contrastive loss, the image branch from stage-2 terms
                l_s1 = loss_stage1(model.sim(feats.post.detach(), T_all[labels]), labels)
                anchors_now = T_all.detach()
            if anchors_now is not None:
                if w_i2tce > 0:
                    l_i2tce = loss_i2tce(model.sim(feats.post, anchors_now), labels, model.n_ids, eps)
                if w_i2t > 0 or w_t2i > 0:
                    S_b = model.sim(feats.post, anchors_now[labels])
                    if w_i2t > 0:
                        l_i2t = loss_i2t(S_b)
                    if w_t2i > 0:
                        l_t2i = loss_t2i_multipos(S_b, labels)
            loss = loss_stage2(l_id, l_tri, l_i2tce, (w_id, w_tri, w_i2tce)) + w_i2t * l_i2t + w_t2i * l_t2i + l_s1
            _check_finite(loss, stage, step)
            opt.zero_grad(set_to_none=True)
            if bank_opt is not None:
                bank_opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if bank_opt is not None:
                bank_opt.step()
            log.log(stage, step, id=l_id.item(), tri=l_tri.item(), i2tce=l_i2tce.item(),
                    i2t=l_i2t.item(), t2i=l_t2i.item(), stage1=l_s1.item(), total=loss.item())
            step += 1
    model.eval()
    _audit(frozen_before, frozen_hashes(), "text branch")
    if cache is not None and cache.digest() != cache_before:
        raise FreezeViolationError("text feature cache changed during stage 2")
    return log


def run_stage2(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config, cache: TextFeatureCache,
               log: LossLog | None = None) -> LossLog:
    """Fine-tune the image encoder against the frozen per-identity text features."""
    return _finetune(model, dataset, cfg, log if log is not None else LossLog(), "cache", cache, "stage2")


def run_baseline(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config,
                 log: LossLog | None = None) -> LossLog:
    """Fine-tune with ID and triplet losses only (no text anchors, no stage 1)."""
    return _finetune(model, dataset, cfg, log if log is not None else LossLog(), "none", None, "stage2")


def run_one_stage(model: CLIPReIDModel, dataset: ReIDDataset, cfg: Config,
                  log: LossLog | None = None) -> LossLog:
    """Fit prompts and fine-tune the image encoder in the same steps."""
    return _finetune(model, dataset, cfg, log if log is not None else LossLog(), "live", None, "one_stage")
