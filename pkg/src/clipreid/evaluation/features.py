"""Inference features, full-model evaluation and embedding / ranking dumps."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch

from ..data.dataset import ReIDDataset
from ..errors import ConfigError
from .metrics import RankingResult, distance_matrix, evaluate

FEATURE_MODES = ("post", "pre", "img", "img+post", "img+pre", "pre+img+post")
DEFAULT_MODE = "img+post"


def select_features(bundle, mode: str = DEFAULT_MODE) -> np.ndarray:
    """Concatenate the named parts of a ``(pre, img, post)`` bundle in the listed order."""
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    parts = {"pre": bundle[0], "img": bundle[1], "post": bundle[2]}
    out = [parts[name] for name in mode.split("+")]
    out = [p.detach().cpu().numpy() if torch.is_tensor(p) else np.asarray(p) for p in out]
    return np.concatenate(out, axis=-1).astype(np.float64)


def extract_inference_feature(model, images, camids=None, mode: str = DEFAULT_MODE,
                              batch: int = 256) -> np.ndarray:
    """Eval-mode inference features for a uint8 image array (single ``H x W x 3`` or batch)."""
    from ..training.stages import encode_images

    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    camids = np.zeros(len(images), dtype=np.int64) if camids is None else np.atleast_1d(camids)
    feats = select_features(encode_images(model, images, camids, batch), mode)
    return feats[0] if single else feats


def evaluate_model(model, dataset: ReIDDataset, mode: str = DEFAULT_MODE, metric: str = "cosine",
                   batch: int = 256, use_cython=None):
    """Rank the gallery for every query; returns ``(report, distmat)``."""
    q, g = dataset.split("query"), dataset.split("gallery")
    qf = extract_inference_feature(model, q.images, q.camids, mode, batch)
    gf = extract_inference_feature(model, g.images, g.camids, mode, batch)
    dist = distance_matrix(qf, gf, metric)
    report = evaluate(dist, q.pids, g.pids, q.camids, g.camids, use_cython=use_cython)
    report.config = {"feature_mode": mode, "metric": metric}
    return report, dist


def dump_embeddings(model, dataset: ReIDDataset, split: str, out_path, mode: str = "post",
                    text_features=None, batch: int = 256) -> Path:
    """CSV of image rows for ``split`` followed by one text row per training identity."""
    s = dataset.split(split)
    img = extract_inference_feature(model, s.images, s.camids, mode, batch)
    rows = [[p, int(pid), int(cam), "image", *f] for p, pid, cam, f in zip(s.paths, s.pids, s.camids, img)]
    if text_features is not None:
        text = np.asarray(text_features.detach().cpu().numpy() if torch.is_tensor(text_features)
                          else text_features, dtype=np.float64)
        inverse = {label: pid for pid, label in dataset.train_label.items()}
        rows += [["", inverse[y], "", "text", *f] for y, f in enumerate(text)]
    width = max(len(r) for r in rows) - 4
    out = Path(out_path)
    try:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "pid", "camid", "kind"] + [f"f{i}" for i in range(width)])
            for r in rows:
                w.writerow(r[:4] + [repr(float(v)) for v in r[4:]] + [""] * (width + 4 - len(r)))
    except OSError as exc:
        raise IOError(f"cannot write {out}: {exc}") from exc
    return out


def dump_rankings(distmat, q_paths, g_paths, q_pids, g_pids, q_camids, g_camids, top_k: int,
                  out_path) -> Path:
    """JSON lines: query path, its top-k gallery paths after exclusion, and match flags."""
    result = RankingResult.build(distmat, np.asarray(q_pids), np.asarray(g_pids),
                                 np.asarray(q_camids), np.asarray(g_camids))
    out = Path(out_path)
    try:
        with open(out, "w") as fh:
            for qi, (order, flags) in enumerate(zip(result.order, result.matches)):
                row = {"query": q_paths[qi],
                       "gallery": [g_paths[int(j)] for j in order[:top_k]],
                       "matches": [bool(f) for f in flags[:top_k]],
                       "distances": [float(distmat[qi, int(j)]) for j in order[:top_k]]}
                fh.write(json.dumps(row) + "\n")
    except OSError as exc:
        raise IOError(f"cannot write {out}: {exc}") from exc
    return out
