"""On-disk dataset loading: ``manifest.jsonl`` + PNG images + ``vocab.txt``."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError
from ..text_prompting import Vocabulary

SPLITS = ("train", "query", "gallery", "pretrain")


@dataclass(frozen=True)
class ReIDRecord:
    path: str
    pid: int
    camid: int
    split: str


@dataclass
class Split:
    """Images of one split held in memory as ``n x H x W x 3`` uint8."""

    paths: list
    pids: np.ndarray
    camids: np.ndarray
    images: np.ndarray

    def __len__(self):
        return len(self.paths)


class ReIDDataset:
    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise IOError(f"no manifest.jsonl under {self.root}")
        self.records = [ReIDRecord(**json.loads(line))
                        for line in manifest.read_text().splitlines() if line.strip()]
        meta_path = self.root / "dataset.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        self.kind = self.meta.get("kind", "person")
        caps = self.root / "captions.jsonl"
        self.captions = {}
        if caps.exists():
            for line in caps.read_text().splitlines():
                if line.strip():
                    row = json.loads(line)
                    self.captions[row["path"]] = row["caption"]
        self._splits = {}
        train_pids = sorted({r.pid for r in self.records if r.split == "train"})
        # train identities relabelled to 0..N-1 for classifiers and the token bank
        self.train_label = {pid: i for i, pid in enumerate(train_pids)}

    @property
    def n_train_ids(self) -> int:
        return len(self.train_label)

    @property
    def n_cameras(self) -> int:
        return max(r.camid for r in self.records) + 1

    def vocabulary(self, ctx_len: int) -> Vocabulary:
        return Vocabulary.load(self.root / "vocab.txt", ctx_len=ctx_len)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        if name not in self._splits:
            rows = [r for r in self.records if r.split == name]
            images = [self._load(r.path) for r in rows]
            arr = np.stack(images) if images else np.zeros((0, 0, 0, 3), np.uint8)
            self._splits[name] = Split(
                paths=[r.path for r in rows],
                pids=np.array([r.pid for r in rows], dtype=np.int64),
                camids=np.array([r.camid for r in rows], dtype=np.int64),
                images=arr,
            )
        return self._splits[name]

    def train_labels(self) -> np.ndarray:
        return np.array([self.train_label[p] for p in self.split("train").pids], dtype=np.int64)

    def _load(self, rel):
        path = self.root / rel
        if not path.exists():
            raise IOError(f"missing image file {path}")
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def channel_mean(self) -> np.ndarray:
        imgs = self.split("train").images
        return imgs.reshape(-1, 3).mean(0) / 255.0


def load_dataset(root) -> ReIDDataset:
    return ReIDDataset(root)
