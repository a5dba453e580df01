"""Checkpoints: a named-array ``.npz`` archive plus a JSON manifest.

The archive is written with fixed zip timestamps so that save -> load -> save
reproduces the same bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import Config
from ..errors import ContractError, MissingDependencyError
from ..text_prompting import Vocabulary
from .model import CLIPReIDModel, build_model

FORMAT_TAG = "clipreid-ckpt/1"
ARRAYS, MANIFEST = "checkpoint.npz", "checkpoint.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path, arrays: dict) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name], order="C"), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def read_npz(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume or evaluate it."""

    stage: str
    config: dict
    vocab: list
    n_ids: int
    n_cameras: int
    image_hw: tuple
    kind: str
    arrays: dict
    step: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    @property
    def text_cache(self):
        return self.arrays.get("text_cache")

    def manifest(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "stage": self.stage,
            "step": self.step,
            "epoch": self.epoch,
            "seed": self.seed,
            "config": dict(self.config),
            "vocab": list(self.vocab),
            "n_ids": self.n_ids,
            "n_cameras": self.n_cameras,
            "image_hw": list(self.image_hw),
            "kind": self.kind,
            "extra": self.extra,
            "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)}
                       for k, v in sorted(self.arrays.items())},
        }

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_npz(d / ARRAYS, self.arrays)
        (d / MANIFEST).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        if not (d / MANIFEST).exists() or not (d / ARRAYS).exists():
            raise MissingDependencyError(f"no checkpoint in {d}")
        man = json.loads((d / MANIFEST).read_text())
        if man.get("format") != FORMAT_TAG:
            raise ContractError(f"unsupported checkpoint format {man.get('format')!r}")
        arrays = read_npz(d / ARRAYS)
        declared = man["arrays"]
        if set(declared) != set(arrays):
            raise ContractError("checkpoint arrays do not match the manifest")
        for name, spec in declared.items():
            if list(arrays[name].shape) != spec["shape"] or str(arrays[name].dtype) != spec["dtype"]:
                raise ContractError(f"array {name!r} has shape {arrays[name].shape}, "
                                    f"manifest says {spec['shape']}")
        return cls(stage=man["stage"], config=man["config"], vocab=man["vocab"],
                   n_ids=man["n_ids"], n_cameras=man["n_cameras"],
                   image_hw=tuple(man["image_hw"]), kind=man["kind"], arrays=arrays,
                   step=man["step"], epoch=man["epoch"], extra=man.get("extra", {}))

    def build_model(self, config: Config | None = None) -> CLIPReIDModel:
        cfg = Config(self.config) if config is None else config
        vocab = Vocabulary(self.vocab, ctx_len=cfg["text.ctx_len"])
        model = build_model(cfg, vocab, self.n_ids, self.n_cameras, self.image_hw, self.kind)
        load_model_arrays(model, self.arrays)
        return model


def model_arrays(model: CLIPReIDModel) -> dict:
    return {f"model.{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_model_arrays(model: CLIPReIDModel, arrays: dict) -> None:
    state = model.state_dict()
    for key, tensor in state.items():
        name = f"model.{key}"
        if name not in arrays:
            raise ContractError(f"checkpoint lacks {name!r}")
        value = torch.from_numpy(np.array(arrays[name]))
        if tuple(value.shape) != tuple(tensor.shape):
            raise ContractError(f"{name!r}: checkpoint shape {tuple(value.shape)} vs model "
                                f"{tuple(tensor.shape)}")
        with torch.no_grad():
            tensor.copy_(value)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            out[f"optim.{prefix}.{idx}.{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    return out


def make_checkpoint(model: CLIPReIDModel, cfg: Config, stage: str, n_cameras: int, image_hw,
                    kind: str, step: int = 0, epoch: int = 0, text_cache=None,
                    optimizers: dict | None = None, extra: dict | None = None) -> Checkpoint:
    arrays = model_arrays(model)
    if text_cache is not None:
        arrays["text_cache"] = np.asarray(text_cache.detach().cpu().numpy()
                                          if torch.is_tensor(text_cache) else text_cache).copy()
    for name, opt in (optimizers or {}).items():
        arrays.update(optimizer_arrays(name, opt))
    return Checkpoint(stage=stage, config=dict(cfg), vocab=list(model.vocab.tokens),
                      n_ids=model.n_ids, n_cameras=n_cameras, image_hw=tuple(image_hw), kind=kind,
                      arrays=arrays, step=step, epoch=epoch, extra=extra or {})
