"""Procedural multi-camera re-identification benchmark.

An identity is a coloured, textured shape; a camera is a fixed colour cast,
brightness gain and blur applied on top of per-image pose jitter and sensor
noise. Every image is rendered from an RNG stream keyed by (seed, pid, seq), so
generation is deterministic and embarrassingly parallel.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError
from ..text_prompting import EOS, PAD, SLOT_WORD, SOS, Vocabulary

FORMAT_TAG = "clipreid-synthetic/1"

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross")
TEXTURES = ("plain", "striped", "dotted", "checkered")
COLOR_NAMES = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink")
SIZE_NAMES = ("small", "medium", "large")
SIZE_RANGE = (0.45, 0.85)
TEMPLATE_WORDS = ("a", "photo", "of", "person", "vehicle", ".", SLOT_WORD)


@dataclass
class SyntheticSpec:
    n_train_ids: int = 20
    n_test_ids: int = 20
    images_per_id: int = 30
    n_cameras: int = 4
    image_hw: tuple = (32, 32)
    seed: int = 0
    kind: str = "person"
    # extra identities whose captioned images only feed stage-0 pretraining
    n_pretrain_ids: int = 0
    # nuisance strengths
    color_shift: float = 0.12
    brightness: float = 0.25
    blur: float = 0.8
    jitter: float = 0.12
    rotation: float = 25.0
    scale_jitter: float = 0.1
    noise: float = 0.03

    def __post_init__(self):
        self.image_hw = tuple(int(v) for v in self.image_hw)
        if self.n_train_ids < 1 or self.n_test_ids < 1:
            raise ConfigError("need at least one train and one test identity")
        if self.n_cameras < 2 or self.images_per_id < 2:
            raise ConfigError("every identity must be seen by at least two cameras")
        if self.kind not in ("person", "vehicle"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if min(self.color_shift, self.brightness, self.blur, self.jitter,
               self.rotation, self.scale_jitter, self.noise) < 0:
            raise ConfigError("nuisance strengths must be non-negative")


@dataclass(frozen=True)
class Identity:
    pid: int
    shape: str
    hue: float
    size: float
    texture: str
    phase: float
    freq: float

    def caption(self, kind: str) -> str:
        return f"a photo of a {color_name(self.hue)} {size_name(self.size)} {self.texture} {self.shape} {kind} ."


@dataclass(frozen=True)
class Camera:
    camid: int
    offset: tuple
    gain: float
    sigma: float
    background: tuple


def color_name(hue: float) -> str:
    return COLOR_NAMES[int(((hue + 1 / 16) % 1.0) * 8) % 8]


def size_name(size: float) -> str:
    lo, hi = SIZE_RANGE
    return SIZE_NAMES[min(2, int(3 * (size - lo) / (hi - lo)))]


def caption_vocabulary(ctx_len: int = 77) -> Vocabulary:
    words = list(TEMPLATE_WORDS) + list(COLOR_NAMES) + list(SIZE_NAMES) + list(TEXTURES) + list(SHAPES)
    return Vocabulary([PAD, SOS, EOS] + words, ctx_len=ctx_len)


def make_identities(spec: SyntheticSpec) -> list[Identity]:
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    total = spec.n_train_ids + spec.n_test_ids + spec.n_pretrain_ids
    out = []
    for pid in range(total):
        out.append(Identity(
            pid=pid,
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            hue=float(rng.random()),
            size=float(rng.uniform(*SIZE_RANGE)),
            texture=TEXTURES[int(rng.integers(len(TEXTURES)))],
            phase=float(rng.uniform(0, 2 * math.pi)),
            freq=float(rng.uniform(5.0, 9.0)),
        ))
    return out


def make_cameras(spec: SyntheticSpec) -> list[Camera]:
    rng = np.random.default_rng([spec.seed, 0xCA3E])
    cams = []
    for c in range(spec.n_cameras):
        cams.append(Camera(
            camid=c,
            offset=tuple(float(v) for v in rng.uniform(-1, 1, 3) * spec.color_shift),
            gain=float(1 + rng.uniform(-1, 1) * spec.brightness),
            sigma=float(rng.uniform(0.3, 1.0) * spec.blur),
            background=tuple(float(v) for v in 0.4 + rng.uniform(-1, 1, 3) * spec.color_shift),
        ))
    return cams


def _shape_mask(shape, u, v, r):
    if shape == "circle":
        return u * u + v * v <= r * r
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if shape == "ring":
        d = np.sqrt(u * u + v * v)
        return (d <= r) & (d >= 0.55 * r)
    if shape == "cross":
        a = 0.32 * r
        return ((np.abs(u) <= a) & (np.abs(v) <= r)) | ((np.abs(v) <= a) & (np.abs(u) <= r))
    if shape == "triangle":
        # equilateral, apex up, centroid at origin
        k = math.sqrt(3)
        return (v <= 0.5 * r) & (k * u - v <= r) & (-k * u - v <= r)
    raise ConfigError(f"unknown shape {shape!r}")


def _texture(texture, u, v, freq, phase):
    if texture == "plain":
        return np.ones_like(u)
    su, sv = np.sin(freq * u + phase), np.sin(freq * v + phase)
    if texture == "striped":
        return np.where(su > 0, 1.0, 0.5)
    if texture == "dotted":
        return np.where(su * sv > 0.35, 0.45, 1.0)
    if texture == "checkered":
        return np.where(su * sv > 0, 1.0, 0.5)
    raise ConfigError(f"unknown texture {texture!r}")


def render(identity: Identity, camera: Camera, spec: SyntheticSpec, rng: np.random.Generator,
           supersample: int = 2) -> np.ndarray:
    """Render one ``H x W x 3`` uint8 image of ``identity`` seen by ``camera``."""
    H, W = spec.image_hw
    ss = supersample
    ys = (np.arange(H * ss) + 0.5) / (H * ss) * 2 - 1
    xs = (np.arange(W * ss) + 0.5) / (W * ss) * 2 - 1
    x, y = np.meshgrid(xs, ys)
    y = -y
    tx, ty = rng.uniform(-1, 1, 2) * spec.jitter
    theta = math.radians(float(rng.uniform(-1, 1)) * spec.rotation)
    scale = 1 + float(rng.uniform(-1, 1)) * spec.scale_jitter
    c, s = math.cos(theta), math.sin(theta)
    u = (c * (x - tx) + s * (y - ty)) / scale
    v = (-s * (x - tx) + c * (y - ty)) / scale
    mask = _shape_mask(identity.shape, u, v, identity.size)
    shade = _texture(identity.texture, u, v, identity.freq, identity.phase)
    rgb = np.array(colorsys.hsv_to_rgb(identity.hue, 0.85, 0.95))
    canvas = np.empty((H * ss, W * ss, 3))
    canvas[:] = camera.background
    canvas[mask] = rgb * shade[mask, None]
    canvas = canvas.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    canvas = canvas * camera.gain + np.asarray(camera.offset)
    if camera.sigma > 0:
        canvas = gaussian_filter(canvas, sigma=(camera.sigma, camera.sigma, 0), mode="nearest")
    if spec.noise > 0:
        canvas = canvas + rng.normal(0, spec.noise, canvas.shape)
    return np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)


def _image_rng(spec, pid, seq):
    return np.random.default_rng([spec.seed, pid, seq])


def _select_queries(items, n_cams):
    """Greedy: one query per camera while every query keeps a cross-camera gallery match."""
    queries = []
    for cam in range(n_cams):
        cand = next((it for it in items if it[1] == cam and it not in queries), None)
        if cand is None:
            continue
        trial = queries + [cand]
        gallery = [it for it in items if it not in trial]
        if all(any(g[1] != q[1] for g in gallery) for q in trial):
            queries = trial
    return queries


def generate_synthetic(spec: SyntheticSpec, out_dir, ctx_len: int = 77) -> dict:
    """Write the dataset under ``out_dir`` and return its ``dataset.json`` content."""
    root = Path(out_dir)
    if not root.parent.exists():
        raise IOError(f"parent directory of {root} does not exist")
    identities = make_identities(spec)
    cameras = make_cameras(spec)
    n_tr, n_te = spec.n_train_ids, spec.n_test_ids
    try:
        for split in ("train", "query", "gallery") + (("pretrain",) if spec.n_pretrain_ids else ()):
            (root / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create dataset directory {root}: {exc}") from exc

    records, captions = [], []
    for ident in identities:
        pid = ident.pid
        items = [(seq, seq % spec.n_cameras) for seq in range(spec.images_per_id)]
        if pid < n_tr:
            split_of = {it: "train" for it in items}
        elif pid < n_tr + n_te:
            queries = _select_queries(items, spec.n_cameras)
            split_of = {it: ("query" if it in queries else "gallery") for it in items}
        else:
            split_of = {it: "pretrain" for it in items}
        for seq, camid in items:
            img = render(ident, cameras[camid], spec, _image_rng(spec, pid, seq))
            split = split_of[(seq, camid)]
            rel = f"{split}/{pid:04d}_c{camid}_{seq:04d}.png"
            Image.fromarray(img).save(root / rel, format="PNG")
            records.append({"path": rel, "pid": pid, "camid": camid, "split": split})
            if split in ("train", "pretrain"):
                captions.append({"path": rel, "caption": ident.caption(spec.kind)})

    _write_jsonl(root / "manifest.jsonl", records)
    _write_jsonl(root / "captions.jsonl", captions)
    caption_vocabulary(ctx_len).save(root / "vocab.txt")
    meta = {
        "format": FORMAT_TAG,
        "kind": spec.kind,
        "spec": asdict(spec),
        "identities": [asdict(i) for i in identities],
        "cameras": [asdict(c) for c in cameras],
        "counts": {s: sum(r["split"] == s for r in records)
                   for s in ("train", "query", "gallery", "pretrain")},
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
