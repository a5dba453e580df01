"""The trainable bundle: dual encoder, per-identity token bank and ID classifier heads."""
from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from ..config import Config
from ..encoders import (
    DualEncoder,
    FeatureBundle,
    ImageEncoderConfig,
    SIEConfig,
    TextEncoderConfig,
    similarity_matrix,
)
from ..errors import ConfigError
from ..losses import STAGE2_WEIGHTS
from ..text_prompting import PromptTemplate, TokenBank, Vocabulary, assemble_prompt, init_token_bank

# images are fed as (x / 255 - 0.5) / 0.5
PIXEL_MEAN, PIXEL_STD = 0.5, 0.5


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """``n x H x W x 3`` uint8 or [0, 1] float -> normalized ``n x 3 x H x W`` float32."""
    x = torch.from_numpy(np.ascontiguousarray(images))
    x = x.float() / 255.0 if x.dtype == torch.uint8 else x.float()
    return ((x - PIXEL_MEAN) / PIXEL_STD).permute(0, 3, 1, 2).contiguous()


class CLIPReIDModel(nn.Module):
    def __init__(self, encoder: DualEncoder, vocab: Vocabulary, template: PromptTemplate,
                 bank: TokenBank | None, n_ids: int, tau: float):
        super().__init__()
        self.encoder = encoder
        self.vocab = vocab
        self.template = template
        self.bank = bank
        self.tau = tau
        self.n_ids = n_ids
        img_cfg = encoder.image.cfg
        self.heads = nn.ModuleDict({
            "img": nn.Linear(img_cfg.backbone_dim, n_ids, bias=False),
            "post": nn.Linear(img_cfg.proj_dim, n_ids, bias=False),
        })
        for head in self.heads.values():
            nn.init.normal_(head.weight, std=0.001)

    @property
    def image_cfg(self) -> ImageEncoderConfig:
        return self.encoder.image.cfg

    def encode_image(self, images, camera_ids=None) -> FeatureBundle:
        return self.encoder.encode_image(images, camera_ids)

    def prompts(self, ids):
        return assemble_prompt(ids, self.bank, self.template, self.encoder.text.token_embedding, self.vocab)

    def text_features(self, ids) -> torch.Tensor:
        """Projected text features ``g_T(T(t_y))`` for the given identity indices."""
        emb, eos = self.prompts(torch.as_tensor(ids, dtype=torch.long).reshape(-1))
        return self.encoder.encode_text(emb, eos)

    def all_text_features(self) -> torch.Tensor:
        return self.text_features(torch.arange(self.n_ids))

    def sim(self, V, T):
        return similarity_matrix(V, T, self.tau)

    def classify(self, feats: FeatureBundle) -> dict:
        return {"img": self.heads["img"](feats.img), "post": self.heads["post"](feats.post)}

    def parameter_groups(self) -> dict:
        """Named parameters split by role, for freezing and audits."""
        groups = {"image": {}, "text": {}, "bank": {}, "heads": {}}
        for name, p in self.named_parameters():
            if name.startswith("encoder.image."):
                groups["image"][name] = p
            elif name.startswith("encoder.text."):
                groups["text"][name] = p
            elif name.startswith("bank."):
                groups["bank"][name] = p
            else:
                groups["heads"][name] = p
        return groups


def stage2_weights(cfg: Config) -> tuple:
    defaults = STAGE2_WEIGHTS[cfg["model.variant"]]
    keys = ("loss.w_id", "loss.w_tri", "loss.w_i2tce")
    return tuple(d if cfg[k] == "auto" else float(cfg[k]) for k, d in zip(keys, defaults))


def image_config(cfg: Config, image_hw) -> ImageEncoderConfig:
    return ImageEncoderConfig(
        variant=cfg["model.variant"], image_hw=tuple(image_hw), patch=cfg["model.patch"],
        stride=cfg["model.stride"], depth=cfg["model.depth"], width=cfg["model.width"],
        heads=cfg["model.heads"], cnn_channels=cfg.ints("model.cnn_channels"),
        proj_dim=cfg["model.proj_dim"], dropout=cfg["model.dropout"],
    )


def build_model(cfg: Config, vocab: Vocabulary, n_ids: int, n_cameras: int, image_hw,
                kind: str = "person") -> CLIPReIDModel:
    """Fresh model with seeded initialization (``cfg['seed']``)."""
    torch.manual_seed(cfg["seed"])
    if vocab.ctx_len != cfg["text.ctx_len"]:
        raise ConfigError("vocabulary ctx_len differs from text.ctx_len")
    img_cfg = image_config(cfg, image_hw)
    text_cfg = TextEncoderConfig(ctx_len=cfg["text.ctx_len"], vocab_size=vocab.size,
                                 width=cfg["text.width"], depth=cfg["text.depth"],
                                 heads=cfg["text.heads"], proj_dim=cfg["model.proj_dim"])
    sie = SIEConfig(enabled=cfg["sie.enabled"], num_cameras=n_cameras,
                    lambda_sie=cfg["sie.lambda"], apply_to=cfg["sie.apply_to"])
    encoder = DualEncoder(img_cfg, text_cfg, sie if sie.enabled else None, eos_id=vocab.eos_id)
    template = PromptTemplate.for_kind(kind, M=cfg["prompt.M"], ctx_len=cfg["text.ctx_len"],
                                       prefix_text=cfg["prompt.prefix"])
    bank = None
    if template.M > 0:
        bank = init_token_bank(n_ids, template.M, text_cfg.width, seed=cfg["seed"] + 1,
                               std=cfg["prompt.init_std"])
    return CLIPReIDModel(encoder, vocab, template, bank, n_ids, cfg["loss.tau"])


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def parameter_hashes(named) -> dict:
    """sha256 of every named tensor (parameters and, for modules, buffers)."""
    if isinstance(named, nn.Module):
        named = dict(named.state_dict())
    return {name: tensor_digest(t) for name, t in dict(named).items()}
