"""Conditional Image Generation Network at desk scale.

The SCM spans ``k`` label nodes followed by ``d`` noise nodes.  Labels are
always intervened on (their structural equations are replaced by the given
values), noise nodes follow the learned SCM, and a dense decoder maps the
solved vector to a tanh image.  The critic shares a trunk between a
Wasserstein head and a ``k``-way multi-label logit head.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import engine
from .checkpoint import Checkpoint, pack_store, unpack_store
from .datasets import VariableSchema
from .engine import DTYPE, Network, ParameterStore
from .errors import ContractViolation, NonFiniteLoss, ParseError, SchemaMismatch
from .lgn import LagrangianState, lagrangian_update
from .scm import acyclicity_penalty, scm_transform

log = logging.getLogger(__name__)


@dataclass
class CignConfig:
    epochs: int = 300
    batch_size: int = 64
    n_critic: int = 5
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    gp_lambda: float = 1.0
    class_weight: float = 1.0
    beta: float = 1.0
    lambda0: float = 0.0
    rho0: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e6
    h_tol: float = 1e-8
    decoder_hidden: int = 256
    decoder_batch_norm: bool = True
    disc_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_critic", "lr_g", "lr_d", "beta", "rho0", "rho_growth",
                     "rho_max", "decoder_hidden", "disc_hidden"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be > 0")
        if self.gp_lambda < 0 or self.class_weight < 0:
            raise ContractViolation("gp_lambda and class_weight must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CignConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))


class CignModel:
    def __init__(self, label_schema: VariableSchema, noise_width: int, image_shape: tuple[int, int, int],
                 config: CignConfig, decoder: Network, trunk: Network, adv_head: Network, class_head: Network,
                 gen_params: ParameterStore, disc_params: ParameterStore, lag: LagrangianState):
        self.label_schema = label_schema
        self.noise_width = noise_width
        self.image_shape = tuple(image_shape)
        self.config = config
        self.decoder = decoder
        self.trunk = trunk
        self.adv_head = adv_head
        self.class_head = class_head
        self.gen_params = gen_params
        self.disc_params = disc_params
        self.lag = lag
        n = self.n
        self._offdiag = 1.0 - torch.eye(n, dtype=DTYPE)
        self._alpha = torch.cat([torch.zeros(self.k, dtype=DTYPE), torch.ones(noise_width, dtype=DTYPE)])

    @property
    def k(self) -> int:
        return len(self.label_schema)

    @property
    def n(self) -> int:
        return self.k + self.noise_width

    @property
    def pixels(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def A(self) -> torch.Tensor:
        return self.gen_params["scm.A"] * self._offdiag

    def adjacency(self) -> np.ndarray:
        return self.A.detach().numpy().copy()

    def features(self, images: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(images, dtype=DTYPE).reshape(len(images), -1)
        return engine.forward(self.trunk, self.disc_params, x, "train")

    def critic(self, images: torch.Tensor) -> torch.Tensor:
        return engine.forward(self.adv_head, self.disc_params, self.features(images), "train")

    def class_logits(self, images: torch.Tensor) -> torch.Tensor:
        return engine.forward(self.class_head, self.disc_params, self.features(images), "train")

    def to_checkpoint(self, history: Sequence[dict] | None = None) -> Checkpoint:
        g, gsteps = pack_store("gen", self.gen_params)
        d, dsteps = pack_store("disc", self.disc_params)
        manifest = {
            "kind": "cign",
            "schema": self.label_schema.to_dict(),
            "noise_width": self.noise_width,
            "image_shape": list(self.image_shape),
            "config": self.config.to_dict(),
            "networks": {name: net.to_dict() for name, net in
                         (("decoder", self.decoder), ("trunk", self.trunk), ("adv", self.adv_head),
                          ("cls", self.class_head))},
            "optimizer": {"kind": "rmsprop", "gen_steps": gsteps, "disc_steps": dsteps},
            "lagrangian": {"lambda_bar": self.lag.lambda_bar, "rho": self.lag.rho,
                           "last_h": None if math.isinf(self.lag.last_h) else self.lag.last_h},
        }
        if history is not None:
            manifest["history"] = list(history)
        return Checkpoint(manifest, {**g, **d})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "CignModel":
        if ckpt.kind != "cign":
            raise SchemaMismatch(f"checkpoint holds a {ckpt.kind!r} model, not 'cign'")
        man = ckpt.manifest
        gen_params, disc_params = ParameterStore(), ParameterStore()
        unpack_store("gen", ckpt, gen_params, man["optimizer"]["gen_steps"])
        unpack_store("disc", ckpt, disc_params, man["optimizer"]["disc_steps"])
        lg = man["lagrangian"]
        nets = {k: Network.from_dict(v) for k, v in man["networks"].items()}
        return cls(VariableSchema.from_dict(man["schema"]), man["noise_width"], tuple(man["image_shape"]),
                   CignConfig.from_dict(man["config"]), nets["decoder"], nets["trunk"], nets["adv"],
                   nets["cls"], gen_params, disc_params,
                   LagrangianState(lg["lambda_bar"], lg["rho"],
                                   math.inf if lg["last_h"] is None else lg["last_h"]))


def build_cign(label_schema: VariableSchema, noise_width: int, image_shape=(16, 16, 1),
               config: CignConfig | None = None) -> CignModel:
    cfg = config or CignConfig()
    k = len(label_schema)
    if k == 0:
        raise ContractViolation("a conditional model needs at least one label")
    if any(c != 2 for c in label_schema.cardinalities):
        raise ContractViolation("image labels must be binary")
    if noise_width < 1:
        raise ContractViolation("noise width must be >= 1")
    image_shape = tuple(int(s) for s in image_shape)
    if len(image_shape) != 3 or image_shape[0] > 32 or image_shape[1] > 32:
        raise ContractViolation("image shape must be (height, width, channels) with sides <= 32")
    n, pixels, hd = k + noise_width, int(np.prod(image_shape)), cfg.decoder_hidden
    dec_layers = []
    width = n
    for _ in range(2):
        dec_layers.append(engine.dense(width, hd))
        if cfg.decoder_batch_norm:
            dec_layers.append(engine.batch_norm(hd))
        dec_layers.append(engine.activation("relu", hd))
        width = hd
    dec_layers += [engine.dense(hd, pixels), engine.activation("tanh", pixels)]
    dh = cfg.disc_hidden
    trunk = Network("trunk", [engine.dense(pixels, dh), engine.activation("leaky-relu", dh),
                              engine.dense(dh, dh), engine.activation("leaky-relu", dh)])
    adv = Network("adv", [engine.dense(dh, 1)])
    cls_head = Network("cls", [engine.dense(dh, k)])
    decoder = Network("decoder", dec_layers)
    gen = engine.make_generator(cfg.seed)
    gen_params, disc_params = ParameterStore(), ParameterStore()
    gen_params.add("scm.A", torch.zeros(n, n, dtype=DTYPE))
    decoder.init_params(gen_params, gen)
    for net in (trunk, adv, cls_head):
        net.init_params(disc_params, gen)
    return CignModel(label_schema, noise_width, image_shape, cfg, decoder, trunk, adv, cls_head,
                     gen_params, disc_params, LagrangianState(cfg.lambda0, cfg.rho0))


def pre_decoder(model: CignModel, labels, Z) -> torch.Tensor:
    """The solved SCM vector: label nodes clamped to the labels, noise nodes from the SCM."""
    labels = torch.as_tensor(np.asarray(labels), dtype=DTYPE)
    Z = torch.as_tensor(Z, dtype=DTYPE)
    if labels.dim() != 2 or labels.shape[1] != model.k:
        raise SchemaMismatch(f"labels must have shape (m, {model.k})")
    if Z.dim() != 2 or Z.shape[1] != model.noise_width or Z.shape[0] != labels.shape[0]:
        raise SchemaMismatch(f"noise must have shape ({labels.shape[0]}, {model.noise_width})")
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ContractViolation("labels must be binary")
    m = labels.shape[0]
    full_z = torch.cat([torch.zeros(m, model.k, dtype=DTYPE), Z], dim=1)
    # C varies per row here; the solve broadcasts it like Z
    C = torch.cat([labels, torch.zeros(m, model.noise_width, dtype=DTYPE)], dim=1)
    return scm_transform(model.A, full_z, model._alpha, C)


def cign_generate(model: CignModel, labels, Z, mode: str = "eval") -> torch.Tensor:
    """Images of shape (m, H, W, C) in [-1, 1] for the given labels and noise."""
    h = pre_decoder(model, labels, Z)
    out = engine.forward(model.decoder, model.gen_params, h, mode)
    return out.reshape(len(out), *model.image_shape)


def _bce_per_sample(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels, reduction="none").sum(dim=1)


def classification_loss(model: CignModel, real, real_labels, fake, fake_labels) -> torch.Tensor:
    """Multi-label cross-entropy of the critic's label head on a real and a fake batch.

    Each term is summed over labels and averaged over samples, so a uniform
    classifier scores ``k * ln 2`` per term.
    """
    rl = torch.as_tensor(np.asarray(real_labels), dtype=DTYPE)
    fl = torch.as_tensor(np.asarray(fake_labels), dtype=DTYPE)
    return (_bce_per_sample(model.class_logits(real), rl).mean()
            + _bce_per_sample(model.class_logits(fake), fl).mean())


def discriminator_loss(model: CignModel, real, real_labels, fake, fake_labels, gen=None) -> torch.Tensor:
    real = torch.as_tensor(real, dtype=DTYPE).reshape(len(real), -1)
    fake = fake.detach().reshape(len(fake), -1)
    cfg = model.config
    loss = model.critic(fake).mean() - model.critic(real).mean()
    if cfg.gp_lambda > 0:
        x_hat = engine.interpolate(real, fake, gen=gen)
        loss = loss + engine.gradient_penalty(model.critic, x_hat, cfg.gp_lambda)
    if cfg.class_weight > 0:
        loss = loss + cfg.class_weight * classification_loss(model, real, real_labels, fake, fake_labels)
    if not torch.isfinite(loss):
        raise NonFiniteLoss("critic loss is not finite")
    return loss


def generator_loss(model: CignModel, labels, Z) -> tuple[torch.Tensor, float]:
    cfg = model.config
    fake = cign_generate(model, labels, Z, "train").reshape(len(Z), -1)
    h = acyclicity_penalty(model.A, cfg.beta)
    loss = -model.critic(fake).mean() + model.lag.lambda_bar * h + 0.5 * model.lag.rho * h * h
    if cfg.class_weight > 0:
        fl = torch.as_tensor(np.asarray(labels), dtype=DTYPE)
        loss = loss + cfg.class_weight * _bce_per_sample(model.class_logits(fake), fl).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss("generator loss is not finite")
    return loss, float(h.detach())


def train_cign(images, labels, config: CignConfig | None = None, noise_width: int = 8,
               model: CignModel | None = None, label_names: Sequence[str] | None = None
               ) -> tuple[Checkpoint, list[dict]]:
    """Adversarial training with RMSprop and the acyclicity Lagrangian updated once per epoch.

    Without ``model`` a fresh one is built; ``label_names`` name its label nodes.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if images.ndim != 4:
        raise SchemaMismatch("images must have shape (m, H, W, C)")
    if labels.ndim != 2 or len(labels) != len(images):
        raise SchemaMismatch("labels must have shape (m, k) matching the images")
    if model is None:
        names = list(label_names) if label_names is not None else [f"label{i}" for i in range(labels.shape[1])]
        if len(names) != labels.shape[1]:
            raise SchemaMismatch(f"{len(names)} label names for {labels.shape[1]} label columns")
        schema = VariableSchema.binary(names)
        model = build_cign(schema, noise_width, images.shape[1:], config)
    elif tuple(images.shape[1:]) != model.image_shape or labels.shape[1] != model.k:
        raise SchemaMismatch("data does not match the model's image shape or label count")
    cfg = model.config
    gen = engine.make_generator(cfg.seed + 1)
    x_all = torch.from_numpy(images.reshape(len(images), -1))
    gnames = model.gen_params.names()
    dnames = model.disc_params.names()
    history = []
    m = len(images)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(m, generator=gen)
        d_acc, g_acc, nd, ng = 0.0, 0.0, 0, 0
        for b, start in enumerate(range(0, m - cfg.batch_size + 1, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            real, real_lab = x_all[idx], labels[idx.numpy()]
            Z = torch.randn(len(idx), model.noise_width, generator=gen, dtype=DTYPE)
            with torch.no_grad():
                fake = cign_generate(model, real_lab, Z, "train")
            d_loss = discriminator_loss(model, real, real_lab, fake, real_lab, gen)
            grads = engine.backward(d_loss, model.disc_params, dnames)
            engine.rmsprop_step(model.disc_params, grads, cfg.lr_d, cfg.rms_decay, cfg.rms_eps)
            d_acc, nd = d_acc + float(d_loss.detach()), nd + 1
            if (b + 1) % cfg.n_critic == 0:
                Zg = torch.randn(len(idx), model.noise_width, generator=gen, dtype=DTYPE)
                g_loss, _ = generator_loss(model, real_lab, Zg)
                grads = engine.backward(g_loss, model.gen_params, gnames)
                engine.rmsprop_step(model.gen_params, grads, cfg.lr_g, cfg.rms_decay, cfg.rms_eps)
                g_acc, ng = g_acc + float(g_loss.detach()), ng + 1
        h_val = float(acyclicity_penalty(model.A.detach(), cfg.beta))
        model.lag = lagrangian_update(model.lag, h_val, cfg)
        row = {"epoch": epoch + 1, "d_loss": d_acc / max(nd, 1), "g_loss": g_acc / max(ng, 1), "h": h_val,
               "lambda_bar": model.lag.lambda_bar, "rho": model.lag.rho}
        history.append(row)
        log.debug("cign epoch %d d=%.4f g=%.4f h=%.3g", epoch, row["d_loss"], row["g_loss"], h_val)
    return model.to_checkpoint(history), history


# -- image files -------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    """Map [-1, 1] to 0..255 with rounding; out-of-range values are clipped."""
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def save_png(path, image) -> None:
    """Write one (H, W, C) image with C in {1, 3} as an 8-bit PNG."""
    px = to_uint8(image)
    if px.ndim != 3 or px.shape[2] not in (1, 3):
        raise SchemaMismatch("PNG output needs an (H, W, 1) or (H, W, 3) image")
    img = Image.fromarray(px[:, :, 0], "L") if px.shape[2] == 1 else Image.fromarray(px, "RGB")
    img.save(path, format="PNG", optimize=False)


def save_pgm(path, image) -> None:
    """Binary (P5) grayscale PGM."""
    px = to_uint8(image)
    if px.ndim == 3:
        if px.shape[2] != 1:
            raise SchemaMismatch("PGM holds a single channel")
        px = px[:, :, 0]
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a P2 or P5 PGM as an (H, W, 1) float image in [-1, 1]."""
    data = open(path, "rb").read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos].decode("ascii"))
    magic = tokens[0]
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ParseError(f"{path}: bad PGM header") from exc
    if magic == "P5":
        if maxval > 255:
            raise ParseError(f"{path}: 16-bit PGM is not supported")
        raw = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    elif magic == "P2":
        raw = np.array(data[pos:].split()[:w * h], dtype=np.int64)
    else:
        raise ParseError(f"{path}: not a PGM file")
    if raw.size != w * h:
        raise ParseError(f"{path}: expected {w * h} pixels, found {raw.size}")
    return (raw.reshape(h, w, 1).astype(np.float64) / maxval) * 2.0 - 1.0
