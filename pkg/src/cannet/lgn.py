"""Label Generation Network.

The generator pushes Gaussian noise through the masked SCM solve and then a
nonlinear stack with one softmax head per categorical variable; the critic
is a leaky-ReLU MLP on the concatenated one-hot encoding.  Training is
WGAN-GP for the critic and WGAN plus an augmented-Lagrangian acyclicity term
for the generator.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import engine
from .checkpoint import Checkpoint, pack_store, unpack_store
from .datasets import CategoricalDataset, VariableSchema, one_hot_encode
from .engine import DTYPE, Network, ParameterStore
from .errors import BudgetExhausted, ContractViolation, NonFiniteLoss, SchemaMismatch
from .scm import acyclicity_penalty, compile_intervention, scm_transform

log = logging.getLogger(__name__)

HEAD_MODES = ("structured", "shared")


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 64
    n_critic: int = 5
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    gp_lambda: float = 1.0
    beta: float = 1.0
    lambda0: float = 0.0
    rho0: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e6
    # below this h counts as satisfied and rho stops growing
    h_tol: float = 1e-8
    # optional sparsity weight on |A|; zero leaves the objective unpenalised
    l1: float = 0.0
    seed: int = 0
    head_mode: str = "structured"
    hidden: int = 100
    head_hidden: int = 16
    gen_depth: int = 4
    # None: batch-norm in the shared trunk ("shared" mode) only
    gen_batch_norm: bool | None = None
    disc_depth: int = 3
    noise: str = "normal"
    decode: str = "argmax"
    value_encoding: str = "index"

    def __post_init__(self):
        positive = ("epochs", "batch_size", "n_critic", "lr_g", "lr_d", "beta", "rho0", "rho_growth",
                    "rho_max", "hidden", "head_hidden", "gen_depth", "disc_depth")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be > 0")
        if self.gp_lambda < 0 or self.l1 < 0:
            raise ContractViolation("gp_lambda and l1 must be >= 0")
        if self.head_mode not in HEAD_MODES:
            raise ContractViolation(f"head_mode must be one of {HEAD_MODES}")
        if self.noise not in ("normal", "uniform"):
            raise ContractViolation("noise must be 'normal' or 'uniform'")
        if self.decode not in ("argmax", "sample"):
            raise ContractViolation("decode must be 'argmax' or 'sample'")
        if self.gen_batch_norm is None:
            self.gen_batch_norm = self.head_mode == "shared"
        if self.value_encoding not in ("index", "latent-mean"):
            raise ContractViolation("value_encoding must be 'index' or 'latent-mean'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class LagrangianState:
    lambda_bar: float = 0.0
    rho: float = 1.0
    last_h: float = math.inf

    def __post_init__(self):
        if not self.rho > 0:
            raise ContractViolation("rho must be > 0")


def lagrangian_update(lag: LagrangianState, h: float, config: TrainConfig | None = None) -> LagrangianState:
    """Multiplier ascent ``lambda += rho*h``; rho grows when h has not shrunk to a quarter."""
    if h < -1e-9:
        raise ContractViolation(f"acyclicity value must be >= 0, got {h}")
    h = max(float(h), 0.0)
    cfg = config or TrainConfig()
    rho = lag.rho
    if h > cfg.h_tol and h > 0.25 * lag.last_h:
        rho = min(rho * cfg.rho_growth, cfg.rho_max)
    return LagrangianState(lag.lambda_bar + lag.rho * h, rho, h)


class LgnModel:
    """Generator, critic and the weighted adjacency over the label variables."""

    def __init__(self, schema: VariableSchema, config: TrainConfig, gen_net: Network, disc_net: Network,
                 gen_params: ParameterStore, disc_params: ParameterStore, lag: LagrangianState):
        self.schema = schema
        self.config = config
        self.gen_net = gen_net
        self.disc_net = disc_net
        self.gen_params = gen_params
        self.disc_params = disc_params
        self.lag = lag
        n = len(schema)
        self._offdiag = 1.0 - torch.eye(n, dtype=DTYPE)
        self._latent_means: list[np.ndarray] | None = None

    @property
    def n(self) -> int:
        return len(self.schema)

    @property
    def A(self) -> torch.Tensor:
        return self.gen_params["scm.A"] * self._offdiag

    def adjacency(self) -> np.ndarray:
        return self.A.detach().numpy().copy()

    def critic(self, x: torch.Tensor) -> torch.Tensor:
        return engine.forward(self.disc_net, self.disc_params, x, "train")

    # ------------------------------------------------------------------ persistence

    def to_checkpoint(self, history: Sequence[dict] | None = None) -> Checkpoint:
        g, gsteps = pack_store("gen", self.gen_params)
        d, dsteps = pack_store("disc", self.disc_params)
        manifest = {
            "kind": "lgn",
            "schema": self.schema.to_dict(),
            "config": self.config.to_dict(),
            "networks": {"gen": self.gen_net.to_dict(), "disc": self.disc_net.to_dict()},
            "optimizer": {"kind": "adam", "gen_steps": gsteps, "disc_steps": dsteps},
            "lagrangian": {"lambda_bar": self.lag.lambda_bar, "rho": self.lag.rho,
                           "last_h": None if math.isinf(self.lag.last_h) else self.lag.last_h},
        }
        if history is not None:
            manifest["history"] = list(history)
        return Checkpoint(manifest, {**g, **d})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LgnModel":
        if ckpt.kind != "lgn":
            raise SchemaMismatch(f"checkpoint holds a {ckpt.kind!r} model, not 'lgn'")
        man = ckpt.manifest
        gen_params, disc_params = ParameterStore(), ParameterStore()
        unpack_store("gen", ckpt, gen_params, man["optimizer"]["gen_steps"])
        unpack_store("disc", ckpt, disc_params, man["optimizer"]["disc_steps"])
        lg = man["lagrangian"]
        lag = LagrangianState(lg["lambda_bar"], lg["rho"], math.inf if lg["last_h"] is None else lg["last_h"])
        return cls(
            VariableSchema.from_dict(man["schema"]),
            TrainConfig.from_dict(man["config"]),
            Network.from_dict(man["networks"]["gen"]),
            Network.from_dict(man["networks"]["disc"]),
            gen_params,
            disc_params,
            lag,
        )


def _generator_layers(schema: VariableSchema, cfg: TrainConfig) -> list:
    n, cards = len(schema), schema.cardinalities
    layers = []
    if cfg.head_mode == "shared":
        w = cfg.hidden
        layers += [engine.dense(n, w), engine.activation("relu", w)]
        for _ in range(cfg.gen_depth - 1):
            layers += [engine.dense(w, w)] + ([engine.batch_norm(w)] if cfg.gen_batch_norm else [])
            layers.append(engine.activation("relu", w))
        layers.append(engine.softmax_head(w, cards))
    else:
        hh = cfg.head_hidden
        layers += [engine.block_dense((1,) * n, (hh,) * n), engine.activation("relu", n * hh)]
        for _ in range(cfg.gen_depth - 1):
            layers.append(engine.block_dense((hh,) * n, (hh,) * n))
            if cfg.gen_batch_norm:
                layers.append(engine.batch_norm(n * hh))
            layers.append(engine.activation("relu", n * hh))
        layers.append(engine.softmax_head(n * hh, cards, in_blocks=(hh,) * n))
    return layers


def _critic_layers(width: int, hidden: int, depth: int) -> list:
    layers = [engine.dense(width, hidden), engine.activation("leaky-relu", hidden)]
    for _ in range(depth - 1):
        layers += [engine.dense(hidden, hidden), engine.activation("leaky-relu", hidden)]
    layers.append(engine.dense(hidden, 1))
    return layers


def build_lgn(schema: VariableSchema, config: TrainConfig | None = None) -> LgnModel:
    """Fresh model; weights drawn from ``config.seed``, ``A`` starts at zero."""
    cfg = config or TrainConfig()
    if len(schema) == 0:
        raise ContractViolation("schema must not be empty")
    gen = engine.make_generator(cfg.seed)
    gen_net = Network("gen", _generator_layers(schema, cfg))
    disc_net = Network("disc", _critic_layers(schema.width, cfg.hidden, cfg.disc_depth))
    gen_params, disc_params = ParameterStore(), ParameterStore()
    gen_params.add("scm.A", torch.zeros(len(schema), len(schema), dtype=DTYPE))
    gen_net.init_params(gen_params, gen)
    disc_net.init_params(disc_params, gen)
    return LgnModel(schema, cfg, gen_net, disc_net, gen_params, disc_params,
                    LagrangianState(cfg.lambda0, cfg.rho0))


# ---------------------------------------------------------------------- forward / losses


def draw_noise(m: int, n: int, gen: torch.Generator, kind: str = "normal") -> torch.Tensor:
    if kind == "uniform":
        return 2.0 * torch.rand(m, n, generator=gen, dtype=DTYPE) - 1.0
    return torch.randn(m, n, generator=gen, dtype=DTYPE)


def generator_forward(model: LgnModel, Z: torch.Tensor, alpha=None, C=None, mode: str = "train") -> torch.Tensor:
    """Soft labels: per-head probabilities concatenated in schema order."""
    Z = torch.as_tensor(Z, dtype=DTYPE)
    if Z.dim() != 2 or Z.shape[1] != model.n:
        raise SchemaMismatch(f"noise must have shape (m, {model.n}), got {tuple(Z.shape)}")
    x_pre = scm_transform(model.A, Z, alpha, C)
    return engine.forward(model.gen_net, model.gen_params, x_pre, mode)


def latent_forward(model: LgnModel, Z: torch.Tensor, alpha=None, C=None) -> torch.Tensor:
    """The pre-generator vector (SCM solve output) for noise ``Z``."""
    return scm_transform(model.A, torch.as_tensor(Z, dtype=DTYPE), alpha, C)


def discriminator_loss(model: LgnModel, real: torch.Tensor, fake: torch.Tensor, lam: float | None = None,
                       gen: torch.Generator | None = None) -> torch.Tensor:
    lam = model.config.gp_lambda if lam is None else lam
    real = torch.as_tensor(real, dtype=DTYPE)
    fake = torch.as_tensor(fake, dtype=DTYPE).detach()
    critic = model.critic
    x_hat = engine.interpolate(real, fake, gen)
    loss = critic(fake).mean() - critic(real).mean() + engine.gradient_penalty(critic, x_hat, lam)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"critic loss is {loss.item()}")
    return loss


def generator_loss(model: LgnModel, Z: torch.Tensor, lag: LagrangianState | None = None,
                   beta: float | None = None, mode: str = "train") -> torch.Tensor:
    """``-E[D(G(Z))] + lambda_bar*h(A) + rho/2*h(A)^2`` plus ``l1*|A|_1`` when configured."""
    lag = model.lag if lag is None else lag
    beta = model.config.beta if beta is None else beta
    fake = generator_forward(model, Z, mode=mode)
    h = acyclicity_penalty(model.A, beta)
    loss = -model.critic(fake).mean() + lag.lambda_bar * h + 0.5 * lag.rho * h * h
    if model.config.l1 > 0:
        loss = loss + model.config.l1 * model.A.abs().sum()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"generator loss is {loss.item()} (h={h.item()})")
    return loss


# ---------------------------------------------------------------------- training


def train_lgn(dataset: CategoricalDataset, config: TrainConfig | None = None,
              model: LgnModel | None = None) -> tuple[Checkpoint, list[dict]]:
    """Alternate ``n_critic`` critic updates with one generator update; the
    multiplier is updated once per epoch.  Returns the final checkpoint and the
    per-epoch history (losses, h, lambda_bar, rho)."""
    cfg = config or TrainConfig()
    model = model or build_lgn(dataset.schema, cfg)
    if dataset.schema != model.schema:
        raise SchemaMismatch("dataset schema does not match the model")
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    gen = engine.make_generator(cfg.seed + 1)
    X = torch.from_numpy(one_hot_encode(dataset))
    m = X.shape[0]
    bs = min(cfg.batch_size, m)
    n_batches = max(1, m // bs)
    gen_names = model.gen_params.names()
    disc_names = model.disc_params.names()
    adam = dict(beta1=cfg.beta1, beta2=cfg.beta2)
    history = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(m, generator=gen)
        d_losses, g_losses = [], []
        for it in range(n_batches):
            real = X[perm[it * bs:(it + 1) * bs]]
            with torch.no_grad():
                fake = generator_forward(model, draw_noise(bs, model.n, gen, cfg.noise), mode="train")
            ld = discriminator_loss(model, real, fake, cfg.gp_lambda, gen)
            engine.adam_step(model.disc_params, engine.backward(ld, model.disc_params, disc_names),
                             cfg.lr_d, **adam)
            d_losses.append(ld.item())
            if (it + 1) % cfg.n_critic == 0 or n_batches < cfg.n_critic and it == n_batches - 1:
                lg = generator_loss(model, draw_noise(bs, model.n, gen, cfg.noise), model.lag, cfg.beta)
                engine.adam_step(model.gen_params, engine.backward(lg, model.gen_params, gen_names),
                                 cfg.lr_g, **adam)
                g_losses.append(lg.item())
        with torch.no_grad():
            h = acyclicity_penalty(model.A, cfg.beta).item()
        model.lag = lagrangian_update(model.lag, h, cfg)
        row = {"epoch": epoch + 1, "d_loss": float(np.mean(d_losses)),
               "g_loss": float(np.mean(g_losses)) if g_losses else float("nan"),
               "h": h, "lambda_bar": model.lag.lambda_bar, "rho": model.lag.rho}
        history.append(row)
        if (epoch + 1) % 25 == 0:
            log.info("epoch %d d=%.4f g=%.4f h=%.3g lambda=%.3g rho=%.3g", epoch + 1, row["d_loss"],
                     row["g_loss"], h, model.lag.lambda_bar, model.lag.rho)
    return model.to_checkpoint(history), history


# ---------------------------------------------------------------------- sampling


def _as_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return engine.make_generator(0 if rng is None else int(rng))


def decode_heads(model: LgnModel, probs: torch.Tensor, gen: torch.Generator | None = None) -> np.ndarray:
    probs = probs.detach()
    out = []
    for block in torch.split(probs, list(model.schema.cardinalities), dim=1):
        if model.config.decode == "sample" and gen is not None and len(block):
            out.append(torch.multinomial(block, 1, generator=gen).squeeze(1))
        else:
            out.append(block.argmax(dim=1))
    return torch.stack(out, dim=1).numpy().astype(np.int64) if out else np.zeros((len(probs), 0), np.int64)


def _resolve(model: LgnModel, key) -> int:
    if isinstance(key, str):
        return model.schema.index(key)
    k = int(key)
    if not 0 <= k < model.n:
        raise ContractViolation(f"variable index {k} out of range")
    return k


@torch.no_grad()
def latent_category_means(model: LgnModel, m: int = 4096) -> list[np.ndarray]:
    """Mean pre-generator coordinate of each variable per decoded category
    (observational draws from a fixed stream); categories never decoded fall
    back to the normalised index."""
    if model._latent_means is None:
        gen = engine.make_generator(model.config.seed + 7)
        Z = draw_noise(m, model.n, gen, model.config.noise)
        x_pre = latent_forward(model, Z)
        labels = decode_heads(model, engine.forward(model.gen_net, model.gen_params, x_pre, "eval"))
        means = []
        for j, k in enumerate(model.schema.cardinalities):
            col = x_pre[:, j].numpy()
            row = np.array([col[labels[:, j] == c].mean() if (labels[:, j] == c).any() else c / (k - 1)
                            for c in range(k)])
            means.append(row)
        model._latent_means = means
    return model._latent_means


def intervention_values(model: LgnModel, assignments: Mapping) -> dict[int, float]:
    """Map ``variable -> category`` to pre-generator interventional values."""
    out = {}
    for key, cat in assignments.items():
        j = _resolve(model, key)
        k = model.schema.cardinalities[j]
        cat = int(cat)
        if not 0 <= cat < k:
            raise ContractViolation(f"category {cat} invalid for {model.schema.names[j]!r} (0..{k - 1})")
        if model.config.value_encoding == "latent-mean":
            out[j] = float(latent_category_means(model)[j][cat])
        else:
            out[j] = cat / (k - 1)
    return out


@torch.no_grad()
def sample_interventional(model: LgnModel, spec: Mapping, m: int, rng=None) -> np.ndarray:
    """Hard labels under ``do(spec)``; intervened columns are clamped to their categories."""
    if m < 0:
        raise ContractViolation("m must be >= 0")
    values = intervention_values(model, spec)
    if m == 0:
        return np.zeros((0, model.n), dtype=np.int64)
    gen = _as_generator(rng)
    alpha, C = compile_intervention(values, model.n)
    Z = draw_noise(m, model.n, gen, model.config.noise)
    labels = decode_heads(model, generator_forward(model, Z, alpha, C, mode="eval"), gen)
    for key, cat in spec.items():
        labels[:, _resolve(model, key)] = int(cat)
    return labels


def sample_observational(model: LgnModel, m: int, rng=None) -> np.ndarray:
    return sample_interventional(model, {}, m, rng)


def sample_conditional(model: LgnModel, conditions: Mapping, m: int, budget: int | None = None,
                       rng=None, chunk: int = 4096, return_rate: bool = False):
    """Rejection sampling: keep observational rows that satisfy every condition.

    Raises :class:`BudgetExhausted` (carrying the partial batch) when fewer than
    ``m`` rows are accepted within ``budget`` draws.  With ``return_rate`` the
    result is ``(rows, accepted / drawn)``.
    """
    budget = 100 * max(m, 1) if budget is None else budget
    if budget < m:
        raise ContractViolation("budget must be >= m")
    gen = _as_generator(rng)
    cond = {_resolve(model, k): int(v) for k, v in conditions.items()}
    for j, v in cond.items():
        if not 0 <= v < model.schema.cardinalities[j]:
            raise ContractViolation(f"category {v} invalid for {model.schema.names[j]!r}")
    if not cond:
        rows = sample_observational(model, m, gen)
        return (rows, 1.0) if return_rate else rows
    kept, drawn, accepted = [], 0, 0
    while accepted < m and drawn < budget:
        size = min(chunk, budget - drawn)
        rows = sample_observational(model, size, gen)
        drawn += size
        ok = np.all([rows[:, j] == v for j, v in cond.items()], axis=0)
        kept.append(rows[ok])
        accepted += int(ok.sum())
    out = np.concatenate(kept, axis=0) if kept else np.zeros((0, model.n), np.int64)
    if accepted < m:
        raise BudgetExhausted(out, accepted / max(drawn, 1), m)
    return (out[:m], accepted / drawn) if return_rate else out[:m]


def acceptance_rate(model: LgnModel, conditions: Mapping, draws: int = 10000, rng=None) -> float:
    rows = sample_observational(model, draws, _as_generator(rng))
    cond = {_resolve(model, k): int(v) for k, v in conditions.items()}
    ok = np.all([rows[:, j] == v for j, v in cond.items()], axis=0) if cond else np.ones(len(rows), bool)
    return float(ok.mean())
