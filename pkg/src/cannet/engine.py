"""Small functional layer library on top of torch autograd.

Networks are plain sequences of :class:`LayerSpec`; their weights live in a
:class:`ParameterStore` that also carries batch-norm running statistics and
per-parameter optimizer state.  Everything runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractViolation, NonFiniteGradient, SchemaMismatch

DTYPE = torch.float64

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

KINDS = ("dense", "relu", "leaky-relu", "tanh", "sigmoid", "softmax-head", "batch-norm")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    ``in_blocks``/``out_blocks`` make a dense or softmax-head layer
    block-diagonal: input block ``k`` only feeds output block ``k``.  For a
    softmax-head ``out_blocks`` are the head widths and a softmax is applied
    to each block independently.
    """

    kind: str
    fan_in: int
    fan_out: int
    slope: float = LEAKY_SLOPE
    in_blocks: tuple[int, ...] | None = None
    out_blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.kind not in ("dense", "softmax-head") and self.fan_in != self.fan_out:
            raise ContractViolation(f"{self.kind} layer must preserve width")
        if self.in_blocks is not None:
            if self.out_blocks is None or len(self.in_blocks) != len(self.out_blocks):
                raise ContractViolation("in_blocks and out_blocks must pair up")
            if sum(self.in_blocks) != self.fan_in:
                raise ContractViolation("in_blocks must sum to fan_in")
        if self.out_blocks is not None and sum(self.out_blocks) != self.fan_out:
            raise ContractViolation("out_blocks must sum to fan_out")
        if self.kind == "softmax-head" and self.out_blocks is None:
            raise ContractViolation("softmax-head needs out_blocks (head widths)")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "softmax-head", "batch-norm")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "fan_in": self.fan_in, "fan_out": self.fan_out}
        if self.kind == "leaky-relu":
            d["slope"] = self.slope
        if self.in_blocks is not None:
            d["in_blocks"] = list(self.in_blocks)
        if self.out_blocks is not None:
            d["out_blocks"] = list(self.out_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            fan_in=d["fan_in"],
            fan_out=d["fan_out"],
            slope=d.get("slope", LEAKY_SLOPE),
            in_blocks=tuple(d["in_blocks"]) if "in_blocks" in d else None,
            out_blocks=tuple(d["out_blocks"]) if "out_blocks" in d else None,
        )


def dense(fan_in: int, fan_out: int) -> LayerSpec:
    return LayerSpec("dense", fan_in, fan_out)


def block_dense(in_blocks: Sequence[int], out_blocks: Sequence[int]) -> LayerSpec:
    return LayerSpec("dense", sum(in_blocks), sum(out_blocks),
                     in_blocks=tuple(in_blocks), out_blocks=tuple(out_blocks))


def softmax_head(fan_in: int, heads: Sequence[int], in_blocks: Sequence[int] | None = None) -> LayerSpec:
    return LayerSpec("softmax-head", fan_in, sum(heads),
                     in_blocks=tuple(in_blocks) if in_blocks is not None else None,
                     out_blocks=tuple(heads))


def activation(kind: str, width: int, slope: float = LEAKY_SLOPE) -> LayerSpec:
    return LayerSpec(kind, width, width, slope=slope)


def batch_norm(width: int) -> LayerSpec:
    return LayerSpec("batch-norm", width, width)


def block_mask(spec: LayerSpec) -> torch.Tensor | None:
    """0/1 mask of the allowed (input, output) connections, or None if dense."""
    if spec.in_blocks is None:
        return None
    mask = torch.zeros(spec.fan_in, spec.fan_out, dtype=DTYPE)
    r = c = 0
    for bi, bo in zip(spec.in_blocks, spec.out_blocks):
        mask[r:r + bi, c:c + bo] = 1.0
        r += bi
        c += bo
    return mask


@dataclass
class Network:
    """A named stack of layers; parameter names are ``<name>.<index>.<field>``."""

    name: str
    layers: list[LayerSpec]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise SchemaMismatch(f"{self.name}: layer widths {prev.fan_out} -> {nxt.fan_in} do not chain")
        self._masks = {i: block_mask(s) for i, s in enumerate(self.layers) if s.in_blocks is not None}

    @property
    def fan_in(self) -> int:
        return self.layers[0].fan_in

    @property
    def fan_out(self) -> int:
        return self.layers[-1].fan_out

    def init_params(self, store: "ParameterStore", gen: torch.Generator) -> None:
        """Glorot-uniform weights (per block when block-diagonal), zero biases."""
        for i, spec in enumerate(self.layers):
            key = f"{self.name}.{i}"
            if spec.kind in ("dense", "softmax-head"):
                w = torch.zeros(spec.fan_in, spec.fan_out, dtype=DTYPE)
                if spec.in_blocks is None:
                    blocks = [(0, spec.fan_in, 0, spec.fan_out)]
                else:
                    blocks, r, c = [], 0, 0
                    for bi, bo in zip(spec.in_blocks, spec.out_blocks):
                        blocks.append((r, bi, c, bo))
                        r += bi
                        c += bo
                for r, bi, c, bo in blocks:
                    bound = math.sqrt(6.0 / (bi + bo))
                    u = torch.rand(bi, bo, generator=gen, dtype=DTYPE)
                    w[r:r + bi, c:c + bo] = (2.0 * u - 1.0) * bound
                store.add(f"{key}.weight", w)
                store.add(f"{key}.bias", torch.zeros(spec.fan_out, dtype=DTYPE))
            elif spec.kind == "batch-norm":
                store.add(f"{key}.weight", torch.ones(spec.fan_in, dtype=DTYPE))
                store.add(f"{key}.bias", torch.zeros(spec.fan_in, dtype=DTYPE))
                store.add_buffer(f"{key}.running_mean", torch.zeros(spec.fan_in, dtype=DTYPE))
                store.add_buffer(f"{key}.running_var", torch.ones(spec.fan_in, dtype=DTYPE))

    def param_names(self) -> list[str]:
        names = []
        for i, spec in enumerate(self.layers):
            if spec.has_params:
                names += [f"{self.name}.{i}.weight", f"{self.name}.{i}.bias"]
        return names

    def to_dict(self) -> dict:
        return {"name": self.name, "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        return cls(d["name"], [LayerSpec.from_dict(x) for x in d["layers"]])


class ParameterStore:
    """Trainable tensors, non-trainable buffers and optimizer state, keyed by name."""

    def __init__(self):
        self.params: dict[str, torch.Tensor] = {}
        self.buffers: dict[str, torch.Tensor] = {}
        self.state: dict[str, dict] = {}

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self.params or name in self.buffers:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = value.detach().to(DTYPE).clone().requires_grad_(True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: torch.Tensor) -> None:
        if name in self.params or name in self.buffers:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self.buffers[name] = value.detach().to(DTYPE).clone()

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> dict[str, torch.Tensor]:
        """All tensors (params, buffers, optimizer moments) flattened for persistence."""
        out = {f"param/{k}": v.detach() for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        for k, st in self.state.items():
            for field_name, v in st.items():
                if isinstance(v, torch.Tensor):
                    out[f"state/{k}/{field_name}"] = v
        return out

    def steps(self) -> dict[str, int]:
        return {k: st["step"] for k, st in self.state.items()}

    def load_tensors(self, tensors: dict[str, torch.Tensor], steps: dict[str, int]) -> None:
        self.params, self.buffers, self.state = {}, {}, {}
        for key, v in tensors.items():
            section, rest = key.split("/", 1)
            if section == "param":
                self.params[rest] = v.to(DTYPE).clone().requires_grad_(True)
            elif section == "buffer":
                self.buffers[rest] = v.to(DTYPE).clone()
            elif section == "state":
                name, field_name = rest.rsplit("/", 1)
                self.state.setdefault(name, {})[field_name] = v.to(DTYPE).clone()
        for name, step in steps.items():
            self.state.setdefault(name, {})["step"] = int(step)

    def zero_state(self) -> None:
        self.state.clear()


def _check_width(x: torch.Tensor, width: int, where: str) -> None:
    if x.dim() != 2 or x.shape[1] != width:
        raise SchemaMismatch(f"{where}: expected input of shape (m, {width}), got {tuple(x.shape)}")


def forward(network: Network, params: ParameterStore, x: torch.Tensor, mode: str = "train") -> torch.Tensor:
    """Run ``x`` (shape ``(m, fan_in)``) through the network.

    Batch-norm normalises with batch statistics and updates running statistics
    in ``"train"`` mode; ``"eval"`` uses the running statistics only.
    """
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_width(x, network.fan_in, network.name)
    h = x
    for i, spec in enumerate(network.layers):
        key = f"{network.name}.{i}"
        if spec.kind in ("dense", "softmax-head"):
            w = params[f"{key}.weight"]
            mask = network._masks.get(i)
            if mask is not None:
                w = w * mask
            h = h @ w + params[f"{key}.bias"]
            if spec.kind == "softmax-head":
                h = torch.cat([torch.softmax(b, dim=1) for b in torch.split(h, list(spec.out_blocks), dim=1)], dim=1)
        elif spec.kind == "relu":
            h = torch.relu(h)
        elif spec.kind == "leaky-relu":
            h = F.leaky_relu(h, spec.slope)
        elif spec.kind == "tanh":
            h = torch.tanh(h)
        elif spec.kind == "sigmoid":
            h = torch.sigmoid(h)
        elif spec.kind == "batch-norm":
            h = F.batch_norm(
                h,
                params.buffers[f"{key}.running_mean"],
                params.buffers[f"{key}.running_var"],
                params[f"{key}.weight"],
                params[f"{key}.bias"],
                training=(mode == "train"),
                momentum=BN_MOMENTUM,
                eps=BN_EPS,
            )
    return h


def backward(loss: torch.Tensor, params: ParameterStore, names: Iterable[str] | None = None,
             create_graph: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss with respect to the named parameters (all by default).

    Parameters that do not influence the loss get a zero gradient.
    """
    if loss.numel() != 1:
        raise ContractViolation(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params.names() if names is None else names)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True, create_graph=create_graph)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


def safe_norm(g: torch.Tensor) -> torch.Tensor:
    """Row-wise Euclidean norm whose derivative at the origin is taken as 0."""
    sq = (g * g).reshape(g.shape[0], -1).sum(dim=1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], x_hat: torch.Tensor,
                     lam: float) -> torch.Tensor:
    """``lam * mean((||d critic / d x_hat|| - 1)^2)``, differentiable w.r.t. the critic weights."""
    if lam < 0:
        raise ContractViolation("gradient penalty weight must be >= 0")
    x_hat = x_hat.detach().requires_grad_(True)
    out = critic(x_hat)
    if not out.requires_grad:
        g = torch.zeros_like(x_hat)  # constant critic
    else:
        (g,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
        g = torch.zeros_like(x_hat) if g is None else g
    return lam * ((safe_norm(g) - 1.0) ** 2).mean()


def interpolate(x_real: torch.Tensor, x_fake: torch.Tensor, gen: torch.Generator | None = None,
                eps: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sample convex combination ``eps*x_real + (1-eps)*x_fake`` with eps ~ U[0, 1]."""
    if x_real.shape != x_fake.shape:
        raise SchemaMismatch(f"interpolate: shapes {tuple(x_real.shape)} and {tuple(x_fake.shape)} differ")
    m = x_real.shape[0]
    if eps is None:
        eps = torch.rand(m, generator=gen, dtype=DTYPE)
    eps = torch.as_tensor(eps, dtype=DTYPE).reshape((m,) + (1,) * (x_real.dim() - 1))
    return eps * x_real + (1.0 - eps) * x_fake


def _check_finite(grads: dict[str, torch.Tensor]) -> None:
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")


@torch.no_grad()
def adam_step(params: ParameterStore, grads: dict[str, torch.Tensor], lr: float,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected ADAM update, applied in place."""
    _check_finite(grads)
    for name, g in grads.items():
        p = params[name]
        st = params.state.get(name)
        if st is None:
            st = params.state[name] = {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}
        st["step"] += 1
        t = st["step"]
        st["m"].mul_(beta1).add_(g, alpha=1.0 - beta1)
        st["v"].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        m_hat = st["m"] / (1.0 - beta1 ** t)
        v_hat = st["v"] / (1.0 - beta2 ** t)
        p.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))


@torch.no_grad()
def rmsprop_step(params: ParameterStore, grads: dict[str, torch.Tensor], lr: float,
                 decay: float = 0.9, eps: float = 1e-8) -> None:
    """RMSprop update (running mean of squared gradients), applied in place."""
    _check_finite(grads)
    for name, g in grads.items():
        p = params[name]
        st = params.state.get(name)
        if st is None:
            st = params.state[name] = {"step": 0, "v": torch.zeros_like(p)}
        st["step"] += 1
        st["v"].mul_(decay).addcmul_(g, g, value=1.0 - decay)
        p.sub_(lr * g / (torch.sqrt(st["v"]) + eps))


def optimizer_step(kind: str, params: ParameterStore, grads: dict[str, torch.Tensor], lr: float,
                   **kwargs) -> None:
    if kind == "adam":
        adam_step(params, grads, lr, **kwargs)
    elif kind == "rmsprop":
        rmsprop_step(params, grads, lr, **kwargs)
    else:
        raise ContractViolation(f"unknown optimizer {kind!r}")


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g
