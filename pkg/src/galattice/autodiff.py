"""Differentiable operators, a small evaluation graph, Adam and the plateau schedule.

Tensors are torch float64 tensors and gradients come from torch's reverse-mode
engine. The operator functions below are the only primitives the networks use,
so checking them with finite differences covers the whole model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5


# --- operators ---------------------------------------------------------------

def dense(x, weight, bias=None):
    """Affine map ``x @ weight + bias``; weight is (fan_in, fan_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} != weight fan_in {weight.shape[0]}")
    out = x @ weight
    return out if bias is None else out + bias


def relu(x):
    return torch.relu(x)


def softmax(x, dim=-1):
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(x, gamma=None, beta=None, eps=LAYER_NORM_EPS):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    out = (x - mu) / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def concat(xs, dim=-1):
    return torch.cat(list(xs), dim=dim)


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def reduce_sum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def mse(pred, target, reduction="mean"):
    err = (pred - target) ** 2
    if reduction == "none":
        return err.flatten(1).mean(dim=1)
    return err.mean()


def cross_entropy(logits, labels, reduction="mean"):
    """Categorical cross-entropy from logits; labels are integer class ids.

    Extra dims between batch and class are averaged per sample.
    """
    logz = torch.logsumexp(logits, dim=-1)
    picked = torch.gather(logits, -1, labels.long().unsqueeze(-1)).squeeze(-1)
    per = logz - picked
    if reduction == "none":
        return per.flatten(1).mean(dim=1) if per.dim() > 1 else per
    return per.mean()


def gaussian_kl(mu, logvar, reduction="mean"):
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over latent dims."""
    per = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=-1)
    if reduction == "none":
        return per
    return per.mean()


OPERATORS: dict[str, Callable] = {
    "dense": dense,
    "relu": relu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "concat": lambda *xs, dim=-1: concat(xs, dim=dim),
    "add": add,
    "mul": mul,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "mse": mse,
    "cross_entropy": cross_entropy,
    "gaussian_kl": gaussian_kl,
}


def glorot_uniform(fan_in: int, fan_out: int, generator: torch.Generator | None = None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    u = torch.rand((fan_in, fan_out), generator=generator, dtype=DTYPE)
    return (2.0 * u - 1.0) * limit


# --- graph ---------------------------------------------------------------

@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class GraphError(ValueError):
    pass


class Graph:
    """Topologically ordered list of operator nodes.

    Nodes are appended in construction order, so an input id always precedes
    its consumer. Leaves are either named inputs bound at :meth:`forward` time
    or parameters owned by the graph.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, torch.Tensor] = {}
        self.values: dict[int, torch.Tensor] = {}

    def _append(self, kind, inputs=(), attrs=None, name=None) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node input {i} does not precede its consumer")
        node = Node(len(self.nodes), kind, tuple(inputs), dict(attrs or {}), name)
        self.nodes.append(node)
        return node.id

    def input(self, name: str) -> int:
        return self._append("input", name=name)

    def param(self, name: str, value: torch.Tensor) -> int:
        self.params[name] = value.detach().clone().to(DTYPE).requires_grad_(True)
        return self._append("param", name=name)

    def op(self, kind: str, *inputs: int, name: str | None = None, **attrs) -> int:
        if kind not in OPERATORS:
            raise GraphError(f"unknown operator {kind!r}")
        return self._append(kind, inputs, attrs, name)

    def forward(self, inputs: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        self.values = {}
        out = {}
        for node in self.nodes:
            if node.kind == "input":
                if node.name not in inputs:
                    raise GraphError(f"unbound input {node.name!r}")
                value = torch.as_tensor(inputs[node.name], dtype=DTYPE)
                if not value.requires_grad:
                    value = value.clone().requires_grad_(True)
            elif node.kind == "param":
                value = self.params[node.name]
            else:
                args = [self.values[i] for i in node.inputs]
                if node.kind == "cross_entropy":
                    args[1] = args[1].detach()
                try:
                    value = OPERATORS[node.kind](*args, **node.attrs)
                except (RuntimeError, ValueError) as exc:
                    label = node.name or f"#{node.id}"
                    raise GraphError(f"shape mismatch at node {label} ({node.kind}): {exc}") from exc
            self.values[node.id] = value
            if node.name is not None:
                out[node.name] = value
        return out

    def backward(self, loss: int, wrt_inputs: bool = False) -> dict[str, torch.Tensor]:
        value = self.values[loss]
        if value.numel() != 1:
            raise GraphError(f"loss node must be scalar, got shape {tuple(value.shape)}")
        names = list(self.params)
        leaves = [self.params[n] for n in names]
        if wrt_inputs:
            for node in self.nodes:
                if node.kind == "input" and self.values[node.id].dtype.is_floating_point:
                    names.append(node.name)
                    leaves.append(self.values[node.id])
        grads = torch.autograd.grad(value, leaves, allow_unused=True)
        return {
            n: (g if g is not None else torch.zeros_like(leaf))
            for n, leaf, g in zip(names, leaves, grads)
        }


# --- optimisation ----------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    grad_sum: dict = field(default_factory=dict)
    n_accumulated: int = 0


def adam_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
              grads: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """One bias-corrected Adam update; returns the new parameter values."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name!r} shape {tuple(p.shape)}")
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out[name] = p - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return out


class Adam:
    """Adam over named torch parameters with gradient accumulation.

    ``accumulate`` adds one batch's gradients; ``step`` applies the average of
    everything accumulated since the last step.
    """

    def __init__(self, params: Mapping[str, torch.nn.Parameter], lr: float = 1e-3):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def accumulate(self, grads: Mapping[str, torch.Tensor | None]) -> None:
        for name in self.params:
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(self.params[name])
            prev = self.state.grad_sum.get(name)
            self.state.grad_sum[name] = g.detach().clone() if prev is None else prev + g.detach()
        self.state.n_accumulated += 1

    def accumulate_from_params(self) -> None:
        self.accumulate({n: p.grad for n, p in self.params.items()})
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        n = self.state.n_accumulated
        if n == 0:
            return False
        grads = {k: g / n for k, g in self.state.grad_sum.items()}
        current = {k: p.detach() for k, p in self.params.items()}
        new = adam_step(self.state, current, grads)
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(new[k])
        self.state.grad_sum = {}
        self.state.n_accumulated = 0
        return True


@dataclass
class PlateauSchedule:
    """Halve the learning rate on plateaus and decide when to stop.

    ``static`` regime: halve on every epoch without improvement, stop after 2
    such consecutive epochs. ``dynamic``: halve after 4 epochs without
    improvement, stop after 10. Both stop at ``max_epochs``.
    """

    lr: float = 1e-3
    regime: str = "static"
    max_epochs: int = 128
    factor: float = 0.5
    min_delta: float = 0.0
    best: float = math.inf
    epochs: int = 0
    since_best: int = 0
    since_reduce: int = 0

    def __post_init__(self):
        if self.regime not in ("static", "dynamic"):
            raise ValueError(f"unknown schedule regime {self.regime!r}")

    @property
    def reduce_patience(self) -> int:
        return 1 if self.regime == "static" else 4

    @property
    def stop_patience(self) -> int:
        return 2 if self.regime == "static" else 10

    def update(self, val_loss: float) -> tuple[float, bool]:
        self.epochs += 1
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.since_best = 0
            self.since_reduce = 0
        else:
            self.since_best += 1
            self.since_reduce += 1
            if self.since_reduce >= self.reduce_patience:
                self.lr *= self.factor
                self.since_reduce = 0
        stop = self.since_best >= self.stop_patience or self.epochs >= self.max_epochs
        return self.lr, stop


def lr_schedule(history: Iterable[float], regime: str = "static", lr: float = 1e-3,
                max_epochs: int = 128) -> tuple[float, bool]:
    """Replay a validation-loss history through :class:`PlateauSchedule`."""
    sched = PlateauSchedule(lr=lr, regime=regime, max_epochs=max_epochs)
    stop = False
    for loss in history:
        lr, stop = sched.update(loss)
        if stop:
            break
    return sched.lr, stop
