"""Geometric algebra attention layers and the shared equivariant core."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import autodiff as ad
from . import ga


@dataclass
class ModelConfig:
    width: int = 32
    hidden: int = 64
    n_blocks: int = 3
    n_types: int = 1
    # attention layers see multivectors rescaled by 1/max(1, |m| / mv_cap)
    mv_cap: float = 4.0

    def to_dict(self) -> dict:
        return asdict(self)


class Dense(nn.Module):
    """Affine map with Glorot-uniform weights and zero bias."""

    def __init__(self, fan_in: int, fan_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(ad.glorot_uniform(fan_in, fan_out, generator))
        self.bias = nn.Parameter(torch.zeros(fan_out, dtype=ad.DTYPE)) if bias else None

    def forward(self, x):
        return ad.dense(x, self.weight, self.bias)


class MLP(nn.Module):
    """One hidden ReLU layer."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, generator: torch.Generator):
        super().__init__()
        self.hidden = Dense(fan_in, hidden, generator)
        self.out = Dense(hidden, fan_out, generator)

    def forward(self, x):
        return self.out(ad.relu(self.hidden(x)))


def cap_multivectors(mv: torch.Tensor, cap: float) -> torch.Tensor:
    """Per-element rescale by 1/max(1, |m|/cap); rotation invariant."""
    norm = ga.mv_norm(mv).unsqueeze(-1)
    return mv / torch.clamp_min(norm / cap, 1.0)


class GAAttention(nn.Module):
    """Pairwise geometric algebra attention over a set of multivectors.

    ``equivariant`` selects the output signal (multivectors vs. invariant
    values); ``reduce`` switches the softmax and sum from over ``j`` to over
    all pairs ``(i, j)``, giving one output per cloud.
    """

    def __init__(self, width: int, hidden: int, generator: torch.Generator,
                 equivariant: bool = False, reduce: bool = False, mv_cap: float = 4.0):
        super().__init__()
        self.equivariant = equivariant
        self.reduce = reduce
        self.mv_cap = mv_cap
        self.width = width
        self.value_net = MLP(12, hidden, width, generator)
        self.node_merge = Dense(2 * width, width, generator, bias=False)
        self.join = Dense(2 * width, width, generator, bias=False)
        self.score_net = MLP(width, hidden, 1, generator)
        if equivariant:
            self.scale_net = MLP(width, hidden, 1, generator)
            self.alpha = nn.Parameter(torch.full((3,), 1.0 / 3.0, dtype=ad.DTYPE))

    def pair_values(self, mv: torch.Tensor, values: torch.Tensor):
        """Products p_ij and joined pair values v_ij for (..., k, 8) / (..., k, w) inputs."""
        k = mv.shape[-2]
        if k < 1:
            raise ValueError("attention needs at least one input element")
        if values.shape[-2] != k:
            raise ValueError(f"{k} multivectors but {values.shape[-2]} values")
        a_i = mv.unsqueeze(-2)
        a_j = mv.unsqueeze(-3)
        products = ga.gp(a_i, a_j)
        inv = ga.mv_invariants(mv)
        shape = products.shape[:-1] + (4,)
        q = ad.concat([
            inv.unsqueeze(-2).expand(shape),
            inv.unsqueeze(-3).expand(shape),
            ga.mv_invariants(products),
        ])
        w = self.width
        a_top, a_bottom = self.node_merge.weight[:w], self.node_merge.weight[w:]
        nodes = ad.add((values @ a_top).unsqueeze(-2), (values @ a_bottom).unsqueeze(-3))
        b_top, b_bottom = self.join.weight[:w], self.join.weight[w:]
        v_ij = ad.add(self.value_net(q) @ b_top, nodes @ b_bottom)
        return products, v_ij

    def weights(self, v_ij: torch.Tensor) -> torch.Tensor:
        logits = self.score_net(v_ij).squeeze(-1)
        if not self.reduce:
            return ad.softmax(logits, dim=-1)
        flat = logits.flatten(-2)
        return ad.softmax(flat, dim=-1).view_as(logits)

    def forward(self, mv: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        mv = cap_multivectors(mv, self.mv_cap)
        products, v_ij = self.pair_values(mv, values)
        w = self.weights(v_ij).unsqueeze(-1)
        if self.equivariant:
            a0, a1, a2 = self.alpha
            geometric = a0 * mv.unsqueeze(-2) + a1 * mv.unsqueeze(-3) + a2 * products
            terms = self.scale_net(v_ij) * geometric
        else:
            terms = v_ij
        weighted = ad.mul(w, terms)
        if self.reduce:
            return weighted.sum(dim=(-3, -2))
        return weighted.sum(dim=-2)


class CoreBlock(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.equivariant = GAAttention(config.width, config.hidden, generator,
                                       equivariant=True, mv_cap=config.mv_cap)
        self.invariant = GAAttention(config.width, config.hidden, generator,
                                     equivariant=False, mv_cap=config.mv_cap)
        self.norm_gain = nn.Parameter(torch.ones(config.width, dtype=ad.DTYPE))
        self.norm_bias = nn.Parameter(torch.zeros(config.width, dtype=ad.DTYPE))

    def forward(self, mv, values):
        mv = ad.add(mv, self.equivariant(mv, values))
        values = ad.layer_norm(ad.add(values, self.invariant(mv, values)), self.norm_gain, self.norm_bias)
        return mv, values


class GalaCore(nn.Module):
    """Type embedding followed by ``n_blocks`` (equivariant, invariant) attention blocks.

    Maps bonds (..., k, 3) and type indices (..., k) to per-bond invariant
    values (..., k, width) and multivectors (..., k, 8).
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        gen = torch.Generator().manual_seed(seed)
        c = self.config
        self.type_embedding = nn.Parameter(ad.glorot_uniform(c.n_types, c.width, gen))
        self.blocks = nn.ModuleList([CoreBlock(c, gen) for _ in range(c.n_blocks)])

    def forward(self, bonds: torch.Tensor, types: torch.Tensor | None = None):
        bonds = torch.as_tensor(bonds, dtype=ad.DTYPE)
        if types is None:
            types = torch.zeros(bonds.shape[:-1], dtype=torch.long)
        types = torch.as_tensor(types, dtype=torch.long)
        if types.numel() and int(types.max()) >= self.config.n_types:
            raise ValueError(f"type index {int(types.max())} out of range for {self.config.n_types} types")
        mv = ga.vectors_to_mv(bonds)
        values = self.type_embedding[types]
        for block in self.blocks:
            mv, values = block(mv, values)
        return values, mv
