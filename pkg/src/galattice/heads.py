"""Task heads on top of the shared core, and the combined model."""
from __future__ import annotations

import torch
from torch import nn

from . import autodiff as ad
from . import ga
from .model import MLP, GAAttention, GalaCore, ModelConfig, cap_multivectors
from .tasks import TaskKind, orientation_basis

LATENT_DIM = 8
ORIENTATION_JITTER = 1e-8


class DenoisingHead(nn.Module):
    def __init__(self, c: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.attention = GAAttention(c.width, c.hidden, gen, equivariant=True, mv_cap=c.mv_cap)

    def forward(self, values, mv, eta=None):
        out = self.attention(mv, values)
        return {"pred": out[..., 1:4]}


class VectorHead(nn.Module):
    """Permutation-invariant equivariant reduction to one vector (shift, nearest bond)."""

    def __init__(self, c: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.attention = GAAttention(c.width, c.hidden, gen, equivariant=True, reduce=True, mv_cap=c.mv_cap)

    def forward(self, values, mv, eta=None):
        return {"pred": self.attention(mv, values)[..., 1:4]}


class FrameHead(nn.Module):
    def __init__(self, c: ModelConfig, gen: torch.Generator, n_classes: int):
        super().__init__()
        self.attention = GAAttention(c.width, c.hidden, gen, equivariant=False, reduce=True, mv_cap=c.mv_cap)
        self.classifier = MLP(c.width, c.hidden, n_classes, gen)

    def forward(self, values, mv, eta=None):
        summary = self.attention(mv, values)
        return {"pred": self.classifier(summary), "embedding": summary}


class NoisyBondHead(nn.Module):
    def __init__(self, c: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.attention = GAAttention(c.width, c.hidden, gen, equivariant=False, mv_cap=c.mv_cap)
        self.classifier = MLP(c.width, c.hidden, 2, gen)

    def forward(self, values, mv, eta=None):
        return {"pred": self.classifier(self.attention(mv, values))}


class BasisDecoder(nn.Module):
    """Equivariant attention from invariant query tokens onto basis vectors.

    Token i attends over the three basis vectors b_j; the output is
    sum_j w_ij R(v_ij) b_j, which rotates with the basis.
    """

    def __init__(self, c: ModelConfig, gen: torch.Generator):
        super().__init__()
        w = c.width
        self.width = w
        self.slot_embedding = nn.Parameter(ad.glorot_uniform(3, w, gen))
        self.value_net = MLP(4, c.hidden, w, gen)
        self.node_merge = nn.Parameter(ad.glorot_uniform(2 * w, w, gen))
        self.join = nn.Parameter(ad.glorot_uniform(2 * w, w, gen))
        self.score_net = MLP(w, c.hidden, 1, gen)
        self.scale_net = MLP(w, c.hidden, 1, gen)

    def forward(self, tokens: torch.Tensor, basis: torch.Tensor) -> torch.Tensor:
        # tokens (..., n, w); basis (..., 3, 3) rows
        w = self.width
        mv = ga.vectors_to_mv(basis)
        q = ga.mv_invariants(mv)                                 # (..., 3, 4)
        geometric = self.value_net(q).unsqueeze(-3)              # (..., 1, 3, w)
        nodes = ad.add((tokens @ self.node_merge[:w]).unsqueeze(-2),
                       self.slot_embedding @ self.node_merge[w:])  # (..., n, 3, w)
        v_ij = ad.add(geometric @ self.join[:w], nodes @ self.join[w:])
        weights = ad.softmax(self.score_net(v_ij).squeeze(-1), dim=-1)
        coeff = ad.mul(weights, self.scale_net(v_ij).squeeze(-1))  # (..., n, 3)
        return coeff @ basis


class AutoencoderHead(nn.Module):
    def __init__(self, c: ModelConfig, gen: torch.Generator, n_points: int = 20,
                 latent: int = LATENT_DIM):
        super().__init__()
        self.latent = latent
        self.n_points = n_points
        self.mv_cap = c.mv_cap
        self.orient_a = GAAttention(c.width, c.hidden, gen, equivariant=True, reduce=True, mv_cap=c.mv_cap)
        self.orient_b = GAAttention(c.width, c.hidden, gen, equivariant=True, reduce=True, mv_cap=c.mv_cap)
        self.summary = GAAttention(c.width, c.hidden, gen, equivariant=False, reduce=True, mv_cap=c.mv_cap)
        self.encoder = MLP(c.width, c.hidden, 2 * latent, gen)
        self.queries = nn.Parameter(ad.glorot_uniform(n_points, c.width, gen))
        self.condition = MLP(c.width + latent, c.hidden, c.width, gen)
        self.decoder = BasisDecoder(c, gen)
        self.jitter = False

    def forward(self, values, mv, eta=None):
        v1 = self.orient_a(mv, values)[..., 1:4]
        v2 = self.orient_b(mv, values)[..., 1:4]
        if self.jitter:
            v1 = v1 + ORIENTATION_JITTER * v1.new_tensor([1.0, 0.0, 0.0])
            v2 = v2 + ORIENTATION_JITTER * v2.new_tensor([0.0, 1.0, 0.0])
        basis = orientation_basis(v1, v2)
        stats = self.encoder(self.summary(mv, values))
        mu, logvar = stats[..., : self.latent], stats[..., self.latent :]
        if eta is None:
            eta = torch.zeros_like(mu)
        z = mu + torch.exp(0.5 * logvar) * eta
        batch = mu.shape[:-1]
        queries = self.queries.expand(batch + self.queries.shape)
        zs = z.unsqueeze(-2).expand(batch + (self.n_points, self.latent))
        tokens = self.condition(ad.concat([queries, zs]))
        points = self.decoder(tokens, basis)
        return {"pred": points, "mu": mu, "logvar": logvar, "z": z, "basis": basis, "embedding": mu}


class GalaModel(nn.Module):
    """Core plus one task head; the unit of training and checkpointing."""

    VERSION = 1

    def __init__(self, task, config: ModelConfig | None = None, n_classes: int | None = None,
                 n_points: int = 20, seed: int = 0):
        super().__init__()
        self.task = TaskKind.parse(task)
        self.config = config or ModelConfig()
        self.n_points = n_points
        if self.task is TaskKind.FRAME and not n_classes:
            raise ValueError("frame classification needs n_classes")
        self.n_classes = n_classes if self.task is TaskKind.FRAME else None
        self.core = GalaCore(self.config, seed=seed)
        self.head = make_head(self.task, self.config, torch.Generator().manual_seed(seed + 7919),
                              n_classes=self.n_classes, n_points=n_points)

    def forward(self, bonds, types=None, eta=None) -> dict:
        values, mv = self.core(bonds, types)
        return head_forward(self.task, (values, mv), self.head, eta)

    def embed(self, bonds, types=None) -> torch.Tensor:
        """Per-cloud invariant embedding (frame summary, latent mean, or mean core value)."""
        values, mv = self.core(bonds, types)
        if self.task in (TaskKind.FRAME, TaskKind.AUTOENCODER):
            return head_forward(self.task, (values, mv), self.head)["embedding"]
        return values.mean(dim=-2)

    def core_parameters(self) -> dict:
        return {f"core.{n}": p for n, p in self.core.named_parameters()}

    def head_parameters(self) -> dict:
        return {f"head.{n}": p for n, p in self.head.named_parameters()}


HEADS = {
    TaskKind.DENOISING: DenoisingHead,
    TaskKind.SHIFT: VectorHead,
    TaskKind.NEAREST_BOND: VectorHead,
    TaskKind.FRAME: FrameHead,
    TaskKind.NOISY_BOND: NoisyBondHead,
    TaskKind.AUTOENCODER: AutoencoderHead,
}


def make_head(kind, config: ModelConfig, gen: torch.Generator, n_classes=None, n_points=20):
    kind = TaskKind.parse(kind)
    if kind is TaskKind.FRAME:
        head = FrameHead(config, gen, n_classes)
    elif kind is TaskKind.AUTOENCODER:
        head = AutoencoderHead(config, gen, n_points=n_points)
    else:
        head = HEADS[kind](config, gen)
    head.kind = kind
    return head


def head_forward(kind, core_outputs, head: nn.Module, eta=None) -> dict:
    kind = TaskKind.parse(kind)
    if getattr(head, "kind", None) is not kind:
        raise ValueError(f"head built for {getattr(head, 'kind', None)} cannot run task {kind.value}")
    values, mv = core_outputs
    return head(values, mv, eta)


__all__ = ["GalaModel", "head_forward", "make_head", "cap_multivectors"]
