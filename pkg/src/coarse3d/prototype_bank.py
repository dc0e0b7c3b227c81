"""Class prototype memory bank.

Each class owns ``n_p`` unit-norm prototypes. Every step the labelled-pixel
embeddings of a class are spread over that class's prototypes by a few
Sinkhorn iterations (balanced assignment), each pixel is mapped to one
prototype with a Gumbel-perturbed argmax, and every prototype moves a small
momentum step toward the mean of its pixels.

The bank never receives gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

BANK_MAGIC = b"C3DBANK1"
_HEADER = struct.Struct("<8sIIId")


@dataclass
class PrototypeBank:
    protos: torch.Tensor  # (K, n_p, D), unit rows
    sigma: float = 0.999
    initialized: torch.Tensor | None = None  # (K,) bool

    def __post_init__(self):
        if self.protos.dim() != 3:
            raise ValueError("protos must be (K, n_p, D)")
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.sigma}")
        if self.initialized is None:
            self.initialized = torch.zeros(self.protos.shape[0], dtype=torch.bool)

    @classmethod
    def create(cls, n_classes, n_p=20, dim=256, sigma=0.999, seed=0, init="mean", dtype=torch.float32):
        """Random unit prototypes.

        ``init="mean"`` leaves every class uninitialised so its first update
        copies the cluster means; ``init="random"`` marks them initialised and
        momentum updates start from the random vectors.
        """
        if n_p < 1:
            raise ValueError("need at least one prototype per class")
        if init not in ("mean", "random"):
            raise ValueError(f"init must be 'mean' or 'random', got {init!r}")
        gen = torch.Generator().manual_seed(int(seed))
        protos = torch.randn(n_classes, n_p, dim, generator=gen, dtype=torch.float64)
        protos = torch.nn.functional.normalize(protos, dim=-1).to(dtype)
        flags = torch.full((n_classes,), init == "random", dtype=torch.bool)
        return cls(protos=protos, sigma=sigma, initialized=flags)

    @property
    def n_classes(self):
        return self.protos.shape[0]

    @property
    def n_p(self):
        return self.protos.shape[1]

    @property
    def dim(self):
        return self.protos.shape[2]

    def clone(self) -> "PrototypeBank":
        return PrototypeBank(self.protos.clone(), self.sigma, self.initialized.clone())

    def to_bytes(self) -> bytes:
        K, n_p, D = self.protos.shape
        head = _HEADER.pack(BANK_MAGIC, K, n_p, D, float(self.sigma))
        flags = self.initialized.numpy().astype(np.uint8).tobytes()
        payload = self.protos.detach().cpu().numpy().astype("<f4").tobytes()
        return head + flags + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PrototypeBank":
        if len(blob) < _HEADER.size or blob[:8] != BANK_MAGIC:
            raise ValueError("not a prototype bank (bad magic)")
        _, K, n_p, D, sigma = _HEADER.unpack_from(blob)
        off = _HEADER.size
        need = off + K + 4 * K * n_p * D
        if len(blob) != need:
            raise ValueError(f"bank payload is {len(blob)} bytes, expected {need}")
        flags = np.frombuffer(blob, dtype=np.uint8, count=K, offset=off).astype(bool)
        protos = np.frombuffer(blob, dtype="<f4", count=K * n_p * D, offset=off + K)
        return cls(
            protos=torch.from_numpy(protos.reshape(K, n_p, D).astype(np.float32)),
            sigma=sigma,
            initialized=torch.from_numpy(flags.copy()),
        )


def _check_unit(x: torch.Tensor, name: str, tol=1e-3):
    norms = x.norm(dim=-1)
    if norms.numel() and (norms - 1).abs().max() > tol:
        raise ValueError(f"{name} must be l2-normalised (max norm deviation {float((norms - 1).abs().max()):.3g})")


def cost_matrix(embeddings: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    """Cosine distance ``1 - e_i . p_j`` between unit vectors, ``(N_k, N_p)``."""
    _check_unit(embeddings, "embeddings")
    _check_unit(protos, "prototypes")
    return (1.0 - embeddings @ protos.T).clamp(0.0, 2.0)


@torch.no_grad()
def sinkhorn_assign(cost: torch.Tensor, iterations: int = 3, epsilon: float = 0.05) -> torch.Tensor:
    """Entropic transport plan with uniform marginals (1/N_k rows, 1/N_p columns).

    Starts from the normalised kernel ``exp(-cost / epsilon)`` and alternates a
    column scaling with a row scaling ``iterations`` times, so the row marginal
    is exact on return. Computed in float64, returned in the input dtype.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n_k, n_p = cost.shape
    plan = torch.exp(-cost.to(torch.float64) / epsilon)
    total = plan.sum()
    if not total > 0:
        raise ValueError(f"transport kernel underflowed to zero; increase epsilon (got {epsilon})")
    plan = plan / total
    for _ in range(iterations):
        col = plan.sum(dim=0, keepdim=True)
        plan = plan * torch.where(col > 0, (1.0 / n_p) / col, torch.zeros_like(col))
        row = plan.sum(dim=1, keepdim=True)
        plan = plan * torch.where(row > 0, (1.0 / n_k) / row, torch.zeros_like(row))
    return plan.to(cost.dtype)


def map_pixels(plan: torch.Tensor, gumbel_tau: float = 0.5, seed: int = 0) -> torch.Tensor:
    """Prototype index per row: argmax of ``log plan + gumbel_tau * g``.

    ``g`` are seeded standard Gumbel draws; ``gumbel_tau = 0`` is the plain
    argmax (first index on ties).
    """
    if gumbel_tau < 0:
        raise ValueError("gumbel_tau must be >= 0")
    if plan.numel() and (plan.sum(dim=1) <= 0).any():
        bad = torch.nonzero(plan.sum(dim=1) <= 0).flatten().tolist()
        raise ValueError(f"degenerate transport plan: rows {bad[:10]} carry no mass")
    logits = torch.log(plan.to(torch.float64))
    if gumbel_tau > 0:
        gen = torch.Generator().manual_seed(int(seed))
        u = torch.rand(plan.shape, generator=gen, dtype=torch.float64)
        gumbel = -torch.log(-torch.log(u.clamp_min(1e-300)))
        logits = logits + gumbel_tau * gumbel
    return torch.argmax(logits, dim=1)


@torch.no_grad()
def update_prototypes(
    bank: PrototypeBank,
    class_k: int,
    embeddings: torch.Tensor,
    assignment: torch.Tensor,
    weights: torch.Tensor | None = None,
) -> PrototypeBank:
    """Momentum step of class ``class_k``'s prototypes toward their cluster means.

    ``new = sigma * old + (1 - sigma) * mean``, then renormalised. Prototypes
    with no assigned pixel are left bitwise untouched. On the first update of
    an uninitialised class, assigned prototypes are set to their renormalised
    means. With ``weights`` ((N_k, N_p) soft assignment, e.g. the transport
    plan) the means are weighted averages instead and ``assignment`` is ignored.

    Updates ``bank`` in place and returns it.
    """
    if not 0 <= class_k < bank.n_classes:
        raise ValueError(f"class id {class_k} outside [0, {bank.n_classes})")
    if embeddings.shape[0] == 0:
        return bank
    _check_unit(embeddings, "embeddings")
    emb = embeddings.detach().to(torch.float64)
    n_p = bank.n_p
    if weights is None:
        assignment = assignment.to(torch.long)
        if assignment.numel() and (assignment.min() < 0 or assignment.max() >= n_p):
            raise ValueError(f"assignment indices must lie in [0, {n_p})")
        w = torch.zeros(emb.shape[0], n_p, dtype=torch.float64)
        w[torch.arange(emb.shape[0]), assignment] = 1.0
    else:
        w = weights.detach().to(torch.float64)
    mass = w.sum(dim=0)
    touched = mass > 0
    if not touched.any():
        return bank
    means = (w.T @ emb)[touched] / mass[touched, None]
    old = bank.protos[class_k].to(torch.float64)
    if bank.initialized[class_k]:
        new = bank.sigma * old[touched] + (1.0 - bank.sigma) * means
    else:
        new = means
        bank.initialized[class_k] = True
    norms = new.norm(dim=-1, keepdim=True)
    # a cluster whose embeddings cancel out has no direction; keep the old prototype
    new = torch.where(norms > 1e-12, new / norms.clamp_min(1e-12), old[touched])
    bank.protos[class_k, touched] = new.to(bank.protos.dtype)
    return bank
