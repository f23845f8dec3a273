"""Supervised linear head and the episodic prototype / cosine head."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ProtocolError

COSINE_EPS = 1e-12


class SupervisedHead(nn.Linear):
    """Affine map from the normalized embedding to class logits."""

    def __init__(self, dim: int, n_classes: int = 100):
        super().__init__(dim, n_classes)


def classify_supervised(embedding: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return head(embedding)


def build_prototypes(embeddings: torch.Tensor, positions: torch.Tensor, n_way: int) -> torch.Tensor:
    """Mean embedding per class position. Prototypes are not re-normalized.

    ``embeddings`` is ``M x d`` (all K*T support draws, flattened), ``positions`` is ``M``.
    """
    positions = torch.as_tensor(positions, dtype=torch.long)
    counts = torch.bincount(positions, minlength=n_way)[:n_way]
    if (counts == 0).any():
        missing = int(torch.nonzero(counts == 0)[0])
        raise ProtocolError(f"class position {missing} has no support embeddings")
    sums = embeddings.new_zeros(n_way, embeddings.shape[-1]).index_add(0, positions, embeddings)
    return sums / counts.to(embeddings.dtype).unsqueeze(-1)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine over the last axis with broadcasting."""
    num = (a * b).sum(dim=-1)
    den = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
    return num / (den + COSINE_EPS)


def cosine_matrix(queries: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """``Q x N`` similarities between each query and each prototype."""
    return cosine_similarity(queries.unsqueeze(-2), prototypes.unsqueeze(-3))


def predict_query(query_embedding: torch.Tensor, prototypes: torch.Tensor, tau: float):
    """Nearest prototype by cosine, plus softmax(tau * sims) probabilities.

    Accepts one ``d`` vector or a ``Q x d`` batch. Ties go to the lowest position.
    """
    if prototypes.shape[0] < 2:
        raise ProtocolError("need at least two prototypes")
    sims = cosine_matrix(query_embedding, prototypes)
    if query_embedding.dim() == 1:
        sims = sims.squeeze(0)
    probs = torch.softmax(tau * sims, dim=-1)
    return sims.argmax(dim=-1), probs
