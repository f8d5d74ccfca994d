# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Distances between relation embeddings and the label-similarity metric learner.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from fsrel.errors import ContractViolation, VocabularyError

logger = logging.getLogger(__name__)


###############################################################################
# Distances
###############################################################################


def pair_distance(f_q: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance over the last axis."""
    if f_q.shape[-1] != f_s.shape[-1]:
        raise ContractViolation(f"embedding dims differ: {f_q.shape[-1]} vs {f_s.shape[-1]}")
    return ((f_q - f_s) ** 2).sum(-1)


def pairwise_distances(queries: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
    """[Q, d] x [S, d] -> [Q, S] squared distances."""
    return pair_distance(queries.unsqueeze(1), supports.unsqueeze(0))


def average_metric(distances: torch.Tensor) -> torch.Tensor:
    if distances.shape[-1] == 0:
        raise ContractViolation("cannot average over an empty support set")
    return distances.mean(-1)


@dataclass(frozen=True)
class SupportWeights:
    e_s: torch.Tensor
    e_o: torch.Tensor
    e_hat: torch.Tensor
    e_tilde: torch.Tensor

    def __len__(self) -> int:
        return self.e_tilde.shape[-1]


def weights_from_similarities(e_s: torch.Tensor, e_o: torch.Tensor) -> SupportWeights:
    e_hat = e_s * e_o
    return SupportWeights(e_s, e_o, e_hat, torch.softmax(e_hat, dim=-1))


def reweighted_metric(distances: torch.Tensor, weights: Union[SupportWeights, torch.Tensor]) -> torch.Tensor:
    w = weights.e_tilde if isinstance(weights, SupportWeights) else weights
    if w.shape[-1] != distances.shape[-1]:
        raise ContractViolation(f"{w.shape[-1]} weights for {distances.shape[-1]} distances")
    return (w * distances).sum(-1)


###############################################################################
# Label embeddings
###############################################################################


class LabelEmbedder(ABC):
    """Maps category names to label embeddings; similarities are cosine."""

    categories: List[str]

    @abstractmethod
    def matrix(self) -> torch.Tensor:
        """Unit-normalized embeddings, one row per entry of ``categories``."""

    def index(self, names: Sequence[str]) -> torch.Tensor:
        lookup = {c: i for i, c in enumerate(self.categories)}
        try:
            return torch.tensor([lookup[n] for n in names], dtype=torch.long)
        except KeyError as exc:
            raise VocabularyError(f"unknown category {exc.args[0]!r}") from None

    def similarity_matrix(self) -> torch.Tensor:
        m = self.matrix()
        return m @ m.T

    def similarity(self, a: Sequence[str], b: Sequence[str]) -> torch.Tensor:
        """[len(a), len(b)] cosine similarities."""
        m = self.matrix()
        return m[self.index(a)] @ m[self.index(b)].T


class StaticLabelEmbedder(LabelEmbedder):
    def __init__(self, vectors: Mapping[str, torch.Tensor]):
        self.categories = list(vectors)
        self._matrix = F.normalize(torch.stack([torch.as_tensor(v) for v in vectors.values()]), dim=-1)

    def matrix(self) -> torch.Tensor:
        return self._matrix


class PromptLabelEmbedder(LabelEmbedder):
    """
    Text-encoder embeddings of "[fixed prompt tokens] W[cls]".

    Computed without gradient and cached until ``invalidate`` is called.
    """

    def __init__(self, categories: Sequence[str], table, text_encoder, label_prompt: torch.Tensor):
        self.categories = list(categories)
        self._table = table
        self._text = text_encoder
        self._prompt = label_prompt
        self._cache: Optional[torch.Tensor] = None
        self._similarity: Optional[torch.Tensor] = None

    def invalidate(self) -> None:
        self._cache = None
        self._similarity = None

    def matrix(self) -> torch.Tensor:
        if self._cache is None:
            with torch.no_grad():
                words = self._table.category_weight.unsqueeze(1)
                prompt = self._prompt.unsqueeze(0).expand(words.shape[0], -1, -1)
                tokens = torch.cat([prompt, words], dim=1)
                self._cache = F.normalize(self._text(tokens), dim=-1)
            logger.debug(f"Refreshed label embeddings for {len(self.categories)} categories")
        return self._cache

    def similarity_matrix(self) -> torch.Tensor:
        if self._similarity is None:
            m = self.matrix()
            self._similarity = m @ m.T
        return self._similarity


def label_similarity(c1: str, c2: str, embedder: LabelEmbedder) -> torch.Tensor:
    return embedder.similarity([c1], [c2])[0, 0]


def support_weights(
    query_labels: Tuple[str, str],
    support_labels: Sequence[Tuple[str, str]],
    embedder: LabelEmbedder,
) -> SupportWeights:
    if not support_labels:
        raise ContractViolation("support set is empty")
    e_s = embedder.similarity([query_labels[0]], [s for s, _ in support_labels])[0]
    e_o = embedder.similarity([query_labels[1]], [o for _, o in support_labels])[0]
    return weights_from_similarities(e_s, e_o)


def support_weights_batch(
    similarity: torch.Tensor,
    query_subjects: torch.Tensor,
    query_objects: torch.Tensor,
    support_subjects: torch.Tensor,
    support_objects: torch.Tensor,
) -> SupportWeights:
    """Weights for Q queries against K supports from a category similarity matrix; [Q, K]."""
    e_s = similarity[query_subjects][:, support_subjects]
    e_o = similarity[query_objects][:, support_objects]
    return weights_from_similarities(e_s, e_o)


def uniform_weights(n_queries: int, n_supports: int, dtype: torch.dtype = torch.float32) -> SupportWeights:
    ones = torch.ones(n_queries, n_supports, dtype=dtype)
    return SupportWeights(ones, ones, ones, ones / n_supports)


def weight_records(weights: SupportWeights) -> List[Dict[str, float]]:
    """Per-support rows for one query, as written by the weights dump."""
    return [
        {"support": k, "e_s": float(weights.e_s[k]), "e_o": float(weights.e_o[k]), "w": float(weights.e_tilde[k])}
        for k in range(len(weights))
    ]
