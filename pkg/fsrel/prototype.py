# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Decomposed prototypes.

A predicate's support set is turned into subject-side and object-side prototype
banks through prompted text embeddings. A sample attends over the bank of the
candidate predicate with its own projected visual features, and the recombined
subject and object prototypes form the prototype feature fed to the aggregator.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import nn

from fsrel.encoders import EmbeddingTable, Provenance, TextEncoder, TokenSequence, TwoLayerMLP
from fsrel.errors import ContractViolation, IntegrityError

logger = logging.getLogger(__name__)

# (subject category, predicate, object category)
LabeledTriplet = Tuple[str, str, str]


class PromptTokens(nn.Module):
    """Context tokens T^s and T^o, each L x d_txt."""

    def __init__(self, length: int, dim: int, init_std: float = 0.02, trainable: bool = True):
        super().__init__()
        if length < 1:
            raise ContractViolation("prompt length must be at least 1")
        self.length = length
        self.subject = nn.Parameter(torch.randn(length, dim) * init_std, requires_grad=trainable)
        self.object = nn.Parameter(torch.randn(length, dim) * init_std, requires_grad=trainable)


@dataclass(frozen=True)
class PrototypeBank:
    predicate: str
    h_s: torch.Tensor  # [K, d_txt]
    h_o: torch.Tensor  # [K, d_txt]
    u_s: torch.Tensor  # [K, d_proto]
    u_o: torch.Tensor  # [K, d_proto]

    def __len__(self) -> int:
        return self.u_s.shape[0]

    def permuted(self, order: Sequence[int]) -> "PrototypeBank":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        return PrototypeBank(self.predicate, self.h_s[idx], self.h_o[idx], self.u_s[idx], self.u_o[idx])


@dataclass(frozen=True)
class PrototypeAttention:
    scores: torch.Tensor  # [..., K]
    weights: torch.Tensor  # [..., K]
    recombined: torch.Tensor  # [..., d_proto]


@dataclass(frozen=True)
class RelationEmbedding:
    vector: torch.Tensor  # [..., d_final]
    condition: Optional[str]
    prototype_feature: Optional[torch.Tensor] = None


###############################################################################
# Prompt composition and banks
###############################################################################


def compose_prompt_batch(
    subject_ids: torch.Tensor,
    predicate_ids: torch.Tensor,
    object_ids: torch.Tensor,
    table: EmbeddingTable,
    prompts: PromptTokens,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batched prompts: [W[s], W[r], T^s] and [T^o, W[r], W[o]], each [K, L+2, d]."""
    k = subject_ids.shape[0]
    w_s = table.category_weight[subject_ids].unsqueeze(1)
    w_r = table.predicate_weight[predicate_ids].unsqueeze(1)
    w_o = table.category_weight[object_ids].unsqueeze(1)
    t_s = prompts.subject.unsqueeze(0).expand(k, -1, -1)
    t_o = prompts.object.unsqueeze(0).expand(k, -1, -1)
    return torch.cat([w_s, w_r, t_s], dim=1), torch.cat([t_o, w_r, w_o], dim=1)


def compose_prompts(
    support: LabeledTriplet,
    table: EmbeddingTable,
    prompts: PromptTokens,
) -> Tuple[TokenSequence, TokenSequence]:
    subject, predicate, obj = support
    w_s = table.category(subject)
    w_r = table.predicate(predicate)
    w_o = table.category(obj)
    subject_seq = TokenSequence.concat(
        [(w_s, Provenance.WORD), (w_r, Provenance.WORD), (prompts.subject, Provenance.PROMPT)]
    )
    object_seq = TokenSequence.concat(
        [(prompts.object, Provenance.PROMPT), (w_r, Provenance.WORD), (w_o, Provenance.WORD)]
    )
    return subject_seq, object_seq


class PrototypeModule(nn.Module):
    """
    Networks of the prototype branch.

    Gen, Map and Att each come as a separate subject/object pair. ``head`` maps
    f^pro alone to the final embedding space for the prototype-only distribution.
    """

    def __init__(
        self,
        text_dim: int,
        visual_dim: int,
        prototype_dim: int,
        final_dim: int,
        hidden_dim: int,
        prompt_length: int,
        init_std: float = 0.02,
        trainable_prompts: bool = True,
    ):
        super().__init__()
        self.prompts = PromptTokens(prompt_length, text_dim, init_std, trainable=trainable_prompts)
        self.gen_s = TwoLayerMLP(text_dim, hidden_dim, prototype_dim)
        self.gen_o = TwoLayerMLP(text_dim, hidden_dim, prototype_dim)
        self.map_s = TwoLayerMLP(visual_dim, hidden_dim, text_dim)
        self.map_o = TwoLayerMLP(visual_dim, hidden_dim, text_dim)
        self.att_s = TwoLayerMLP(text_dim, hidden_dim, 1)
        self.att_o = TwoLayerMLP(text_dim, hidden_dim, 1)
        self.head = TwoLayerMLP(2 * prototype_dim, hidden_dim, final_dim)
        self.visual_dim = visual_dim

    def feature(
        self, f_v_s: torch.Tensor, f_v_o: torch.Tensor, bank: PrototypeBank
    ) -> Tuple[torch.Tensor, PrototypeAttention, PrototypeAttention]:
        v_s, v_o = project_pair(f_v_s, f_v_o, self.map_s, self.map_o)
        att_s = attend(v_s, bank.h_s, bank.u_s, self.att_s)
        att_o = attend(v_o, bank.h_o, bank.u_o, self.att_o)
        return prototype_feature(att_s, att_o), att_s, att_o


def build_bank(
    predicate: str,
    supports: Sequence[LabeledTriplet],
    table: EmbeddingTable,
    prototypes: PrototypeModule,
    text_encoder: TextEncoder,
) -> PrototypeBank:
    """One (h^s, h^o, u^s, u^o) row per support; duplicates are kept."""
    if not supports:
        raise ContractViolation(f"predicate {predicate} has no supports")
    for support in supports:
        if support[1] != predicate:
            raise IntegrityError(f"support {support} is not labeled {predicate}")
    subject_ids = table.category_ids(s for s, _, _ in supports)
    object_ids = table.category_ids(o for _, _, o in supports)
    predicate_ids = table.predicate_ids([predicate] * len(supports))
    p_s, p_o = compose_prompt_batch(subject_ids, predicate_ids, object_ids, table, prototypes.prompts)
    h_s = text_encoder(p_s)
    h_o = text_encoder(p_o)
    return PrototypeBank(predicate, h_s, h_o, prototypes.gen_s(h_s), prototypes.gen_o(h_o))


###############################################################################
# Attention and aggregation
###############################################################################


def project_pair(
    f_v_s: torch.Tensor, f_v_o: torch.Tensor, map_s: nn.Module, map_o: nn.Module
) -> Tuple[torch.Tensor, torch.Tensor]:
    if f_v_s.shape[-1] != f_v_o.shape[-1]:
        raise ContractViolation("subject and object visual features differ in dim")
    return map_s(f_v_s), map_o(f_v_o)


def attention_from_scores(scores: torch.Tensor, u: torch.Tensor) -> PrototypeAttention:
    """Softmax over the bank axis and convex recombination of the prototypes."""
    if scores.shape[-1] == 0:
        raise ContractViolation("cannot attend over an empty prototype bank")
    weights = torch.softmax(scores, dim=-1)
    return PrototypeAttention(scores, weights, weights @ u)


def attend(v: torch.Tensor, h: torch.Tensor, u: torch.Tensor, att: nn.Module) -> PrototypeAttention:
    """
    Score every bank entry with Att(v ⊙ h_k) and recombine its prototypes.

    Args:
        v: Projected features ``[..., d_txt]``
        h: Text embeddings of the bank ``[K, d_txt]``
        u: Prototypes of the bank ``[K, d_proto]``
        att: Scoring network with a scalar output
    """
    if h.shape[0] == 0:
        raise ContractViolation("cannot attend over an empty prototype bank")
    if v.shape[-1] != h.shape[-1]:
        raise ContractViolation(f"projected dim {v.shape[-1]} != text dim {h.shape[-1]}")
    scores = att(v.unsqueeze(-2) * h).squeeze(-1)
    return attention_from_scores(scores, u)


def prototype_feature(att_s: PrototypeAttention, att_o: PrototypeAttention) -> torch.Tensor:
    return torch.cat([att_s.recombined, att_o.recombined], dim=-1)


def aggregate(
    aggregator: nn.Module,
    f_v_s: torch.Tensor,
    f_v_o: torch.Tensor,
    f_con: torch.Tensor,
    f_pro: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    parts = [f_v_s, f_v_o, f_con] if f_pro is None else [f_v_s, f_v_o, f_con, f_pro]
    return aggregator(torch.cat(parts, dim=-1))


def embed_sample(
    f_v_s: torch.Tensor,
    f_v_o: torch.Tensor,
    f_con: torch.Tensor,
    aggregator: nn.Module,
    prototypes: Optional[PrototypeModule] = None,
    bank: Optional[PrototypeBank] = None,
) -> RelationEmbedding:
    """
    Full embedding of one or more pairs conditioned on a candidate bank.

    Without a prototype module the embedding is unconditioned (no f^pro).
    """
    if prototypes is None:
        return RelationEmbedding(aggregate(aggregator, f_v_s, f_v_o, f_con), condition=None)
    if bank is None:
        raise ContractViolation("a prototype embedding needs the candidate's bank")
    f_pro, _, _ = prototypes.feature(f_v_s, f_v_o, bank)
    return RelationEmbedding(
        aggregate(aggregator, f_v_s, f_v_o, f_con, f_pro),
        condition=bank.predicate,
        prototype_feature=f_pro,
    )
