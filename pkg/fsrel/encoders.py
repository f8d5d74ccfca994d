# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Visual, context and text encoders plus the word embedding table.

All encoders are small MLPs so that the whole model trains on a CPU; each one
sits behind a plain ``forward`` so a heavier encoder can replace it without
touching the prototype or metric code.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Literal, NamedTuple, Sequence, Tuple

import torch
from torch import nn

from fsrel.errors import ConfigurationError, ContractViolation, IntegrityError, VocabularyError
from fsrel.sgdata import ObjectInstance, SceneGraphImage

logger = logging.getLogger(__name__)

GEOMETRY_DIM = 7
PAIR_GEOMETRY_DIM = 7


class TwoLayerMLP(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


###############################################################################
# Image tensors
###############################################################################


class ImageTensors(NamedTuple):
    appearance: torch.Tensor  # [n, d_app]
    boxes: torch.Tensor  # [n, 4]
    index: dict  # object id -> row


def image_tensors(image: SceneGraphImage, dtype: torch.dtype = torch.float32) -> ImageTensors:
    appearance = torch.tensor([obj.appearance for obj in image.objects], dtype=dtype)
    boxes = torch.tensor([obj.bbox for obj in image.objects], dtype=dtype)
    return ImageTensors(appearance, boxes, {obj.id: row for row, obj in enumerate(image.objects)})


def box_geometry(boxes: torch.Tensor) -> torch.Tensor:
    """(x1, y1, x2, y2) -> (x1, y1, x2, y2, w, h, area)."""
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return torch.cat([boxes, w.unsqueeze(-1), h.unsqueeze(-1), (w * h).unsqueeze(-1)], dim=-1)


def pair_geometry(subject_boxes: torch.Tensor, object_boxes: torch.Tensor) -> torch.Tensor:
    """Union box, object-minus-subject center offset and log area ratio; directional."""
    union = torch.cat(
        [
            torch.minimum(subject_boxes[..., :2], object_boxes[..., :2]),
            torch.maximum(subject_boxes[..., 2:], object_boxes[..., 2:]),
        ],
        dim=-1,
    )
    s_center = (subject_boxes[..., :2] + subject_boxes[..., 2:]) / 2
    o_center = (object_boxes[..., :2] + object_boxes[..., 2:]) / 2
    s_geo = box_geometry(subject_boxes)
    o_geo = box_geometry(object_boxes)
    log_ratio = torch.log(o_geo[..., 6] / s_geo[..., 6]).unsqueeze(-1)
    return torch.cat([union, o_center - s_center, log_ratio], dim=-1)


###############################################################################
# Visual and context encoders
###############################################################################


class VisualEncoder(nn.Module):
    """f^v = MLP(appearance ⊕ box geometry)."""

    def __init__(self, appearance_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.appearance_dim = appearance_dim
        self.mlp = TwoLayerMLP(appearance_dim + GEOMETRY_DIM, hidden_dim, out_dim)

    def forward(self, appearance: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        if appearance.shape[-1] != self.appearance_dim:
            raise ConfigurationError(
                f"appearance dim {appearance.shape[-1]} does not match configured {self.appearance_dim}"
            )
        return self.mlp(torch.cat([appearance, box_geometry(boxes)], dim=-1))

    def encode(self, obj: ObjectInstance) -> torch.Tensor:
        dtype = self.mlp.fc1.weight.dtype
        appearance = torch.tensor(obj.appearance, dtype=dtype)
        return self.forward(appearance, torch.tensor(obj.bbox, dtype=dtype))


class ContextEncoder(nn.Module):
    """
    f^con = MLP(mean appearance of the other objects ⊕ pair geometry).

    The mean over an empty set of other objects is the zero vector.
    """

    def __init__(self, appearance_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.appearance_dim = appearance_dim
        self.mlp = TwoLayerMLP(appearance_dim + PAIR_GEOMETRY_DIM, hidden_dim, out_dim)

    @staticmethod
    def others_mean(appearance: torch.Tensor, s_rows: torch.Tensor, o_rows: torch.Tensor) -> torch.Tensor:
        n = appearance.shape[0]
        mask = torch.ones(len(s_rows), n, dtype=appearance.dtype)
        pair = torch.arange(len(s_rows))
        mask[pair, s_rows] = 0.0
        mask[pair, o_rows] = 0.0
        if n <= 2:
            return torch.zeros(len(s_rows), appearance.shape[1], dtype=appearance.dtype)
        return (mask @ appearance) / (n - 2)

    def forward(
        self,
        appearance: torch.Tensor,
        boxes: torch.Tensor,
        s_rows: torch.Tensor,
        o_rows: torch.Tensor,
    ) -> torch.Tensor:
        if appearance.shape[-1] != self.appearance_dim:
            raise ConfigurationError(
                f"appearance dim {appearance.shape[-1]} does not match configured {self.appearance_dim}"
            )
        mean = self.others_mean(appearance, s_rows, o_rows)
        geometry = pair_geometry(boxes[s_rows], boxes[o_rows])
        return self.mlp(torch.cat([mean, geometry], dim=-1))

    def encode(self, image: SceneGraphImage, s: ObjectInstance, o: ObjectInstance) -> torch.Tensor:
        for obj in (s, o):
            if obj not in image.objects:
                raise IntegrityError(f"object {obj.id} does not belong to image {image.id}")
        tensors = image_tensors(image, self.mlp.fc1.weight.dtype)
        rows = torch.tensor([tensors.index[s.id]]), torch.tensor([tensors.index[o.id]])
        return self.forward(tensors.appearance, tensors.boxes, *rows)[0]


###############################################################################
# Text side
###############################################################################


class Provenance(str, Enum):
    WORD = "word"
    PROMPT = "prompt"


@dataclass(frozen=True)
class TokenSequence:
    tokens: torch.Tensor  # [n, d_txt]
    provenance: Tuple[Provenance, ...]

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] == 0:
            raise ContractViolation("a token sequence needs at least one token of uniform dim")
        if len(self.provenance) != self.tokens.shape[0]:
            raise ContractViolation("provenance length does not match token count")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def concat(cls, parts: Iterable[Tuple[torch.Tensor, Provenance]]) -> "TokenSequence":
        tensors, tags = [], []
        for tokens, tag in parts:
            tokens = tokens.reshape(-1, tokens.shape[-1])
            tensors.append(tokens)
            tags.extend([tag] * tokens.shape[0])
        return cls(torch.cat(tensors, dim=0), tuple(tags))


class TextEncoder(nn.Module):
    """
    Position-weighted pooling over the token axis followed by a two-layer MLP.

    Works on a single sequence ``[n, d]`` or a batch ``[B, n, d]``. Freezing stops
    updates to the pooling and MLP weights but keeps gradients flowing into the
    tokens, so prompt tokens and word embeddings still learn through it.
    """

    def __init__(self, dim: int, hidden_dim: int, max_length: int, freeze: bool = False):
        super().__init__()
        self.dim = dim
        self.max_length = max_length
        self.position_logits = nn.Parameter(torch.zeros(max_length))
        self.mlp: nn.Module = TwoLayerMLP(dim, hidden_dim, dim)
        if freeze:
            self.freeze()

    def freeze(self) -> None:
        for param in self.parameters():
            param.requires_grad_(False)

    def pooling_weights(self, length: int) -> torch.Tensor:
        if length == 0:
            raise ContractViolation("cannot encode an empty token sequence")
        if length > self.max_length:
            raise ContractViolation(f"sequence of {length} tokens exceeds max length {self.max_length}")
        return torch.softmax(self.position_logits[:length], dim=0)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.dim:
            raise ContractViolation(f"token dim {tokens.shape[-1]} != encoder dim {self.dim}")
        weights = self.pooling_weights(tokens.shape[-2])
        pooled = torch.einsum("n,...nd->...d", weights, tokens)
        return self.mlp(pooled)

    def encode(self, seq: TokenSequence) -> torch.Tensor:
        return self.forward(seq.tokens)


class EmbeddingTable(nn.Module):
    """Word vectors W[·] for categories and predicates, kept in separate namespaces."""

    def __init__(
        self,
        categories: Sequence[str],
        predicates: Sequence[str],
        dim: int,
        init_std: float = 0.02,
        trainable: bool = True,
    ):
        super().__init__()
        self.categories: List[str] = list(categories)
        self.predicates: List[str] = list(predicates)
        self._category_index = {c: i for i, c in enumerate(self.categories)}
        self._predicate_index = {p: i for i, p in enumerate(self.predicates)}
        self.category_weight = nn.Parameter(torch.randn(len(self.categories), dim) * init_std, requires_grad=trainable)
        self.predicate_weight = nn.Parameter(torch.randn(len(self.predicates), dim) * init_std, requires_grad=trainable)

    def category_ids(self, names: Iterable[str]) -> torch.Tensor:
        try:
            return torch.tensor([self._category_index[n] for n in names], dtype=torch.long)
        except KeyError as exc:
            raise VocabularyError(f"unknown category {exc.args[0]!r}") from None

    def predicate_ids(self, names: Iterable[str]) -> torch.Tensor:
        try:
            return torch.tensor([self._predicate_index[n] for n in names], dtype=torch.long)
        except KeyError as exc:
            raise VocabularyError(f"unknown predicate {exc.args[0]!r}") from None

    def category(self, name: str) -> torch.Tensor:
        return self.category_weight[self.category_ids([name])[0]]

    def predicate(self, name: str) -> torch.Tensor:
        return self.predicate_weight[self.predicate_ids([name])[0]]


def lookup_word(table: EmbeddingTable, name: str, kind: Literal["category", "predicate"] = "category") -> torch.Tensor:
    if kind == "category":
        return table.category(name)
    if kind == "predicate":
        return table.predicate(name)
    raise ContractViolation(f"unknown vocabulary kind {kind!r}")


def encode_visual(encoder: VisualEncoder, obj: ObjectInstance) -> torch.Tensor:
    return encoder.encode(obj)


def encode_context(encoder: ContextEncoder, image: SceneGraphImage, s: ObjectInstance, o: ObjectInstance) -> torch.Tensor:
    return encoder.encode(image, s, o)


def encode_text(encoder: TextEncoder, seq: TokenSequence) -> torch.Tensor:
    return encoder.encode(seq)
