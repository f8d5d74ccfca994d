# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
RelationModel: every trainable network plus the wiring from object pairs to
candidate distances.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from fsrel.encoders import (
    ContextEncoder,
    EmbeddingTable,
    ImageTensors,
    TextEncoder,
    TwoLayerMLP,
    VisualEncoder,
    image_tensors,
)
from fsrel.errors import ConfigurationError, ContractViolation
from fsrel.metric import (
    PromptLabelEmbedder,
    SupportWeights,
    pairwise_distances,
    reweighted_metric,
    support_weights_batch,
    uniform_weights,
)
from fsrel.models import ModelConfig
from fsrel.prototype import LabeledTriplet, PrototypeBank, PrototypeModule, build_bank, embed_sample
from fsrel.sgdata import BACKGROUND, SceneGraphDataset, SceneGraphImage, TripletRef
from fsrel.utils import seed_everything

logger = logging.getLogger(__name__)

# (image id, subject id, object id)
PairRef = Tuple[str, int, int]


@dataclass
class PairFeatures:
    f_v_s: torch.Tensor
    f_v_o: torch.Tensor
    f_con: torch.Tensor
    subject_labels: torch.Tensor
    object_labels: torch.Tensor

    def __len__(self) -> int:
        return self.f_v_s.shape[0]

    @classmethod
    def cat(cls, parts: Sequence["PairFeatures"]) -> "PairFeatures":
        return cls(*(torch.cat([getattr(p, name) for p in parts]) for name in cls.__dataclass_fields__))

    def take(self, order: torch.Tensor) -> "PairFeatures":
        return PairFeatures(*(getattr(self, name)[order] for name in self.__dataclass_fields__))


@dataclass
class SupportSet:
    predicate: str
    triplets: List[LabeledTriplet]
    features: PairFeatures
    bank: Optional[PrototypeBank]
    embedding: torch.Tensor
    prototype_embedding: Optional[torch.Tensor] = None


@dataclass
class DistanceTable:
    """Per query distance to every candidate predicate, background last."""

    candidates: Tuple[str, ...]
    distances: torch.Tensor
    prototype_distances: Optional[torch.Tensor] = None
    weights: Dict[str, SupportWeights] = field(default_factory=dict)

    def probabilities(self) -> torch.Tensor:
        return torch.softmax(-self.distances, dim=-1)

    def prototype_probabilities(self) -> Optional[torch.Tensor]:
        if self.prototype_distances is None:
            return None
        return torch.softmax(-self.prototype_distances, dim=-1)


class RelationModel(nn.Module):
    def __init__(self, cfg: ModelConfig, categories: Sequence[str], predicates: Sequence[str]):
        super().__init__()
        self.cfg = cfg
        self.categories = list(categories)
        self.predicates = list(predicates)

        self.table = EmbeddingTable(self.categories, self.predicates, cfg.text_dim, cfg.init_std)
        self.visual = VisualEncoder(cfg.appearance_dim, cfg.hidden_dim, cfg.visual_dim)
        self.context = ContextEncoder(cfg.appearance_dim, cfg.hidden_dim, cfg.context_dim)
        max_length = max(cfg.prompt_length + 2, cfg.label_prompt_length + 1)
        self.text = TextEncoder(cfg.text_dim, cfg.hidden_dim, max_length, freeze=cfg.freeze_text_encoder)
        self.object_head = nn.Linear(cfg.visual_dim + cfg.context_dim, len(self.categories))
        self.background = nn.Parameter(torch.tensor(float(cfg.background_init)))
        self.register_buffer("label_prompt", torch.randn(cfg.label_prompt_length, cfg.text_dim) * cfg.init_std)

        self.prototypes: Optional[PrototypeModule] = None
        prototype_dims = 0
        if cfg.prompt_mode != "none":
            self.prototypes = PrototypeModule(
                cfg.text_dim,
                cfg.visual_dim,
                cfg.prototype_dim,
                cfg.final_dim,
                cfg.hidden_dim,
                cfg.prompt_length,
                cfg.init_std,
                trainable_prompts=cfg.prompt_mode == "learnable",
            )
            prototype_dims = 2 * cfg.prototype_dim
        self.aggregator = TwoLayerMLP(
            2 * cfg.visual_dim + cfg.context_dim + prototype_dims, cfg.hidden_dim, cfg.final_dim
        )

        if cfg.precision == "float64":
            self.double()

        self.label_embedder = PromptLabelEmbedder(self.categories, self.table, self.text, self.label_prompt)
        self._image_cache: Dict[str, ImageTensors] = {}

    def _apply(self, fn, *args, **kwargs):
        # dtype or device changes replace the buffer and invalidate cached tensors
        module = super()._apply(fn, *args, **kwargs)
        self._image_cache = {}
        self.label_embedder = PromptLabelEmbedder(self.categories, self.table, self.text, self.label_prompt)
        return module

    @property
    def dtype(self) -> torch.dtype:
        return self.background.dtype

    def parameter_groups(self) -> "OrderedDict[str, List[nn.Parameter]]":
        groups: "OrderedDict[str, List[nn.Parameter]]" = OrderedDict()
        for name, param in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(param)
        return groups

    ###########################################################################
    # Per-image features

    def tensors(self, image: SceneGraphImage) -> ImageTensors:
        cached = self._image_cache.get(image.id)
        if cached is None:
            cached = image_tensors(image, self.dtype)
            self._image_cache[image.id] = cached
        return cached

    def pair_features(
        self,
        image: SceneGraphImage,
        pairs: Sequence[Tuple[int, int]],
        labels: Optional[Dict[int, str]] = None,
    ) -> PairFeatures:
        """
        Visual and context features for ordered pairs of one image.

        ``labels`` overrides the annotated categories (predicted labels in SGCls).
        """
        t = self.tensors(image)
        f_v = self.visual(t.appearance, t.boxes)
        s_rows = torch.tensor([t.index[s] for s, _ in pairs], dtype=torch.long)
        o_rows = torch.tensor([t.index[o] for _, o in pairs], dtype=torch.long)
        f_con = self.context(t.appearance, t.boxes, s_rows, o_rows)
        if labels is None:
            labels = {obj.id: obj.category for obj in image.objects}
        s_labels = self.table.category_ids(labels[s] for s, _ in pairs)
        o_labels = self.table.category_ids(labels[o] for _, o in pairs)
        return PairFeatures(f_v[s_rows], f_v[o_rows], f_con, s_labels, o_labels)

    def encode_refs(self, dataset: SceneGraphDataset, refs: Sequence[PairRef]) -> PairFeatures:
        """Pair features for references spread over several images, in input order."""
        if not refs:
            raise ContractViolation("no pairs to encode")
        by_image: Dict[str, List[int]] = {}
        for position, (image_id, _, _) in enumerate(refs):
            by_image.setdefault(image_id, []).append(position)
        parts, positions = [], []
        for image_id, members in by_image.items():
            pairs = [(refs[i][1], refs[i][2]) for i in members]
            parts.append(self.pair_features(dataset.image(image_id), pairs))
            positions.extend(members)
        merged = PairFeatures.cat(parts)
        inverse = torch.empty(len(positions), dtype=torch.long)
        inverse[torch.tensor(positions, dtype=torch.long)] = torch.arange(len(positions))
        return merged.take(inverse)

    def object_logits(self, image: SceneGraphImage) -> torch.Tensor:
        """Logits over categories for every object, from f^v and its mean incident context."""
        t = self.tensors(image)
        n = len(image.objects)
        f_v = self.visual(t.appearance, t.boxes)
        pooled = torch.zeros(n, self.cfg.context_dim, dtype=self.dtype)
        if n > 1:
            rows = torch.arange(n)
            s_rows = rows.repeat_interleave(n - 1)
            o_rows = torch.cat([torch.cat([rows[:i], rows[i + 1:]]) for i in range(n)])
            f_con = self.context(t.appearance, t.boxes, s_rows, o_rows)
            pooled = pooled.index_add(0, s_rows, f_con).index_add(0, o_rows, f_con) / (2 * (n - 1))
        return self.object_head(torch.cat([f_v, pooled], dim=-1))

    def predict_labels(self, image: SceneGraphImage) -> Dict[int, str]:
        best = self.object_logits(image).argmax(-1).tolist()
        return {obj.id: self.categories[c] for obj, c in zip(image.objects, best)}

    ###########################################################################
    # Supports and distances

    def prepare_support(self, dataset: SceneGraphDataset, predicate: str, refs: Sequence[TripletRef]) -> SupportSet:
        triplets: List[LabeledTriplet] = []
        pairs: List[PairRef] = []
        for ref in refs:
            image = dataset.image(ref.image)
            rel = dataset.triplet(ref)
            triplets.append((image.object(rel.subject_id).category, rel.predicate, image.object(rel.object_id).category))
            pairs.append((ref.image, rel.subject_id, rel.object_id))
        features = self.encode_refs(dataset, pairs)
        bank = None
        if self.prototypes is not None:
            bank = build_bank(predicate, triplets, self.table, self.prototypes, self.text)
        embedding, prototype_embedding = self.embed(features, bank)
        return SupportSet(predicate, triplets, features, bank, embedding, prototype_embedding)

    def embed(self, features: PairFeatures, bank: Optional[PrototypeBank]) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Final embedding F and, with prototypes, the prototype-only embedding."""
        out = embed_sample(features.f_v_s, features.f_v_o, features.f_con, self.aggregator, self.prototypes, bank)
        if out.prototype_feature is None:
            return out.vector, None
        return out.vector, self.prototypes.head(out.prototype_feature)

    def distances(self, queries: PairFeatures, supports: Dict[str, SupportSet]) -> DistanceTable:
        if not supports:
            raise ContractViolation("no candidate predicates")
        n = len(queries)
        reweight = self.cfg.metric_mode == "reweight"
        similarity = self.label_embedder.similarity_matrix() if reweight else None

        columns, prototype_columns, weights = [], [], {}
        shared = None
        for predicate, support in supports.items():
            if self.prototypes is None:
                if shared is None:
                    shared = self.embed(queries, None)[0]
                f_q, g_q = shared, None
            else:
                f_q, g_q = self.embed(queries, support.bank)
            if reweight:
                w = support_weights_batch(
                    similarity,
                    queries.subject_labels,
                    queries.object_labels,
                    support.features.subject_labels,
                    support.features.object_labels,
                )
            else:
                w = uniform_weights(n, len(support.features), self.dtype)
            weights[predicate] = w
            columns.append(reweighted_metric(pairwise_distances(f_q, support.embedding), w))
            if g_q is not None:
                prototype_columns.append(reweighted_metric(pairwise_distances(g_q, support.prototype_embedding), w))

        background = self.background.expand(n)
        distances = torch.stack(columns + [background], dim=1)
        prototype_distances = None
        if prototype_columns:
            prototype_distances = torch.stack(prototype_columns + [background], dim=1)
        return DistanceTable(tuple(supports) + (BACKGROUND,), distances, prototype_distances, weights)


def build_model(cfg: ModelConfig, dataset: SceneGraphDataset, seed: int) -> RelationModel:
    """Seeded model construction for a dataset's vocabulary."""
    if dataset.appearance_dim and dataset.appearance_dim != cfg.appearance_dim:
        raise ConfigurationError(
            f"dataset appearance vectors have dim {dataset.appearance_dim}, model expects {cfg.appearance_dim}"
        )
    seed_everything(seed)
    model = RelationModel(cfg, dataset.categories, dataset.predicates)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built model ({cfg.prompt_mode} prompts, {cfg.metric_mode} metric): {n_params} parameters")
    return model
