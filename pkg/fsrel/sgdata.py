# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Scene graph data model, dataset ingestion and samplers.

Covers the JSON dataset format, base/novel predicate splits, K-shot support
sampling for evaluation, episodic batch sampling for training, and the
synthetic polysemous world used for desk-scale experiments.
"""

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fsrel.errors import (
    ConfigurationError,
    DatasetParseError,
    IntegrityError,
    SamplingError,
)
from fsrel.models import EpisodeConfig, ModePool, WorldConfig

logger = logging.getLogger(__name__)

BACKGROUND = "__background__"

PathLike = Union[str, Path]


###############################################################################
# Records
###############################################################################


class ObjectInstance(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    category: str
    bbox: Tuple[float, float, float, float]
    appearance: Tuple[float, ...] = ()

    @field_validator("bbox")
    @classmethod
    def _check_bbox(cls, value: Tuple[float, float, float, float]):
        x1, y1, x2, y2 = value
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError(f"bbox {list(value)} is not a normalized (x1, y1, x2, y2) box")
        return value

    @field_validator("appearance")
    @classmethod
    def _check_appearance(cls, value: Tuple[float, ...]):
        if not all(math.isfinite(v) for v in value):
            raise ValueError("appearance has non-finite entries")
        return value


class RelationTriplet(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    subject_id: int = Field(alias="subject")
    predicate: str
    object_id: int = Field(alias="object")

    @model_validator(mode="after")
    def _check_distinct(self) -> "RelationTriplet":
        if self.subject_id == self.object_id:
            raise ValueError(f"subject and object are the same object ({self.subject_id})")
        return self


class SceneGraphImage(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    objects: Tuple[ObjectInstance, ...]
    relations: Tuple[RelationTriplet, ...] = ()

    def object(self, object_id: int) -> ObjectInstance:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise IntegrityError(f"image {self.id} has no object {object_id}")

    def object_ids(self) -> List[int]:
        return [obj.id for obj in self.objects]

    def annotated_pairs(self) -> FrozenSet[Tuple[int, int]]:
        return frozenset((rel.subject_id, rel.object_id) for rel in self.relations)

    def ordered_pairs(self) -> List[Tuple[int, int]]:
        """All ordered pairs of distinct objects, sorted by (subject id, object id)."""
        ids = sorted(self.object_ids())
        return [(s, o) for s in ids for o in ids if s != o]


class TripletRef(NamedTuple):
    image: str
    triplet: int


###############################################################################
# Dataset
###############################################################################


def _check_image(image: SceneGraphImage, categories: FrozenSet[str], predicates: FrozenSet[str]) -> None:
    ids = image.object_ids()
    if len(set(ids)) != len(ids):
        raise IntegrityError(f"image {image.id}: duplicate object ids")
    known = set(ids)
    for obj in image.objects:
        if obj.category not in categories:
            raise IntegrityError(f"image {image.id}: object {obj.id} has unknown category '{obj.category}'")
    seen = set()
    for index, rel in enumerate(image.relations):
        for ref in (rel.subject_id, rel.object_id):
            if ref not in known:
                raise IntegrityError(
                    f"image {image.id}: relation {index} references missing object id {ref}"
                )
        if rel.predicate not in predicates:
            raise IntegrityError(f"image {image.id}: relation {index} has unknown predicate '{rel.predicate}'")
        key = (rel.subject_id, rel.predicate, rel.object_id)
        if key in seen:
            raise IntegrityError(f"image {image.id}: duplicate triplet {key}")
        seen.add(key)


class SceneGraphDataset:
    """Immutable collection of scene graph images with their category and predicate vocabularies."""

    def __init__(
        self,
        categories: Iterable[str],
        predicates: Iterable[str],
        images: Iterable[SceneGraphImage],
        diagnostics: Optional[Dict[str, Any]] = None,
    ):
        self.categories: Tuple[str, ...] = tuple(categories)
        self.predicates: Tuple[str, ...] = tuple(predicates)
        self.images: Tuple[SceneGraphImage, ...] = tuple(images)
        # Diagnostics (e.g. synthetic mode ids) never take part in equality
        self.diagnostics: Dict[str, Any] = dict(diagnostics or {})

        if len(set(self.categories)) != len(self.categories):
            raise IntegrityError("duplicate category names")
        if len(set(self.predicates)) != len(self.predicates):
            raise IntegrityError("duplicate predicate names")

        self.category_index: Dict[str, int] = {c: i for i, c in enumerate(self.categories)}
        self.predicate_index: Dict[str, int] = {p: i for i, p in enumerate(self.predicates)}

        category_set = frozenset(self.categories)
        predicate_set = frozenset(self.predicates)
        self._by_id: Dict[str, SceneGraphImage] = {}
        dims = set()
        for image in self.images:
            if image.id in self._by_id:
                raise IntegrityError(f"duplicate image id {image.id}")
            _check_image(image, category_set, predicate_set)
            self._by_id[image.id] = image
            dims.update(len(obj.appearance) for obj in image.objects)
        if len(dims) > 1:
            raise IntegrityError(f"appearance vectors have mixed dimensions {sorted(dims)}")
        self.appearance_dim: int = dims.pop() if dims else 0

    def __len__(self) -> int:
        return len(self.images)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneGraphDataset):
            return NotImplemented
        return (
            self.categories == other.categories
            and self.predicates == other.predicates
            and self.images == other.images
        )

    def image(self, image_id: str) -> SceneGraphImage:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise IntegrityError(f"unknown image id {image_id}") from None

    def triplet(self, ref: TripletRef) -> RelationTriplet:
        image = self.image(ref.image)
        if not 0 <= ref.triplet < len(image.relations):
            raise IntegrityError(f"image {ref.image} has no triplet {ref.triplet}")
        return image.relations[ref.triplet]

    def iter_triplets(self, image_ids: Optional[Iterable[str]] = None) -> Iterator[Tuple[TripletRef, RelationTriplet]]:
        images = self.images if image_ids is None else [self.image(i) for i in sorted(image_ids)]
        for image in images:
            for index, rel in enumerate(image.relations):
                yield TripletRef(image.id, index), rel

    def predicate_counts(self, image_ids: Optional[Iterable[str]] = None) -> Counter:
        return Counter(rel.predicate for _, rel in self.iter_triplets(image_ids))

    def to_payload(self) -> Dict[str, Any]:
        return {
            "categories": list(self.categories),
            "predicates": list(self.predicates),
            "images": [
                {
                    "id": image.id,
                    "objects": [
                        {
                            "id": obj.id,
                            "category": obj.category,
                            "bbox": list(obj.bbox),
                            "appearance": list(obj.appearance),
                        }
                        for obj in image.objects
                    ],
                    "relations": [
                        {"subject": rel.subject_id, "predicate": rel.predicate, "object": rel.object_id}
                        for rel in image.relations
                    ],
                }
                for image in self.images
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), separators=(",", ":"))

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def synthesize_appearance(category: str, bbox: Iterable[float], image_id: str, seed: int, dim: int) -> Tuple[float, ...]:
    """
    Deterministic stand-in for region features.

    A per-category base vector plus a small per-instance jitter, both derived from
    SHA-256 digests so that the same (category, bbox, image, seed) always maps to
    the same vector.
    """

    def _rng(key: str) -> np.random.Generator:
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    base = _rng(f"{seed}|category|{category}").normal(size=dim)
    box_key = ",".join(f"{v:.6f}" for v in bbox)
    jitter = _rng(f"{seed}|instance|{image_id}|{box_key}").normal(size=dim)
    return tuple(round(float(v), 6) for v in base + 0.1 * jitter)


def _parse_images(raw_images: List[Any], featurizer: Optional[Dict[str, Any]]) -> List[SceneGraphImage]:
    images = []
    for position, record in enumerate(raw_images):
        label = f"images[{position}]"
        if not isinstance(record, dict):
            raise DatasetParseError(label, "image record must be an object")
        if "id" in record:
            label = f"images[{position}] (id={record['id']})"
        objects = record.get("objects")
        if not isinstance(objects, list):
            raise DatasetParseError(label, "missing 'objects' list")
        if featurizer is not None:
            filled = []
            for obj in objects:
                if isinstance(obj, dict) and not obj.get("appearance"):
                    obj = dict(obj)
                    try:
                        obj["appearance"] = synthesize_appearance(
                            obj["category"], obj["bbox"], str(record.get("id")),
                            int(featurizer.get("seed", 0)), int(featurizer["dim"]),
                        )
                    except (KeyError, TypeError, ValueError) as exc:
                        raise DatasetParseError(label, f"cannot featurize object: {exc}") from exc
                filled.append(obj)
            record = dict(record, objects=filled)
        else:
            for obj in objects:
                if isinstance(obj, dict) and not obj.get("appearance"):
                    raise DatasetParseError(
                        label, f"object {obj.get('id')} has no appearance and no featurizer is configured"
                    )
        try:
            images.append(SceneGraphImage.model_validate(record))
        except ValidationError as exc:
            raise DatasetParseError(label, str(exc)) from exc
    return images


def dataset_from_payload(payload: Any, source: str = "<payload>") -> SceneGraphDataset:
    if not isinstance(payload, dict):
        raise DatasetParseError(source, "top level must be an object")
    for key in ("categories", "predicates", "images"):
        if not isinstance(payload.get(key), list):
            raise DatasetParseError(source, f"missing '{key}' list")
    featurizer = payload.get("featurizer")
    if featurizer is not None and (not isinstance(featurizer, dict) or "dim" not in featurizer):
        raise DatasetParseError(f"{source}: featurizer", "featurizer needs a 'dim'")
    images = _parse_images(payload["images"], featurizer)
    return SceneGraphDataset(payload["categories"], payload["predicates"], images)


def load_dataset(path: PathLike) -> SceneGraphDataset:
    """Load and validate a dataset JSON file."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetParseError(str(path), "file does not exist") from None
    except json.JSONDecodeError as exc:
        raise DatasetParseError(str(path), f"invalid JSON: {exc}") from exc
    dataset = dataset_from_payload(payload, str(path))
    logger.info(
        f"Loaded dataset {path}: {len(dataset)} images, {len(dataset.categories)} categories, "
        f"{len(dataset.predicates)} predicates"
    )
    return dataset


###############################################################################
# Splits
###############################################################################


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_predicates: FrozenSet[str]
    novel_predicates: FrozenSet[str]
    object_categories: FrozenSet[str]
    train_images: FrozenSet[str] = frozenset()
    test_images: FrozenSet[str] = frozenset()

    @model_validator(mode="after")
    def _check_disjoint(self) -> "SplitSpec":
        overlap = self.base_predicates & self.novel_predicates
        if overlap:
            raise ValueError(f"predicates in both base and novel: {sorted(overlap)}")
        if self.train_images & self.test_images:
            raise ValueError("train and test images overlap")
        return self

    @property
    def predicates(self) -> FrozenSet[str]:
        return self.base_predicates | self.novel_predicates

    def train_pool(self, dataset: SceneGraphDataset) -> List[str]:
        """Training images; every image when the split carries no partition."""
        return sorted(self.train_images) if self.train_images else [i.id for i in dataset.images]

    def eval_pool(self, dataset: SceneGraphDataset) -> List[str]:
        return sorted(self.test_images) if self.test_images else [i.id for i in dataset.images]

    def to_payload(self) -> Dict[str, Any]:
        return {
            "base": sorted(self.base_predicates),
            "novel": sorted(self.novel_predicates),
            "train_images": sorted(self.train_images),
            "test_images": sorted(self.test_images),
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_payload(), indent=2) + "\n", encoding="utf-8")
        return path


def load_split(path: PathLike, dataset: SceneGraphDataset) -> SplitSpec:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        spec = SplitSpec(
            base_predicates=frozenset(payload["base"]),
            novel_predicates=frozenset(payload["novel"]),
            object_categories=frozenset(dataset.categories),
            train_images=frozenset(payload.get("train_images", [])),
            test_images=frozenset(payload.get("test_images", [])),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
        raise DatasetParseError(str(path), f"invalid split file: {exc}") from exc
    unknown = spec.predicates - set(dataset.predicates)
    if unknown:
        raise IntegrityError(f"split names unknown predicates {sorted(unknown)}")
    return spec


def make_split(
    dataset: SceneGraphDataset,
    n_base: int,
    n_novel: int,
    seed: int,
    test_fraction: float = 0.2,
    novel: Optional[Sequence[str]] = None,
) -> SplitSpec:
    """
    Frequency-ranked base/novel split plus a seeded train/test image partition.

    Predicates are ranked by annotation count (descending, ties by predicate id
    ascending); the first ``n_base`` are base, the next ``n_novel`` novel. When
    ``novel`` is given those predicates form the novel side and the base side is
    the top ``n_base`` of the remaining ranking.
    """
    counts = dataset.predicate_counts()
    annotated = [p for p in dataset.predicates if counts[p] > 0]
    if n_base + n_novel > len(annotated):
        raise ConfigurationError(
            f"requested {n_base} base + {n_novel} novel predicates but only "
            f"{len(annotated)} predicates are annotated"
        )
    ranked = sorted(annotated, key=lambda p: (-counts[p], dataset.predicate_index[p]))
    if novel is None:
        base = frozenset(ranked[:n_base])
        novel_set = frozenset(ranked[n_base:n_base + n_novel])
    else:
        novel_set = frozenset(novel)
        unknown = sorted(novel_set - set(annotated))
        if unknown:
            raise ConfigurationError(f"pinned novel predicates are unknown or unannotated: {unknown}")
        if len(novel_set) != n_novel:
            raise ConfigurationError(f"{len(novel_set)} pinned novel predicates for n_novel={n_novel}")
        base = frozenset([p for p in ranked if p not in novel_set][:n_base])

    image_ids = sorted(image.id for image in dataset.images)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(image_ids))
    n_test = int(round(test_fraction * len(image_ids)))
    if test_fraction > 0 and len(image_ids) >= 2:
        n_test = min(max(n_test, 1), len(image_ids) - 1)
    test = frozenset(image_ids[i] for i in order[:n_test])
    train = frozenset(image_ids) - test

    logger.info(
        f"Split: {len(base)} base / {len(novel_set)} novel predicates, "
        f"{len(train)} train / {len(test)} test images"
    )
    return SplitSpec(
        base_predicates=base,
        novel_predicates=novel_set,
        object_categories=frozenset(dataset.categories),
        train_images=train,
        test_images=test,
    )


###############################################################################
# Support sets
###############################################################################


class SupportEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    image: str
    triplet: int

    def ref(self) -> TripletRef:
        return TripletRef(self.image, self.triplet)


class SupportIndex(BaseModel):
    model_config = ConfigDict(frozen=True)

    shots: int = Field(ge=1)
    entries: Dict[str, Tuple[SupportEntry, ...]]
    skipped: Dict[str, str] = {}

    @model_validator(mode="after")
    def _check_coverage(self) -> "SupportIndex":
        for predicate, items in self.entries.items():
            if len(items) != self.shots:
                raise ValueError(f"predicate {predicate} has {len(items)} supports, expected {self.shots}")
        return self

    def flagged(self) -> FrozenSet[TripletRef]:
        """Triplets used as supports; evaluation drops them from the ground truth."""
        return frozenset(entry.ref() for items in self.entries.values() for entry in items)

    def refs(self, predicate: str) -> List[TripletRef]:
        return [entry.ref() for entry in self.entries[predicate]]

    def truncated(self, shots: int) -> "SupportIndex":
        """The first ``shots`` supports of every predicate; nested inside this index."""
        if not 1 <= shots <= self.shots:
            raise ConfigurationError(f"cannot truncate a {self.shots}-shot index to {shots} shots")
        return SupportIndex(
            shots=shots,
            entries={predicate: items[:shots] for predicate, items in self.entries.items()},
            skipped=self.skipped,
        )

    def to_payload(self) -> Dict[str, Any]:
        return {
            "shots": self.shots,
            "entries": {
                predicate: [{"image": e.image, "triplet": e.triplet} for e in items]
                for predicate, items in sorted(self.entries.items())
            },
            "skipped": dict(sorted(self.skipped.items())),
        }

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_payload(), indent=2) + "\n", encoding="utf-8")
        return path


def load_support(path: PathLike, dataset: SceneGraphDataset) -> SupportIndex:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        index = SupportIndex.model_validate(payload)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        raise DatasetParseError(str(path), f"invalid support file: {exc}") from exc
    for predicate, items in index.entries.items():
        for entry in items:
            if dataset.triplet(entry.ref()).predicate != predicate:
                raise IntegrityError(f"support {entry.image}/{entry.triplet} is not labeled {predicate}")
    return index


def sample_support_sets(dataset: SceneGraphDataset, split: SplitSpec, K: int, seed: int) -> SupportIndex:
    """
    Draw K supports per split predicate from the evaluation pool.

    Each support comes from a distinct image; predicates with fewer than K
    candidate images are skipped and recorded in ``skipped``.
    """
    if K < 1:
        raise ConfigurationError(f"shots must be positive, got {K}")
    rng = np.random.default_rng(seed)

    by_predicate: Dict[str, Dict[str, List[int]]] = defaultdict(lambda: defaultdict(list))
    for ref, rel in dataset.iter_triplets(split.eval_pool(dataset)):
        by_predicate[rel.predicate][ref.image].append(ref.triplet)

    entries: Dict[str, Tuple[SupportEntry, ...]] = {}
    skipped: Dict[str, str] = {}
    for predicate in sorted(split.predicates, key=dataset.predicate_index.__getitem__):
        images = sorted(by_predicate.get(predicate, {}))
        if len(images) < K:
            reason = f"only {len(images)} images carry this predicate, {K} needed"
            logger.warning(f"Skipping support predicate {predicate}: {reason}")
            skipped[predicate] = reason
            continue
        chosen = rng.choice(len(images), size=K, replace=False)
        picked = []
        for image_pos in chosen:
            image_id = images[int(image_pos)]
            candidates = by_predicate[predicate][image_id]
            picked.append(SupportEntry(image=image_id, triplet=candidates[int(rng.integers(len(candidates)))]))
        entries[predicate] = tuple(picked)

    logger.info(f"Sampled {K}-shot supports for {len(entries)} predicates ({len(skipped)} skipped)")
    return SupportIndex(shots=K, entries=entries, skipped=skipped)


###############################################################################
# Episodes
###############################################################################


@dataclass(frozen=True)
class Query:
    image_id: str
    subject_id: int
    object_id: int
    label: str
    triplet: Optional[int] = None

    @property
    def is_background(self) -> bool:
        return self.label == BACKGROUND


@dataclass(frozen=True)
class Episode:
    categories: Tuple[str, ...]
    supports: Dict[str, Tuple[TripletRef, ...]]
    queries: Tuple[Query, ...]

    def foreground(self) -> List[Query]:
        return [q for q in self.queries if not q.is_background]

    def background(self) -> List[Query]:
        return [q for q in self.queries if q.is_background]

    def image_ids(self) -> List[str]:
        ids = {q.image_id for q in self.queries}
        ids.update(ref.image for refs in self.supports.values() for ref in refs)
        return sorted(ids)

    def to_payload(self) -> Dict[str, Any]:
        return {
            "categories": list(self.categories),
            "supports": {r: [list(ref) for ref in refs] for r, refs in self.supports.items()},
            "queries": [
                {"image": q.image_id, "subject": q.subject_id, "object": q.object_id,
                 "label": q.label, "triplet": q.triplet}
                for q in self.queries
            ],
        }


class EpisodeSampler:
    """Samples training episodes over the base predicates of the training pool."""

    def __init__(self, dataset: SceneGraphDataset, split: SplitSpec, cfg: EpisodeConfig):
        self.dataset = dataset
        self.split = split
        self.cfg = cfg
        pool = split.train_pool(dataset)
        self.positives: Dict[str, List[TripletRef]] = defaultdict(list)
        for ref, rel in dataset.iter_triplets(pool):
            if rel.predicate in split.base_predicates:
                self.positives[rel.predicate].append(ref)
        order = sorted(split.base_predicates, key=dataset.predicate_index.__getitem__)
        self.eligible: List[str] = [r for r in order if len(self.positives[r]) >= 2]
        if not self.eligible:
            raise SamplingError("no base predicate has at least 2 positives in the training pool")
        short = [r for r in order if r not in self.eligible]
        if short:
            logger.warning(f"Base predicates with fewer than 2 training positives are never sampled: {short}")

    def _background(self, fg: List[Query], rng: np.random.Generator) -> List[Query]:
        wanted = self.cfg.background_ratio * len(fg)
        if wanted == 0:
            return []
        candidates = []
        for image_id in sorted({q.image_id for q in fg}):
            image = self.dataset.image(image_id)
            annotated = image.annotated_pairs()
            candidates.extend(
                (image_id, s, o) for s, o in image.ordered_pairs() if (s, o) not in annotated
            )
        if len(candidates) < wanted:
            logger.debug(f"Only {len(candidates)} background pairs for {wanted} requested")
            chosen = range(len(candidates))
        else:
            chosen = sorted(int(i) for i in rng.choice(len(candidates), size=wanted, replace=False))
        return [Query(*candidates[i], label=BACKGROUND) for i in chosen]

    def sample(self, rng: np.random.Generator) -> Episode:
        cfg = self.cfg
        n = min(cfg.n_categories, len(self.eligible))
        picked = sorted(int(i) for i in rng.choice(len(self.eligible), size=n, replace=False))
        categories = tuple(self.eligible[i] for i in picked)

        supports: Dict[str, Tuple[TripletRef, ...]] = {}
        fg: List[Query] = []
        for r in categories:
            positives = self.positives[r]
            order = rng.permutation(len(positives))
            n_support = min(int(rng.integers(cfg.support_min, cfg.support_max + 1)), len(positives) - 1)
            n_query = min(int(rng.integers(cfg.query_min, cfg.query_max + 1)), len(positives) - n_support)
            supports[r] = tuple(positives[i] for i in order[:n_support])
            for i in order[n_support:n_support + n_query]:
                ref = positives[i]
                rel = self.dataset.triplet(ref)
                fg.append(Query(ref.image, rel.subject_id, rel.object_id, label=r, triplet=ref.triplet))

        episode = Episode(categories=categories, supports=supports, queries=tuple(fg + self._background(fg, rng)))
        self._check(episode)
        return episode

    def _check(self, episode: Episode) -> None:
        leaked = [r for r in episode.categories if r not in self.split.base_predicates]
        if leaked:
            raise SamplingError(f"non-base predicates reached a training episode: {leaked}")
        support_refs = {ref for refs in episode.supports.values() for ref in refs}
        for q in episode.foreground():
            if TripletRef(q.image_id, q.triplet) in support_refs:
                raise SamplingError(f"query {q} is also a support")


def sample_episode(
    dataset: SceneGraphDataset,
    split: SplitSpec,
    cfg: EpisodeConfig,
    rng: np.random.Generator,
) -> Episode:
    return EpisodeSampler(dataset, split, cfg).sample(rng)


###############################################################################
# Synthetic world
###############################################################################


@dataclass
class _Mode:
    subjects: List[str]
    objects: List[str]
    angle: float
    distance: float
    size_ratio: float


@dataclass
class _WorldPlan:
    categories: List[str]
    predicates: List[str]
    modes: Dict[str, List[_Mode]] = field(default_factory=dict)


def _mode_counts(cfg: WorldConfig) -> List[int]:
    if isinstance(cfg.modes, int):
        counts = [cfg.modes] * cfg.n_predicates
    else:
        counts = list(cfg.modes)
    if len(counts) != cfg.n_predicates:
        raise ConfigurationError(f"modes lists {len(counts)} entries for {cfg.n_predicates} predicates")
    if any(m < 1 for m in counts):
        raise ConfigurationError("every predicate needs at least one mode (M >= 1)")
    return counts


def _plan_world(cfg: WorldConfig, rng: np.random.Generator) -> _WorldPlan:
    if cfg.n_categories < 1 or cfg.n_predicates < 1:
        raise ConfigurationError("a world needs at least one category and one predicate")
    if cfg.appearance_dim < 1:
        raise ConfigurationError("appearance_dim must be positive")
    categories = [f"cat_{i:02d}" for i in range(cfg.n_categories)]
    predicates = [f"rel_{i:02d}" for i in range(cfg.n_predicates)]
    plan = _WorldPlan(categories, predicates)
    counts = _mode_counts(cfg)

    for predicate, n_modes in zip(predicates, counts):
        explicit: Optional[List[ModePool]] = (cfg.mode_pools or {}).get(predicate)
        if explicit is not None:
            if len(explicit) != n_modes:
                raise ConfigurationError(f"{predicate}: {len(explicit)} pools given for {n_modes} modes")
            pools = []
            for pool in explicit:
                if not pool.subjects or not pool.objects:
                    raise ConfigurationError(f"{predicate}: empty subject or object pool")
                unknown = set(pool.subjects + pool.objects) - set(categories)
                if unknown:
                    raise ConfigurationError(f"{predicate}: unknown pool categories {sorted(unknown)}")
                pools.append((list(pool.subjects), list(pool.objects)))
        else:
            if cfg.pool_size < 1:
                raise ConfigurationError("pool_size must be at least 1 (empty pools)")
            if n_modes * cfg.pool_size > cfg.n_categories:
                raise ConfigurationError(
                    f"{predicate}: {n_modes} disjoint pools of {cfg.pool_size} need more than "
                    f"{cfg.n_categories} categories"
                )
            subj = rng.permutation(cfg.n_categories)
            obj = rng.permutation(cfg.n_categories)
            pools = []
            for m in range(n_modes):
                span = slice(m * cfg.pool_size, (m + 1) * cfg.pool_size)
                pools.append(([categories[i] for i in sorted(subj[span])], [categories[i] for i in sorted(obj[span])]))
        plan.modes[predicate] = [
            _Mode(
                subjects=s,
                objects=o,
                angle=float(rng.uniform(0.0, 2.0 * math.pi)),
                distance=float(rng.uniform(0.15, 0.3)),
                size_ratio=float(math.exp(rng.uniform(-0.7, 0.7))),
            )
            for s, o in pools
        ]
    return plan


def _box(cx: float, cy: float, w: float, h: float) -> Tuple[float, float, float, float]:
    x1 = min(max(cx - w / 2, 0.0), 0.98)
    y1 = min(max(cy - h / 2, 0.0), 0.98)
    x2 = min(max(cx + w / 2, x1 + 0.02), 1.0)
    y2 = min(max(cy + h / 2, y1 + 0.02), 1.0)
    return (round(x1, 6), round(y1, 6), round(x2, 6), round(y2, 6))


def generate_synthetic_world(cfg: WorldConfig, seed: int) -> SceneGraphDataset:
    """
    Generate a scene graph corpus whose predicates may have several visual modes.

    Each object category owns a Gaussian appearance centroid. Each predicate mode
    ties a subject-category pool, an object-category pool and a spatial layout
    together; modes of one predicate use disjoint pools, so a predicate with two
    modes has two visually unrelated realizations. Ground-truth mode ids are kept
    in ``dataset.diagnostics`` only.
    """
    if cfg.noise < 0 or cfg.separation < 0:
        raise ConfigurationError("separation and noise must be non-negative")
    if cfg.n_images < 1 or cfg.triplets_per_image < 1:
        raise ConfigurationError("a world needs at least one image and one triplet per image")
    rng = np.random.default_rng(seed)
    plan = _plan_world(cfg, rng)

    directions = rng.normal(size=(cfg.n_categories, cfg.appearance_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centroids = {c: directions[i] * cfg.separation for i, c in enumerate(plan.categories)}

    weights = np.exp(-cfg.frequency_decay * np.arange(cfg.n_predicates))
    weights /= weights.sum()

    def appearance(category: str) -> Tuple[float, ...]:
        vec = centroids[category] + cfg.noise * rng.normal(size=cfg.appearance_dim)
        return tuple(round(float(v), 6) for v in vec)

    images: List[SceneGraphImage] = []
    mode_ids: Dict[str, int] = {}
    for index in range(cfg.n_images):
        image_id = f"img_{index:05d}"
        objects: List[ObjectInstance] = []
        relations: List[RelationTriplet] = []
        for t in range(cfg.triplets_per_image):
            predicate = plan.predicates[int(rng.choice(cfg.n_predicates, p=weights))]
            modes = plan.modes[predicate]
            m = int(rng.integers(len(modes)))
            mode = modes[m]
            s_cat = mode.subjects[int(rng.integers(len(mode.subjects)))]
            o_cat = mode.objects[int(rng.integers(len(mode.objects)))]

            sw, sh = rng.uniform(0.12, 0.25, size=2)
            scx, scy = rng.uniform(0.25, 0.75, size=2)
            jitter = cfg.layout_jitter * rng.normal(size=2)
            ocx = scx + mode.distance * math.cos(mode.angle) + jitter[0]
            ocy = scy + mode.distance * math.sin(mode.angle) + jitter[1]

            s_id, o_id = len(objects), len(objects) + 1
            objects.append(ObjectInstance(id=s_id, category=s_cat, bbox=_box(scx, scy, sw, sh), appearance=appearance(s_cat)))
            objects.append(
                ObjectInstance(
                    id=o_id, category=o_cat,
                    bbox=_box(ocx, ocy, sw * mode.size_ratio, sh * mode.size_ratio),
                    appearance=appearance(o_cat),
                )
            )
            relations.append(RelationTriplet(subject_id=s_id, predicate=predicate, object_id=o_id))
            mode_ids[f"{image_id}/{t}"] = m

        for _ in range(cfg.distractors_per_image):
            category = plan.categories[int(rng.integers(cfg.n_categories))]
            w, h = rng.uniform(0.08, 0.25, size=2)
            cx, cy = rng.uniform(0.1, 0.9, size=2)
            objects.append(ObjectInstance(id=len(objects), category=category, bbox=_box(cx, cy, w, h), appearance=appearance(category)))

        images.append(SceneGraphImage(id=image_id, objects=tuple(objects), relations=tuple(relations)))

    diagnostics = {
        "seed": seed,
        "config": cfg.model_dump(mode="json"),
        "modes": mode_ids,
        "mode_pools": {
            p: [{"subjects": m.subjects, "objects": m.objects} for m in plan.modes[p]] for p in plan.predicates
        },
    }
    logger.info(f"Generated synthetic world: {cfg.n_images} images, {len(mode_ids)} triplets")
    return SceneGraphDataset(plan.categories, plan.predicates, images, diagnostics=diagnostics)
