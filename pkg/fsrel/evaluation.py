# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
K-shot evaluation: score every ordered object pair of the test images against
the support set of each evaluated predicate, then compute graph-constrained
mean recall per split.
"""

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import torch
from pydantic import BaseModel

from fsrel import config
from fsrel.errors import ProtocolError
from fsrel.model import RelationModel, SupportSet
from fsrel.models import Task
from fsrel.sgdata import SceneGraphDataset, SceneGraphImage, SplitSpec, SupportIndex, TripletRef
from fsrel.utils import JsonLinesWriter, PathLike

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TripletPrediction:
    image_id: str
    subject_id: int
    subject_label: str
    object_id: int
    object_label: str
    predicate: str
    score: float

    @property
    def pair(self) -> Tuple[int, int]:
        return (self.subject_id, self.object_id)


@dataclass(frozen=True)
class GroundTruthTriplet:
    image_id: str
    subject_id: int
    subject_label: str
    object_id: int
    object_label: str
    predicate: str


class EvalReport(BaseModel):
    task: Task
    K: int
    graph_constraint: bool = True
    joint_softmax: bool = True
    support_seed: Optional[int] = None
    base: Dict[str, Optional[float]]
    novel: Dict[str, Optional[float]]
    per_predicate: Dict[str, Dict[str, float]]
    evaluated_categories: Dict[str, int]
    skipped_predicates: List[str] = []


###############################################################################
# Scoring
###############################################################################


class SupportScorer:
    """
    Support sets built once per predicate from a SupportIndex.

    Prompts and every other weight are frozen for the lifetime of the scorer.
    """

    def __init__(
        self,
        model: RelationModel,
        dataset: SceneGraphDataset,
        support_index: SupportIndex,
        predicates: Sequence[str],
    ):
        self.model = model
        self.dataset = dataset
        self.predicates = list(predicates)
        model.eval()
        self.supports: Dict[str, SupportSet] = {}
        with torch.no_grad():
            for predicate in self.predicates:
                if predicate not in support_index.entries:
                    raise ProtocolError(f"no support bank for predicate {predicate}")
                self.supports[predicate] = model.prepare_support(dataset, predicate, support_index.refs(predicate))
            # fill the label cache before worker threads read it
            model.label_embedder.similarity_matrix()


def score_image(image: SceneGraphImage, scorer: SupportScorer, task: Task = "PredCls") -> List[TripletPrediction]:
    """
    Score every ordered pair of ``image`` against every predicate of the scorer.

    Scores are a softmax over the predicates plus background with background
    dropped, so a row sums to less than one.
    """
    pairs = image.ordered_pairs()
    if not pairs:
        return []
    model = scorer.model
    with torch.no_grad():
        if task == "SGCls":
            labels = model.predict_labels(image)
        else:
            labels = {obj.id: obj.category for obj in image.objects}
        features = model.pair_features(image, pairs, labels)
        table = model.distances(features, scorer.supports)
        probabilities = table.probabilities()[:, : len(scorer.supports)].tolist()

    predictions = []
    for (s, o), row in zip(pairs, probabilities):
        for predicate, score in zip(table.candidates, row):
            predictions.append(TripletPrediction(image.id, s, labels[s], o, labels[o], predicate, score))
    return predictions


###############################################################################
# Mean recall
###############################################################################


def ground_truth(
    dataset: SceneGraphDataset,
    image_ids: Iterable[str],
    flagged: Set[TripletRef],
    predicates: Optional[Iterable[str]] = None,
) -> List[GroundTruthTriplet]:
    """Annotated triplets of the given images, support triplets excluded."""
    keep = set(predicates) if predicates is not None else None
    triplets = []
    for ref, rel in dataset.iter_triplets(image_ids):
        if ref in flagged or (keep is not None and rel.predicate not in keep):
            continue
        image = dataset.image(ref.image)
        triplets.append(
            GroundTruthTriplet(
                ref.image,
                rel.subject_id,
                image.object(rel.subject_id).category,
                rel.object_id,
                image.object(rel.object_id).category,
                rel.predicate,
            )
        )
    return triplets


def rank_predictions(
    predictions: Iterable[TripletPrediction],
    predicate_order: Dict[str, int],
    graph_constraint: bool = True,
) -> Dict[str, List[TripletPrediction]]:
    """Per image ranking: score descending, then predicate id, then pair."""
    by_image: Dict[str, List[TripletPrediction]] = defaultdict(list)
    for pred in predictions:
        by_image[pred.image_id].append(pred)

    def key(p: TripletPrediction):
        return (-p.score, predicate_order[p.predicate], p.pair)

    ranked = {}
    for image_id, preds in by_image.items():
        if graph_constraint:
            best: Dict[Tuple[int, int], TripletPrediction] = {}
            for p in preds:
                if p.pair not in best or key(p) < key(best[p.pair]):
                    best[p.pair] = p
            preds = list(best.values())
        ranked[image_id] = sorted(preds, key=key)
    return ranked


def mean_recall(
    predictions: Iterable[TripletPrediction],
    gt: Sequence[GroundTruthTriplet],
    recall_at: Sequence[int],
    split_predicates: Iterable[str],
    predicate_order: Dict[str, int],
) -> Tuple[Dict[str, Optional[float]], Dict[str, Dict[str, float]]]:
    """
    Graph-constrained mean recall over the split's predicates.

    Returns the ``mR@K`` block (values are ``None`` when the split has no ground
    truth at all) and per-predicate ``R@K`` for predicates with ground truth.
    """
    split = set(split_predicates)
    cutoffs = sorted(recall_at)
    ranked = rank_predictions(predictions, predicate_order)
    top = {
        k: {
            image_id: {(p.subject_id, p.subject_label, p.object_id, p.object_label, p.predicate) for p in preds[:k]}
            for image_id, preds in ranked.items()
        }
        for k in cutoffs
    }

    totals: Dict[str, int] = defaultdict(int)
    hits: Dict[str, Dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for t in gt:
        if t.predicate not in split:
            continue
        totals[t.predicate] += 1
        key = (t.subject_id, t.subject_label, t.object_id, t.object_label, t.predicate)
        for k in cutoffs:
            if key in top[k].get(t.image_id, ()):
                hits[t.predicate][k] += 1

    per_predicate = {
        r: {f"R@{k}": hits[r][k] / totals[r] for k in cutoffs}
        for r in sorted(totals, key=predicate_order.__getitem__)
    }
    if not per_predicate:
        return {f"mR@{k}": None for k in cutoffs}, {}
    block = {
        f"mR@{k}": sum(v[f"R@{k}"] for v in per_predicate.values()) / len(per_predicate) for k in cutoffs
    }
    return block, per_predicate


###############################################################################
# Protocol
###############################################################################


def evaluate(
    dataset: SceneGraphDataset,
    split: SplitSpec,
    support_index: SupportIndex,
    model: RelationModel,
    task: Task = "PredCls",
    recall_at: Sequence[int] = (20, 50, 100),
    support_seed: Optional[int] = None,
    workers: Optional[int] = None,
    predictions_path: Optional[PathLike] = None,
    exclude: Iterable[TripletRef] = (),
) -> EvalReport:
    """
    Score the evaluation pool and report mR@K for base and novel predicates.

    Support triplets never count as ground truth; ``exclude`` drops further
    triplets, so runs at several K can share one ground truth.
    """
    order = dataset.predicate_index
    evaluated = [
        r for r in sorted(split.predicates, key=order.__getitem__) if r in support_index.entries
    ]
    skipped = sorted(split.predicates - set(evaluated), key=order.__getitem__)
    if skipped:
        logger.warning(f"Predicates without supports are not evaluated: {skipped}")
    if not evaluated:
        raise ProtocolError("no predicate of the split has a support set")

    scorer = SupportScorer(model, dataset, support_index, evaluated)
    images = [dataset.image(i) for i in split.eval_pool(dataset)]
    workers = workers or config.NUM_WORKERS
    logger.info(f"Scoring {len(images)} images for {len(evaluated)} predicates ({task}, K={support_index.shots})")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_image = list(pool.map(lambda image: score_image(image, scorer, task), images))
    predictions = [p for preds in per_image for p in preds]

    if predictions_path is not None:
        with JsonLinesWriter(predictions_path) as writer:
            writer.write_all(asdict(p) for p in predictions)

    flagged = set(support_index.flagged()) | set(exclude)
    gt = ground_truth(dataset, [i.id for i in images], flagged, evaluated)
    base, base_per = mean_recall(predictions, gt, recall_at, split.base_predicates & set(evaluated), order)
    novel, novel_per = mean_recall(predictions, gt, recall_at, split.novel_predicates & set(evaluated), order)

    return EvalReport(
        task=task,
        K=support_index.shots,
        support_seed=support_seed,
        base=base,
        novel=novel,
        per_predicate={**base_per, **novel_per},
        evaluated_categories={"base": len(base_per), "novel": len(novel_per)},
        skipped_predicates=skipped,
    )
