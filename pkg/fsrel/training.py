# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Losses, a single episodic optimization step and the training loop.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from fsrel.checkpoint import save_checkpoint
from fsrel.errors import ContractViolation, NumericalAbort, VocabularyError
from fsrel.model import DistanceTable, PairFeatures, RelationModel
from fsrel.models import ExperimentConfig
from fsrel.sgdata import Episode, EpisodeSampler, SceneGraphDataset, SplitSpec
from fsrel.utils import JsonLinesWriter, PathLike, read_json_lines, write_json

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-8


###############################################################################
# Losses
###############################################################################


def relation_loss(distances: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over negated distances, mean over queries."""
    if distances.dim() != 2 or distances.shape[1] == 0:
        raise ContractViolation("every query needs at least one candidate distance")
    return F.cross_entropy(-distances, targets)


def kl_loss(y_hat: torch.Tensor, y_pro: torch.Tensor, eps: float = KL_EPSILON) -> torch.Tensor:
    """KL(y_hat || y_pro) summed over candidates, mean over queries; y_hat is a fixed target."""
    if y_hat.shape != y_pro.shape:
        raise ContractViolation(f"distribution shapes differ: {tuple(y_hat.shape)} vs {tuple(y_pro.shape)}")
    target = y_hat.detach()
    terms = target * (torch.log(target.clamp_min(eps)) - torch.log(y_pro.clamp_min(eps)))
    return terms.sum(-1).mean()


def object_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise VocabularyError(f"object label outside the {n_classes} known categories")
    return F.cross_entropy(logits, labels)


###############################################################################
# Episode scoring
###############################################################################


@dataclass
class EpisodeScores:
    candidates: Tuple[str, ...]
    table: DistanceTable
    targets: torch.Tensor
    y_hat: torch.Tensor
    y_pro: Optional[torch.Tensor]


@dataclass
class LossReport:
    step: int
    L_rel: float
    L_kl: float
    L_obj: float
    L_total: float
    grad_norm: float = 0.0
    grad_norms: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> Dict[str, float]:
        return {
            "step": self.step,
            "L_rel": self.L_rel,
            "L_kl": self.L_kl,
            "L_obj": self.L_obj,
            "L_total": self.L_total,
            "grad_norm": self.grad_norm,
        }


def score_episode(model: RelationModel, dataset: SceneGraphDataset, episode: Episode) -> EpisodeScores:
    supports = {
        r: model.prepare_support(dataset, r, episode.supports[r]) for r in episode.categories
    }
    queries: PairFeatures = model.encode_refs(
        dataset, [(q.image_id, q.subject_id, q.object_id) for q in episode.queries]
    )
    table = model.distances(queries, supports)
    column = {c: i for i, c in enumerate(table.candidates)}
    targets = torch.tensor([column[q.label] for q in episode.queries], dtype=torch.long)
    return EpisodeScores(table.candidates, table, targets, table.probabilities(), table.prototype_probabilities())


def episode_loss(
    model: RelationModel,
    dataset: SceneGraphDataset,
    episode: Episode,
    use_kl: bool = True,
    use_obj: bool = True,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], EpisodeScores]:
    """Total loss of one episode and its parts, without touching the optimizer."""
    scores = score_episode(model, dataset, episode)
    zero = torch.zeros((), dtype=model.dtype)
    l_rel = relation_loss(scores.table.distances, scores.targets)
    l_kl = kl_loss(scores.y_hat, scores.y_pro) if use_kl and scores.y_pro is not None else zero
    l_obj = zero
    if use_obj:
        logits, labels = [], []
        for image_id in episode.image_ids():
            image = dataset.image(image_id)
            logits.append(model.object_logits(image))
            labels.append(model.table.category_ids(obj.category for obj in image.objects))
        l_obj = object_loss(torch.cat(logits), torch.cat(labels))
    total = l_rel + l_kl + l_obj
    return total, {"L_rel": l_rel, "L_kl": l_kl, "L_obj": l_obj}, scores


def _dump_episode(episode: Episode, dump_dir: Optional[PathLike], step: int, parts: Dict[str, float]) -> Optional[Path]:
    if dump_dir is None:
        return None
    return write_json(Path(dump_dir) / f"nonfinite_step_{step:06d}.json", {"step": step, "losses": parts, "episode": episode.to_payload()})


def train_step(
    episode: Episode,
    model: RelationModel,
    optimizer: torch.optim.Optimizer,
    dataset: SceneGraphDataset,
    step: int = 0,
    use_kl: bool = True,
    use_obj: bool = True,
    dump_dir: Optional[PathLike] = None,
) -> LossReport:
    model.train()
    optimizer.zero_grad()
    total, parts, _ = episode_loss(model, dataset, episode, use_kl, use_obj)
    values = {name: value.detach().item() for name, value in parts.items()}
    total_value = total.detach().item()
    if not math.isfinite(total_value):
        path = _dump_episode(episode, dump_dir, step, values)
        logger.error(f"Non-finite loss at step {step}: {values}")
        raise NumericalAbort(f"non-finite loss at step {step}", dump_path=path)

    total.backward()
    grad_norms: Dict[str, float] = {}
    squared = 0.0
    for group, params in model.parameter_groups().items():
        norm_sq = sum(p.grad.pow(2).sum().item() for p in params if p.grad is not None)
        grad_norms[group] = math.sqrt(norm_sq)
        squared += norm_sq
    optimizer.step()

    return LossReport(
        step=step,
        L_rel=values["L_rel"],
        L_kl=values["L_kl"],
        L_obj=values["L_obj"],
        L_total=total_value,
        grad_norm=math.sqrt(squared),
        grad_norms=grad_norms,
    )


###############################################################################
# Loop
###############################################################################


def make_optimizer(model: RelationModel, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr)


class Trainer:
    """
    Episodic training over the base predicates.

    Episodes come from a numpy generator seeded with ``seeds.train_seed``; label
    embeddings of the metric learner are refreshed every ``label_refresh_every`` steps.
    """

    def __init__(
        self,
        model: RelationModel,
        dataset: SceneGraphDataset,
        split: SplitSpec,
        config: ExperimentConfig,
        out_dir: Optional[PathLike] = None,
    ):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.sampler = EpisodeSampler(dataset, split, config.episode)
        self.optimizer = make_optimizer(model, config.training.lr)
        self.rng = np.random.default_rng(config.seeds.train_seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step = 0

    def restore(self, step: int, optimizer_state: Optional[dict], rng_state: Optional[dict]) -> None:
        self.step = step
        if optimizer_state:
            self.optimizer.load_state_dict(optimizer_state)
        if rng_state:
            self.rng.bit_generator.state = rng_state

    def checkpoint(self, path: PathLike) -> Path:
        return save_checkpoint(
            self.model,
            path,
            step=self.step,
            optimizer=self.optimizer,
            rng_state=self.rng.bit_generator.state,
        )

    def _open_log(self, path: Path) -> JsonLinesWriter:
        """Open the training log, keeping the records a resumed run already wrote."""
        earlier = []
        if self.step > 0 and path.exists():
            earlier = [r for r in read_json_lines(path) if r.get("step", self.step) < self.step]
            logger.info(f"Resuming {path.name} with {len(earlier)} earlier records")
        log = JsonLinesWriter(path)
        log.write_all(earlier)
        return log

    def run(self, steps: Optional[int] = None) -> List[LossReport]:
        cfg = self.config.training
        steps = cfg.steps if steps is None else steps
        reports: List[LossReport] = []
        log: Optional[JsonLinesWriter] = None
        if self.out_dir is not None:
            log = self._open_log(self.out_dir / "train_log.jsonl")
        try:
            for _ in range(steps):
                if self.step % cfg.label_refresh_every == 0:
                    self.model.label_embedder.invalidate()
                episode = self.sampler.sample(self.rng)
                report = train_step(
                    episode,
                    self.model,
                    self.optimizer,
                    self.dataset,
                    step=self.step,
                    use_kl=cfg.use_kl,
                    use_obj=cfg.use_obj,
                    dump_dir=self.out_dir,
                )
                self.step += 1
                reports.append(report)
                if log is not None:
                    log.write(report.to_record())
                if self.step % cfg.log_every == 0:
                    logger.info(
                        f"step {self.step}: L_total={report.L_total:.4f} L_rel={report.L_rel:.4f} "
                        f"L_kl={report.L_kl:.4f} L_obj={report.L_obj:.4f}"
                    )
                if self.out_dir is not None and self.step % cfg.checkpoint_every == 0:
                    self.checkpoint(self.out_dir / "checkpoint.bin")
        finally:
            if log is not None:
                log.close()
        if self.out_dir is not None:
            self.checkpoint(self.out_dir / "checkpoint.bin")
        self.model.label_embedder.invalidate()
        return reports
