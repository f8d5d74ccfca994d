# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Command line interface: ``fsrel gen-data|split|support|train|eval|ablate|weights-dump``.

Every command reads one experiment config (``--config``, ``--set key=value``)
and writes its artifacts plus a run manifest under ``--out``.
"""

import functools
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
from pydantic import ValidationError

from fsrel import config
from fsrel.__version__ import __version__
from fsrel.checkpoint import load_checkpoint
from fsrel.errors import ConfigurationError, FsrelError
from fsrel.evaluation import evaluate
from fsrel.metric import support_weights, weight_records
from fsrel.model import build_model
from fsrel.models import ExperimentConfig, RunManifest
from fsrel.sgdata import (
    SceneGraphDataset,
    SplitSpec,
    SupportIndex,
    generate_synthetic_world,
    load_dataset,
    load_split,
    load_support,
    make_split,
    sample_support_sets,
)
from fsrel.training import Trainer
from fsrel.utils import JsonLinesWriter, configure_logging, git_blob_hash, read_json, write_json

logger = logging.getLogger(__name__)

ABLATION_VARIANTS: List[Tuple[str, str]] = [
    ("fixed", "average"),
    ("fixed", "reweight"),
    ("learnable", "average"),
    ("learnable", "reweight"),
]
BASELINE_VARIANT = ("none", "average")


###############################################################################
# Config handling
###############################################################################


def apply_override(raw: Dict[str, Any], item: str) -> None:
    """Apply ``a.b.c=value`` to a raw config dict; the value is parsed as JSON when possible."""
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {item!r} is not of the form key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"override {item!r}: {part} is not a config block")
        node = child
    node[parts[-1]] = parsed


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = read_json(path)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
    for item in overrides:
        apply_override(raw, item)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc


###############################################################################
# Artifacts
###############################################################################


class Workspace:
    """Paths of one run directory plus lazy access to dataset, split and supports."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started_at = datetime.now(timezone.utc)
        self.outputs: Dict[str, str] = {}

    @property
    def dataset_path(self) -> Path:
        return Path(self.cfg.data.path) if self.cfg.data.path else self.out / "dataset.json"

    @property
    def split_path(self) -> Path:
        return self.out / "split.json"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / "checkpoint.bin"

    def support_path(self, shots: int) -> Path:
        return self.out / f"support_K{shots}.json"

    def dataset(self, create: bool = False) -> SceneGraphDataset:
        path = self.dataset_path
        if not path.exists() and create and self.cfg.data.path is None:
            logger.info(f"No dataset at {path}, generating the configured synthetic world")
            self.write_world()
        return load_dataset(path)

    def write_world(self) -> SceneGraphDataset:
        dataset = generate_synthetic_world(self.cfg.data.world, self.cfg.seeds.data_seed)
        self.record("dataset", dataset.save(self.out / "dataset.json"))
        self.record("world", write_json(self.out / "world.json", dataset.diagnostics))
        return dataset

    def split(self, dataset: SceneGraphDataset, create: bool = False) -> SplitSpec:
        if self.split_path.exists():
            return load_split(self.split_path, dataset)
        if not create:
            raise ConfigurationError(f"no split at {self.split_path}; run `fsrel split` first")
        return self.write_split(dataset)

    def write_split(self, dataset: SceneGraphDataset) -> SplitSpec:
        s = self.cfg.split
        split = make_split(dataset, s.n_base, s.n_novel, self.cfg.seeds.split_seed, s.test_fraction, novel=s.novel)
        self.record("split", split.save(self.split_path))
        return split

    def supports(self, dataset: SceneGraphDataset, split: SplitSpec, shots: int) -> SupportIndex:
        path = self.support_path(shots)
        if path.exists():
            return load_support(path, dataset)
        index = sample_support_sets(dataset, split, shots, self.cfg.seeds.support_seed)
        self.record(f"support_K{shots}", index.save(path))
        return index

    def record(self, name: str, path: Path) -> None:
        self.outputs[name] = str(path)

    def finish(self, command: str) -> RunManifest:
        dataset_hash = git_blob_hash(self.dataset_path) if self.dataset_path.exists() else None
        manifest = RunManifest(
            command=command,
            config_hash=self.cfg.config_hash(),
            dataset_hash=dataset_hash,
            started_at=self.started_at,
            finished_at=datetime.now(timezone.utc),
            outputs=self.outputs,
        )
        path = self.out / f"manifest_{command}.json"
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return manifest


def experiment_options(func):
    func = click.option(
        "--out",
        "out_dir",
        envvar="FSREL_OUT_DIR",
        type=click.Path(file_okay=False),
        default=config.OUT_DIR,
        show_default=True,
        help="Run directory for every artifact of the command.",
    )(func)
    func = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override one config field, e.g. --set training.steps=200. Repeatable.",
    )(func)
    func = click.option(
        "--config",
        "config_path",
        envvar="FSREL_CONFIG",
        type=click.Path(dir_okay=False),
        default=None,
        help="Experiment config JSON. Defaults apply to every missing field.",
    )(func)
    return func


def handle_errors(func):
    """Map FsrelError subclasses to their exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except FsrelError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


###############################################################################
# Commands
###############################################################################


@click.group()
@click.version_option(__version__, prog_name="fsrel")
def cli():
    """Few-shot predicate classification with decomposed prototypes."""
    pass


@cli.command("gen-data")
@experiment_options
@handle_errors
def gen_data_command(config_path: Optional[str], overrides: Tuple[str, ...], out_dir: str):
    """Generate a synthetic scene graph world and its metadata sidecar."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    dataset = ws.write_world()
    ws.finish("gen-data")
    click.echo(f"{len(dataset)} images written to {ws.outputs['dataset']}")


@cli.command("split")
@experiment_options
@handle_errors
def split_command(config_path: Optional[str], overrides: Tuple[str, ...], out_dir: str):
    """Frequency-ranked base/novel predicate split and train/test image partition."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    split = ws.write_split(ws.dataset())
    ws.finish("split")
    click.echo(f"{len(split.base_predicates)} base / {len(split.novel_predicates)} novel predicates")


@cli.command("support")
@experiment_options
@click.option("--shots", "-k", type=click.INT, multiple=True, help="Shot counts; defaults to evaluation.shots.")
@handle_errors
def support_command(config_path: Optional[str], overrides: Tuple[str, ...], out_dir: str, shots: Tuple[int, ...]):
    """Sample K-shot support sets from the test images."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    dataset = ws.dataset()
    split = ws.split(dataset)
    for k in shots or cfg.evaluation.shots:
        index = sample_support_sets(dataset, split, k, cfg.seeds.support_seed)
        ws.record(f"support_K{k}", index.save(ws.support_path(k)))
        click.echo(f"K={k}: {len(index.entries)} predicates, {len(index.skipped)} skipped")
    ws.finish("support")


@cli.command("train")
@experiment_options
@click.option("--resume", is_flag=True, default=False, help="Continue from the checkpoint in the run directory.")
@handle_errors
def train_command(config_path: Optional[str], overrides: Tuple[str, ...], out_dir: str, resume: bool):
    """Episodic training on the base predicates."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    dataset = ws.dataset()
    split = ws.split(dataset)

    if resume:
        loaded = load_checkpoint(ws.checkpoint_path, expected=cfg.model)
        trainer = Trainer(loaded.model, dataset, split, cfg, ws.out)
        trainer.restore(loaded.step, loaded.optimizer_state, loaded.rng_state)
        remaining = max(cfg.training.steps - loaded.step, 0)
    else:
        model = build_model(cfg.model, dataset, cfg.seeds.train_seed)
        trainer = Trainer(model, dataset, split, cfg, ws.out)
        remaining = cfg.training.steps

    reports = trainer.run(remaining)
    ws.record("checkpoint", ws.checkpoint_path)
    ws.record("train_log", ws.out / "train_log.jsonl")
    ws.finish("train")
    if reports:
        click.echo(f"trained {trainer.step} steps, final L_total={reports[-1].L_total:.4f}")


@cli.command("eval")
@experiment_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None, help="Defaults to <out>/checkpoint.bin.")
@click.option("--task", type=click.Choice(["PredCls", "SGCls"]), default=None, help="Overrides evaluation.task.")
@click.option("--allow-config-mismatch", is_flag=True, default=False, help="Load a checkpoint written under another model config.")
@click.option("--predictions", is_flag=True, default=False, help="Also dump every scored triplet as JSON lines.")
@handle_errors
def eval_command(
    config_path: Optional[str],
    overrides: Tuple[str, ...],
    out_dir: str,
    checkpoint_path: Optional[str],
    task: Optional[str],
    allow_config_mismatch: bool,
    predictions: bool,
):
    """K-shot mean recall on the base and novel splits."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    dataset = ws.dataset()
    split = ws.split(dataset)
    loaded = load_checkpoint(checkpoint_path or ws.checkpoint_path, cfg.model, allow_config_mismatch)
    task = task or cfg.evaluation.task

    for k in cfg.evaluation.shots:
        index = ws.supports(dataset, split, k)
        report = evaluate(
            dataset,
            split,
            index,
            loaded.model,
            task=task,
            recall_at=cfg.evaluation.recall_at,
            support_seed=cfg.seeds.support_seed,
            predictions_path=ws.out / f"predictions_{task}_K{k}.jsonl" if predictions else None,
        )
        path = write_json(ws.out / f"report_{task}_K{k}.json", report.model_dump(mode="json"))
        ws.record(f"report_{task}_K{k}", path)
        click.echo(f"{task} K={k} base={_format_block(report.base)} novel={_format_block(report.novel)}")
    ws.finish("eval")


def _format_block(block: Dict[str, Optional[float]]) -> str:
    return " ".join(f"{k}={'N/A' if v is None else f'{v:.4f}'}" for k, v in block.items())


def variant_config(cfg: ExperimentConfig, prompt_mode: str, metric_mode: str) -> ExperimentConfig:
    """Copy of ``cfg`` differing only in the two ablation toggles."""
    raw = cfg.normalized()
    raw["model"]["prompt_mode"] = prompt_mode
    raw["model"]["metric_mode"] = metric_mode
    return ExperimentConfig.model_validate(raw)


@cli.command("ablate")
@experiment_options
@click.option("--shots", "-k", type=click.INT, multiple=True, help="Shot counts; defaults to evaluation.shots.")
@click.option("--with-baseline", is_flag=True, default=False, help="Add the prototype-free, average-metric baseline row.")
@handle_errors
def ablate_command(
    config_path: Optional[str],
    overrides: Tuple[str, ...],
    out_dir: str,
    shots: Tuple[int, ...],
    with_baseline: bool,
):
    """Train every {fixed, learnable} x {average, reweight} variant once and evaluate it at each K."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    dataset = ws.dataset(create=True)
    split = ws.split(dataset, create=True)
    shot_counts = sorted(set(shots or cfg.evaluation.shots))
    indexes = {k: ws.supports(dataset, split, k) for k in shot_counts}
    task = cfg.evaluation.task

    variants = ABLATION_VARIANTS + ([BASELINE_VARIANT] if with_baseline else [])
    rows = []
    for prompt_mode, metric_mode in variants:
        name = f"{prompt_mode}+{metric_mode}"
        variant = variant_config(cfg, prompt_mode, metric_mode)
        logger.info(f"Ablation variant {name}")
        model = build_model(variant.model, dataset, variant.seeds.train_seed)
        Trainer(model, dataset, split, variant, ws.out / "ablation" / name).run()
        per_shot: Dict[str, Dict[str, Dict[str, Optional[float]]]] = {}
        for k, index in indexes.items():
            report = evaluate(
                dataset, split, index, model, task=task,
                recall_at=variant.evaluation.recall_at, support_seed=variant.seeds.support_seed,
            )
            per_shot[str(k)] = {"base": report.base, "novel": report.novel}
            click.echo(f"{name:<20} K={k:<3} base {_format_block(report.base)} | novel {_format_block(report.novel)}")
        rows.append({"variant": name, "prompt_mode": prompt_mode, "metric_mode": metric_mode, "shots": per_shot})

    path = write_json(ws.out / "ablation.json", {"task": task, "shots": shot_counts, "rows": rows})
    ws.record("ablation", path)
    ws.finish("ablate")


def parse_query(spec: str) -> Tuple[str, int, int]:
    parts = spec.rsplit(":", 2)
    if len(parts) != 3:
        raise ConfigurationError(f"query {spec!r} is not image:subject:object")
    try:
        return parts[0], int(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigurationError(f"query {spec!r} has non-integer object ids") from None


@cli.command("weights-dump")
@experiment_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None, help="Defaults to <out>/checkpoint.bin.")
@click.option("--shots", "-k", type=click.INT, default=5, show_default=True, help="Support set size.")
@click.option("--query", "queries", multiple=True, metavar="IMAGE:SUBJECT:OBJECT", help="Query pair. Repeatable.")
@click.option("--predicate", default=None, help="Only dump weights against this predicate's supports.")
@click.option("--limit", type=click.INT, default=10, show_default=True, help="Annotated test pairs to dump when no --query is given.")
@handle_errors
def weights_dump_command(
    config_path: Optional[str],
    overrides: Tuple[str, ...],
    out_dir: str,
    checkpoint_path: Optional[str],
    shots: int,
    queries: Tuple[str, ...],
    predicate: Optional[str],
    limit: int,
):
    """Metric-learner support weights for chosen queries, as JSON lines."""
    cfg = load_config(config_path, overrides)
    ws = Workspace(cfg, out_dir)
    dataset = ws.dataset()
    split = ws.split(dataset)
    index = ws.supports(dataset, split, shots)
    model = load_checkpoint(checkpoint_path or ws.checkpoint_path, cfg.model).model

    if predicate is not None and predicate not in index.entries:
        raise ConfigurationError(f"predicate {predicate} has no {shots}-shot support set")

    targets: List[Tuple[Tuple[str, int, int], List[str]]] = []
    if queries:
        predicates = [predicate] if predicate else sorted(index.entries, key=dataset.predicate_index.__getitem__)
        for spec in queries:
            targets.append((parse_query(spec), predicates))
    else:
        flagged = index.flagged()
        for ref, rel in dataset.iter_triplets(split.eval_pool(dataset)):
            if len(targets) >= limit:
                break
            if ref in flagged or rel.predicate not in index.entries:
                continue
            if predicate is not None and rel.predicate != predicate:
                continue
            targets.append(((ref.image, rel.subject_id, rel.object_id), [rel.predicate]))

    records = []
    for (image_id, s, o), predicates in targets:
        image = dataset.image(image_id)
        s_label, o_label = image.object(s).category, image.object(o).category
        for r in predicates:
            support_labels = []
            for ref in index.refs(r):
                rel = dataset.triplet(ref)
                support_image = dataset.image(ref.image)
                support_labels.append(
                    (support_image.object(rel.subject_id).category, support_image.object(rel.object_id).category)
                )
            weights = support_weights((s_label, o_label), support_labels, model.label_embedder)
            records.append(
                {
                    "query": {"image": image_id, "subject": s, "object": o, "subject_label": s_label, "object_label": o_label},
                    "predicate": r,
                    "weights": weight_records(weights),
                }
            )

    path = ws.out / "weights.jsonl"
    with JsonLinesWriter(path) as writer:
        writer.write_all(records)
    ws.record("weights", path)
    ws.finish("weights-dump")
    click.echo(f"{len(records)} weight records written to {path}")


###############################################################################
# Main.


def main() -> None:
    configure_logging(config.LOG_LEVEL, json_output=True if config.LOG_JSON else None)
    cli()


if __name__ == "__main__":
    main()
