"""Experiment orchestration: stream construction, session training, evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, write_config
from .datagen import (PRESETS, Sample, Task, TaskStream, augment_batch, generate_dataset,
                      load_folder_dataset, split_protocol)
from .evaluation import (SessionMatrix, accuracy_metric, embed_gallery, forgetting_metric,
                         nearest_neighbors, relative_drop, session_eval)
from .models import ModelState, expand_classifier, init_model
from .optim import OptimizerState, sgd_momentum_step
from .reports import emit_reports
from .strategies import (Batch, EwCState, MemoryBuffer, StrategyConfig, buffer_update,
                         ewc_update_after_session, replay_batch, session_loss)

log = logging.getLogger(__name__)

# independent random streams derived from the run seed
_STREAM_INIT, _STREAM_TRAIN, _STREAM_CLASSIFIER, _STREAM_BUFFER, _STREAM_QUERIES = range(5)


@dataclass
class RunRecord:
    config: dict
    matrix: list[list[float]]
    metrics: dict
    session_overall: list[float] = field(default_factory=list)
    session_losses: list[list[float]] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    buffer_sizes: list[int] = field(default_factory=list)
    neighbors: list[dict] = field(default_factory=list)

    @property
    def output_dir(self) -> str:
        return self.config["output_dir"]

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def load_dataset(name: str, cfg: ExperimentConfig) -> list[Sample]:
    """A synthetic preset by name, otherwise a PPM folder path."""
    d = cfg.data
    if name in PRESETS:
        return generate_dataset(seed=cfg.seed, n_categories=d.n_categories,
                                instances_per_category=d.instances_per_category,
                                views_per_instance=d.views_per_instance,
                                image_size=d.image_size, gallery_fraction=d.gallery_fraction,
                                preset=name)
    return load_folder_dataset(name, gallery_fraction=d.gallery_fraction)


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    dataset = load_dataset(cfg.dataset, cfg)
    if not dataset:
        raise ValueError(f"dataset {cfg.dataset!r} is empty")
    shape = dataset[0].image.shape
    if shape != cfg.encoder.input_shape:
        raise ValueError(f"dataset images are {shape} but the encoder expects {cfg.encoder.input_shape}")
    p = cfg.protocol
    return split_protocol(dataset, p.n_tasks, p.categories_per_task, p.instance_subtasks)


def trainable(model: ModelState, supervision: str) -> dict:
    """Parameters that receive gradients under a supervision mode."""
    skip = "projector." if supervision == "label" else "classifier."
    return {k: v for k, v in model.params.items() if not k.startswith(skip)}


def train_session(model: ModelState, task: Task, labels: np.ndarray | None,
                  strategy: StrategyConfig, ewc_state: EwCState | None,
                  buffer: MemoryBuffer | None, rng: np.random.Generator) -> list[float]:
    """Train on one task for ``epochs_per_session`` epochs; returns mean loss per epoch."""
    hyper = strategy.hyper
    images = task.images()
    n = len(images)
    opt = OptimizerState(momentum=hyper.momentum, base_lr=hyper.base_lr, min_lr=hyper.min_lr,
                         total_epochs=max(1, hyper.epochs_per_session))
    params = trainable(model, strategy.supervision)
    use_memory = strategy.method == "replay" and buffer is not None and len(buffer) > 0
    losses = []
    for epoch in range(hyper.epochs_per_session):
        opt.epoch = epoch
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need two rows
            x = images[idx]
            batch = Batch(x, augment_batch(x, rng), None if labels is None else labels[idx])
            memory = None
            if use_memory:
                mx, my = replay_batch(buffer, len(idx), rng)
                memory = Batch(mx, augment_batch(mx, rng), my)
            model.zero_grad()
            with T.Tape():
                loss = session_loss(model, batch, strategy, ewc_state, memory)
                T.backward(loss)
            sgd_momentum_step(params, opt)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    return losses


def _neighbor_dump(index, gallery, n_queries: int, seed: int) -> list[dict]:
    rng = np.random.default_rng([seed, _STREAM_QUERIES])
    rows = np.sort(rng.choice(len(index), size=min(n_queries, len(index)), replace=False))
    dumps = []
    for r in rows:
        nb, dist = nearest_neighbors(index, int(r), 5)
        dumps.append({
            "row": int(r), "instance": gallery[r].instance_id, "view": gallery[r].view_id,
            "neighbors": [{"row": int(j), "instance": gallery[j].instance_id,
                           "view": gallery[j].view_id, "distance": float(d)}
                          for j, d in zip(nb, dist)],
        })
    return dumps


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunRecord:
    """Train the configured strategy over the task stream and evaluate after each session."""
    strategy = cfg.strategy_config()
    stream = build_stream(cfg)
    foreign = None
    if cfg.cross_dataset:
        foreign = [s for s in load_dataset(cfg.cross_dataset, cfg) if s.split == "gallery"]
        if not foreign:
            raise ValueError(f"cross dataset {cfg.cross_dataset!r} has no gallery samples")
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out / "config.json")

    model = init_model(cfg.encoder, np.random.default_rng([cfg.seed, _STREAM_INIT]))
    train_rng = np.random.default_rng([cfg.seed, _STREAM_TRAIN])
    cls_rng = np.random.default_rng([cfg.seed, _STREAM_CLASSIFIER])
    ewc_state = EwCState() if strategy.method == "ewc" else None
    buffer = MemoryBuffer.for_supervision(strategy.supervision) if strategy.method == "replay" else None
    label_map: dict[int, int] = {}

    n_tasks = len(stream)
    matrix = SessionMatrix(n_tasks)
    record = RunRecord(config=cfg.to_dict(), matrix=[], metrics={})
    cross_accs = []
    for s, task in enumerate(stream.tasks):
        t0 = time.perf_counter()
        labels = None
        if strategy.label:
            new = [i for i in task.instance_ids if i not in label_map]
            for i in new:
                label_map[i] = len(label_map)
            if new:
                expand_classifier(model, len(new), cls_rng)
            labels = np.array([label_map[i] for i in task.instance_labels()], dtype=np.int64)
        losses = train_session(model, task, labels, strategy, ewc_state, buffer, train_rng)

        if ewc_state is not None:
            ewc_state = ewc_update_after_session(model, task.images(), labels, strategy.supervision)
        if buffer is not None and strategy.memory_fraction > 0:
            buffer_update(buffer, task.images(), labels, task.index, strategy.memory_fraction,
                          [cfg.seed, _STREAM_BUFFER, s])

        index = embed_gallery(model, stream.gallery, stream.gallery_task_ids)
        col = session_eval(index, n_tasks, cfg.protocol.k_nn)
        matrix.append(col.per_task)
        record.session_overall.append(col.overall)
        record.session_losses.append(losses)
        if foreign is not None:
            cross_accs.append(session_eval(embed_gallery(model, foreign), 1, cfg.protocol.k_nn).overall)
        record.buffer_sizes.append(0 if buffer is None else len(buffer))
        if write and cfg.save_checkpoints:
            ck = out / "checkpoints" / f"session_{s:02d}.ckpt"
            extra = {"session": s, "buffer_size": record.buffer_sizes[-1],
                     "label_instance_ids": sorted(label_map, key=label_map.get) or [-1]}
            save_checkpoint(model, ewc_state if ewc_state is not None else buffer, ck, extra)
            ck.with_suffix(".json").write_text(json.dumps(
                {"session": s, "task": task.index, "buffer_size": record.buffer_sizes[-1],
                 "num_instances": model.num_instances, "method": strategy.method,
                 "supervision": strategy.supervision}, indent=2, sort_keys=True) + "\n")
            record.checkpoints.append(str(ck))
        record.wall_clock.append(time.perf_counter() - t0)
        log.info("%s session %d/%d: overall %.4f (%.1fs)", cfg.tag, s + 1, n_tasks,
                 col.overall, record.wall_clock[-1])

    a = matrix.to_array()
    record.matrix = a.tolist()
    acc = accuracy_metric(a)
    record.metrics = {"Acc": acc, "For": forgetting_metric(a) if a.shape[1] >= 2 else 0.0}
    if cross_accs:
        cross_acc = float(np.mean(cross_accs))
        record.metrics["cross"] = {"train_on": _short(cfg.dataset), "test_on": _short(cfg.cross_dataset),
                                   "Acc": cross_acc,
                                   "drop_pct": relative_drop(acc, cross_acc) if acc > 0 else None}
    record.neighbors = _neighbor_dump(index, stream.gallery, cfg.protocol.neighbor_queries, cfg.seed)
    if write:
        emit_reports(record, out)
        record.save(out / "record.json")
    return record


def _short(name: str) -> str:
    return name if name in PRESETS else Path(name).name
