"""Build a full training run from one flat config, and drive it."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

import seqforge.criterions  # noqa: F401  (registers built-ins)
import seqforge.models.transformer  # noqa: F401
import seqforge.optim  # noqa: F401
import seqforge.tasks  # noqa: F401
from seqforge import checkpoint
from seqforge.checkpoint import TrainState
from seqforge.data import Dictionary, EpochIterator
from seqforge.distributed.scaler import LossScaler
from seqforge.distributed.trainer import StepLog, Trainer
from seqforge.generation import GenConfig
from seqforge.numerics.half import DType
from seqforge.numerics.rng import RngStream
from seqforge.registry import DEFAULT, REGISTRY, USER, Config, ConfigError, Scalar, _coerce
from seqforge.tasks import TranslationTask

logger = logging.getLogger(__name__)

COMPONENT_KEYS = {
    "arch": "tiny_transformer",
    "task": "translation",
    "criterion": "cross_entropy",
    "optimizer": "adam",
    "scheduler": "inverse_sqrt",
}

TRAINER_DEFAULTS: dict[str, Scalar] = {
    "seed": 1,
    "workers": 1,
    "accum": 1,
    "fp16": False,
    "threads": False,
    "max_steps": 1000,
    "max_epochs": 100,
    "save_interval": 100,
    "save_dir": "checkpoints",
    "bucket_threshold": 2**14,
    "init_scale": 2.0**7,
    "scale_window": 256,
    "min_scale": 2.0**-5,
    "max_scale": 2.0**15,
}

GENERATION_DEFAULTS: dict[str, Scalar] = {
    "beam": 4,
    "lenpen": 0.6,
    "diverse_groups": 1,
    "diverse_strength": 0.5,
    "sampling": False,
    "topk": 1,
    "temperature": 1.0,
    "max_len": 0,  # 0: 2 * source length + 8
    "nbest": 1,
}


def resolve_training_config(user: Optional[Mapping[str, Scalar]] = None) -> Config:
    """Merge component defaults, architecture overrides and user values.

    Unknown keys are rejected with their names.
    """
    user = dict(user or {})
    names = {k: str(user.get(k, v)) for k, v in COMPONENT_KEYS.items()}
    cfg = Config()
    for k in COMPONENT_KEYS:
        cfg.set(k, names[k], USER if k in user else DEFAULT)
    for table in (TRAINER_DEFAULTS, GENERATION_DEFAULTS):
        for k, v in table.items():
            cfg.set(k, v, DEFAULT)
    declared = dict(TRAINER_DEFAULTS) | GENERATION_DEFAULTS
    parts = [REGISTRY.resolve_architecture(names["arch"])]
    for ns in ("task", "criterion", "optimizer", "scheduler"):
        parts.append(REGISTRY.resolve(ns, names[ns]))
    for part in parts:
        for k in part.keys():
            cfg.set(k, part[k], part.provenance[k])
            declared[k] = part[k]
    unknown = sorted(set(user) - set(declared) - set(COMPONENT_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {unknown}")
    for k, v in user.items():
        if k in COMPONENT_KEYS:
            continue
        cfg.set(k, _coerce(v, declared[k]), USER)
    return cfg


def _sub_config(cfg: Config, namespace: str, name: str) -> Config:
    keys = REGISTRY.lookup(namespace, name).defaults
    out = Config()
    for k in keys:
        out.set(k, cfg[k], cfg.provenance[k])
    return out


def gen_config(cfg: Config) -> GenConfig:
    return GenConfig(
        beam=int(cfg["beam"]),
        lenpen=float(cfg["lenpen"]),
        max_len=int(cfg["max_len"]),
        groups=int(cfg["diverse_groups"]),
        strength=float(cfg["diverse_strength"]),
        k=int(cfg["topk"]),
        temperature=float(cfg["temperature"]),
        max_tokens=int(cfg["max_tokens"]),
    )


def model_config(cfg: Config) -> Config:
    arch = REGISTRY.architecture(cfg["arch"])
    return _sub_config(cfg, "model", arch.model)


class TrainingSession:
    """Owns the task, model, criterion, optimizer, scheduler and trainer."""

    def __init__(self, config: Config, task: Optional[TranslationTask] = None):
        self.config = config
        c = config
        self.task = task if task is not None else REGISTRY.instantiate(
            "task", c["task"], _sub_config(c, "task", c["task"]), seed=c["seed"]
        )
        arch = REGISTRY.architecture(c["arch"])
        self.model = REGISTRY.instantiate(
            "model", arch.model, model_config(c),
            src_vocab=len(self.task.src_dict), tgt_vocab=len(self.task.tgt_dict), seed=c["seed"],
        )
        self.criterion = REGISTRY.instantiate("criterion", c["criterion"], _sub_config(c, "criterion", c["criterion"]))
        optimizer = REGISTRY.instantiate(
            "optimizer", c["optimizer"], _sub_config(c, "optimizer", c["optimizer"]), num_params=self.model.num_params()
        )
        scheduler = REGISTRY.instantiate("scheduler", c["scheduler"], _sub_config(c, "scheduler", c["scheduler"]))
        scaler = None
        if c["fp16"]:
            scaler = LossScaler(c["init_scale"], c["scale_window"], c["min_scale"], c["max_scale"])
        self.trainer = Trainer(
            self.model, self.criterion, optimizer, scheduler,
            workers=c["workers"], accum=c["accum"], fp16=c["fp16"], scaler=scaler,
            bucket_threshold=c["bucket_threshold"], threads=c["threads"],
        )
        self.iterator = EpochIterator(self.task.plan())
        self.rng = {"dropout": RngStream(c["seed"], 0)}

    @property
    def step(self) -> int:
        return self.trainer.step

    @property
    def epoch(self) -> int:
        return self.iterator.upcoming_epoch

    def next_sub_batches(self):
        W, A = self.trainer.workers, self.trainer.accum
        members = self.iterator.take(W * A)
        return [[self.task.collate(members[r * A + a]) for a in range(A)] for r in range(W)]

    def train_step(self, grad_hook=None) -> StepLog:
        return self.trainer.train_step(self.next_sub_batches(), grad_hook)

    def run(self, steps: int, on_step: Optional[Callable[[StepLog], None]] = None) -> list[StepLog]:
        logs = []
        for _ in range(steps):
            log = self.train_step()
            logs.append(log)
            if on_step:
                on_step(log)
        return logs

    def params(self) -> np.ndarray:
        return self.trainer.master.copy()

    def evaluate(self, split: str = "valid") -> dict:
        return self.task.evaluate(self.trainer.model, split)

    def inference_model(self, fp16: bool = False):
        m = self.model.clone(DType.FP16E if fp16 else DType.FP32)
        m.load_flat(self.trainer.master)
        return m

    # -- checkpoint state -------------------------------------------------
    def state(self) -> TrainState:
        sd = self.trainer.state_dict()
        opt = dict(sd["optimizer"])
        opt["name"] = self.config["optimizer"]
        return TrainState(
            config=self.config.copy(),
            manifest=[(n, s) for n, s, _ in self.model.manifest()],
            params=sd["params"],
            optimizer=opt,
            scheduler=sd["scheduler"],
            scaler=sd["scaler"],
            step=sd["step"],
            cursor=self.iterator.cursor,
            rng={k: r.state() for k, r in self.rng.items()},
            dictionaries={"src": self.task.src_dict.to_lines(), "tgt": self.task.tgt_dict.to_lines()},
        )

    def restore(self, state: TrainState) -> None:
        names = [n for n, _, _ in self.model.manifest()]
        if names != [n for n, _ in state.manifest]:
            raise checkpoint.IntegrityError("checkpoint parameters do not match the model's canonical layout")
        self.trainer.load_state_dict(
            {
                "params": state.params,
                "optimizer": state.optimizer,
                "scheduler": state.scheduler,
                "scaler": state.scaler,
                "step": state.step,
            }
        )
        self.iterator = EpochIterator(self.task.plan(), *state.cursor)
        for k, (seed, stream, counter) in state.rng.items():
            self.rng[k] = RngStream(seed, stream, counter)

    def save(self, path) -> Path:
        checkpoint.save(self.state(), path)
        return Path(path)

    @classmethod
    def from_checkpoint(cls, path, task: Optional[TranslationTask] = None) -> TrainingSession:
        state = checkpoint.load(path)
        session = cls(state.config, task)
        session.restore(state)
        return session


def load_inference_model(path, fp16: bool = False):
    """(model, src_dict, tgt_dict, state) from a checkpoint, without any corpus."""
    state = checkpoint.load(path)
    cfg = state.config
    src = Dictionary.from_lines(state.dictionaries["src"])
    tgt = Dictionary.from_lines(state.dictionaries["tgt"])
    arch = REGISTRY.architecture(cfg["arch"])
    model = REGISTRY.instantiate(
        "model", arch.model, model_config(cfg), src_vocab=len(src), tgt_vocab=len(tgt), seed=cfg["seed"],
        dtype=DType.FP16E if fp16 else DType.FP32,
    )
    model.load_flat(state.params)
    return model, src, tgt, state
