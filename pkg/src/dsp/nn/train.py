"""Training loop: Adam with L2 penalty, exponential LR decay, weight averaging."""

from __future__ import annotations

import json
import logging
import math
import random
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import torch

from dsp.linearize import CanonPolicy
from dsp.metrics import frame_accuracy
from dsp.nn.decode import greedy_decode
from dsp.nn.model import ModelConfig, PointerGeneratorParser
from dsp.nn.vocab import Example, Vocabulary

logger = logging.getLogger(__name__)


class DivergedLoss(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite training loss in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    emb_dim: int = 64
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    word_dropout: float = 0.1
    lr: float = 2e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    lr_decay: float = 0.98
    swa: bool = True
    swa_fraction: float = 0.25
    clip_norm: float = 5.0
    eval_every: int = 1
    eval_train: bool = False
    target_train_fa: Optional[float] = None
    allow_leaf_intent: bool = False

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.emb_dim, self.hidden, self.layers, self.heads, self.dropout)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        obj = dict(obj)
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    seconds: float
    train_fa: Optional[float] = None
    valid_fa: Optional[float] = None


@dataclass
class TrainResult:
    model: PointerGeneratorParser
    history: list = field(default_factory=list)
    swa_applied: bool = False
    stopped_early: bool = False


def decode_fa(model, examples: Sequence[Example], allow_leaf_intent=False) -> float:
    from dsp.linearize import from_linear

    preds = greedy_decode(model, [ex.source for ex in examples], allow_leaf_intent=allow_leaf_intent)
    golds = [from_linear(ex.target, allow_leaf_intent=True) for ex in examples]
    return frame_accuracy(preds, golds, CanonPolicy())


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer.lower() == "lamb":
        warnings.warn("LAMB is not implemented; falling back to Adam", stacklevel=3)
    elif config.optimizer.lower() != "adam":
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    return torch.optim.Adam(
        params, lr=config.lr, betas=tuple(config.betas), eps=config.eps, weight_decay=config.weight_decay
    )


def train(
    train_set: Sequence[Example],
    config: TrainConfig = TrainConfig(),
    valid_set: Optional[Sequence[Example]] = None,
    vocab: Optional[Vocabulary] = None,
    on_epoch=None,
) -> TrainResult:
    """Fit a parser. Deterministic for a fixed ``config.seed``.

    When ``target_train_fa`` is set, training stops at the first evaluation
    reaching it and the current (not averaged) weights are returned.
    """
    if not train_set:
        raise ValueError("empty training set")
    torch.manual_seed(config.seed)
    vocab = vocab or Vocabulary.build(train_set)
    for ex in train_set:
        vocab.check_target(ex.source, ex.target)
    model = PointerGeneratorParser(vocab, config.model_config())
    opt = _make_optimizer(model.parameters(), config)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.lr_decay)
    order_rng = random.Random(config.seed)
    noise = torch.Generator().manual_seed(config.seed)

    swa_start = config.epochs - max(1, math.ceil(config.swa_fraction * config.epochs))
    swa_state, swa_n = None, 0
    result = TrainResult(model)
    data = list(train_set)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        order = list(range(len(data)))
        order_rng.shuffle(order)
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            batch = [data[j] for j in order[i : i + config.batch_size]]
            nll = model([ex.source for ex in batch], [ex.target for ex in batch],
                        config.word_dropout, noise)
            loss = nll.mean()
            if not torch.isfinite(loss):
                raise DivergedLoss(epoch)
            opt.zero_grad()
            loss.backward()
            if config.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            opt.step()
            total += nll.detach().sum().item()
        lr = opt.param_groups[0]["lr"]
        sched.step()
        rec = EpochRecord(epoch, total / len(data), lr, 0.0)

        if config.swa and epoch >= swa_start:
            current = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if swa_state is None:
                swa_state, swa_n = current, 1
            else:
                swa_n += 1
                for k, v in current.items():
                    if v.is_floating_point():
                        swa_state[k] += (v - swa_state[k]) / swa_n

        last = epoch == config.epochs - 1
        if (epoch + 1) % config.eval_every == 0 or last:
            if config.eval_train or config.target_train_fa is not None:
                rec.train_fa = decode_fa(model, data, config.allow_leaf_intent)
            if valid_set:
                rec.valid_fa = decode_fa(model, valid_set, config.allow_leaf_intent)
        rec.seconds = time.perf_counter() - t0
        result.history.append(rec)
        logger.info("epoch %d loss %.4f lr %.2e train_fa %s valid_fa %s (%.1fs)", epoch, rec.train_loss,
                    lr, rec.train_fa, rec.valid_fa, rec.seconds)
        if on_epoch:
            on_epoch(rec, model)
        if config.target_train_fa is not None and rec.train_fa is not None \
                and rec.train_fa >= config.target_train_fa:
            result.stopped_early = not last
            break

    if swa_state is not None and swa_n > 1 and not result.stopped_early:
        model.load_state_dict(swa_state)
        result.swa_applied = True
        if valid_set:
            result.history[-1].valid_fa = decode_fa(model, valid_set, config.allow_leaf_intent)
    return result

