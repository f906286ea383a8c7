"""Adam, the early-stopped training loop and the finite-difference gradient checker."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .data import Splits
from .evaluation import compute_ranks, hit_rate_at_k, ndcg_at_k
from .model import BSARec, ConfigError, ModelConfig, batch_loss

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Loss or gradient became non-finite; ``record`` holds the partial run."""

    def __init__(self, message: str, record: "RunRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError(f"invalid training config: {self}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ConfigError(f"invalid Adam settings: {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


@torch.no_grad()
def adam_step(params, grads, state: AdamState, config: TrainConfig, nonnegative=()) -> AdamState:
    """One bias-corrected Adam update in place.

    ``nonnegative`` holds indices of parameters projected onto ``[0, inf)``
    after the update.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, g in enumerate(grads):
        if g is not None and not bool(torch.isfinite(g).all()):
            raise TrainingDivergence(f"non-finite gradient in parameter {i} at step {state.step + 1}")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if config.weight_decay:
            g = g + config.weight_decay * p
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(config.adam_epsilon)
        p.addcdiv_(m, denom, value=-config.learning_rate / bc1)
    for i in nonnegative:
        params[i].clamp_(min=0.0)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a model's parameters."""

    def __init__(self, model: BSARec, config: TrainConfig):
        self.params = [p for p in model.parameters() if p.requires_grad]
        beta_ids = {id(b) for b in model.rescaler_betas()}
        self.nonnegative = [i for i, p in enumerate(self.params) if id(p) in beta_ids]
        self.config = config
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.config, self.nonnegative)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_ndcg10: float
    valid_hr1: float
    wall_time: float


@dataclass
class RunRecord:
    seed: int
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_ndcg10: float = -math.inf
    stopped: str = ""

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"seed": self.seed, **asdict(e)}) + "\n" for e in self.epochs)


@dataclass
class TrainResult:
    model: BSARec
    record: RunRecord


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def train(splits: Splits, model_config: ModelConfig, train_config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train until validation NDCG@10 stalls for ``patience`` epochs; return the best model."""
    if len(splits.train) == 0:
        raise ValueError("training split is empty")
    if model_config.num_items != splits.num_items or model_config.max_len != splits.max_len:
        raise ConfigError("model config does not match splits (num_items/max_len)")
    set_seed(train_config.seed)
    model = BSARec(model_config)
    optimizer = Adam(model, train_config)
    shuffle_rng = np.random.default_rng(train_config.seed)
    record = RunRecord(seed=train_config.seed)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    data = splits.train
    started = time.perf_counter()
    for epoch in range(train_config.max_epochs):
        model.train()
        order = shuffle_rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            inputs = torch.from_numpy(data.inputs[idx])
            targets = torch.from_numpy(data.targets[idx])
            mask = torch.from_numpy(data.mask[idx])
            loss = batch_loss(model, inputs, targets, mask)
            if not math.isfinite(loss.item()):
                record.stopped = "diverged"
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", record)
            optimizer.zero_grad()
            loss.backward()
            try:
                optimizer.step()
            except TrainingDivergence as exc:
                record.stopped = "diverged"
                exc.record = record
                raise
            total += loss.item() * len(idx)
            count += len(idx)
        ranks = compute_ranks(model, splits.valid)
        ep = EpochRecord(
            epoch=epoch,
            train_loss=total / count,
            valid_ndcg10=ndcg_at_k(ranks, 10),
            valid_hr1=hit_rate_at_k(ranks, 1),
            wall_time=time.perf_counter() - started,
        )
        record.epochs.append(ep)
        logger.info("epoch %d loss %.4f valid NDCG@10 %.4f", epoch, ep.train_loss, ep.valid_ndcg10)
        if on_epoch is not None:
            on_epoch(ep)
        if ep.valid_ndcg10 > record.best_valid_ndcg10:
            record.best_valid_ndcg10 = ep.valid_ndcg10
            record.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                record.stopped = "early_stop"
                break
    else:
        record.stopped = "max_epochs"
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, record)


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradientCheckReport:
    backend: str
    group_errors: dict
    max_relative_error: float
    parameters_checked: int
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error <= tol


def _toy_batch(config: ModelConfig, rng: np.random.Generator, batch: int = 3):
    from .data import make_window

    inputs, targets, masks = [], [], []
    for b in range(batch):
        n = int(rng.integers(2, config.max_len + 2))
        seq = rng.integers(1, config.num_items + 1, size=n).tolist()
        win, tgt, mask = make_window(seq[:-1], seq[1:], config.max_len, config.padding)
        inputs.append(win)
        targets.append(tgt)
        masks.append(mask)
    return (torch.tensor(inputs), torch.tensor(targets), torch.tensor(masks))


def gradient_check(model_config: ModelConfig, seed: int = 0, step: float = 1e-5, norm_floor: float = 1e-5) -> GradientCheckReport:
    """Compare autograd gradients with central finite differences in float64.

    Error per parameter tensor is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||, norm_floor)``; the
    floor covers tensors whose gradient vanishes identically (attention key
    biases shift every score of a query equally).
    """
    started = time.perf_counter()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = BSARec(model_config).double().eval()
    with torch.no_grad():
        # larger weights than training init so every nonlinearity is exercised
        for name, p in model.named_parameters():
            if name.endswith("beta"):
                p.copy_(torch.from_numpy(rng.uniform(0.2, 2.0, size=p.shape)))
            else:
                p.add_(torch.from_numpy(rng.normal(0.0, 0.3, size=p.shape)))
    inputs, targets, mask = _toy_batch(model_config, rng)

    def loss_fn() -> torch.Tensor:
        return batch_loss(model, inputs, targets, mask)

    model.zero_grad()
    loss_fn().backward()
    errors = {}
    checked = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone()
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            checked += flat.numel()
            scale = max(analytic.norm().item(), numeric.norm().item(), norm_floor)
            errors[name] = (analytic - numeric).norm().item() / scale
    return GradientCheckReport(
        backend=model_config.backend.value,
        group_errors=errors,
        max_relative_error=max(errors.values()),
        parameters_checked=checked,
        seconds=time.perf_counter() - started,
    )
