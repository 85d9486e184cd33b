import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from rest_framework.renderers import JSONRenderer

from apps.numeric.module import Dropout
from apps.numeric.optim import build_optimizer, clip_grad_norm
from apps.numeric.tensor import backward

from .examples import ExampleSampler
from .objectives import ALL_TOKENS, LOSS_SCOPES, mean_of
from .serializers import MetricsRecordSerializer

logger = logging.getLogger(__name__)

LEARNING_RATE_GRID = (5e-5, 1e-4, 5e-4, 1e-3)


class TrainingDivergedError(FloatingPointError):

    def __init__(self, step, value):
        super().__init__(f"non-finite training value {value} at step {step}")
        self.step = step
        self.value = value


class LrSearchError(RuntimeError):
    """Raised when every learning-rate candidate diverged."""


@dataclass(frozen=True)
class TrainSpec:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    grad_clip_max_norm: float = 1.0
    task_mix: tuple = (1.0, 1.0)
    loss_scope: str = ALL_TOKENS
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "task_mix", tuple(float(x) for x in self.task_mix))
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be non-negative and batch_size positive")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ValueError(f"unknown loss scope {self.loss_scope!r}")

    def to_dict(self):
        data = asdict(self)
        data["task_mix"] = list(self.task_mix)
        return data


class MetricsLog:
    """Line-delimited JSON records: phase, step, loss, grad_norm, learning_rate."""

    def __init__(self, path, phase="finetune"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.phase = phase
        self.renderer = JSONRenderer()

    def write(self, step, loss, grad_norm, learning_rate):
        data = MetricsRecordSerializer(
            {"phase": self.phase, "step": step, "loss": loss, "grad_norm": grad_norm, "learning_rate": learning_rate}
        ).data
        with self.path.open("ab") as fh:
            fh.write(self.renderer.render(data) + b"\n")

    __call__ = write


def dropout_generators(model):
    """Distinct dropout generators of ``model`` in a fixed order."""
    seen, generators = set(), []
    for module in model.modules():
        if isinstance(module, Dropout) and id(module.rng) not in seen:
            seen.add(id(module.rng))
            generators.append(module.rng)
    return generators


class Trainer:
    """
    Owns one objective (zipped model or single decoder), its optimizer and the
    seeded example stream.
    """

    def __init__(self, objective, spec, pairs=None, metrics_log=None):
        self.objective = objective
        self.spec = spec
        self.named_params = objective.parameters()
        self.optimizer = build_optimizer(spec.optimizer, self.named_params, spec.learning_rate)
        self.sampler = ExampleSampler(pairs, spec.task_mix, spec.seed) if pairs else None
        self.metrics_log = metrics_log
        self.step = 0
        self.losses = []

    @property
    def model(self):
        return self.objective.model

    def train_step(self, batch):
        """One update on ``batch``; returns the pre-update loss."""
        if not batch:
            raise ValueError("train_step needs a non-empty batch")
        step = self.step + 1
        self.optimizer.zero_grad()
        terms = [self.objective.loss(seq, self.spec.loss_scope, train_mode=True) for seq in batch]
        terms = [t for t in terms if t is not None]
        if not terms:
            raise ValueError("no position in the batch is scored under the loss scope")
        loss = mean_of(terms)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        backward(loss)
        grad_norm = clip_grad_norm(self.optimizer.params, self.spec.grad_clip_max_norm)
        if not math.isfinite(grad_norm):
            raise TrainingDivergedError(step, grad_norm)
        self.optimizer.step()
        self.step = step
        self.losses.append(value)
        if self.metrics_log is not None:
            self.metrics_log(step=step, loss=value, grad_norm=grad_norm, learning_rate=self.optimizer.learning_rate)
        if self.spec.log_every and step % self.spec.log_every == 0:
            logger.info(f"step {step}: loss {value:.4f} grad_norm {grad_norm:.3f}")
        return value

    def fit(self, steps=None, on_checkpoint=None):
        """Run until ``steps`` (default ``spec.steps``) updates have been made in total."""
        if self.sampler is None:
            raise ValueError("trainer was built without pairs to sample from")
        target = self.spec.steps if steps is None else steps
        while self.step < target:
            self.train_step(self.sampler.next_batch(self.spec.batch_size))
            every = self.spec.checkpoint_every
            if on_checkpoint is not None and every and self.step % every == 0:
                on_checkpoint(self)
        self.model.eval()
        return self.losses

    def state_dict(self):
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "sampler": self.sampler.state() if self.sampler is not None else None,
            "dropout": [g.bit_generator.state for g in dropout_generators(self.model)],
        }

    def load_state_dict(self, state):
        self.step = state["step"]
        self.optimizer.load_state_dict(state["optimizer"])
        if self.sampler is not None and state.get("sampler") is not None:
            self.sampler.set_state(state["sampler"])
        for generator, generator_state in zip(dropout_generators(self.model), state.get("dropout", [])):
            generator.bit_generator.state = generator_state


def moving_average(values, window=20):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values
    return np.convolve(values, np.ones(window) / window, mode="valid")


### LEARNING-RATE SEARCH

@dataclass
class LrSearchResult:
    best_learning_rate: float
    scores: dict


def geometric_mean_wer(clean, other):
    if not (math.isfinite(clean) and math.isfinite(other)):
        return math.inf
    return math.sqrt(clean * other)


def lr_search(candidates, evaluate):
    """
    ``evaluate(lr)`` returns validation (clean WER, other WER). The candidate
    with the lowest geometric mean wins; ties go to the larger learning rate.
    A candidate whose training diverges scores infinity.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("lr_search needs at least one candidate")
    scores = {}
    for lr in candidates:
        try:
            clean, other = evaluate(lr)
            scores[lr] = geometric_mean_wer(clean, other)
        except TrainingDivergedError as e:
            logger.info(f"learning rate {lr} diverged at step {e.step}")
            scores[lr] = math.inf
        logger.info(f"learning rate {lr}: geometric-mean WER {scores[lr]}")
    finite = {lr: s for lr, s in scores.items() if math.isfinite(s)}
    if not finite:
        raise LrSearchError(f"all {len(candidates)} learning-rate candidates diverged")
    best = min(finite.items(), key=lambda item: (item[1], -item[0]))[0]
    return LrSearchResult(best, scores)
