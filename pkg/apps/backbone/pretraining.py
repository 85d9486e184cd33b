import logging
from dataclasses import asdict, dataclass

import numpy as np

from apps.numeric.optim import build_optimizer, clip_grad_norm
from apps.numeric.seeding import BATCHES, substream
from apps.numeric.tensor import add, backward, cross_entropy, multiply, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainSpec:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    grad_clip_max_norm: float = 1.0
    optimizer: str = "adam"
    heldout_fraction: float = 0.1
    max_heldout: int = 64
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class PretrainReport:
    model: object
    steps: int
    initial_heldout_loss: float
    final_heldout_loss: float


def next_token_loss(model, tokens):
    """Mean cross-entropy of predicting tokens[t + 1] from tokens[: t + 1]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logits, _ = model(tokens)
    targets = np.append(tokens[1:], 0)
    ignore = np.zeros(len(tokens), dtype=bool)
    ignore[-1] = True
    return cross_entropy(logits, targets, ignore)


def heldout_loss(model, streams):
    was_training = model.training
    model.eval()
    with no_grad():
        losses = [next_token_loss(model, s).item() for s in streams]
    model.train(was_training)
    return float(np.mean(losses))


def split_corpus(corpus, spec):
    streams = [list(s) for s in corpus if len(s) >= 2]
    if not streams:
        raise ValueError("pre-training corpus has no stream of two or more tokens")
    n_heldout = min(spec.max_heldout, max(1, int(len(streams) * spec.heldout_fraction)))
    if len(streams) == 1:
        return streams, streams
    return streams[:-n_heldout], streams[-n_heldout:]


def pretrain(model, corpus, spec, on_step=None):
    """
    Next-token pre-training of a single tower on ``corpus`` (token streams).
    The last ``heldout_fraction`` of the corpus is held out and scored before
    and after training.
    """
    train, heldout = split_corpus(corpus, spec)
    initial = heldout_loss(model, heldout)
    logger.info(f"Pre-training {spec.steps} steps on {len(train)} streams, initial held-out loss {initial:.4f}")

    if spec.steps == 0:
        return PretrainReport(model, 0, initial, initial)

    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    optimizer = build_optimizer(spec.optimizer, named, spec.learning_rate)
    rng = substream(spec.seed, BATCHES)
    model.train()
    for step in range(1, spec.steps + 1):
        batch = rng.integers(0, len(train), size=spec.batch_size)
        optimizer.zero_grad()
        loss = None
        for index in batch:
            term = next_token_loss(model, train[index])
            loss = term if loss is None else add(loss, term)
        loss = multiply(loss, 1.0 / len(batch))
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite pre-training loss at step {step}")
        backward(loss)
        grad_norm = clip_grad_norm(optimizer.params, spec.grad_clip_max_norm)
        optimizer.step()
        if on_step is not None:
            on_step(step=step, loss=value, grad_norm=grad_norm, learning_rate=optimizer.learning_rate)
        if step % 100 == 0:
            logger.info(f"pretrain step {step}: loss {value:.4f}")

    final = heldout_loss(model, heldout)
    logger.info(f"Pre-training finished, held-out loss {initial:.4f} -> {final:.4f}")
    return PretrainReport(model, spec.steps, initial, final)
