import logging

import numpy as np

logger = logging.getLogger(__name__)


def global_grad_norm(params):
    squares = [float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None]
    return float(np.sqrt(sum(squares)))


def clip_grad_norm(params, max_norm):
    """
    Rescale every gradient by ``max_norm / norm`` when the global norm exceeds
    ``max_norm``. Returns the norm measured before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class Optimizer:
    kind = None

    def __init__(self, named_params, learning_rate):
        if learning_rate < 0:
            raise ValueError(f"learning rate must be non-negative, got {learning_rate}")
        self.named_params = list(named_params)
        self.learning_rate = learning_rate
        self.step_count = 0
        self.slots = {name: self._init_slots(p) for name, p in self.named_params}

    @property
    def params(self):
        return [p for _, p in self.named_params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        for name, p in self.named_params:
            if p.grad is None:
                continue
            self._update(p, self.slots[name])

    def _init_slots(self, p):
        raise NotImplementedError

    def _update(self, p, slots):
        raise NotImplementedError

    def state_dict(self):
        return {
            "kind": self.kind,
            "learning_rate": self.learning_rate,
            "step": self.step_count,
            "slots": {
                name: {key: value.copy() for key, value in slots.items()}
                for name, slots in self.slots.items()
            },
        }

    def load_state_dict(self, state):
        if state["kind"] != self.kind:
            raise ValueError(f"optimizer state is for {state['kind']}, not {self.kind}")
        self.learning_rate = state["learning_rate"]
        self.step_count = state["step"]
        for name, slots in state["slots"].items():
            if name not in self.slots:
                raise KeyError(f"optimizer state names unknown parameter {name}")
            for key, value in slots.items():
                self.slots[name][key][...] = value


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, named_params, learning_rate, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        super().__init__(named_params, learning_rate)

    def _init_slots(self, p):
        return {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def _update(self, p, slots):
        m, v, g = slots["m"], slots["v"], p.grad
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** self.step_count)
        v_hat = v / (1 - self.beta2 ** self.step_count)
        p.data -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


class Adafactor(Optimizer):
    """
    Factored second-moment optimizer without a first moment. Matrices keep one
    row and one column accumulator; vectors keep a full accumulator. Updates
    are clipped to an RMS of ``clip_threshold``.
    """

    kind = "adafactor"

    def __init__(self, named_params, learning_rate, decay=0.99, eps=1e-30, clip_threshold=1.0):
        self.decay = decay
        self.eps = eps
        self.clip_threshold = clip_threshold
        super().__init__(named_params, learning_rate)

    def _init_slots(self, p):
        if p.data.ndim == 2:
            return {"row": np.zeros(p.shape[0], dtype=p.dtype), "col": np.zeros(p.shape[1], dtype=p.dtype)}
        return {"v": np.zeros_like(p.data)}

    def _update(self, p, slots):
        g = p.grad
        g2 = g * g + self.eps
        if "row" in slots:
            slots["row"] *= self.decay
            slots["row"] += (1 - self.decay) * g2.mean(axis=1)
            slots["col"] *= self.decay
            slots["col"] += (1 - self.decay) * g2.mean(axis=0)
            v = np.outer(slots["row"], slots["col"]) / slots["row"].mean()
        else:
            slots["v"] *= self.decay
            slots["v"] += (1 - self.decay) * g2
            v = slots["v"]
        correction = 1 - self.decay ** self.step_count
        update = g / np.sqrt(v / correction)
        rms = float(np.sqrt(np.mean(np.square(update))))
        update /= max(1.0, rms / self.clip_threshold)
        p.data -= (self.learning_rate * update).astype(p.dtype)


OPTIMIZERS = {
    Adam.kind: Adam,
    Adafactor.kind: Adafactor,
}


def build_optimizer(kind, named_params, learning_rate):
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    return OPTIMIZERS[kind](named_params, learning_rate)
