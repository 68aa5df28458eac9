import numpy as np

from ..schemas import Tensor, TrainConfig


class AdamState:
    def __init__(self):
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    state: AdamState,
    t: int,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-7,
) -> dict[str, Tensor]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    return params


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = AdamState()
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]) -> dict[str, Tensor]:
        self.t += 1
        return adam_step(
            params,
            grads,
            self.state,
            self.t,
            learning_rate=self.cfg.learning_rate,
            beta1=self.cfg.beta1,
            beta2=self.cfg.beta2,
            epsilon=self.cfg.epsilon,
        )
