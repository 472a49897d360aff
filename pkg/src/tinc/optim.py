"""Optimizer (decoupled weight decay + adaptive moments) and LR schedule."""

import numpy as np

from tinc.errors import DivergenceError, ValidationError


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """Linear warmup to base_lr, then a cosine decay to zero.

    Continuous at the warmup junction and non-increasing afterward.
    """
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValidationError(
            f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def init_adam_state(params):
    return {
        "t": 0,
        "m": [np.zeros_like(p) for p in params],
        "v": [np.zeros_like(p) for p in params],
    }


def optimizer_step(params, grads, state, lr, weight_decay,
                   betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay adaptive-moment update, in place.

    Weight decay scales the parameters directly (p -= lr*wd*p) and never
    enters the moment estimates.
    """
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"divergence detected at step {t}: "
                                  f"non-finite gradient for parameter {i}")
        if weight_decay != 0.0:
            p -= lr * weight_decay * p
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class AdamW:
    """Stateful wrapper binding optimizer_step to a parameter list."""

    def __init__(self, parameters, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.parameters = list(parameters)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = init_adam_state([p.value for p in self.parameters])

    def step(self, lr):
        optimizer_step([p.value for p in self.parameters],
                       [p.grad for p in self.parameters],
                       self.state, lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self):
        for p in self.parameters:
            p.grad[...] = 0.0

    def state_tensors(self):
        out = {"adam.t": np.array([self.state["t"]], dtype=np.int64)}
        for i, p in enumerate(self.parameters):
            out[f"adam.m.{p.name}"] = self.state["m"][i]
            out[f"adam.v.{p.name}"] = self.state["v"][i]
        return out

    def load_state_tensors(self, tensors):
        self.state["t"] = int(tensors["adam.t"][0])
        for i, p in enumerate(self.parameters):
            self.state["m"][i] = tensors[f"adam.m.{p.name}"].copy()
            self.state["v"][i] = tensors[f"adam.v.{p.name}"].copy()
