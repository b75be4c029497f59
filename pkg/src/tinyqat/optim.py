"""AdamW (decoupled weight decay) plus the warmup/cosine learning-rate curve."""

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError


@dataclass
class OptimConfig:
    lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_lr: float = 1e-6
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step, total_steps, cfg):
    """Linear warmup from warmup_lr to lr, then cosine decay to min_lr.

    lr(0) = warmup_lr, lr(warmup_end) = lr, lr(total_steps) = min_lr.
    """
    warmup = int(round(cfg.warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * step / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0), span) / span
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * (1.0 + np.cos(np.pi * progress)) / 2.0


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One AdamW update on a single array; returns (param, m, v).

    Weight decay is decoupled: applied directly to the parameter, not mixed
    into the moment estimates.
    """
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient in optimizer step")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        param = param - lr * weight_decay * param
    return param, m, v


class AdamW:
    """AdamW over named tensors; per-parameter decay controlled by a predicate."""

    def __init__(self, named_params, cfg, decay_filter=None):
        self.cfg = cfg
        self.named_params = list(named_params)
        self.decay_filter = decay_filter if decay_filter is not None else lambda name: True
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = 0

    def zero_grad(self):
        for _name, p in self.named_params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        for name, p in self.named_params:
            if p.grad is None:
                continue
            wd = self.cfg.weight_decay if self.decay_filter(name) else 0.0
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, p.grad, self.m[name], self.v[name], self.t, lr,
                self.cfg.beta1, self.cfg.beta2, self.cfg.eps, wd)
