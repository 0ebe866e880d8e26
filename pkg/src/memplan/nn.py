"""Small fully-connected networks in numpy with hand-written backprop."""

from __future__ import annotations

import numpy as np


class MLP:
    """Stack of affine layers with ReLU between them (linear output)."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, bias_init: float = 0.01):
        self.sizes = [int(s) for s in sizes]
        self.params: list[np.ndarray] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
            # a small positive bias keeps rows with a dead previous layer off the ReLU kink
            self.params.append(np.full(n_out, bias_init))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        h = x
        for k in range(self.n_layers):
            w, b = self.params[2 * k], self.params[2 * k + 1]
            cache.append(h)
            h = h @ w + b
            if k < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        grads = [None] * len(self.params)
        g = grad_out
        for k in reversed(range(self.n_layers)):
            h_in = cache[k]
            w = self.params[2 * k]
            grads[2 * k] = h_in.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ w.T
            if k > 0:
                g = g * (cache[k] > 0)
        return grads, g


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-2, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p -= self.lr * b


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGDMomentum(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def flatten(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
