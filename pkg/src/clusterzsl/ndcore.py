"""Dense kernels, seeded sampling, sequential MLPs with reverse-mode gradients, Adam.

Everything trains in float64. Matrices are plain ``numpy.ndarray`` objects of
shape ``(rows, cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("linear", "relu", "leaky-relu", "sigmoid")


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(int(seed))
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(n)]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sample_standard_normal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"sample shape must be positive, got ({rows}, {cols})")
    return rng.standard_normal((rows, cols))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "linear":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "leaky-relu":
        return np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    if name == "sigmoid":
        return sigmoid(pre)
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def activation_grad(name: str, pre: np.ndarray, post: np.ndarray, grad_post: np.ndarray) -> np.ndarray:
    if name == "linear":
        return grad_post
    if name == "relu":
        return grad_post * (pre > 0)
    if name == "leaky-relu":
        return grad_post * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return grad_post * post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ForwardCache:
    owner: int
    shapes: tuple
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


class MLP:
    """Sequential stack of affine layers ``y = act(x @ W + b)``.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; ``biases[i]`` has shape
    ``(fan_out,)``. Parameters are exposed as a flat list so an optimizer can
    update them in place.
    """

    def __init__(self, sizes: list[int], activations: list[str], rng: np.random.Generator | None = None):
        if len(activations) != len(sizes) - 1:
            raise ShapeError(f"{len(sizes) - 1} layers need {len(sizes) - 1} activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; expected one of {ACTIVATIONS}")
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = glorot_uniform(rng, fan_in, fan_out) if rng is not None else np.zeros((fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @classmethod
    def from_layers(cls, layers: list[tuple[np.ndarray, np.ndarray]], activations: list[str]) -> "MLP":
        sizes = [layers[0][0].shape[0]] + [w.shape[1] for w, _ in layers]
        for (w, b), fan_in in zip(layers, sizes[:-1]):
            if w.shape[0] != fan_in or b.shape != (w.shape[1],):
                raise ShapeError(f"layer weight {w.shape} / bias {b.shape} does not chain from width {fan_in}")
        net = cls(sizes, activations)
        net.weights = [np.array(w, dtype=np.float64) for w, _ in layers]
        net.biases = [np.array(b, dtype=np.float64) for _, b in layers]
        return net

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP.from_layers([(w.copy(), b.copy()) for w, b in zip(self.weights, self.biases)], self.activations)

    def _shapes(self) -> tuple:
        return tuple(w.shape for w in self.weights)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input {x.shape} does not match network input width {self.in_dim}")
        cache = ForwardCache(owner=id(self), shapes=self._shapes())
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            cache.inputs.append(h)
            pre = matmul(h, w) + b
            h = activate(act, pre)
            cache.pre.append(pre)
            cache.post.append(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ``(grads, grad_input)``; ``grads`` aligns with :meth:`params`."""
        if cache.owner != id(self) or cache.shapes != self._shapes():
            raise ContractError("forward cache was produced by a different network")
        if grad_out.shape != cache.post[-1].shape:
            raise ContractError(f"output gradient {grad_out.shape} does not match output {cache.post[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        g = grad_out
        for i in reversed(range(len(self.weights))):
            g = activation_grad(self.activations[i], cache.pre[i], cache.post[i], g)
            grads[2 * i] = matmul(cache.inputs[i].T, g)
            grads[2 * i + 1] = g.sum(axis=0)
            g = matmul(g, self.weights[i].T)
        return grads, g


def mlp_forward(params: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray, activations: list[str]):
    net = MLP.from_layers(params, activations)
    out, cache = net.forward(x)
    return out, (net, cache)


def mlp_backward(state, grad_out: np.ndarray):
    net, cache = state
    return net.backward(cache, grad_out)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ContractError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
