"""Losses with analytic gradients.

All losses are batch means so loss weights do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndcore import MLP, ShapeError, logsumexp_rows, sample_standard_normal, softmax_rows


@dataclass
class LossValue:
    total: float
    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.components.items())


@dataclass
class NoiseSpec:
    alpha: float
    rng: np.random.Generator

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"noise strength must be >= 0, got {self.alpha}")


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes: min {labels.min()}, max {labels.max()}")
    return labels


def kl_to_standard_normal(mu: np.ndarray, log_variance: np.ndarray) -> float:
    """Mean over rows of KL(N(mu, exp(log_variance)) || N(0, I))."""
    if mu.shape != log_variance.shape:
        raise ShapeError(f"mu {mu.shape} vs log_variance {log_variance.shape}")
    per_row = 0.5 * (mu * mu + np.exp(log_variance) - 1.0 - log_variance).sum(axis=1)
    return float(per_row.mean())


def kl_grad(mu: np.ndarray, log_variance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = mu.shape[0]
    return mu / n, 0.5 * (np.exp(log_variance) - 1.0) / n


def reconstruction_loss(target: np.ndarray, output: np.ndarray) -> float:
    """Mean squared error over every entry."""
    if target.shape != output.shape:
        raise ShapeError(f"target {target.shape} vs output {output.shape}")
    d = output - target
    return float((d * d).mean())


def reconstruction_grad(target: np.ndarray, output: np.ndarray) -> np.ndarray:
    """Gradient with respect to ``output`` (negate it for ``target``)."""
    return 2.0 * (output - target) / output.size


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    labels = _check_labels(labels, logits.shape[1])
    n = logits.shape[0]
    lse = logsumexp_rows(logits)
    value = float((lse - logits[np.arange(n), labels]).mean())
    g = softmax_rows(logits)
    g[np.arange(n), labels] -= 1.0
    return value, g / n


def cce_loss(features: np.ndarray, weights: np.ndarray, labels) -> tuple[LossValue, dict[str, np.ndarray]]:
    """Dot-product softmax cross-entropy; ``weights`` holds one column per class."""
    if features.shape[1] != weights.shape[0]:
        raise ShapeError(f"features {features.shape} vs class matrix {weights.shape}")
    value, dlogits = softmax_cross_entropy(features @ weights, labels)
    grads = {"features": dlogits @ weights.T, "weights": features.T @ dlogits}
    return LossValue(value, {"cls": value}), grads


def gaussian_similarity(h: np.ndarray, w: np.ndarray, gamma: float) -> float:
    d = np.asarray(h, dtype=np.float64) - np.asarray(w, dtype=np.float64)
    return float(-gamma * (d @ d))


def _squared_distances(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - weights.T[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def gaussian_similarity_loss(features: np.ndarray, weights: np.ndarray, labels, gamma: float
                             ) -> tuple[LossValue, dict[str, np.ndarray]]:
    """Cross-entropy with the dot product replaced by ``-gamma * ||h - w_k||^2``."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if features.shape[1] != weights.shape[0]:
        raise ShapeError(f"features {features.shape} vs class matrix {weights.shape}")
    labels = _check_labels(labels, weights.shape[1])
    n = features.shape[0]
    sim = -gamma * _squared_distances(features, weights)
    lse = logsumexp_rows(sim)
    value = float((lse - sim[np.arange(n), labels]).mean())
    # d loss / d sim, already divided by n
    r = softmax_rows(sim)
    r[np.arange(n), labels] -= 1.0
    r /= n
    g_features = 2.0 * gamma * (r @ weights.T)
    g_weights = 2.0 * gamma * (features.T @ r - weights * r.sum(axis=0))
    return LossValue(value, {"gaussian": value}), {"features": g_features, "weights": g_weights}


def classification_loss(inputs: np.ndarray, classifier: MLP, labels, name: str = "cls"
                        ) -> tuple[LossValue, list[np.ndarray], np.ndarray]:
    """Cross-entropy of ``classifier(inputs)``; returns (loss, param grads, input grad)."""
    if inputs.shape[1] != classifier.in_dim:
        raise ShapeError(f"inputs {inputs.shape} vs classifier input width {classifier.in_dim}")
    logits, cache = classifier.forward(inputs)
    value, dlogits = softmax_cross_entropy(logits, labels)
    grads, g_in = classifier.backward(cache, dlogits)
    return LossValue(value, {name: value}), grads, g_in


def classification_loss_projected(projected: np.ndarray, classifier: MLP, labels):
    return classification_loss(projected, classifier, labels, "cls")


def classification_loss_reconstructed(reconstructed: np.ndarray, classifier: MLP, labels):
    return classification_loss(reconstructed, classifier, labels, "cls_prime")


def inject_noise(x: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """``x + alpha * eps`` with fresh standard-normal ``eps``; ``x`` is not modified."""
    eps = sample_standard_normal(spec.rng, *x.shape)
    if spec.alpha == 0:
        return x.copy()
    return x + spec.alpha * eps


def joint_objective(model, x: np.ndarray, attributes: np.ndarray, labels, lambda_cls: float,
                    lambda_cls_prime: float, alpha: float, rng: np.random.Generator | None = None,
                    latent_eps: np.ndarray | None = None, target_eps: np.ndarray | None = None,
                    ) -> tuple[LossValue, dict[str, list[np.ndarray]]]:
    """CVAE loss on noisy projected targets plus weighted classification losses.

    ``x`` are raw features; they pass through the frozen fine-tune map first.
    ``labels`` index the model's seen classes. Noise comes from ``rng`` unless
    ``latent_eps`` / ``target_eps`` are given explicitly.
    Returns the loss and gradients keyed by network name.
    """
    if lambda_cls < 0 or lambda_cls_prime < 0:
        raise ValueError(f"loss weights must be >= 0, got {lambda_cls}, {lambda_cls_prime}")
    if alpha < 0:
        raise ValueError(f"noise strength must be >= 0, got {alpha}")
    n = x.shape[0]
    h = model.finetune(x)
    if model.use_projection:
        projected, m_cache = model.mapping.forward(h)
    else:
        projected = h

    enc_out, e_cache = model.encoder.forward(h)
    mu, log_var = model.split_latent(enc_out)
    if latent_eps is None:
        latent_eps = sample_standard_normal(rng, n, model.d_z)
    if target_eps is None:
        target_eps = sample_standard_normal(rng, n, model.d_p)
    std = np.exp(0.5 * log_var)
    z = mu + std * latent_eps
    recon, g_cache = model.decoder.forward(np.hstack([z, attributes]))
    target = projected + alpha * target_eps if alpha != 0 else projected

    rec = reconstruction_loss(target, recon)
    kl = kl_to_standard_normal(mu, log_var)
    cls, c_grads, g_proj_cls = classification_loss_projected(projected, model.classifier, labels)
    cls_p, cp_grads, g_recon_cls = classification_loss_reconstructed(recon, model.classifier, labels)

    weights = {"reconstruction": 1.0, "kl": 1.0, "cls": lambda_cls, "cls_prime": lambda_cls_prime}
    comps = {"reconstruction": rec, "kl": kl, "cls": cls.total, "cls_prime": cls_p.total}
    total = rec + kl + lambda_cls * cls.total + lambda_cls_prime * cls_p.total
    loss = LossValue(total, comps, weights)

    g_recon = reconstruction_grad(target, recon) + lambda_cls_prime * g_recon_cls
    dec_grads, g_dec_in = model.decoder.backward(g_cache, g_recon)
    g_z = g_dec_in[:, :model.d_z]
    d_mu, d_lv = kl_grad(mu, log_var)
    d_mu = d_mu + g_z
    d_lv = d_lv + g_z * latent_eps * 0.5 * std
    enc_grads, _ = model.encoder.backward(e_cache, np.hstack([d_mu, d_lv]))

    cls_grads = [lambda_cls * a + lambda_cls_prime * b for a, b in zip(c_grads, cp_grads)]
    grads = {"encoder": enc_grads, "decoder": dec_grads, "classifier": cls_grads}
    if model.use_projection:
        g_proj = -reconstruction_grad(target, recon) + lambda_cls * g_proj_cls
        grads["mapping"], _ = model.mapping.backward(m_cache, g_proj)
    return loss, grads
