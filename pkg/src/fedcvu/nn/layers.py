"""Dense layer primitives with hand-derived backward passes.

Everything operates on 2-D float arrays of shape (batch, features) and
preserves the dtype of its inputs (float32 in training paths, float64 in
test oracles). Forward functions return an opaque cache consumed by the
matching backward function.

Normalization, train mode, batch kind (per feature, over the batch):
    y = gamma * (x - mean_B) / sqrt(var_B + eps) + beta
with running statistics updated as
    run <- (1 - m) * run + m * batch_stat
Eval mode swaps the batch statistics for the running ones. Layer kind
normalizes each sample over its features and keeps no running state.
Variances are biased (ddof=0) throughout.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, DegenerateBatchError, NumericError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

NORM_KINDS = ("batch", "layer")
ACTIVATIONS = ("gelu", "identity")


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    return x * (0.5 * (1.0 + erf(x / _SQRT2)))


def gelu_backward(d_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x), applied to the upstream grad."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return d_out * (cdf + x * pdf)


def activation_forward(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "gelu":
        return gelu(x)
    if kind == "identity":
        return x
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(kind: str, d_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if kind == "gelu":
        return gelu_backward(d_out, x)
    if kind == "identity":
        return d_out
    raise ConfigError(f"unknown activation {kind!r}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean-reduced softmax cross entropy.

    Returns (loss, d_logits) where d_logits already carries the 1/B of the
    mean reduction, i.e. d_logits * B = softmax(logits) - onehot(labels).
    """
    if logits.ndim != 2:
        raise ConfigError("logits must be 2-D (batch, classes)")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ConfigError("labels must be 1-D and match the batch size")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError("labels out of range for the class count")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(b), labels].mean())
    d = np.exp(log_p)
    d[np.arange(b), labels] -= 1.0
    d /= b
    return loss, d.astype(logits.dtype, copy=False)


class NormLayer:
    """Feature normalization with a learned affine pair.

    Parameters gamma/beta are trainable; the running mean/variance of the
    batch kind are statistics, updated as a side effect of train-mode
    application, never by gradients.
    """

    def __init__(self, kind: str, width: int, eps: float = 1e-5,
                 stat_momentum: float = 0.1, dtype=np.float32,
                 gamma_init: float = 1.0):
        if kind not in NORM_KINDS:
            raise ConfigError(f"norm kind must be one of {NORM_KINDS}, got {kind!r}")
        if eps <= 0.0:
            raise ConfigError("norm eps must be positive")
        if not 0.0 <= stat_momentum < 1.0:
            raise ConfigError("stat_momentum must be in [0, 1)")
        self.kind = kind
        self.width = int(width)
        self.eps = float(eps)
        self.stat_momentum = float(stat_momentum)
        self.gamma = np.full(width, gamma_init, dtype=dtype)
        self.beta = np.zeros(width, dtype=dtype)
        if kind == "batch":
            self.mu_run = np.zeros(width, dtype=dtype)
            self.var_run = np.ones(width, dtype=dtype)
        else:
            self.mu_run = None
            self.var_run = None

    def apply(self, x: np.ndarray, mode: str):
        """Normalize a batch; returns (y, cache) with cache=None in eval mode."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ConfigError(f"expected input of width {self.width}, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise NumericError("non-finite values in norm input")

        if self.kind == "batch":
            if mode == "train":
                if x.shape[0] < 2:
                    raise DegenerateBatchError(
                        "batch normalization needs at least 2 samples in train mode")
                mean = x.mean(axis=0)
                var = x.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + self.eps)
                xhat = (x - mean) * inv_std
                m = self.stat_momentum
                self.mu_run[...] = (1.0 - m) * self.mu_run + m * mean
                self.var_run[...] = (1.0 - m) * self.var_run + m * var
                cache = ("batch-train", xhat, inv_std)
            else:
                inv_std = 1.0 / np.sqrt(self.var_run + self.eps)
                xhat = (x - self.mu_run) * inv_std
                cache = None
        else:
            mean = x.mean(axis=1, keepdims=True)
            var = x.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            cache = ("layer", xhat, inv_std) if mode == "train" else None
        return self.gamma * xhat + self.beta, cache

    def backward(self, d_out: np.ndarray, cache):
        """Gradients (d_x, d_gamma, d_beta) for a cached train-mode application."""
        if cache is None:
            raise ConfigError("norm backward requires a train-mode cache")
        tag, xhat, inv_std = cache
        d_gamma = (d_out * xhat).sum(axis=0)
        d_beta = d_out.sum(axis=0)
        d_xhat = d_out * self.gamma
        if tag == "batch-train":
            n = d_out.shape[0]
            d_x = (inv_std / n) * (
                n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0))
        elif tag == "layer":
            d = d_out.shape[1]
            d_x = (inv_std / d) * (
                d * d_xhat
                - d_xhat.sum(axis=1, keepdims=True)
                - xhat * (d_xhat * xhat).sum(axis=1, keepdims=True))
        else:
            raise ConfigError(f"unknown norm cache tag {tag!r}")
        return d_x, d_gamma, d_beta

    def state(self) -> dict:
        """Copies of all norm-owned arrays, keyed by local name."""
        out = {"gamma": self.gamma.copy(), "beta": self.beta.copy()}
        if self.kind == "batch":
            out["mu_run"] = self.mu_run.copy()
            out["var_run"] = self.var_run.copy()
        return out

    def load_state(self, state: dict) -> None:
        self.gamma[...] = state["gamma"]
        self.beta[...] = state["beta"]
        if self.kind == "batch":
            self.mu_run[...] = state["mu_run"]
            self.var_run[...] = state["var_run"]
