"""Block-structured residual classifier over flat feature vectors.

Architecture: an input embedding (linear d_in -> d), then L residual blocks
(linear d -> d, norm, activation, residual add), then a linear head
(d -> n_classes). The activations entering the head are the embeddings.

Block ids: 0 is the embedding, 1..L are the residual blocks, L+1 is the
head. Every parameter carries one of two tags: "norm" for anything owned
by a NormLayer (gamma, beta, running mean, running variance), "rest" for
all linear weights and biases.

Flattening contract (part of the test contract, do not reorder): blocks
are flattened block-major, then layer-major within the block, then
row-major (C order) within each array. Concretely, per block:
    rest  = [w.ravel(), b]
    norm  = [gamma, beta, mu_run, var_run]   (batch kind; layer kind has
                                              only gamma, beta)
    all   = rest followed by norm
The embedding and head carry no norm layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, UsageError
from .layers import (ACTIVATIONS, NORM_KINDS, NormLayer, activation_backward,
                     activation_forward)

TAGS = ("rest", "norm", "all")


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 32
    d: int = 64
    n_blocks: int = 10
    n_classes: int = 12
    norm_kind: str = "batch"
    activation: str = "gelu"
    eps: float = 1e-5
    stat_momentum: float = 0.1
    norm_trainable: bool = True
    dtype: str = "float32"
    # Scale init for the norm affine. 0.0 opens every residual branch at
    # identity so depth only participates once trained; 1.0 is the
    # classic full-scale start.
    norm_gamma_init: float = 1.0

    def validate(self) -> None:
        if self.d_in < 1 or self.d < 1:
            raise ConfigError("d_in and d must be positive")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.eps <= 0.0:
            raise ConfigError("eps must be positive")
        if self.norm_gamma_init < 0.0:
            raise ConfigError("norm_gamma_init must be >= 0")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class _Block:
    __slots__ = ("w", "b", "norm")

    def __init__(self, w, b, norm):
        self.w = w
        self.b = b
        self.norm = norm


class BlockNet:
    """The model. Construct with an rng for a seeded init, or without one
    for a deterministic default init (zero weights, identity norms)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype

        def draw(shape, fan_in):
            if rng is None:
                return np.zeros(shape, dtype=dt)
            scale = 1.0 / np.sqrt(fan_in)
            return (rng.standard_normal(shape) * scale).astype(dt)

        self.embed_w = draw((cfg.d_in, cfg.d), cfg.d_in)
        self.embed_b = np.zeros(cfg.d, dtype=dt)
        self.blocks = []
        for _ in range(cfg.n_blocks):
            w = draw((cfg.d, cfg.d), cfg.d)
            b = np.zeros(cfg.d, dtype=dt)
            norm = NormLayer(cfg.norm_kind, cfg.d, cfg.eps, cfg.stat_momentum, dt,
                             gamma_init=cfg.norm_gamma_init)
            self.blocks.append(_Block(w, b, norm))
        self.head_w = draw((cfg.d, cfg.n_classes), cfg.d)
        self.head_b = np.zeros(cfg.n_classes, dtype=dt)
        self._cache = None

    # ---- parameter naming and access ----

    @property
    def head_id(self) -> int:
        return self.cfg.n_blocks + 1

    def block_ids(self) -> list[int]:
        return list(range(self.cfg.n_blocks + 2))

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every array in the model, keyed by canonical name."""
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for i, blk in enumerate(self.blocks, start=1):
            out[f"block{i}.w"] = blk.w
            out[f"block{i}.b"] = blk.b
            out[f"block{i}.norm.gamma"] = blk.norm.gamma
            out[f"block{i}.norm.beta"] = blk.norm.beta
            if blk.norm.kind == "batch":
                out[f"block{i}.norm.mu_run"] = blk.norm.mu_run
                out[f"block{i}.norm.var_run"] = blk.norm.var_run
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def trainable_names(self) -> list[str]:
        names = ["embed.w", "embed.b"]
        for i in range(1, self.cfg.n_blocks + 1):
            names += [f"block{i}.w", f"block{i}.b"]
            if self.cfg.norm_trainable:
                names += [f"block{i}.norm.gamma", f"block{i}.norm.beta"]
        names += ["head.w", "head.b"]
        return names

    def block_param_names(self, block_id: int, tag: str = "rest") -> list[str]:
        """Canonical flattening order for one block under a tag."""
        if tag not in TAGS:
            raise ConfigError(f"tag must be one of {TAGS}, got {tag!r}")
        if block_id == 0:
            rest, norm = ["embed.w", "embed.b"], []
        elif 1 <= block_id <= self.cfg.n_blocks:
            p = f"block{block_id}"
            rest = [f"{p}.w", f"{p}.b"]
            norm = [f"{p}.norm.gamma", f"{p}.norm.beta"]
            if self.cfg.norm_kind == "batch":
                norm += [f"{p}.norm.mu_run", f"{p}.norm.var_run"]
        elif block_id == self.head_id:
            rest, norm = ["head.w", "head.b"], []
        else:
            raise ConfigError(f"unknown block id {block_id}")
        if tag == "rest":
            return rest
        if tag == "norm":
            return norm
        return rest + norm

    def sync_dim(self, block_id: int, tag: str = "rest") -> int:
        params = self.params()
        return sum(params[n].size for n in self.block_param_names(block_id, tag))

    def flatten_block(self, block_id: int, tag: str = "rest") -> np.ndarray:
        params = self.params()
        names = self.block_param_names(block_id, tag)
        if not names:
            return np.empty(0, dtype=self.cfg.np_dtype)
        return np.concatenate([params[n].ravel() for n in names])

    def unflatten_block(self, block_id: int, vec: np.ndarray, tag: str = "rest") -> None:
        params = self.params()
        names = self.block_param_names(block_id, tag)
        expected = sum(params[n].size for n in names)
        if vec.size != expected:
            raise ConfigError(
                f"block {block_id} tag {tag!r} expects {expected} values, got {vec.size}")
        off = 0
        for n in names:
            arr = params[n]
            arr[...] = vec[off:off + arr.size].reshape(arr.shape)
            off += arr.size

    def norm_state(self) -> dict[str, dict]:
        return {f"block{i}": blk.norm.state() for i, blk in enumerate(self.blocks, start=1)}

    def load_norm_state(self, state: dict[str, dict]) -> None:
        for i, blk in enumerate(self.blocks, start=1):
            blk.norm.load_state(state[f"block{i}"])

    def copy(self) -> "BlockNet":
        other = BlockNet(self.cfg)
        src, dst = self.params(), other.params()
        for name, arr in src.items():
            dst[name][...] = arr
        return other

    # ---- forward / backward ----

    def forward(self, x: np.ndarray, mode: str = "eval"):
        """Run the net; returns (logits, embeddings).

        Train mode caches activations for backward and updates batch-norm
        running statistics. Eval mode mutates nothing and caches nothing.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=self.cfg.np_dtype)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ConfigError(f"expected input shape (B, {self.cfg.d_in}), got {x.shape}")
        h = x @ self.embed_w + self.embed_b
        block_caches = []
        for blk in self.blocks:
            z = h @ blk.w + blk.b
            n, ncache = blk.norm.apply(z, mode)
            a = activation_forward(self.cfg.activation, n)
            if mode == "train":
                block_caches.append((h, ncache, n))
            h = h + a
        logits = h @ self.head_w + self.head_b
        if mode == "train":
            self._cache = (x, block_caches, h)
        return logits, h

    def backward(self, d_logits: np.ndarray, d_embed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradient at the logits and,
        optionally, an extra gradient injected at the embeddings (the hook
        used to compose embedding-space loss terms)."""
        if self._cache is None:
            raise UsageError("backward requires a preceding train-mode forward")
        x, block_caches, emb = self._cache
        grads: dict[str, np.ndarray] = {}
        grads["head.w"] = emb.T @ d_logits
        grads["head.b"] = d_logits.sum(axis=0)
        d_h = d_logits @ self.head_w.T
        if d_embed is not None:
            d_h = d_h + d_embed
        for i in range(self.cfg.n_blocks, 0, -1):
            blk = self.blocks[i - 1]
            h_in, ncache, n_pre = block_caches[i - 1]
            d_a = d_h  # residual add passes d_h to the branch and to h_in
            d_n = activation_backward(self.cfg.activation, d_a, n_pre)
            d_z, d_gamma, d_beta = blk.norm.backward(d_n, ncache)
            grads[f"block{i}.norm.gamma"] = d_gamma
            grads[f"block{i}.norm.beta"] = d_beta
            grads[f"block{i}.w"] = h_in.T @ d_z
            grads[f"block{i}.b"] = d_z.sum(axis=0)
            d_h = d_h + d_z @ blk.w.T
        grads["embed.w"] = x.T @ d_h
        grads["embed.b"] = d_h.sum(axis=0)
        return grads
