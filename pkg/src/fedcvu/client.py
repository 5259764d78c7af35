"""Client-side round logic.

A client keeps: its shard, its RNG stream, its optimizer state (moments
and step counter survive across rounds, so the cosine schedule spans the
whole run), its private norm-parameter snapshot, and its full model from
the previous round (the fallback for blocks whose transfer was gated).

Per round: install the broadcast parameters, run E local epochs of the
composite loss (cross entropy, plus the prototype-alignment term when
enabled, plus an optional proximal pull), then emit per-block update
signatures and the upload payload.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Shard
from .errors import ConfigError, NumericError, ProtocolError
from .nn.layers import softmax_cross_entropy
from .nn.network import BlockNet
from .nn.optim import OptState, OptimConfig
from .util import STREAM_SKETCH, rng_for

log = logging.getLogger(__name__)

_TINY = 1e-12


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 5
    batch_size: int = 32
    tau_temp: float = 0.1
    align_weight: float = 1.0
    prox_mu: float | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("local epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau_temp <= 0.0:
            raise ConfigError("tau_temp must be positive")
        if self.align_weight < 0.0:
            raise ConfigError("align_weight must be >= 0")
        if self.prox_mu is not None and self.prox_mu < 0.0:
            raise ConfigError("prox_mu must be >= 0")


@dataclass
class ClassStats:
    """Per-class embedding sums and counts from the final local epoch."""
    sums: np.ndarray    # (K, d) float64
    counts: np.ndarray  # (K,) int64

    @classmethod
    def zeros(cls, n_classes: int, d: int) -> "ClassStats":
        return cls(np.zeros((n_classes, d)), np.zeros(n_classes, dtype=np.int64))


@dataclass
class LayerSignature:
    block_id: int
    direction: np.ndarray  # float64, unit norm or all zero
    norm: float            # L2 norm of the raw block delta
    dim: int               # payload dimensionality (full or sketched)


@dataclass
class Telemetry:
    ce_loss: float
    align_loss: float
    accuracy: float
    align_active: bool
    steps: int


@dataclass
class ClientUpdate:
    client_id: int
    n_c: int
    params: dict[int, np.ndarray]          # block_id -> flat sync vector
    signatures: list[LayerSignature] | None
    class_stats: ClassStats | None
    telemetry: Telemetry


@dataclass
class ClientState:
    client_id: int
    shard: Shard
    rng: np.random.Generator
    opt: OptState | None = None
    local_norm: dict | None = None
    last_net: BlockNet | None = None
    _warned_clamp: bool = field(default=False, repr=False)


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches. A trailing single-sample batch is merged
    into its predecessor so batch statistics stay well defined."""
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def steps_per_epoch(n: int, batch_size: int) -> int:
    n_chunks = -(-n // batch_size)
    if n_chunks > 1 and n % batch_size == 1:
        n_chunks -= 1
    return n_chunks


def cv_align_loss(h: np.ndarray, labels: np.ndarray, prototypes: np.ndarray,
                  initialized: np.ndarray, tau: float):
    """Prototype-contrastive alignment over the initialized class set.

    For each sample whose own class prototype is initialized, the loss is
    the negative log softmax (temperature tau) of its cosine similarity
    to that prototype against all initialized prototypes; the result is
    the mean over those samples. Returns (loss, d_h, n_active) where d_h
    is None when no sample contributes.
    """
    if tau <= 0.0:
        raise ConfigError("alignment temperature must be positive")
    active_classes = np.flatnonzero(initialized)
    if active_classes.size == 0:
        return 0.0, None, 0
    member = initialized[labels]
    rows = np.flatnonzero(member)
    if rows.size == 0:
        return 0.0, None, 0

    z = prototypes[active_classes]
    z_norm = np.sqrt((z * z).sum(axis=1))
    z_hat = z / np.maximum(z_norm, _TINY)[:, None]

    hs = h[rows]
    h_norm = np.sqrt((hs * hs).sum(axis=1))
    h_hat = hs / np.maximum(h_norm, _TINY)[:, None]
    sims = h_hat @ z_hat.T  # (m, A)

    # position of each contributing sample's class inside active_classes
    class_pos = np.full(initialized.size, -1, dtype=np.int64)
    class_pos[active_classes] = np.arange(active_classes.size)
    own = class_pos[labels[rows]]

    scaled = sims / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(scaled).sum(axis=1, keepdims=True))
    log_p = scaled - log_z
    m = rows.size
    loss = float(-log_p[np.arange(m), own].mean())

    d_sim = np.exp(log_p)
    d_sim[np.arange(m), own] -= 1.0
    d_sim /= (tau * m)
    # d sim_k / d h = (z_hat_k - sim_k * h_hat) / |h|
    d_hs = (d_sim @ z_hat - (d_sim * sims).sum(axis=1, keepdims=True) * h_hat)
    d_hs /= np.maximum(h_norm, _TINY)[:, None]

    d_h = np.zeros_like(h)
    d_h[rows] = d_hs.astype(h.dtype, copy=False)
    return loss, d_h, int(m)


def local_train(state: ClientState, net: BlockNet, hyper: TrainHyper,
                opt_cfg: OptimConfig, total_steps: int,
                bank_view: tuple[np.ndarray, np.ndarray] | None = None,
                collect_stats: bool = False):
    """Run the local epochs in place on `net`.

    bank_view is the broadcast (prototypes, initialized) pair; None turns
    the alignment term off entirely. Returns (Telemetry, ClassStats or
    None). Class stats and the telemetry cover the final epoch only.
    """
    hyper.validate()
    n = state.shard.n_c
    if n < 1:
        raise ConfigError(f"client {state.client_id} has an empty shard")
    batch_size = hyper.batch_size
    if batch_size > n:
        if not state._warned_clamp:
            log.warning("client %d: batch size %d clamped to shard size %d",
                        state.client_id, batch_size, n)
            state._warned_clamp = True
        batch_size = n

    params = net.params()
    if state.opt is None:
        trainable = {name: params[name] for name in net.trainable_names()}
        state.opt = OptState(opt_cfg, trainable, total_steps)

    prox_ref = None
    if hyper.prox_mu is not None and hyper.prox_mu > 0.0:
        rest_names = [nm for bid in net.block_ids()
                      for nm in net.block_param_names(bid, "rest")]
        prox_ref = {nm: params[nm].copy() for nm in rest_names}

    align_on = bank_view is not None and hyper.align_weight > 0.0
    if align_on:
        protos, initialized = bank_view
        protos = np.asarray(protos, dtype=net.cfg.np_dtype)
    stats = ClassStats.zeros(net.cfg.n_classes, net.cfg.d) if collect_stats else None

    ce_sum = 0.0
    align_sum = 0.0
    correct = 0
    seen_samples = 0
    final_steps = 0
    align_ever_active = False

    for epoch in range(hyper.epochs):
        final = epoch == hyper.epochs - 1
        for idx in make_batches(n, batch_size, state.rng):
            xb, yb = state.shard.x[idx], state.shard.y[idx]
            logits, emb = net.forward(xb, "train")
            ce, d_logits = softmax_cross_entropy(logits, yb)
            d_embed = None
            aloss = 0.0
            if align_on:
                aloss, d_h, n_active = cv_align_loss(
                    emb, yb, protos, initialized, hyper.tau_temp)
                if n_active > 0:
                    align_ever_active = True
                    d_embed = d_h if hyper.align_weight == 1.0 else hyper.align_weight * d_h
            grads = net.backward(d_logits, d_embed)
            if prox_ref is not None:
                mu = hyper.prox_mu
                for nm, ref in prox_ref.items():
                    grads[nm] = grads[nm] + mu * (params[nm] - ref)
            state.opt.apply(params, grads)
            if final:
                final_steps += 1
                ce_sum += ce * idx.size
                align_sum += aloss * idx.size
                correct += int((logits.argmax(axis=1) == yb).sum())
                seen_samples += idx.size
                if stats is not None:
                    np.add.at(stats.sums, yb, emb.astype(np.float64))
                    stats.counts += np.bincount(yb, minlength=net.cfg.n_classes).astype(np.int64)

    telemetry = Telemetry(
        ce_loss=ce_sum / max(seen_samples, 1),
        align_loss=align_sum / max(seen_samples, 1),
        accuracy=100.0 * correct / max(seen_samples, 1),
        align_active=align_ever_active,
        steps=final_steps,
    )
    return telemetry, stats


# ---- signatures ----

_projection_cache: dict[tuple, np.ndarray] = {}


def _projection(seed: int, block_id: int, dim: int, proj_dim: int) -> np.ndarray:
    key = (seed, block_id, dim, proj_dim)
    p = _projection_cache.get(key)
    if p is None:
        rng = rng_for(seed, STREAM_SKETCH, block_id)
        p = rng.standard_normal((proj_dim, dim)) / np.sqrt(proj_dim)
        _projection_cache[key] = p
    return p


def compute_signatures(pre: BlockNet, post: BlockNet, tag: str,
                       proj_dim: int | None = None, sketch_seed: int = 0) -> list[LayerSignature]:
    """Per-block (direction, norm) pair of the local parameter delta.

    The direction is the unit-normalized delta (all zeros when the block
    did not move). With proj_dim set, directions are sketched through a
    shared seeded Gaussian projection and re-normalized; blocks whose full
    dimension does not exceed proj_dim keep the identity projection.
    """
    sigs = []
    for bid in pre.block_ids():
        g = post.flatten_block(bid, tag).astype(np.float64) \
            - pre.flatten_block(bid, tag).astype(np.float64)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite parameter delta in block {bid}")
        r = float(np.linalg.norm(g))
        dim = g.size
        if proj_dim is not None and proj_dim < dim:
            if r > 0.0:
                proj = _projection(sketch_seed, bid, dim, proj_dim) @ (g / r)
                pn = float(np.linalg.norm(proj))
                direction = proj / pn if pn > 0.0 else np.zeros(proj_dim)
            else:
                direction = np.zeros(proj_dim)
            dim = proj_dim
        else:
            direction = g / r if r > 0.0 else np.zeros(dim)
        sigs.append(LayerSignature(bid, direction, r, dim))
    return sigs


# ---- broadcast install / upload ----

def install_global(state: ClientState, global_net: BlockNet, gated_down: set[int],
                   sync_tag: str, vs_norm: bool) -> BlockNet:
    """Materialize the working model for this round: broadcast parameters
    for non-gated blocks, the client's own previous parameters for gated
    ones, and (under private normalization) the client's norm snapshot."""
    if state.last_net is None:
        if gated_down:
            raise ProtocolError("first round cannot have gated blocks")
        work = global_net.copy()
    else:
        work = state.last_net
        for bid in global_net.block_ids():
            if bid not in gated_down:
                work.unflatten_block(bid, global_net.flatten_block(bid, sync_tag), sync_tag)
    if vs_norm:
        if state.local_norm is None:
            state.local_norm = work.norm_state()
        else:
            work.load_norm_state(state.local_norm)
    return work


def build_update(state: ClientState, net: BlockNet, gated_up: set[int], sync_tag: str,
                 signatures: list[LayerSignature] | None,
                 class_stats: ClassStats | None, telemetry: Telemetry) -> ClientUpdate:
    """Upload payload: flat sync vectors for every non-gated block, plus
    signatures for all blocks. Under private normalization the payload is
    schema-checked to carry no norm-tagged parameter."""
    params = {}
    for bid in net.block_ids():
        if bid in gated_up:
            continue
        flat = net.flatten_block(bid, sync_tag)
        if sync_tag == "rest" and flat.size != net.sync_dim(bid, "rest"):
            raise ProtocolError(f"norm parameters leaked into the update for block {bid}")
        params[bid] = flat
    if signatures is not None and len(signatures) != len(net.block_ids()):
        raise ProtocolError("signatures must cover every block")
    return ClientUpdate(state.client_id, state.shard.n_c, params,
                        signatures, class_stats, telemetry)
