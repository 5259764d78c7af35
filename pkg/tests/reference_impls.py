"""Independent reference implementations used as test oracles.

Everything here is written against the documented contracts only, in the
plainest possible style, so a disagreement with the package points at the
package. Scalar loops are preferred over vectorization on purpose.
"""

import math

import numpy as np

from fedcvu.client import make_batches
from fedcvu.nn.network import BlockNet
from fedcvu.nn.layers import softmax_cross_entropy
from fedcvu.nn.optim import OptState
from fedcvu.util import STREAM_CLIENT, rng_for


def greedy_knapsack_ref(utilities, costs, mandatory, budget):
    """Ratio-greedy selection, re-derived from scratch: mandatory items
    are taken first and charged against the budget, the rest are scanned
    in order of utility per byte (ties to the smaller id), items with zero
    or negative utility are never taken, and an item that does not fit is
    skipped without ending the scan."""
    taken = set(mandatory)
    spent = sum(costs[i] for i in taken)
    if spent > budget:
        raise ValueError("mandatory set exceeds the budget")
    candidates = [i for i in utilities if i not in taken and utilities[i] > 0.0]
    candidates.sort(key=lambda i: (-(utilities[i] / costs[i]), i))
    for i in candidates:
        if spent + costs[i] <= budget:
            taken.add(i)
            spent += costs[i]
    return taken


def scalar_adamw_step(p, g, m, v, k, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW step on a scalar, straight from the update equations.
    k is the 1-based step number; returns (p, m, v)."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** k)
    v_hat = v / (1.0 - beta2 ** k)
    p = p - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * p)
    return p, m, v


def cosine_lr_ref(base_lr, step, total_steps):
    """Learning rate for 1-based call number `step` of a cosine decay
    spanning total_steps calls."""
    frac = min(step - 1, total_steps) / total_steps if total_steps > 0 else 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def average_precision_ref(rel):
    """AP of one ranked relevance list (1 = relevant), by counting."""
    hits = 0
    total = 0.0
    for rank, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / rank
    if hits == 0:
        return None
    return total / hits


def batch_mean_ref(x):
    return sum(x) / len(x)


def ema_ref(z0, means, mu):
    """Prototype EMA unrolled: z starts at z0 (already initialized) and
    absorbs each round's batch mean."""
    z = float(z0)
    for m in means:
        z = mu * z + (1.0 - mu) * m
    return z


def finite_diff(loss_fn, arrays, eps=1e-5):
    """Central finite differences of a scalar-valued closure with respect
    to each array in `arrays` (dict name -> live ndarray, mutated in place
    and restored). Returns dict name -> float64 gradient."""
    grads = {}
    for nm, p in arrays.items():
        flat = p.ravel()
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * eps)
        grads[nm] = g.reshape(p.shape)
    return grads


def rel_err(a, b, floor=1e-8):
    """Norm-relative disagreement between two gradient tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def grads_close(a, b, rtol=1e-6, atol=1e-8):
    """Norm-level agreement with an absolute floor, so analytically-zero
    gradients (e.g. a bias ahead of mean subtraction) compare as equal
    instead of dividing finite-difference noise by itself."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b)) <= rtol * float(np.linalg.norm(b)) + atol


def fedavg_reference(global_net: BlockNet, shards, seed, rounds, epochs,
                     batch_size, opt_cfg, total_steps_of):
    """Standalone federated-averaging loop: full-model broadcast, local
    cross-entropy training, sample-weighted mean aggregation in float64.

    Shares the network/optimizer kernels with the package (the point of
    the comparison is the orchestration), but owns the loop: client
    iteration order, batch draws, and the aggregation arithmetic are all
    written out here from the documented contracts. Returns the list of
    flattened global parameter vectors, one per round.
    """
    rngs = {sh.client_id: rng_for(seed, STREAM_CLIENT, sh.client_id) for sh in shards}
    opts = {}
    nets = {}
    n_total = sum(sh.n_c for sh in shards)
    snapshots = []
    for _ in range(rounds):
        for sh in sorted(shards, key=lambda s: s.client_id):
            cid = sh.client_id
            if cid in nets:
                work = nets[cid]
                for bid in global_net.block_ids():
                    work.unflatten_block(bid, global_net.flatten_block(bid, "all"), "all")
            else:
                work = global_net.copy()
                nets[cid] = work
            params = work.params()
            if cid not in opts:
                trainable = {nm: params[nm] for nm in work.trainable_names()}
                opts[cid] = OptState(opt_cfg, trainable, total_steps_of(sh))
            bs = min(batch_size, sh.n_c)
            for _epoch in range(epochs):
                for idx in make_batches(sh.n_c, bs, rngs[cid]):
                    logits, _ = work.forward(sh.x[idx], "train")
                    _, d_logits = softmax_cross_entropy(logits, sh.y[idx])
                    grads = work.backward(d_logits)
                    opts[cid].apply(params, grads)
        for bid in global_net.block_ids():
            acc = None
            for sh in sorted(shards, key=lambda s: s.client_id):
                term = (sh.n_c / n_total) * nets[sh.client_id].flatten_block(bid, "all").astype(np.float64)
                acc = term if acc is None else acc + term
            global_net.unflatten_block(bid, acc.astype(global_net.cfg.np_dtype), "all")
        snapshots.append(np.concatenate(
            [global_net.flatten_block(bid, "all") for bid in global_net.block_ids()]))
    return snapshots
