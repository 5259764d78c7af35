"""Server-side round logic.

The server keeps the global model, the class-prototype bank, and the
selective-synchronization state. Per round it broadcasts parameters and
prototypes, collects client signatures/statistics/uploads, scores each
block (cross-client agreement, salience, utility), maintains the budgeted
block selection, computes soft aggregation weights with thresholded
gating, aggregates, and accounts every byte moved.

Gating is prospective: the mask computed in round t governs the upload at
the end of round t and the download at the start of round t+1. Round 1 is
a full synchronization (weight 1 on every block, nothing gated) whose
statistics seed the first selection and the first mask.

All reductions over clients run in ascending client-id order with 64-bit
accumulators, so results are independent of scheduling and permutation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .client import (ClassStats, ClientState, ClientUpdate, TrainHyper,
                     build_update, compute_signatures, install_global,
                     local_train, steps_per_epoch)
from .errors import ConfigError, NumericError, ProtocolError
from .nn.network import BlockNet
from .nn.optim import OptimConfig

BYTES_PER_PARAM = 2  # wire format is 16-bit floats; accounting only


# ---- prototype bank ----

@dataclass
class PrototypeBank:
    """Server-side class prototypes in embedding space, EMA-updated from
    the per-class embedding means the clients report each round."""
    z: np.ndarray            # (K, d) float64
    initialized: np.ndarray  # (K,) bool
    momentum: float

    @classmethod
    def empty(cls, n_classes: int, d: int, momentum: float) -> "PrototypeBank":
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("prototype momentum must be in [0, 1)")
        return cls(np.zeros((n_classes, d)), np.zeros(n_classes, dtype=bool), momentum)

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        """The broadcast payload: float32 prototypes plus the init mask."""
        return self.z.astype(np.float32), self.initialized.copy()

    def update(self, stats_list: list[ClassStats]) -> None:
        """Merge client stats (ascending client order assumed) and fold the
        per-class batch means into the bank. First sight initializes a
        prototype directly; afterwards z <- mu * z + (1 - mu) * mean."""
        if not stats_list:
            return
        k, d = self.z.shape
        total = np.zeros((k, d))
        counts = np.zeros(k, dtype=np.int64)
        for st in stats_list:
            if st.sums.shape != (k, d):
                raise ProtocolError("class-stat shape mismatch")
            total += st.sums
            counts += st.counts
        if not np.isfinite(total).all():
            raise NumericError("non-finite class statistics")
        mu = self.momentum
        for c in np.flatnonzero(counts):
            mean = total[c] / counts[c]
            if self.initialized[c]:
                self.z[c] = mu * self.z[c] + (1.0 - mu) * mean
            else:
                self.z[c] = mean
                self.initialized[c] = True


# ---- block scoring ----

def agreement(directions: list[np.ndarray]) -> float:
    """Mean pairwise inner product of the unit update directions; zero
    directions contribute zero to their pairs."""
    c = len(directions)
    if c < 2:
        raise ConfigError("agreement needs at least 2 clients")
    g = np.stack([np.asarray(v, dtype=np.float64) for v in directions])
    m = g @ g.T
    total = 0.0
    for i in range(c):
        for j in range(i + 1, c):
            total += m[i, j]
    return float(2.0 * total / (c * (c - 1)))


def salience(directions: list[np.ndarray], norms: list[float]) -> float:
    """Norm of the mean re-scaled update direction."""
    if not directions:
        raise ConfigError("salience needs at least 1 client")
    acc = np.zeros_like(np.asarray(directions[0], dtype=np.float64))
    for d, r in zip(directions, norms):
        acc += float(r) * np.asarray(d, dtype=np.float64)
    return float(np.linalg.norm(acc) / len(directions))


def utility(kappa: float, s: float) -> float:
    """Non-negative agreement times salience."""
    return max(0.0, kappa) * s


# ---- selection, weights, gating ----

@dataclass(frozen=True)
class SlaConfig:
    budget_frac: float | None = 0.5
    budget_bytes: int | None = None
    decide_every: int = 5
    lambda_cap: float = 0.3
    alpha: float = 5.0
    tau_kappa: float = 0.2
    eta: float = 0.1
    proj_dim: int | None = None
    mandatory: tuple[int, ...] | None = None  # None -> auto from model depth

    def validate(self) -> None:
        if self.budget_bytes is None:
            if self.budget_frac is None or not 0.0 < self.budget_frac <= 1.0:
                raise ConfigError("budget_frac must be in (0, 1] when budget_bytes is unset")
        elif self.budget_bytes < 1:
            raise ConfigError("budget_bytes must be positive")
        if self.decide_every < 1:
            raise ConfigError("decide_every must be >= 1")
        if not 0.0 < self.lambda_cap <= 0.3:
            raise ConfigError("lambda_cap must be in (0, 0.3]")
        if self.alpha <= 0.0:
            raise ConfigError("alpha must be positive")
        if not 0.0 <= self.eta < 1.0:
            raise ConfigError("eta must be in [0, 1)")
        if self.proj_dim is not None and self.proj_dim < 1:
            raise ConfigError("proj_dim must be >= 1")

    def mandatory_for(self, n_blocks: int, head_id: int) -> frozenset[int]:
        if self.mandatory is not None:
            return frozenset(self.mandatory)
        ids = {0, head_id, 1, 2, n_blocks - 1, n_blocks}
        return frozenset(i for i in ids if 0 <= i <= head_id)

    def resolve_budget(self, block_bytes: dict[int, int]) -> int:
        if self.budget_bytes is not None:
            return int(self.budget_bytes)
        return int(math.floor(self.budget_frac * sum(block_bytes.values())))


@dataclass
class SlaState:
    selection: set[int] = field(default_factory=set)
    gated: set[int] = field(default_factory=set)          # governs next download
    rounds_strong: dict[int, int] = field(default_factory=dict)
    rounds_weak: dict[int, int] = field(default_factory=dict)
    rounds_gated: dict[int, int] = field(default_factory=dict)

    def count(self, block_id: int, w_tilde: float) -> None:
        if w_tilde == 1.0:
            self.rounds_strong[block_id] = self.rounds_strong.get(block_id, 0) + 1
        elif w_tilde == 0.0:
            self.rounds_gated[block_id] = self.rounds_gated.get(block_id, 0) + 1
        else:
            self.rounds_weak[block_id] = self.rounds_weak.get(block_id, 0) + 1


def greedy_select(u: dict[int, float], b: dict[int, int],
                  mandatory: frozenset[int], budget: int) -> set[int]:
    """Mandatory blocks first (their cost counts against the budget), then
    remaining blocks in descending utility density u/b, ties to the lower
    block id; zero-utility blocks are never added; blocks that do not fit
    are skipped and the scan continues."""
    cost = sum(b[i] for i in mandatory)
    if cost > budget:
        raise ConfigError(
            f"mandatory blocks need {cost} bytes, over the budget of {budget}")
    chosen = set(mandatory)
    order = sorted((i for i in u if i not in chosen),
                   key=lambda i: (-u[i] / b[i], i))
    for i in order:
        if u[i] <= 0.0:
            continue
        if cost + b[i] <= budget:
            chosen.add(i)
            cost += b[i]
    return chosen


def select_blocks(state: SlaState, t: int, u: dict[int, float], b: dict[int, int],
                  cfg: SlaConfig, mandatory: frozenset[int], budget: int) -> set[int]:
    """Recompute the selection on decision rounds (t divisible by
    decide_every, and always on round 1 to seed it); otherwise keep it."""
    if t == 1 or t % cfg.decide_every == 0 or not state.selection:
        state.selection = greedy_select(u, b, mandatory, budget)
    return set(state.selection)


def sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def soft_weights(selection: set[int], kappa: dict[int, float], cfg: SlaConfig) -> dict[int, float]:
    """Selected blocks synchronize at weight 1; the rest get the capped
    sigmoid of their agreement margin."""
    w = {}
    for bid, k in kappa.items():
        if bid in selection:
            w[bid] = 1.0
        else:
            w[bid] = cfg.lambda_cap * sigmoid(cfg.alpha * (k - cfg.tau_kappa))
    return w


def gate(w: dict[int, float], eta: float) -> tuple[dict[int, float], set[int]]:
    """Zero out sub-threshold weights; returns (effective weights, gated set)."""
    w_tilde = {}
    gated = set()
    for bid, wi in w.items():
        if wi < eta:
            w_tilde[bid] = 0.0
            gated.add(bid)
        else:
            w_tilde[bid] = wi
    return w_tilde, gated


# ---- aggregation ----

def aggregate(global_net: BlockNet, updates: list[ClientUpdate],
              w_tilde: dict[int, float], sync_tag: str) -> None:
    """Per block: theta <- (1 - w) * theta + w * sum_c (n_c / N) theta_c.

    Updates are processed in ascending client-id order with float64
    accumulation, then cast back to the model dtype; w == 0 blocks are not
    touched at all, and w == 1 blocks take the weighted client mean
    exactly (no interpolation term).
    """
    if not updates:
        raise ProtocolError("aggregate needs at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    n_total = sum(u.n_c for u in updates)
    dt = global_net.cfg.np_dtype
    for bid in global_net.block_ids():
        w = w_tilde[bid]
        if w == 0.0:
            continue
        acc = None
        for u in updates:
            if bid not in u.params:
                raise ProtocolError(
                    f"client {u.client_id} sent no parameters for non-gated block {bid}")
            term = (u.n_c / n_total) * u.params[bid].astype(np.float64)
            acc = term if acc is None else acc + term
        if w == 1.0:
            merged = acc
        else:
            merged = (1.0 - w) * global_net.flatten_block(bid, sync_tag).astype(np.float64) \
                + w * acc
        global_net.unflatten_block(bid, merged.astype(dt), sync_tag)


# ---- communication accounting ----

@dataclass
class CommLedger:
    """Per-client byte counts for one round, split by payload kind."""
    param_up: int = 0
    param_down: int = 0
    sig_up: int = 0
    stats_up: int = 0
    proto_down: int = 0

    @property
    def bytes_up(self) -> int:
        return self.param_up + self.sig_up + self.stats_up

    @property
    def bytes_down(self) -> int:
        return self.param_down + self.proto_down


def account_comm(block_bytes: dict[int, int], up_gated: set[int], down_gated: set[int],
                 sig_dims: dict[int, int] | None, n_classes: int, embed_dim: int,
                 class_stats: bool, prototypes: bool,
                 bytes_per_param: int = BYTES_PER_PARAM) -> CommLedger:
    """Bytes moved for one client in one round.

    Parameters flow for non-gated blocks in each direction. Signatures
    (when present) flow for every block: per block (dim + 1) values, the
    +1 being the norm scalar. Class stats cost K * (d + 1) values up,
    prototypes K * d values down.
    """
    ledger = CommLedger()
    ledger.param_up = sum(v for bid, v in block_bytes.items() if bid not in up_gated)
    ledger.param_down = sum(v for bid, v in block_bytes.items() if bid not in down_gated)
    if sig_dims is not None:
        ledger.sig_up = sum((dim + 1) * bytes_per_param for dim in sig_dims.values())
    if class_stats:
        ledger.stats_up = n_classes * (embed_dim + 1) * bytes_per_param
    if prototypes:
        ledger.proto_down = n_classes * embed_dim * bytes_per_param
    return ledger


# ---- round orchestration ----

@dataclass
class RoundConfig:
    vs_norm: bool
    cv_align: bool
    sla: bool
    sync_tag: str
    hyper: TrainHyper
    opt_cfg: OptimConfig
    rounds: int
    sla_cfg: SlaConfig | None
    mandatory: frozenset[int]
    budget_bytes: int
    block_bytes: dict[int, int]
    threads: int = 0
    sketch_seed: int = 0


@dataclass
class RoundReport:
    t: int
    kappa: dict[int, float]
    s: dict[int, float]
    u: dict[int, float]
    w: dict[int, float]
    w_tilde: dict[int, float]
    selection: set[int]
    gated_up: set[int]
    gated_down: set[int]
    ledger: CommLedger
    n_clients: int
    mean_ce: float
    mean_align: float
    mean_train_acc: float

    @property
    def n_selected(self) -> int:
        return len(self.selection)

    @property
    def bytes_up_total(self) -> int:
        return self.ledger.bytes_up * self.n_clients

    @property
    def bytes_down_total(self) -> int:
        return self.ledger.bytes_down * self.n_clients


def run_round(t: int, global_net: BlockNet, clients: list[ClientState],
              bank: PrototypeBank | None, sla_state: SlaState,
              rc: RoundConfig) -> RoundReport:
    """One full communication round; mutates the global model, the bank,
    the SLA state, and every client's persistent state."""
    if t < 1:
        raise ConfigError("rounds are 1-based")
    block_ids = global_net.block_ids()
    down_gated = set(sla_state.gated) if (rc.sla and t > 1) else set()
    bank_view = bank.view() if (rc.cv_align and bank is not None) else None

    def client_pass(state: ClientState):
        work = install_global(state, global_net, down_gated, rc.sync_tag, rc.vs_norm)
        pre = work.copy() if rc.sla else None
        # The cosine schedule spans the whole run; shard sizes vary, so the
        # step horizon is per client.
        eff_batch = min(rc.hyper.batch_size, state.shard.n_c)
        total_steps = rc.rounds * rc.hyper.epochs * steps_per_epoch(state.shard.n_c, eff_batch)
        telemetry, stats = local_train(
            state, work, rc.hyper, rc.opt_cfg, total_steps,
            bank_view=bank_view, collect_stats=rc.cv_align)
        sigs = None
        if rc.sla:
            sigs = compute_signatures(pre, work, rc.sync_tag,
                                      rc.sla_cfg.proj_dim, rc.sketch_seed)
        state.last_net = work
        if rc.vs_norm:
            state.local_norm = work.norm_state()
        return state.client_id, work, sigs, stats, telemetry

    if rc.threads and rc.threads > 0:
        with ThreadPoolExecutor(max_workers=rc.threads) as pool:
            results = {cid: (net, sigs, stats, tel)
                       for cid, net, sigs, stats, tel in pool.map(client_pass, clients)}
    else:
        results = {}
        for state in clients:
            cid, net, sigs, stats, tel = client_pass(state)
            results[cid] = (net, sigs, stats, tel)
    order = sorted(results)

    kappa: dict[int, float] = {}
    sal: dict[int, float] = {}
    util: dict[int, float] = {}
    if rc.sla:
        for bid in block_ids:
            dirs = [results[cid][1][bid].direction for cid in order]
            norms = [results[cid][1][bid].norm for cid in order]
            kappa[bid] = agreement(dirs)
            sal[bid] = salience(dirs, norms)
            util[bid] = utility(kappa[bid], sal[bid])
        selection = select_blocks(sla_state, t, util, rc.block_bytes,
                                  rc.sla_cfg, rc.mandatory, rc.budget_bytes)
        w = soft_weights(selection, kappa, rc.sla_cfg)
        w_gated, gated_now = gate(w, rc.sla_cfg.eta)
        if t == 1:
            # Full synchronization round; the computed mask only seeds
            # round 2's download.
            w_tilde = {bid: 1.0 for bid in block_ids}
            up_gated: set[int] = set()
            applied_selection = set(block_ids)
        else:
            w_tilde = w_gated
            up_gated = gated_now
            applied_selection = selection
        sla_state.gated = gated_now
    else:
        w = {bid: 1.0 for bid in block_ids}
        w_tilde = dict(w)
        up_gated = set()
        applied_selection = set(block_ids)
        sla_state.gated = set()

    by_id = {c.client_id: c for c in clients}
    updates = []
    for cid in order:
        state = by_id[cid]
        net, sigs, stats, tel = results[cid]
        updates.append(build_update(state, net, up_gated, rc.sync_tag,
                                    sigs, stats if rc.cv_align else None, tel))

    aggregate(global_net, updates, w_tilde, rc.sync_tag)
    if rc.cv_align and bank is not None:
        bank.update([u.class_stats for u in updates])

    sig_dims = None
    if rc.sla:
        sig_dims = {bid: results[order[0]][1][bid].dim for bid in block_ids}
    ledger = account_comm(rc.block_bytes, up_gated, down_gated, sig_dims,
                          global_net.cfg.n_classes, global_net.cfg.d,
                          class_stats=rc.cv_align, prototypes=rc.cv_align)

    for bid in block_ids:
        sla_state.count(bid, w_tilde[bid])

    tels = [results[cid][3] for cid in order]
    return RoundReport(
        t=t, kappa=kappa, s=sal, u=util, w=w, w_tilde=w_tilde,
        selection=applied_selection, gated_up=up_gated, gated_down=down_gated,
        ledger=ledger, n_clients=len(clients),
        mean_ce=float(np.mean([x.ce_loss for x in tels])),
        mean_align=float(np.mean([x.align_loss for x in tels])),
        mean_train_acc=float(np.mean([x.accuracy for x in tels])),
    )
