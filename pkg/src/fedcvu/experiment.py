"""Experiment harness: per-seed federated runs, evaluation, and the
metrics.csv / sync_trace.csv / summary.json artifacts.

Evaluation protocol: seen-view accuracy is the mean over clients of
accuracy on the client's own view's test slice, with that client's
private norm parameters installed when the method keeps them (a client's
norms describe its view, so they are never paired with another view's
samples). Unseen-view accuracy installs the elementwise mean of the
client norm parameters, or recalibrates batch statistics on the
unlabeled unseen pool when unseen_norm is "global_batch_recalib". In
id_mode the same unseen-configured model embeds the query and gallery
sets for retrieval metrics.

Rows are emitted every round; accuracy columns are refreshed on
evaluation rounds (round 1, every eval_every-th round, and the last
round) and carried forward in between. Byte columns are totals across
clients; cum_bytes accumulates up+down within a seed.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .client import ClientState, TrainHyper
from .config import ExperimentConfig, MethodToggles, config_to_dict, method_toggles
from .data import EvalSplits, SynthDataset, eval_splits, generate, load_dataset, partition_clients
from .errors import ConfigError
from .metrics import detect_convergence, retrieval_metrics, topk_accuracy
from .nn.network import BlockNet
from .server import (BYTES_PER_PARAM, PrototypeBank, RoundConfig, RoundReport,
                     SlaState, run_round)
from .util import STREAM_CLIENT, STREAM_INIT, rng_for, thread_count

log = logging.getLogger(__name__)

CSV_COLUMNS = ["round", "method", "seed", "seen_top1", "seen_top5",
               "unseen_top1", "unseen_top5", "map", "cmc1",
               "bytes_up", "bytes_down", "cum_bytes", "n_selected_blocks"]

TRACE_COLUMNS = ["block_id", "rounds_strong", "rounds_weak", "rounds_gated", "freq_strong"]


@dataclass
class EvalMetrics:
    seen_top1: float
    seen_top5: float
    unseen_top1: float
    unseen_top5: float
    map_pct: float | None = None
    cmc1: float | None = None


@dataclass
class MetricsRow:
    round: int
    method: str
    seed: int
    seen_top1: float
    seen_top5: float
    unseen_top1: float
    unseen_top5: float
    map_pct: float | None
    cmc1: float | None
    bytes_up: int
    bytes_down: int
    cum_bytes: int
    n_selected_blocks: int

    def to_csv(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        return [self.round, self.method, self.seed,
                fmt(self.seen_top1), fmt(self.seen_top5),
                fmt(self.unseen_top1), fmt(self.unseen_top5),
                fmt(self.map_pct), fmt(self.cmc1),
                self.bytes_up, self.bytes_down, self.cum_bytes,
                self.n_selected_blocks]


def _mean_norm_state(states: list[dict]) -> dict:
    out = {}
    for block_key in states[0]:
        out[block_key] = {}
        for name in states[0][block_key]:
            acc = np.zeros(states[0][block_key][name].shape)
            for st in states:
                acc += st[block_key][name].astype(np.float64)
            out[block_key][name] = (acc / len(states)).astype(states[0][block_key][name].dtype)
    return out


def _recalibrate_batch_stats(net: BlockNet, x: np.ndarray) -> None:
    """Replace batch-norm running statistics with the statistics of one
    full pass over x (unlabeled). No-op for layer normalization."""
    if net.cfg.norm_kind != "batch":
        return
    saved = [blk.norm.stat_momentum for blk in net.blocks]
    for blk in net.blocks:
        blk.norm.stat_momentum = 1.0
    try:
        net.forward(x, "train")
    finally:
        for blk, m in zip(net.blocks, saved):
            blk.norm.stat_momentum = m
        net._cache = None


def evaluate(global_net: BlockNet, clients_info: list[tuple[int, dict | None]],
             splits: EvalSplits, unseen_norm: str, id_mode: bool) -> EvalMetrics:
    """Pure evaluation pass; operates on copies of the global model.

    clients_info pairs each client's view id with its private norm state,
    or None when the method aggregates norm parameters globally.
    """
    if not clients_info:
        raise ConfigError("evaluation needs at least one client")
    shared_logits = None
    t1 = t5 = 0.0
    for view_id, norm_state in clients_info:
        idx = np.flatnonzero(splits.seen_test_view == view_id)
        if idx.size == 0:
            raise ConfigError(f"no seen test samples for view {view_id}")
        if norm_state is None:
            if shared_logits is None:
                shared_logits, _ = global_net.forward(splits.seen_test_x, "eval")
            logits = shared_logits[idx]
        else:
            net = global_net.copy()
            net.load_norm_state(norm_state)
            logits, _ = net.forward(splits.seen_test_x[idx], "eval")
        t1 += topk_accuracy(logits, splits.seen_test_y[idx], 1)
        t5 += topk_accuracy(logits, splits.seen_test_y[idx], 5)
    seen_top1, seen_top5 = t1 / len(clients_info), t5 / len(clients_info)

    norm_states = [st for _, st in clients_info if st is not None]
    net_u = global_net.copy()
    if norm_states:
        net_u.load_norm_state(_mean_norm_state(norm_states))
        if unseen_norm == "global_batch_recalib":
            _recalibrate_batch_stats(net_u, splits.unseen_test_x)
    logits_u, emb_u = net_u.forward(splits.unseen_test_x, "eval")
    unseen_top1 = topk_accuracy(logits_u, splits.unseen_test_y, 1)
    unseen_top5 = topk_accuracy(logits_u, splits.unseen_test_y, 5)

    map_pct = cmc1 = None
    if id_mode and splits.query_idx is not None and splits.query_idx.size:
        map_pct, cmc1 = retrieval_metrics(
            emb_u[splits.query_idx], splits.unseen_test_y[splits.query_idx],
            emb_u[splits.gallery_idx], splits.unseen_test_y[splits.gallery_idx])
    return EvalMetrics(seen_top1, seen_top5, unseen_top1, unseen_top5, map_pct, cmc1)


@dataclass
class SeedResult:
    seed: int
    rows: list[MetricsRow]
    reports: list[RoundReport]
    trace: dict[int, dict[str, int]]
    r_star: int | None
    total_bytes: int
    final: EvalMetrics
    best_unseen_top1: float
    captured_globals: list[np.ndarray] | None = None


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    toggles: MethodToggles
    seed_results: list[SeedResult]
    summary: dict

    @property
    def rows(self) -> list[MetricsRow]:
        return [r for sr in self.seed_results for r in sr.rows]


def _run_seed(cfg: ExperimentConfig, toggles: MethodToggles, seed: int,
              dataset: SynthDataset | None, threads: int,
              capture_globals: bool) -> SeedResult:
    if dataset is None:
        dataset = generate(replace(cfg.synth, seed=seed))
    splits = eval_splits(dataset)
    shards = partition_clients(splits.seen_train, cfg.clients, seed)
    model_cfg = cfg.model
    global_net = BlockNet(model_cfg, rng_for(seed, STREAM_INIT))
    clients = [ClientState(sh.client_id, sh, rng_for(seed, STREAM_CLIENT, sh.client_id))
               for sh in shards]

    sync_tag = "rest" if toggles.vs_norm else "all"
    block_bytes = {bid: global_net.sync_dim(bid, sync_tag) * BYTES_PER_PARAM
                   for bid in global_net.block_ids()}
    mandatory = cfg.sla.mandatory_for(model_cfg.n_blocks, global_net.head_id)
    budget = cfg.sla.resolve_budget(block_bytes)
    if toggles.sla:
        bad = [b for b in mandatory if b not in block_bytes]
        if bad:
            raise ConfigError(f"mandatory blocks {bad} do not exist in this model")
        need = sum(block_bytes[b] for b in mandatory)
        if need > budget:
            raise ConfigError(
                f"mandatory blocks need {need} bytes, over the budget of {budget}")

    hyper = TrainHyper(
        epochs=cfg.local_epochs, batch_size=cfg.batch_size,
        tau_temp=cfg.tau_temp,
        align_weight=cfg.align_weight if toggles.cv_align else 0.0,
        prox_mu=cfg.prox_mu if toggles.prox else None)
    rc = RoundConfig(
        vs_norm=toggles.vs_norm, cv_align=toggles.cv_align, sla=toggles.sla,
        sync_tag=sync_tag, hyper=hyper, opt_cfg=cfg.optim, rounds=cfg.rounds,
        sla_cfg=cfg.sla if toggles.sla else None, mandatory=mandatory,
        budget_bytes=budget, block_bytes=block_bytes, threads=threads,
        sketch_seed=seed)
    bank = PrototypeBank.empty(model_cfg.n_classes, model_cfg.d,
                               cfg.proto_momentum) if toggles.cv_align else None
    sla_state = SlaState()

    rows: list[MetricsRow] = []
    reports: list[RoundReport] = []
    captured: list[np.ndarray] | None = [] if capture_globals else None
    cum = 0
    metrics: EvalMetrics | None = None
    for t in range(1, cfg.rounds + 1):
        report = run_round(t, global_net, clients, bank, sla_state, rc)
        reports.append(report)
        cum += report.bytes_up_total + report.bytes_down_total
        if t == 1 or t % cfg.eval_every == 0 or t == cfg.rounds:
            clients_info = [(c.shard.view_id,
                             c.local_norm if toggles.vs_norm else None)
                            for c in clients]
            metrics = evaluate(global_net, clients_info, splits,
                               cfg.unseen_norm, cfg.synth.id_mode)
            log.info("seed %d round %3d: seen %.2f unseen %.2f (train %.2f)",
                     seed, t, metrics.seen_top1, metrics.unseen_top1,
                     report.mean_train_acc)
        rows.append(MetricsRow(
            round=t, method=cfg.method, seed=seed,
            seen_top1=metrics.seen_top1, seen_top5=metrics.seen_top5,
            unseen_top1=metrics.unseen_top1, unseen_top5=metrics.unseen_top5,
            map_pct=metrics.map_pct, cmc1=metrics.cmc1,
            bytes_up=report.bytes_up_total, bytes_down=report.bytes_down_total,
            cum_bytes=cum, n_selected_blocks=report.n_selected))
        if captured is not None:
            captured.append(np.concatenate(
                [global_net.flatten_block(bid, "all") for bid in global_net.block_ids()]))

    trace = {}
    for bid in global_net.block_ids():
        trace[bid] = {
            "rounds_strong": sla_state.rounds_strong.get(bid, 0),
            "rounds_weak": sla_state.rounds_weak.get(bid, 0),
            "rounds_gated": sla_state.rounds_gated.get(bid, 0),
        }
    series = [r.unseen_top1 for r in rows]
    conv = detect_convergence(series)
    return SeedResult(
        seed=seed, rows=rows, reports=reports, trace=trace,
        r_star=conv.r_star, total_bytes=cum, final=metrics,
        best_unseen_top1=max(series), captured_globals=captured)


def run_experiment(cfg: ExperimentConfig, data_file: str | None = None,
                   capture_globals: bool = False) -> RunArtifacts:
    """Run every seed of the configured method and build the artifacts."""
    cfg.validate()
    toggles = method_toggles(cfg.method)
    threads = thread_count()
    dataset = None
    if data_file is not None:
        dataset = load_dataset(data_file)
        # the file records its own draw seed; everything else must match
        if replace(dataset.config, seed=0) != replace(cfg.synth, seed=0):
            raise ConfigError(
                "dataset file was generated under a different synth config")
    seed_results = []
    started = time.monotonic()
    for seed in cfg.seeds:
        seed_results.append(_run_seed(cfg, toggles, seed, dataset, threads,
                                      capture_globals))
    log.info("method %s: %d seed(s) in %.1f s", cfg.method, len(cfg.seeds),
             time.monotonic() - started)

    per_seed = {}
    for sr in seed_results:
        per_seed[str(sr.seed)] = {
            "final": {
                "round": cfg.rounds,
                "seen_top1": sr.final.seen_top1,
                "seen_top5": sr.final.seen_top5,
                "unseen_top1": sr.final.unseen_top1,
                "unseen_top5": sr.final.unseen_top5,
                "map": sr.final.map_pct,
                "cmc1": sr.final.cmc1,
            },
            "best_unseen_top1": sr.best_unseen_top1,
            "r_star": sr.r_star,
            "total_bytes": sr.total_bytes,
            "total_gb": sr.total_bytes / 1e9,
        }
    n = len(seed_results)
    r_stars = [sr.r_star for sr in seed_results if sr.r_star is not None]
    summary = {
        "method": cfg.method,
        "version": __version__,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        "mean": {
            "final_seen_top1": sum(sr.final.seen_top1 for sr in seed_results) / n,
            "final_unseen_top1": sum(sr.final.unseen_top1 for sr in seed_results) / n,
            "best_unseen_top1": sum(sr.best_unseen_top1 for sr in seed_results) / n,
            "total_bytes": sum(sr.total_bytes for sr in seed_results) / n,
            "total_gb": sum(sr.total_bytes for sr in seed_results) / n / 1e9,
            "r_star": sum(r_stars) / len(r_stars) if r_stars else None,
        },
        "config": config_to_dict(cfg),
    }
    return RunArtifacts(cfg, toggles, seed_results, summary)


def emit_outputs(artifacts: RunArtifacts, out_dir) -> dict[str, str]:
    """Write metrics.csv, sync_trace.csv, and summary.json under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in artifacts.rows:
            writer.writerow(row.to_csv())
    paths["metrics"] = metrics_path

    cfg = artifacts.config
    total_rounds = cfg.rounds * len(cfg.seeds)
    merged: dict[int, dict[str, int]] = {}
    for sr in artifacts.seed_results:
        for bid, counts in sr.trace.items():
            slot = merged.setdefault(
                bid, {"rounds_strong": 0, "rounds_weak": 0, "rounds_gated": 0})
            for key in slot:
                slot[key] += counts[key]
    trace_path = os.path.join(out_dir, "sync_trace.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for bid in sorted(merged):
            counts = merged[bid]
            freq = counts["rounds_strong"] / total_rounds
            writer.writerow([bid, counts["rounds_strong"], counts["rounds_weak"],
                             counts["rounds_gated"], f"{freq:.6f}"])
    paths["sync_trace"] = trace_path

    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(artifacts.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["summary"] = summary_path
    return paths
