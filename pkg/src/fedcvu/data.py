"""Synthetic cross-view data: shared class latents observed through
view-specific affine transforms.

Each class c has a latent prototype p_c. Each of the samples_per_class
instances of class c draws one jitter vector, shared across views, so the
same underlying instance appears in every view (the multi-camera setup).
View v observes instance (p_c + jitter) as

    x = transform_v @ (p_c + jitter) + bias_v + noise

where transform_v is a bounded-angle random rotation composed with a
per-view diagonal scaling, bias_v is a per-view offset, and the noise is
drawn per (view, sample). Views are tagged seen or unseen; unseen views
contribute evaluation data only.

All draws go through one generator in a fixed documented order
(prototypes, per-class jitters, per-view specs, per-view noise), so a
seed fully determines the dataset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError
from .util import STREAM_GEN, STREAM_PARTITION, STREAM_SPLIT, rng_for

DATASET_FORMAT = "fedcvu-dataset"
DATASET_VERSION = 1

# Identity-mode instances sit closer to their prototype so that retrieval
# across views is about the view shift, not instance spread.
ID_MODE_JITTER_SCALE = 0.3


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 12
    d_in: int = 32
    n_views: int = 8
    seen_views: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    unseen_views: tuple[int, ...] = (6, 7)
    samples_per_class_per_view: int = 120
    class_sep: float = 3.0
    jitter_std: float = 1.0
    noise_std: float = 0.1
    view_rotation: float = 0.25
    view_scale_lo: float = 0.7
    view_scale_hi: float = 1.3
    view_bias_std: float = 0.5
    cond_cap: float = 10.0
    train_fraction: float = 0.8
    id_mode: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.d_in < 2:
            raise ConfigError("d_in must be >= 2")
        if self.samples_per_class_per_view < 1:
            raise ConfigError("samples_per_class_per_view must be >= 1")
        seen, unseen = set(self.seen_views), set(self.unseen_views)
        if not seen or not unseen:
            raise ConfigError("need at least one seen and one unseen view")
        if seen & unseen:
            raise ConfigError("seen and unseen views overlap")
        if seen | unseen != set(range(self.n_views)):
            raise ConfigError("seen+unseen must cover exactly views 0..n_views-1")
        if not 0.0 < self.view_scale_lo <= self.view_scale_hi:
            raise ConfigError("need 0 < view_scale_lo <= view_scale_hi")
        if self.view_scale_hi / self.view_scale_lo > self.cond_cap:
            raise ConfigError("view scaling exceeds the condition-number cap")
        if self.noise_std < 0 or self.jitter_std < 0 or self.view_bias_std < 0:
            raise ConfigError("std parameters must be >= 0")
        if self.view_rotation < 0:
            raise ConfigError("view_rotation must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class ViewSpec:
    view_id: int
    transform: np.ndarray  # (d_in, d_in) float64
    bias: np.ndarray       # (d_in,) float64
    noise_std: float
    role: str              # "seen" or "unseen"


@dataclass
class ViewData:
    view_id: int
    x: np.ndarray  # (n, d_in) float32
    y: np.ndarray  # (n,) int64


@dataclass
class Shard:
    client_id: int
    view_id: int
    x: np.ndarray
    y: np.ndarray

    @property
    def n_c(self) -> int:
        return int(self.x.shape[0])


@dataclass
class SynthDataset:
    config: SynthConfig
    prototypes: np.ndarray  # (K, d_in) float64
    specs: list[ViewSpec]
    views: list[ViewData]

    def seen_views(self) -> list[ViewData]:
        seen = set(self.config.seen_views)
        return [v for v in self.views if v.view_id in seen]

    def unseen_views(self) -> list[ViewData]:
        unseen = set(self.config.unseen_views)
        return [v for v in self.views if v.view_id in unseen]


def _random_rotation(rng: np.random.Generator, d: int, strength: float) -> np.ndarray:
    """Orthonormal matrix near the identity for small strength."""
    if strength == 0.0:
        return np.eye(d)
    g = rng.standard_normal((d, d))
    skew = (g - g.T) / np.sqrt(2.0 * d)
    return expm(strength * skew)


def make_view_specs(cfg: SynthConfig, rng: np.random.Generator) -> list[ViewSpec]:
    seen = set(cfg.seen_views)
    specs = []
    for v in range(cfg.n_views):
        q = _random_rotation(rng, cfg.d_in, cfg.view_rotation)
        scales = rng.uniform(cfg.view_scale_lo, cfg.view_scale_hi, size=cfg.d_in)
        transform = q * scales  # Q @ diag(scales)
        bias = rng.standard_normal(cfg.d_in) * cfg.view_bias_std
        specs.append(ViewSpec(
            view_id=v,
            transform=transform,
            bias=bias,
            noise_std=cfg.noise_std,
            role="seen" if v in seen else "unseen",
        ))
    return specs


def generate(cfg: SynthConfig) -> SynthDataset:
    """Build the full dataset for a config; bitwise deterministic in the seed."""
    cfg.validate()
    rng = rng_for(cfg.seed, STREAM_GEN)
    k, d, n = cfg.n_classes, cfg.d_in, cfg.samples_per_class_per_view

    prototypes = cfg.class_sep * rng.standard_normal((k, d))
    jitter_std = cfg.jitter_std * (ID_MODE_JITTER_SCALE if cfg.id_mode else 1.0)
    # One latent per (class, instance), shared across all views.
    latents = prototypes[:, None, :] + jitter_std * rng.standard_normal((k, n, d))

    specs = make_view_specs(cfg, rng)
    views = []
    labels = np.repeat(np.arange(k, dtype=np.int64), n)
    for spec in specs:
        base = latents.reshape(k * n, d) @ spec.transform.T + spec.bias
        if spec.noise_std > 0.0:
            base = base + spec.noise_std * rng.standard_normal((k * n, d))
        views.append(ViewData(spec.view_id, base.astype(np.float32), labels.copy()))
    return SynthDataset(cfg, prototypes, specs, views)


def partition_clients(seen_train: list[ViewData], n_clients: int, seed: int) -> list[Shard]:
    """Disjoint single-view shards, clients spread over views as evenly as
    possible (earlier views absorb the remainder), each view's samples
    shuffled then split with per-shard size differences of at most one."""
    n_views = len(seen_train)
    if n_views < 1:
        raise ConfigError("partitioning needs at least one seen view")
    if n_clients < n_views:
        raise ConfigError(f"need at least one client per seen view ({n_views}), got {n_clients}")
    rng = rng_for(seed, STREAM_PARTITION)
    base, extra = divmod(n_clients, n_views)
    shards: list[Shard] = []
    cid = 0
    for j, view in enumerate(sorted(seen_train, key=lambda v: v.view_id)):
        k_here = base + (1 if j < extra else 0)
        perm = rng.permutation(view.x.shape[0])
        for chunk in np.array_split(perm, k_here):
            idx = np.sort(chunk)
            shards.append(Shard(cid, view.view_id, view.x[idx], view.y[idx]))
            cid += 1
    return shards


@dataclass
class EvalSplits:
    seen_train: list[ViewData]
    seen_test_x: np.ndarray
    seen_test_y: np.ndarray
    seen_test_view: np.ndarray
    unseen_test_x: np.ndarray
    unseen_test_y: np.ndarray
    unseen_test_view: np.ndarray
    query_idx: np.ndarray | None = None    # indices into unseen_test_*
    gallery_idx: np.ndarray | None = None
    excluded_identities: int = 0


def eval_splits(dataset: SynthDataset) -> EvalSplits:
    """Per-seen-view train/test split plus the full unseen test set; in
    id_mode the unseen samples are split into query/gallery per identity."""
    cfg = dataset.config
    rng = rng_for(cfg.seed, STREAM_SPLIT)
    seen_train: list[ViewData] = []
    test_parts = []
    for view in sorted(dataset.seen_views(), key=lambda v: v.view_id):
        n = view.x.shape[0]
        perm = rng.permutation(n)
        cut = int(round(cfg.train_fraction * n))
        if cut < 1 or cut >= n:
            raise ConfigError("train_fraction leaves an empty split")
        tr, te = np.sort(perm[:cut]), np.sort(perm[cut:])
        seen_train.append(ViewData(view.view_id, view.x[tr], view.y[tr]))
        test_parts.append((view.x[te], view.y[te],
                           np.full(te.size, view.view_id, dtype=np.int64)))
    seen_x = np.concatenate([p[0] for p in test_parts])
    seen_y = np.concatenate([p[1] for p in test_parts])
    seen_v = np.concatenate([p[2] for p in test_parts])

    unseen = sorted(dataset.unseen_views(), key=lambda v: v.view_id)
    un_x = np.concatenate([v.x for v in unseen])
    un_y = np.concatenate([v.y for v in unseen])
    un_v = np.concatenate([np.full(v.x.shape[0], v.view_id, dtype=np.int64) for v in unseen])

    splits = EvalSplits(seen_train, seen_x, seen_y, seen_v, un_x, un_y, un_v)
    if cfg.id_mode:
        query, gallery, excluded = [], [], 0
        for c in range(cfg.n_classes):
            idx = np.flatnonzero(un_y == c)
            if idx.size < 2:
                excluded += 1
                continue
            perm = idx[rng.permutation(idx.size)]
            nq = min(max(1, int(round(0.2 * idx.size))), idx.size - 1)
            query.append(perm[:nq])
            gallery.append(perm[nq:])
        splits.query_idx = np.sort(np.concatenate(query)) if query else np.empty(0, np.int64)
        splits.gallery_idx = np.sort(np.concatenate(gallery)) if gallery else np.empty(0, np.int64)
        splits.excluded_identities = excluded
    return splits


# ---- dataset files ----
#
# Layout: one JSON header line (format, version, config, array manifest
# with dtype/shape in order), a newline, then the raw C-order bytes of
# each array back to back. No timestamps, so identical datasets produce
# identical files.

def save_dataset(dataset: SynthDataset, path: str) -> None:
    arrays: list[tuple[str, np.ndarray]] = [("prototypes", dataset.prototypes)]
    specs = sorted(dataset.specs, key=lambda s: s.view_id)
    arrays.append(("transforms", np.stack([s.transform for s in specs])))
    arrays.append(("biases", np.stack([s.bias for s in specs])))
    arrays.append(("noise_stds", np.array([s.noise_std for s in specs])))
    for view in sorted(dataset.views, key=lambda v: v.view_id):
        arrays.append((f"x{view.view_id}", np.ascontiguousarray(view.x)))
        arrays.append((f"y{view.view_id}", np.ascontiguousarray(view.y)))
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": asdict(dataset.config),
        "arrays": [{"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
                   for n, a in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_dataset(path: str) -> SynthDataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"not a dataset file: {path}") from exc
        if header.get("format") != DATASET_FORMAT:
            raise ConfigError(f"not a dataset file: {path}")
        if header.get("version") != DATASET_VERSION:
            raise ConfigError(
                f"unsupported dataset version {header.get('version')} in {path}")
        raw_cfg = dict(header["config"])
        raw_cfg["seen_views"] = tuple(raw_cfg["seen_views"])
        raw_cfg["unseen_views"] = tuple(raw_cfg["unseen_views"])
        cfg = SynthConfig(**raw_cfg)
        arrays = {}
        for meta in header["arrays"]:
            dtype = np.dtype(meta["dtype"])
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ConfigError(f"truncated dataset file: {path}")
            arrays[meta["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    seen = set(cfg.seen_views)
    specs = [ViewSpec(v, arrays["transforms"][v], arrays["biases"][v],
                      float(arrays["noise_stds"][v]),
                      "seen" if v in seen else "unseen")
             for v in range(cfg.n_views)]
    views = [ViewData(v, arrays[f"x{v}"], arrays[f"y{v}"]) for v in range(cfg.n_views)]
    return SynthDataset(cfg, arrays["prototypes"], specs, views)
