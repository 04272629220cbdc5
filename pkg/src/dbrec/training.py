"""Pretraining, group-embedding initialization, the epoch loop, checkpoints.

Every random stream is derived from (seed, epoch, purpose), so training is a
pure function of (dataset, config, seed) and resuming from a checkpoint at an
epoch boundary replays the exact same sequence as an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import InteractionDataset
from .errors import ConfigError, IntegrityError, NumericError
from .model import (
    DBRec,
    HyperParams,
    ModelParams,
    TrainBatch,
    VARIANTS,
    trainable_parameters,
)

CHECKPOINT_MAGIC = b"DBRC"
CHECKPOINT_VERSION = 1

STREAM_SHUFFLE, STREAM_CF_NEG, STREAM_GROUP_NEG = 0, 1, 2


@dataclass
class TrainConfig:
    hp: HyperParams
    epochs: int = 100
    pretrain_epochs: int = 20
    eval_every: int = 5
    early_stop_evals: int = 10
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-4
    use_pretrain: bool = True
    pretrain_embeddings_only: bool = False
    eval_negatives: int = 99
    eval_max_pairs: int = 0  # 0 = evaluate every pair

    @property
    def seed(self) -> int:
        return self.hp.seed

    def validate(self) -> None:
        self.hp.validate()
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0 (0 disables validation)")
        if self.kmeans_iters < 1 or self.kmeans_tol <= 0:
            raise ConfigError("kmeans_iters must be >= 1 and kmeans_tol > 0")


# ---------------------------------------------------------------------------
# clustering and centroid projection


def kmeans(points: np.ndarray, k: int, iters: int = 100, tol: float = 1e-4, seed: int = 0):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when no centroid moves more than ``tol`` or after ``iters`` rounds.
    An emptied cluster is re-seeded to the point currently farthest from its
    assigned centroid. Returns (centroids, labels).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ConfigError(f"kmeans: need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(0, n)]
    sq_dist = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = sq_dist.sum()
        if total <= 0.0:
            centroids[c] = points[rng.integers(0, n)]
            continue
        draw = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(sq_dist), draw))
        idx = min(idx, n - 1)
        centroids[c] = points[idx]
        sq_dist = np.minimum(sq_dist, np.sum((points - centroids[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.intp)
    for _ in range(iters):
        dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = points[labels == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
            else:
                assigned = dists[np.arange(n), labels]
                new_centroids[c] = points[int(np.argmax(assigned))]
        shift = np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    return centroids, labels


def project_centroids(
    centroids: np.ndarray, d_g: int, seed: int = 0, identity: bool = False
) -> np.ndarray:
    """Reduce centroids to d_g dims with a seeded Gaussian random projection."""
    centroids = np.asarray(centroids, dtype=np.float64)
    d = centroids.shape[1]
    if d_g > d:
        raise ConfigError(f"project_centroids: d_g={d_g} exceeds centroid dim {d}")
    if identity:
        if d_g != d:
            raise ConfigError("identity projection requires d_g == d")
        return centroids.copy()
    rng = np.random.default_rng(seed)
    projection = rng.normal(size=(d, d_g)) / np.sqrt(d)
    return centroids @ projection


def init_groups_from_embeddings(params: ModelParams, cfg: TrainConfig) -> None:
    """Initialize group embeddings from k-means centroids of the embeddings.

    Cluster centroids (in the d-dim embedding space) are projected down to
    d_g dims for the group embeddings; the unprojected centroids also seed
    the activation weights so that initial hard assignments agree with the
    clustering.
    """
    hp = params.hp
    cu, _ = kmeans(
        params.user_emb.values, hp.k, iters=cfg.kmeans_iters, tol=cfg.kmeans_tol, seed=hp.seed
    )
    cv, _ = kmeans(
        params.item_emb.values, hp.k, iters=cfg.kmeans_iters, tol=cfg.kmeans_tol, seed=hp.seed + 1
    )
    params.user_group_emb.values[...] = project_centroids(cu, hp.d_g, seed=hp.seed)
    params.item_group_emb.values[...] = project_centroids(cv, hp.d_g, seed=hp.seed + 1)
    params.group_proj_user_w.values[...] = cu
    params.group_proj_item_w.values[...] = cv


# ---------------------------------------------------------------------------
# batching


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def epoch_batches(
    dataset: InteractionDataset,
    hp: HyperParams,
    seed: int,
    epoch: int,
    need_group_negatives: bool,
):
    """Yield TrainBatch objects for one epoch, fully determined by (seed, epoch)."""
    pairs = dataset.pairs("train")
    shuffle_rng = _epoch_rng(seed, epoch, STREAM_SHUFFLE)
    cf_rng = _epoch_rng(seed, epoch, STREAM_CF_NEG)
    group_rng = _epoch_rng(seed, epoch, STREAM_GROUP_NEG)
    order = shuffle_rng.permutation(len(pairs))
    for start in range(0, len(order), hp.batch_size):
        chosen = order[start : start + hp.batch_size]
        pos_users = np.array([pairs[i][0] for i in chosen], dtype=np.intp)
        pos_items = np.array([pairs[i][1] for i in chosen], dtype=np.intp)
        neg_users = np.repeat(pos_users, hp.neg_cf)
        neg_items = np.empty(len(chosen) * hp.neg_cf, dtype=np.intp)
        pos_sets = dataset.train_pos
        n_items = dataset.num_items
        w = 0
        for u in pos_users:
            positives = pos_sets[u]
            taken: set[int] = set()
            while len(taken) < hp.neg_cf:
                draw = int(cf_rng.integers(0, n_items))
                if draw in positives or draw in taken:
                    continue
                taken.add(draw)
                neg_items[w] = draw
                w += 1
        if need_group_negatives:
            group_neg_users = group_rng.integers(0, dataset.num_users, hp.neg_group).astype(np.intp)
            group_neg_items = group_rng.integers(0, dataset.num_items, hp.neg_group).astype(np.intp)
        else:
            group_neg_users = np.empty(0, dtype=np.intp)
            group_neg_items = np.empty(0, dtype=np.intp)
        yield TrainBatch(
            pos_users=pos_users,
            pos_items=pos_items,
            neg_users=neg_users,
            neg_items=neg_items,
            group_neg_users=group_neg_users,
            group_neg_items=group_neg_items,
        )


# ---------------------------------------------------------------------------
# training loops


@dataclass
class EpochLog:
    epoch: int
    cf: float
    hier_user: float
    hier_item: float
    group_user: float
    group_item: float
    val_hr10: float | None
    val_ndcg10: float | None
    wall_seconds: float

    def as_csv_row(self) -> list[str]:
        fmt = lambda x: "" if x is None else repr(float(x))
        return [
            str(self.epoch),
            *(repr(float(v)) for v in (self.cf, self.hier_user, self.hier_item,
                                       self.group_user, self.group_item)),
            fmt(self.val_hr10),
            fmt(self.val_ndcg10),
            f"{self.wall_seconds:.3f}",
        ]


LOG_HEADER = [
    "epoch", "L_uv", "L_uu", "L_vv", "L_u", "L_v",
    "val_HR@10", "val_NDCG@10", "wall_seconds",
]


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    best_hr10: float | None
    best_epoch: int | None
    stopped_early: bool


def _first_bad_tensor(params: ModelParams) -> str | None:
    for p in params.all_parameters():
        if not np.all(np.isfinite(p.values)) or not np.all(np.isfinite(p.grad)):
            return p.name
    return None


def train(
    dataset: InteractionDataset,
    cfg: TrainConfig,
    params: ModelParams,
    variant: str = "dbrec",
    epochs: int | None = None,
    start_epoch: int = 0,
    checkpoint_dir=None,
    best_hr10: float | None = None,
    best_epoch: int | None = None,
    evals_since_improve: int = 0,
    eval_split: str = "valid",
) -> TrainResult:
    """Run the epoch loop over the joint objective.

    Writes ``last.ckpt`` after each epoch and ``best.ckpt`` whenever the
    validation hit ratio improves (when ``checkpoint_dir`` is given). Early
    stop after ``cfg.early_stop_evals`` evaluations without improvement.
    """
    from .evaluation import evaluate  # local import to avoid a cycle

    cfg.validate()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}' (expected one of {sorted(VARIANTS)})")
    mask = VARIANTS[variant]
    model = DBRec(params, mask)
    trainables = trainable_parameters(params, mask)
    ad.zero_grads(trainables)
    total_epochs = cfg.epochs if epochs is None else epochs
    hp = cfg.hp
    need_group_negs = hp.alpha > 0.0 and (mask.user_groups or mask.item_groups)

    log: list[EpochLog] = []
    stopped = False
    for epoch in range(start_epoch, total_epochs):
        tic = time.perf_counter()
        sums = np.zeros(5)
        try:
            for batch in epoch_batches(dataset, hp, cfg.seed, epoch, need_group_negs):
                total, terms = model.total_loss(batch)
                sums += terms.as_row()
                ad.backward(total)
                ad.adam_step(trainables, hp.lr)
        except NumericError as err:
            bad = _first_bad_tensor(params)
            where = f" (first non-finite tensor: {bad})" if bad else ""
            raise NumericError(f"training diverged at epoch {epoch}: {err}{where}")

        val_hr = val_ndcg = None
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            report = evaluate(
                model,
                dataset,
                eval_split,
                seed=cfg.seed,
                count=cfg.eval_negatives,
                max_pairs=cfg.eval_max_pairs,
            )
            val_hr, val_ndcg = report.hr[10], report.ndcg[10]
            if best_hr10 is None or val_hr > best_hr10:
                best_hr10, best_epoch = val_hr, epoch
                evals_since_improve = 0
                if checkpoint_dir is not None:
                    save_checkpoint(
                        Path(checkpoint_dir) / "best.ckpt",
                        params,
                        variant=variant,
                        epoch=epoch + 1,
                        meta={"best_hr10": best_hr10, "best_epoch": best_epoch,
                              "evals_since_improve": 0},
                    )
            else:
                evals_since_improve += 1

        log.append(
            EpochLog(
                epoch=epoch,
                cf=sums[0],
                hier_user=sums[1],
                hier_item=sums[2],
                group_user=sums[3],
                group_item=sums[4],
                val_hr10=val_hr,
                val_ndcg10=val_ndcg,
                wall_seconds=time.perf_counter() - tic,
            )
        )
        if checkpoint_dir is not None:
            save_checkpoint(
                Path(checkpoint_dir) / "last.ckpt",
                params,
                variant=variant,
                epoch=epoch + 1,
                meta={"best_hr10": best_hr10, "best_epoch": best_epoch,
                      "evals_since_improve": evals_since_improve},
            )
        if cfg.eval_every and evals_since_improve >= cfg.early_stop_evals:
            stopped = True
            break

    return TrainResult(
        params=params,
        log=log,
        best_hr10=best_hr10,
        best_epoch=best_epoch,
        stopped_early=stopped,
    )


def pretrain(dataset: InteractionDataset, cfg: TrainConfig) -> TrainResult:
    """Train the plain user-item network to warm-start embeddings.

    Zero pretrain epochs returns the seeded random initialization unchanged.
    """
    cfg.validate()
    params = ModelParams(dataset.num_users, dataset.num_items, cfg.hp)
    if cfg.pretrain_epochs == 0:
        return TrainResult(params=params, log=[], best_hr10=None, best_epoch=None,
                           stopped_early=False)
    quiet = dataclasses.replace(cfg, eval_every=0)
    return train(
        dataset,
        quiet,
        params,
        variant="dbrec-o",
        epochs=cfg.pretrain_epochs,
        start_epoch=0,
    )


def carry_pretrained(pretrained: ModelParams, cfg: TrainConfig) -> ModelParams:
    """Select what transfers from pretraining into the main model.

    Default: the pretrained parameter set continues as-is (embeddings plus
    the user-item network). With ``pretrain_embeddings_only`` a fresh model
    keeps only the pretrained embeddings.
    """
    if not cfg.pretrain_embeddings_only:
        return pretrained
    fresh = ModelParams(pretrained.num_users, pretrained.num_items, cfg.hp)
    fresh.user_emb.values[...] = pretrained.user_emb.values
    fresh.item_emb.values[...] = pretrained.item_emb.values
    return fresh


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TensorState:
    name: str
    shape: tuple[int, ...]
    step_count: int
    values: np.ndarray
    m: np.ndarray
    v: np.ndarray


@dataclass
class Checkpoint:
    num_users: int
    num_items: int
    hp: HyperParams
    variant: str
    epoch: int
    seed: int
    meta: dict
    tensors: dict[str, TensorState]


def _hp_to_json(hp: HyperParams) -> dict:
    out = dataclasses.asdict(hp)
    for key in ("hidden_uv", "hidden_ug", "hidden_vg", "hidden_hier"):
        out[key] = list(out[key])
    return out


def _hp_from_json(payload: dict) -> HyperParams:
    kwargs = dict(payload)
    for key in ("hidden_uv", "hidden_ug", "hidden_vg", "hidden_hier"):
        kwargs[key] = tuple(kwargs[key])
    return HyperParams(**kwargs)


def save_checkpoint(path, params: ModelParams, variant: str, epoch: int, meta: dict | None = None) -> None:
    """Write a self-contained checkpoint: header JSON + raw tensors + SHA-256."""
    tensors = params.all_parameters()
    header = {
        "num_users": params.num_users,
        "num_items": params.num_items,
        "hyper": _hp_to_json(params.hp),
        "variant": variant,
        "epoch": epoch,
        "seed": params.hp.seed,
        "meta": meta or {},
        "tensors": [
            {"name": p.name, "shape": list(p.shape), "step_count": p.step_count}
            for p in tensors
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for p in tensors:
        for arr in (p.values, p.m, p.v):
            blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 4 + 4 + 8 + 32:
        raise IntegrityError(f"checkpoint truncated: {path}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"checkpoint checksum mismatch (corrupt or truncated): {path}")
    if body[:4] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"checkpoint version {version} unsupported "
                             f"(expected {CHECKPOINT_VERSION})")
    (header_len,) = struct.unpack_from("<Q", body, 8)
    header_start = 16
    header = json.loads(body[header_start : header_start + header_len].decode("utf-8"))
    offset = header_start + header_len
    tensors: dict[str, TensorState] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays = []
        for _ in range(3):
            nbytes = count * 8
            if offset + nbytes > len(body):
                raise IntegrityError(f"checkpoint payload truncated: {path}")
            arrays.append(
                np.frombuffer(body, dtype="<f8", count=count, offset=offset)
                .reshape(shape)
                .copy()
            )
            offset += nbytes
        tensors[entry["name"]] = TensorState(
            name=entry["name"],
            shape=shape,
            step_count=entry["step_count"],
            values=arrays[0],
            m=arrays[1],
            v=arrays[2],
        )
    if offset != len(body):
        raise IntegrityError(f"checkpoint has trailing bytes: {path}")
    return Checkpoint(
        num_users=header["num_users"],
        num_items=header["num_items"],
        hp=_hp_from_json(header["hyper"]),
        variant=header["variant"],
        epoch=header["epoch"],
        seed=header["seed"],
        meta=header["meta"],
        tensors=tensors,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    params = ModelParams(ckpt.num_users, ckpt.num_items, ckpt.hp)
    live = params.by_name()
    if set(live) != set(ckpt.tensors):
        raise IntegrityError("checkpoint tensor set does not match the model")
    for name, state in ckpt.tensors.items():
        p = live[name]
        if p.shape != state.shape:
            raise IntegrityError(
                f"checkpoint tensor '{name}' has shape {state.shape}, expected {p.shape}"
            )
        p.values[...] = state.values
        p.m[...] = state.m
        p.v[...] = state.v
        p.step_count = state.step_count
        p.zero_grad()
    return params
