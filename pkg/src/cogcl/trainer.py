"""Epoch schedule: code refresh, augmented graphs, positive index, batched Adam."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from cogcl.compute import ParameterStore, Tape, adam_step, diagnostics, save_checkpoint
from cogcl.encoder import CODE_EMBEDDING, EMBEDDING, EncoderConfig, base_representations, encode_all_views
from cogcl.evaluation import DEFAULT_NS, full_rank_evaluate, select_best
from cogcl.graph import AugmentationConfig, build_augmented_pair, build_base_graph
from cogcl.objective import (
    LossWeights,
    alignment_uniformity,
    build_positive_index,
    iter_batches,
    total_loss,
)
from cogcl.quantizer import QuantizerConfig, code_usage, init_codebooks, refresh_codes

logger = logging.getLogger(__name__)

MODES = ("cogcl", "lightgcn_baseline")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4096
    embed_dim: int = 64
    num_layers: int = 3
    num_levels: int = 4
    codebook_size: int = 256
    scheme: str = "rq"
    tau: float = 0.2
    lambda_code: float = 1.0
    mu_aug: float = 0.1
    eta_sim: float = 0.02
    p_replace: float = 0.3
    p_add: float = 0.2
    dropout_rate: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    patience: int = 20
    seed: int = 2024
    mode: str = "cogcl"
    grad_stop_aug: str = "none"
    grad_stop_sim: str = "none"
    shared_codes: bool = True
    shared_targets: bool = True
    positive_cap: int = 50
    eval_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        for name in ("batch_size", "embed_dim", "num_layers", "num_levels", "codebook_size",
                     "patience", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        for name in ("p_replace", "p_add"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        # validated by their own constructors
        self.encoder(), self.quantizer(), self.weights()

    @property
    def cogcl(self) -> bool:
        return self.mode == "cogcl"

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.num_layers, self.embed_dim, self.dropout_rate)

    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(self.scheme, self.num_levels, self.codebook_size, self.tau)

    def weights(self) -> LossWeights:
        if not self.cogcl:
            return LossWeights(0.0, 0.0, 0.0)
        return LossWeights(self.lambda_code, self.mu_aug, self.eta_sim,
                           self.grad_stop_aug, self.grad_stop_sim)

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(self.p_replace, self.p_add, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _rng(cfg: TrainConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *stream]))


def init_parameters(ds, cfg: TrainConfig) -> ParameterStore:
    """Xavier-uniform ID and code embeddings, unit-norm codebooks."""
    rng = _rng(cfg, 0)
    store = ParameterStore(np.dtype(cfg.dtype))
    n = ds.num_users + ds.num_items
    bound = np.sqrt(6.0 / (n + cfg.embed_dim))
    store.add(EMBEDDING, rng.uniform(-bound, bound, size=(n, cfg.embed_dim)))
    if cfg.cogcl:
        nc = 2 * cfg.num_levels * cfg.codebook_size
        bound = np.sqrt(6.0 / (nc + cfg.embed_dim))
        store.add(CODE_EMBEDDING, rng.uniform(-bound, bound, size=(nc, cfg.embed_dim)))
        init_codebooks(store, cfg.quantizer(), cfg.embed_dim, rng)
    return store


@dataclass
class EpochContext:
    """Per-epoch constants (identical objects for every batch of the epoch)."""
    epoch: int
    codes: object = None
    pair: object = None
    index: object = None


@dataclass
class TrainResult:
    store: ParameterStore
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_store: ParameterStore | None = None
    context: EpochContext | None = None


def checkpoint_meta(ds, cfg: TrainConfig, epoch: int) -> dict:
    return {"config": cfg.to_dict(), "epoch": epoch,
            "num_users": ds.num_users, "num_items": ds.num_items}


def prepare_epoch(store, ds, base_graph, cfg: TrainConfig, epoch: int) -> EpochContext:
    ctx = EpochContext(epoch)
    if not cfg.cogcl:
        return ctx
    ctx.codes = refresh_codes(store, base_graph, cfg.encoder(), cfg.quantizer(), epoch)
    ctx.pair = build_augmented_pair(ds, ctx.codes, cfg.augmentation(), epoch)
    ctx.index = build_positive_index(ctx.codes, ds, cfg.num_levels, cap=cfg.positive_cap,
                                     seed=int(_rng(cfg, 3, epoch).integers(2**31)),
                                     use_codes=cfg.shared_codes, use_targets=cfg.shared_targets)
    return ctx


def train_step(store, ds, base_graph, ctx: EpochContext, batch, cfg: TrainConfig,
               rng: np.random.Generator, apply: bool = True) -> dict:
    tape = Tape()
    rngs = tuple(np.random.default_rng(s) for s in rng.integers(2**63 - 1, size=3))
    views = encode_all_views(tape, base_graph, ctx.pair, store, cfg.encoder(), rngs, train=True)
    out = total_loss(tape, store, views, batch, ds.num_users, cfg.weights(),
                     cfg.quantizer() if cfg.cogcl else None, cfg.tau)
    tape.backward(out.total)
    if apply:
        adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return out.components


def evaluate_store(store, ds, base_graph, cfg: TrainConfig, split: str = "valid", ns=DEFAULT_NS):
    z = base_representations(store, base_graph, cfg.encoder())
    return full_rank_evaluate(z[:ds.num_users], z[ds.num_users:], ds, split, ns)


def _jsonl(fh, rec: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()


def train(ds, cfg: TrainConfig, out_dir=None,
          on_batch: Callable[[EpochContext, int, object], None] | None = None,
          store: ParameterStore | None = None) -> TrainResult:
    """Train, early-stop on validation NDCG@10 and return the best parameters."""
    base_graph = build_base_graph(ds)
    store = store if store is not None else init_parameters(ds, cfg)
    result = TrainResult(store)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = diag_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w", encoding="utf-8")
        diag_fh = open(out / "diagnostics.jsonl", "w", encoding="utf-8")
    ndcg_history: list[float] = []
    best_store = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            ctx = prepare_epoch(store, ds, base_graph, cfg, epoch)
            result.context = ctx
            rng = _rng(cfg, 1, epoch)
            sums: dict[str, float] = {}
            empty_u = empty_i = nb = 0
            for b, batch in enumerate(iter_batches(ds, ctx.index, cfg.batch_size, rng)):
                if on_batch is not None:
                    on_batch(ctx, b, batch)
                comps = train_step(store, ds, base_graph, ctx, batch, cfg, rng)
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v
                empty_u += batch.empty_user_positives
                empty_i += batch.empty_item_positives
                nb += 1
            losses = {k: v / max(nb, 1) for k, v in sums.items()}
            rec = {"epoch": epoch, "loss": losses, "seconds": time.perf_counter() - t0}
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                m = evaluate_store(store, ds, base_graph, cfg, "valid")
                rec["valid"] = {"recall": m.recall, "ndcg": m.ndcg}
                ndcg_history.append(m.ndcg.get(10, next(iter(m.ndcg.values()))))
                best_idx, stop = select_best(ndcg_history, max(1, cfg.patience // cfg.eval_every))
                if best_idx == len(ndcg_history):
                    best_store = store.copy()
                    result.best_epoch = epoch
                    if out is not None:
                        save_checkpoint(store, out / "ckpt_best", checkpoint_meta(ds, cfg, epoch))
            else:
                stop = False
            result.history.append(rec)
            _jsonl(log_fh, rec)
            if cfg.cogcl:
                _jsonl(diag_fh, _diagnostics(store, ds, base_graph, cfg, ctx, losses, empty_u, empty_i))
            if out is not None:
                save_checkpoint(store, out / "ckpt_last", checkpoint_meta(ds, cfg, epoch))
            logger.info("epoch %d %s", epoch, json.dumps(rec, sort_keys=True))
            if stop:
                break
    finally:
        for fh in (log_fh, diag_fh):
            if fh is not None:
                fh.close()
    if best_store is not None:
        result.best_store = best_store
        store.load_values(best_store)
    return result


def _diagnostics(store, ds, base_graph, cfg, ctx, losses, empty_u, empty_i) -> dict:
    z = base_representations(store, base_graph, cfg.encoder())
    rng = _rng(cfg, 4)
    probe = rng.choice(ds.num_users, size=min(256, ds.num_users), replace=False)
    partners = np.array([ctx.index.users_of(u)[0] if len(ctx.index.users_of(u)) else u for u in probe])
    align, unif = alignment_uniformity(z[probe], tau=cfg.tau, z_pos=z[partners])
    return {
        "epoch": ctx.epoch,
        "loss": losses,
        "empty_user_positives": empty_u,
        "empty_item_positives": empty_i,
        "alignment": align,
        "uniformity": unif,
        "operators": list(ctx.pair.operators),
        "user_code_usage": code_usage(ctx.codes.user_codes, cfg.codebook_size),
        "item_code_usage": code_usage(ctx.codes.item_codes, cfg.codebook_size),
        "cosine_norm_floor": diagnostics.get("cosine_norm_floor", 0),
    }
