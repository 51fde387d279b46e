"""Training loop and evaluation for the registration model."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import checkpoint as ckpt
from . import registration as reg
from .config import RunConfig
from .core import ParameterStore, Tape, Tensor, backward, no_record
from .data import Pair, draw_field, load_dataset, synth_dataset, warp_pair, write_volume
from .errors import ConfigError, NonFiniteError
from .network import ModelConfig, init_params, model_forward

LOSS_COLUMNS = ("epoch", "iterations", "loss", "ncc", "dice", "diff", "val_dice")


class Adam:
    def __init__(self, store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.store, self.lr, self.b1, self.b2, self.eps = store, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in store.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def scheduled_lr(cfg: RunConfig, iteration: int, total: int) -> float:
    """Learning rate for the 0-based ``iteration`` of ``total``."""
    if cfg.lr_schedule == "poly":
        return cfg.lr * (1.0 - iteration / total) ** 0.9
    return cfg.lr


@dataclass
class PairTensors:
    moving: Tensor
    fixed: Tensor
    onehot_m: np.ndarray
    onehot_f: np.ndarray
    pair: Pair


def label_ids(pairs: list[Pair]) -> list[int]:
    ids = set()
    for p in pairs:
        ids |= set(np.unique(p.labels_m).tolist()) | set(np.unique(p.labels_f).tolist())
    return sorted(ids - {0})


def prepare(pairs: list[Pair], labels: list[int]) -> list[PairTensors]:
    return [PairTensors(Tensor(p.moving[None]), Tensor(p.fixed[None]), reg.one_hot(p.labels_m, labels),
                        reg.one_hot(p.labels_f, labels), p) for p in pairs]


def augment(pt: PairTensors, rng: np.random.Generator, cfg: RunConfig, labels) -> PairTensors:
    """Re-deform the pair's moving subject with a fresh fold-free field drawn like the dataset's."""
    p = pt.pair
    u = draw_field(rng, p.moving.shape, cfg.max_warp, cfg.field_sigma)
    return prepare([warp_pair(p.moving, p.labels_m, u, cfg.multimodal)], labels)[0]


def loss_terms(u: Tensor, pt: PairTensors, cfg: RunConfig) -> dict[str, Tensor]:
    warped = reg.warp_trilinear(pt.moving, u)
    terms = {"ncc": reg.ncc_loss(warped, pt.fixed, cfg.ncc_window),
             "dice": reg.soft_dice_loss(reg.warp_trilinear(pt.onehot_m, u), pt.onehot_f),
             "diff": reg.diffusion_regularizer(u)}
    w = cfg.loss_weights
    terms["loss"] = terms["ncc"] * w[0] + terms["dice"] * w[1] + terms["diff"] * w[2]
    return terms


def predict(store: ParameterStore, model: ModelConfig, pt: PairTensors) -> np.ndarray:
    with no_record():
        return model_forward(pt.moving, pt.fixed, store, model).data


def validation_dice(store, model, pts: list[PairTensors], labels) -> float:
    if not pts:
        return float("nan")
    scores = []
    for pt in pts:
        u = predict(store, model, pt)
        scores.append(reg.dice_metric(reg.warp_nearest(pt.pair.labels_m, u), pt.pair.labels_f, labels)[1])
    return float(np.mean(scores))


def baseline_dice(pts: list[PairTensors], labels) -> float:
    return float(np.mean([reg.dice_metric(pt.pair.labels_m, pt.pair.labels_f, labels)[1] for pt in pts]))


def _non_finite_message(tape: Tape, what: str) -> str:
    node = tape.first_non_finite()
    if node is None:
        return f"{what} is not finite"
    index = tape.nodes.index(node)
    return f"{what} is not finite; first non-finite tensor is the output of op '{node.op}' (tape entry {index})"


def dataset_for(cfg: RunConfig) -> list[Pair]:
    if cfg.data_dir:
        pairs = load_dataset(cfg.data_dir)
        if len(pairs) < cfg.n_pairs:
            raise ConfigError(f"dataset has {len(pairs)} pairs, config needs {cfg.n_pairs}")
        if pairs[0].moving.shape != cfg.model.image_size:
            raise ConfigError(f"dataset extents {pairs[0].moving.shape} != model image_size {cfg.model.image_size}")
        return pairs[:cfg.n_pairs]
    return synth_dataset(cfg.seed, cfg.n_pairs, cfg.model.image_size, cfg.n_labels, cfg.max_warp,
                         cfg.multimodal, cfg.field_sigma)


@dataclass
class TrainResult:
    store: ParameterStore
    history: list[dict] = field(default_factory=list)
    best_val_dice: float = float("nan")
    baseline_val_dice: float = float("nan")
    loss_csv: str | None = None
    checkpoint: str | None = None


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(cfg: RunConfig, pairs: list[Pair] | None = None, out_dir: str | None = None, log=None) -> TrainResult:
    """Minimise NCC + soft Dice + diffusion over the training pairs with Adam.

    One iteration is one optimizer step over ``cfg.batch_size`` pairs, with the
    loss averaged over the batch. Row 0 of the history is the untrained model.
    Pair order and augmentation fields come from a generator seeded by the run
    seed, so a (seed, config) pair fixes the whole curve.
    """
    pairs = dataset_for(cfg) if pairs is None else pairs
    if len(pairs) < cfg.n_train:
        raise ConfigError(f"need {cfg.n_train} training pairs, got {len(pairs)}")
    labels = label_ids(pairs)
    train_pts = prepare(pairs[:cfg.n_train], labels)
    val_pts = prepare(pairs[cfg.n_train:cfg.n_train + cfg.n_val], labels)
    init_seq, order_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    store = init_params(cfg.model, np.random.default_rng(init_seq))
    order_rng = np.random.default_rng(order_seq)
    opt = Adam(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for t in store.values():
        t.requires_grad = True

    out_dir = out_dir if out_dir is not None else cfg.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    result = TrainResult(store)
    result.baseline_val_dice = baseline_dice(val_pts, labels) if val_pts else float("nan")

    def epoch_row(epoch, iterations, sums, n):
        vd = validation_dice(store, cfg.model, val_pts, labels)
        row = {"epoch": epoch, "iterations": iterations, "val_dice": vd}
        row.update({k: sums[k] / n for k in ("loss", "ncc", "dice", "diff")})
        return row

    # epoch 0: the untouched model
    sums = dict.fromkeys(("loss", "ncc", "dice", "diff"), 0.0)
    with no_record():
        for pt in train_pts:
            terms = loss_terms(model_forward(pt.moving, pt.fixed, store, cfg.model), pt, cfg)
            for k in sums:
                sums[k] += terms[k].item()
    history = [epoch_row(0, 0, sums, len(train_pts))]
    best = history[0]["val_dice"]
    best_blob = ckpt.encode(store, cfg.to_dict(), {"epoch": 0})
    if log:
        log(history[-1])

    iterations = 0
    total = cfg.epochs * -(-len(train_pts) // cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(sums, 0.0)
        order = order_rng.permutation(len(train_pts))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for t in store.values():
                t.grad = None
            iterations += 1
            for idx in batch:
                pt = augment(train_pts[idx], order_rng, cfg, labels) if cfg.augment else train_pts[idx]
                with Tape() as tape:
                    u = model_forward(pt.moving, pt.fixed, store, cfg.model)
                    terms = loss_terms(u, pt, cfg)
                    scaled = terms["loss"] * (1.0 / len(batch))
                if not math.isfinite(terms["loss"].item()):
                    raise NonFiniteError(_non_finite_message(tape, f"loss at epoch {epoch}, iteration {iterations}"))
                backward(scaled, tape)
                for k in sums:
                    sums[k] += terms[k].item()
            opt.step(scheduled_lr(cfg, iterations - 1, total))
        history.append(epoch_row(epoch, iterations, sums, len(train_pts)))
        if log:
            log(history[-1])
        vd = history[-1]["val_dice"]
        if not val_pts or (math.isfinite(vd) and not vd <= best):
            best = vd
            best_blob = ckpt.encode(store, cfg.to_dict(), {"epoch": epoch})

    result.history = history
    result.best_val_dice = best
    if out_dir:
        result.loss_csv = os.path.join(out_dir, "loss.csv")
        with open(result.loss_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_COLUMNS)
            for row in history:
                w.writerow([_fmt(row[c]) for c in LOSS_COLUMNS])
        result.checkpoint = os.path.join(out_dir, "best.dcax")
        with open(result.checkpoint, "wb") as fh:
            fh.write(best_blob)
        with open(os.path.join(out_dir, "final.dcax"), "wb") as fh:
            fh.write(ckpt.encode(store, cfg.to_dict(), {"epoch": cfg.epochs}))
    return result


def load_model(path: str) -> tuple[ParameterStore, RunConfig]:
    store, header = ckpt.load(path)
    cfg = RunConfig.from_dict(header["config"])
    ckpt.check_compatible(store, init_params(cfg.model, 0))
    return store, cfg


EVAL_EXTRA = ("dice_pre", "field_rmse")


def evaluate(store: ParameterStore, model: ModelConfig, pairs: list[Pair], out_dir: str,
             dump_volumes: bool = True, dump_grid: bool = True) -> list[dict]:
    """Per-pair metrics CSV plus raw dumps of warped and difference images and the field."""
    if pairs and pairs[0].moving.shape != model.image_size:
        raise ConfigError(f"pair extents {pairs[0].moving.shape} do not match model {model.image_size}")
    os.makedirs(out_dir, exist_ok=True)
    labels = label_ids(pairs)
    rows = []
    for i, pt in enumerate(prepare(pairs, labels)):
        if dump_grid and i == 0:
            with attn.record_sampling() as records:
                u = predict(store, model, pt)
            if records:
                attn.dump_sampling_grid(records, os.path.join(out_dir, "sampling_grid"))
        else:
            u = predict(store, model, pt)
        p = pt.pair
        warped_labels = reg.warp_nearest(p.labels_m, u)
        per, dmean = reg.dice_metric(warped_labels, p.labels_f, labels)
        row = {"pair_id": i, "dice_mean": dmean}
        row.update({f"dice_{l}": per[l] for l in labels})
        row["hd95"] = reg.mean_hd95(warped_labels, p.labels_f, labels)
        row.update(reg.invertibility_metrics(u))
        row["dice_pre"] = reg.dice_metric(p.labels_m, p.labels_f, labels)[1]
        row["field_rmse"] = float(np.sqrt(((u - p.gt_field) ** 2).sum(axis=0).mean()))
        rows.append(row)
        if dump_volumes:
            with no_record():
                warped = reg.warp_trilinear(pt.moving, Tensor(u)).data[0]
            write_volume(os.path.join(out_dir, f"pair{i:03d}_warped.raw"), warped)
            write_volume(os.path.join(out_dir, f"pair{i:03d}_difference.raw"), warped - p.fixed)
            write_volume(os.path.join(out_dir, f"pair{i:03d}_field.raw"), u)
    reg.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows, labels, EVAL_EXTRA)
    return rows
