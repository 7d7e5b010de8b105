"""Mini-batch SGD training with cosine annealing and warm restarts."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dgcnn import DgcnnModel, forward, load_model, predict, save_model

log = logging.getLogger(__name__)

REPORT_HEADER = ("epoch", "loss", "acc", "lr", "seconds")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr_max: float = 0.1
    lr_min: float = 1e-3
    restart_period_epochs: int = 10
    restart_mult: int = 2
    bn_momentum: float = 0.9
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.restart_period_epochs < 1 or self.restart_mult < 1:
            raise ValueError("restart period and multiplier must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float
    lr: float
    seconds: float
    val_acc: float | None = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    test_acc: float | None = None
    best_epoch: int | None = None

    def write_csv(self, path, header: dict | None = None) -> None:
        """Per-epoch CSV, optionally preceded by ``# key: value`` lines."""
        with open(path, "w", newline="") as fh:
            for key, value in (header or {}).items():
                fh.write(f"# {key}: {value}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.epochs:
                w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.acc:.6f}", f"{r.lr:.8f}", f"{r.seconds:.3f}"])


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """SGDR learning rate for global batch index ``step``.

    The first cycle lasts ``restart_period_epochs * steps_per_epoch``
    batches and each later cycle is ``restart_mult`` times longer.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    period = cfg.restart_period_epochs * steps_per_epoch
    t = step
    while t >= period:
        t -= period
        period *= cfg.restart_mult
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t / period))


def evaluate(model: DgcnnModel, clouds: np.ndarray, labels) -> float:
    """Eval-mode accuracy; argmax ties resolve to the lowest class index."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    pred = predict(model, clouds).argmax(axis=1)
    return float((pred == labels).mean())


def sgd_step(model: DgcnnModel, clouds, labels, lr: float, rng=None, cfg: TrainConfig | None = None,
             velocity: dict | None = None) -> tuple[float, np.ndarray]:
    """One forward/backward/update on a batch; returns (loss, train-mode logits)."""
    with tc.Tape() as tape:
        logits, _ = forward(model, clouds, train=True, rng=rng)
        loss = tc.softmax_cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    model.zero_grad()
    tape.backward(loss)
    wd = cfg.weight_decay if cfg else 0.0
    mom = cfg.momentum if cfg else 0.0
    for i, p in enumerate(model.params()):
        if p.grad is None:
            continue
        g = p.grad
        if wd:
            g = g + p.dtype.type(wd) * p.data
        if mom:
            v = velocity.setdefault(i, np.zeros_like(p.data))
            v *= p.dtype.type(mom)
            v += g
            g = v
        p.data -= p.dtype.type(lr) * g
    return value, logits.data


def _split(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([cfg.seed, 7]).permutation(n)
    n_val = int(round(n * cfg.val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def train(
    model: DgcnnModel,
    clouds: np.ndarray,
    labels,
    cfg: TrainConfig,
    out_dir=None,
    resume: bool = False,
    test: tuple | None = None,
    meta: dict | None = None,
) -> tuple[DgcnnModel, TrainReport]:
    """Train ``model`` in place and return it with the per-epoch report.

    A fraction ``cfg.val_fraction`` of the items is held out for picking
    the best epoch. With ``out_dir`` set, ``last.dgw`` plus
    ``train_state.json`` are written after every epoch and ``best.dgw``
    whenever validation accuracy improves; ``resume=True`` continues from
    them up to ``cfg.epochs``. The returned model is the last-epoch model.
    ``meta`` is embedded in every file written.
    """
    clouds = np.asarray(clouds, dtype=model.w1.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(clouds) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} items, got {len(clouds)}")
    model.config = replace(model.config, bn_momentum=cfg.bn_momentum)
    train_idx, val_idx = _split(len(clouds), cfg)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    report = TrainReport()
    shuffle_rng = np.random.default_rng([cfg.seed, 11])
    dropout_rng = np.random.default_rng([cfg.seed, 13])
    velocity: dict = {}
    start_epoch, step, best_val = 0, 0, -1.0

    if resume:
        if out_dir is None:
            raise ValueError("resume requires out_dir")
        state = json.loads((out_dir / "train_state.json").read_text())
        loaded = load_model(out_dir / "last.dgw", expect=model.config)
        for dst, src in zip(model.params() + model.buffers(), loaded.params() + loaded.buffers()):
            arr = dst.data if isinstance(dst, tc.Tensor) else dst
            arr[...] = src.data if isinstance(src, tc.Tensor) else src
        start_epoch, step, best_val = state["epoch"], state["step"], state["best_val"]
        shuffle_rng = _restore_rng(state["shuffle_rng"])
        dropout_rng = _restore_rng(state["dropout_rng"])
        report.epochs = [EpochRecord(**r) for r in state["report"]]
        report.best_epoch = state["best_epoch"]
        if cfg.momentum and (out_dir / "velocity.npz").exists():
            with np.load(out_dir / "velocity.npz") as vz:
                velocity = {int(k): vz[k] for k in vz.files}

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(train_idx)
        loss_sum, correct, lr = 0.0, 0, cfg.lr_max
        for b, lo in enumerate(range(0, len(perm), cfg.batch_size)):
            rows = perm[lo : lo + cfg.batch_size]
            lr = lr_schedule(step, cfg, steps_per_epoch)
            try:
                loss, logits = sgd_step(model, clouds[rows], labels[rows], lr, dropout_rng, cfg, velocity)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch + 1}, batch {b}: {exc}") from None
            loss_sum += loss * len(rows)
            correct += int((logits.argmax(axis=1) == labels[rows]).sum())
            step += 1
        val_acc = evaluate(model, clouds[val_idx], labels[val_idx]) if len(val_idx) else None
        rec = EpochRecord(
            epoch=epoch + 1,
            loss=loss_sum / len(perm),
            acc=correct / len(perm),
            lr=lr,
            seconds=time.perf_counter() - t0,
            val_acc=val_acc,
        )
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f acc %.4f val %s lr %.5f (%.1fs)", rec.epoch, rec.loss, rec.acc,
                 "-" if val_acc is None else f"{val_acc:.4f}", lr, rec.seconds)

        improved = val_acc is not None and val_acc > best_val
        if improved:
            best_val = val_acc
            report.best_epoch = rec.epoch
        if out_dir is not None:
            save_model(model, out_dir / "last.dgw", meta)
            if improved:
                save_model(model, out_dir / "best.dgw", meta)
            if cfg.momentum:
                np.savez(out_dir / "velocity.npz", **{str(k): v for k, v in velocity.items()})
            state = {
                "epoch": rec.epoch,
                "step": step,
                "best_val": best_val,
                "best_epoch": report.best_epoch,
                "shuffle_rng": _rng_state(shuffle_rng),
                "dropout_rng": _rng_state(dropout_rng),
                "report": [asdict(r) for r in report.epochs],
                "config": asdict(cfg),
                "meta": meta,
            }
            (out_dir / "train_state.json").write_text(json.dumps(state, indent=1))

    if test is not None:
        report.test_acc = evaluate(model, *test)
    return model, report
