"""End-to-end IFM training with dual (digit / texture) model selection."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from ifmlab.checkpoint import CheckpointState, capture, save_checkpoint
from ifmlab.data import to_tensors
from ifmlab.errors import DataExhausted, DivergedLoss, EmptyHistory, InputError
from ifmlab.mi import FORMS, PAIR_NAMES, IFMHead, ifm_loss
from ifmlab.models import ClassifierConfig, init_params, softmax_xent

logger = logging.getLogger(__name__)

UPDATE_MODES = ("joint", "alternating")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    lambda_ifm: float = 1.0
    pairs_per_image: int = 32
    objective_form: str = "standard"
    update_mode: str = "joint"
    batchnorm: str = "shared"
    data_seed: int = 0
    model_seed: int = 0
    sampling_seed: int = 0
    eval_batch_size: int = 1000
    conv_channels: tuple = (32, 64, 128, 128)
    disc_hidden: tuple = (256, 128, 64)

    def validate(self):
        if self.lambda_ifm < 0:
            raise InputError("lambda_ifm must be >= 0")
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.batch_size < 2:
            raise InputError("batch_size must be >= 2")
        if self.pairs_per_image < 1:
            raise InputError("pairs_per_image must be >= 1")
        if self.objective_form not in FORMS:
            raise InputError(f"objective_form must be one of {FORMS}")
        if self.update_mode not in UPDATE_MODES:
            raise InputError(f"update_mode must be one of {UPDATE_MODES}")
        if self.batchnorm not in ("shared", "separate"):
            raise InputError("batchnorm must be 'shared' or 'separate'")
        return self

    def classifier_config(self):
        return ClassifierConfig(conv_channels=tuple(self.conv_channels))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        for key in ("conv_channels", "disc_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    clf_loss: float
    f_conv12: float
    f_conv23: float
    f_conv34: float
    val_digit_acc: float
    val_texture_acc: float
    seconds: float
    objective_form: str = "standard"

    @property
    def f_values(self):
        return (self.f_conv12, self.f_conv23, self.f_conv34)


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best_digit: CheckpointState
    best_texture: CheckpointState
    final: CheckpointState
    config: TrainConfig
    best_digit_epoch: int = 0
    best_texture_epoch: int = 0


def select_checkpoints(history, checkpoints=None):
    """Epoch indices maximizing val digit and val texture accuracy (earliest on ties).

    With ``checkpoints`` (one per epoch) the matching checkpoints are returned instead.
    """
    if not history:
        raise EmptyHistory("no epochs recorded")
    digit = max(range(len(history)), key=lambda i: (history[i].val_digit_acc, -i))
    texture = max(range(len(history)), key=lambda i: (history[i].val_texture_acc, -i))
    if checkpoints is None:
        return digit, texture
    return checkpoints[digit], checkpoints[texture]


@torch.no_grad()
def predict(model, images, batch_size=1000):
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, len(images), batch_size):
        preds.append(model(images[start : start + batch_size]).logits.argmax(1))
    model.train(was_training)
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def dual_accuracy(model, images, digit, texture, batch_size=1000):
    pred = predict(model, images, batch_size)
    return (pred == digit).double().mean().item(), (pred == texture).double().mean().item()


class _Trainer:
    def __init__(self, config, with_ifm=True, dtype=torch.float32):
        self.config = config
        self.lam = float(config.lambda_ifm)
        self.model = init_params(config.classifier_config(), config.model_seed, dtype)
        self.head = None
        if with_ifm:
            # separate seed stream: building D must not disturb the classifier init
            self.head = IFMHead.for_channels(
                config.conv_channels, config.disc_hidden, seed=10_000 + config.model_seed, dtype=dtype
            )
        self.rngs = [torch.Generator().manual_seed(config.sampling_seed * 3 + i) for i in range(3)]
        params = list(self.model.parameters())
        if self.head is not None and config.update_mode == "joint":
            params += list(self.head.parameters())
        self.opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
        self.disc_opt = None
        if self.head is not None and config.update_mode == "alternating":
            self.disc_opt = torch.optim.SGD(
                self.head.parameters(), lr=config.learning_rate, momentum=config.momentum
            )

    def _mi(self, taps, m):
        cfg = self.config
        return ifm_loss(taps, self.head, m, self.rngs, cfg.objective_form, cfg.batchnorm)

    def step(self, x, y):
        """One optimization step; returns (L, L_clf, [F_1, F_2, F_3]) as floats."""
        cfg = self.config
        m = cfg.pairs_per_image * x.shape[0]
        self.model.train()
        if self.head is not None:
            self.head.train()

        if self.disc_opt is not None:
            # alternating: ascend F for D on frozen taps, then update the classifier
            with torch.no_grad():
                taps = self.model(x).taps
            total, _ = self._mi([t.detach() for t in taps], m)
            self.disc_opt.zero_grad()
            (-total).backward()
            self.disc_opt.step()

        out = self.model(x)
        clf = softmax_xent(out.logits, y)
        f_vals = [float("nan")] * 3
        loss = clf
        if self.head is not None:
            if self.lam == 0.0:
                # reported only; no gradient reaches either network
                with torch.no_grad():
                    total, per_layer = self._mi(out.taps, m)
            else:
                total, per_layer = self._mi(out.taps, m)
                loss = clf - self.lam * total
            f_vals = [e.value.item() for e in per_layer]
        self.opt.zero_grad()
        if self.disc_opt is not None:
            self.head.requires_grad_(False)
        loss.backward()
        if self.disc_opt is not None:
            self.head.requires_grad_(True)
        self.opt.step()
        return loss.item(), clf.item(), f_vals

    def snapshot(self, metadata):
        return capture(self.model, self.head, metadata)


def train(
    config,
    bundle,
    out_dir=None,
    with_ifm=True,
    step_callback: Optional[Callable] = None,
    dtype=torch.float32,
):
    """Minimize ``L_clf - lambda * sum_l F_l`` over classifier and discriminators.

    Keeps the checkpoints with the best validation digit and texture accuracy.
    ``with_ifm=False`` skips building the discriminators altogether (vanilla
    training); with ``lambda_ifm == 0`` they are built and evaluated but
    receive no gradient.  When ``out_dir`` is given, writes ``metrics.jsonl``,
    ``best_digit.ckpt``, ``best_texture.ckpt``, ``final.ckpt`` and ``config.json``.
    """
    config.validate()
    x_train, y_train, _ = to_tensors(bundle.train, dtype)
    x_val, y_val_digit, y_val_texture = to_tensors(bundle.val, dtype)
    n = len(y_train)
    if n < 2:
        raise DataExhausted(f"train split has {n} examples, need at least 2")
    if len(y_val_digit) == 0:
        raise DataExhausted("validation split is empty")

    trainer = _Trainer(config, with_ifm, dtype)
    data_rng = np.random.default_rng(config.data_seed)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics_file = open(out_path / "metrics.jsonl", "w")

    history: List[EpochRecord] = []
    best = {"digit": (None, -1.0, 0), "texture": (None, -1.0, 0)}
    global_step = 0
    try:
        for epoch in range(config.epochs):
            start = time.perf_counter()
            perm = torch.from_numpy(data_rng.permutation(n))
            sums = np.zeros(5)
            steps = 0
            # drop the ragged tail so every train-mode batch has >= 2 examples
            for lo in range(0, n - 1, config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                if len(idx) < 2:
                    break
                loss, clf, f_vals = trainer.step(x_train[idx], y_train[idx])
                if not math.isfinite(loss):
                    raise DivergedLoss(global_step, loss)
                if step_callback is not None:
                    step_callback(global_step, loss, clf, f_vals, trainer)
                sums += (loss, clf, *f_vals)
                steps += 1
                global_step += 1
            means = sums / steps
            val_digit, val_texture = dual_accuracy(
                trainer.model, x_val, y_val_digit, y_val_texture, config.eval_batch_size
            )
            record = EpochRecord(
                epoch, *(float(v) for v in means), val_digit, val_texture,
                time.perf_counter() - start, config.objective_form,
            )
            history.append(record)
            logger.info(
                "epoch %d loss %.4f clf %.4f F %s val digit %.4f texture %.4f (%.1fs)",
                epoch, record.loss, record.clf_loss,
                " ".join(f"{v:.4f}" for v in record.f_values),
                val_digit, val_texture, record.seconds,
            )
            if metrics_file is not None:
                metrics_file.write(json.dumps(asdict(record)) + "\n")
                metrics_file.flush()

            meta = {"epoch": epoch, "val_digit_acc": val_digit, "val_texture_acc": val_texture,
                    "lambda_ifm": config.lambda_ifm, "config": config.to_dict()}
            for key, acc in (("digit", val_digit), ("texture", val_texture)):
                if acc > best[key][1]:
                    best[key] = (trainer.snapshot(dict(meta, role=f"best_{key}")), acc, epoch)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    final = trainer.snapshot({
        "epoch": config.epochs - 1, "lambda_ifm": config.lambda_ifm,
        "config": config.to_dict(), "role": "final",
        "val_digit_acc": history[-1].val_digit_acc, "val_texture_acc": history[-1].val_texture_acc,
    })
    digit_epoch, texture_epoch = select_checkpoints(history)
    assert (digit_epoch, texture_epoch) == (best["digit"][2], best["texture"][2])
    result = TrainResult(history, best["digit"][0], best["texture"][0], final, config, digit_epoch, texture_epoch)
    if out_path is not None:
        save_checkpoint(result.best_digit, out_path / "best_digit.ckpt")
        save_checkpoint(result.best_texture, out_path / "best_texture.ckpt")
        save_checkpoint(result.final, out_path / "final.ckpt")
    return result


def read_metrics(path):
    with open(path) as f:
        return [EpochRecord(**json.loads(line)) for line in f if line.strip()]
