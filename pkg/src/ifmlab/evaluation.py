"""Dual-label scoring and the baseline-vs-IFM comparison report."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from ifmlab.checkpoint import CheckpointState, load_checkpoint
from ifmlab.data import to_tensors
from ifmlab.errors import ConfigMismatch, EmptySplit, InputError
from ifmlab.training import predict

CSV_COLUMNS = ("model", "split", "n", "digit_acc", "texture_acc", "balance")
MODEL_ORDER = ("Baseline_Digit", "Baseline_Texture", "ours_Digit", "ours_Texture")

# Test accuracies (%) reported for the original shiftedMNIST runs; (digit, texture).
REPORTED_ACCURACY = {
    "Baseline_Digit": (12.44, 95.07),
    "Baseline_Texture": (12.05, 96.44),
    "ours_Digit": (54.54, 40.41),
    "ours_Texture": (31.78, 69.00),
}
LITERATURE_ROWS = {"iCE fi-RevNet": (40.01, None)}


@dataclass
class EvalResult:
    digit_accuracy: float
    texture_accuracy: float
    n: int
    split: str = "test"
    checkpoint_id: str = ""

    @property
    def balance(self):
        return feature_balance(self.digit_accuracy, self.texture_accuracy)

    def csv_row(self):
        return {
            "model": self.checkpoint_id,
            "split": self.split,
            "n": self.n,
            "digit_acc": f"{self.digit_accuracy:.6f}",
            "texture_acc": f"{self.texture_accuracy:.6f}",
            "balance": f"{self.balance:.6f}",
        }


def feature_balance(digit_acc, texture_acc):
    """min/max of the two accuracies; 1.0 means both cues are used equally."""
    hi = max(digit_acc, texture_acc)
    return min(digit_acc, texture_acc) / hi if hi > 0 else 0.0


def accuracies_from_predictions(pred, digit_labels, texture_labels):
    n = len(pred)
    if n == 0:
        raise EmptySplit("cannot score an empty split")
    pred = torch.as_tensor(pred)
    digit = (pred == torch.as_tensor(digit_labels)).sum().item() / n
    texture = (pred == torch.as_tensor(texture_labels)).sum().item() / n
    return digit, texture


def model_name(metadata):
    """Row label such as ``ours_Digit`` derived from checkpoint metadata."""
    prefix = "Baseline" if float(metadata.get("lambda_ifm", 1.0)) == 0.0 else "ours"
    role = metadata.get("role", "final")
    suffix = {"best_digit": "Digit", "best_texture": "Texture"}.get(role, "Final")
    return f"{prefix}_{suffix}"


def evaluate(checkpoint, split, split_name="test", checkpoint_id=None, batch_size=1000, expected_config=None):
    """Score one checkpoint's argmax predictions against both label sets of a split."""
    if len(split) == 0:
        raise EmptySplit(f"{split_name} split is empty")
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, CheckpointState):
        if expected_config is not None and checkpoint.classifier_config != expected_config:
            raise ConfigMismatch("checkpoint was trained with a different architecture")
        if checkpoint_id is None:
            checkpoint_id = model_name(checkpoint.metadata)
        model = checkpoint.build_classifier()
    else:
        model = checkpoint
    x, digit, texture = to_tensors(split)
    pred = predict(model, x, batch_size)
    d_acc, t_acc = accuracies_from_predictions(pred, digit, texture)
    return EvalResult(d_acc, t_acc, len(split), split_name, checkpoint_id or "")


def write_eval_csv(results, path):
    """Write rows to ``path``, replacing any existing rows with the same (model, split)."""
    path = Path(path)
    rows = {}
    if path.exists():
        for row in read_eval_csv(path):
            rows[(row["model"], row["split"])] = row
    for r in results:
        row = r.csv_row() if isinstance(r, EvalResult) else r
        rows[(row["model"], row["split"])] = row
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, CSV_COLUMNS)
        writer.writeheader()
        for key in sorted(rows, key=_row_order):
            writer.writerow(rows[key])
    return path


def _row_order(key):
    model, split = key
    rank = MODEL_ORDER.index(model) if model in MODEL_ORDER else len(MODEL_ORDER)
    return rank, model, split


def read_eval_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def results_from_rows(rows):
    return [
        EvalResult(float(r["digit_acc"]), float(r["texture_acc"]), int(r["n"]), r["split"], r["model"])
        for r in rows
    ]


@dataclass
class Report:
    csv_text: str
    table_text: str


def _pct(v):
    return "-" if v is None else f"{100 * v:.2f}%"


def report(results, literature_rows: Optional[dict] = None, with_paper_refs=False):
    """CSV plus an aligned text table in the layout of the original comparison.

    ``literature_rows`` maps a row label to (digit %, texture % or None) and is
    printed as-is; ``with_paper_refs`` appends the originally reported
    accuracies for the four model rows.
    """
    if not results:
        raise InputError("report needs at least one result")
    results = sorted(results, key=lambda r: _row_order((r.checkpoint_id, r.split)))

    buf = io.StringIO()
    writer = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.csv_row())

    header = ["Model", "split", "n", "acc (digit)", "acc (texture)", "balance"]
    lines = [
        [r.checkpoint_id, r.split, str(r.n), _pct(r.digit_accuracy), _pct(r.texture_accuracy), f"{r.balance:.3f}"]
        for r in results
    ]
    reference = {}
    if with_paper_refs:
        reference.update({f"{k} (reported)": v for k, v in REPORTED_ACCURACY.items()})
    reference.update(literature_rows or {})
    for label, (d, t) in reference.items():
        balance = "-" if t is None else f"{feature_balance(d, t):.3f}"
        lines.append([label, "-", "-", f"{d:.2f}%", "-" if t is None else f"{t:.2f}%", balance])

    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "-+-".join("-" * w for w in widths)
    table = "\n".join([fmt(header), rule] + [fmt(l) for l in lines]) + "\n"
    return Report(buf.getvalue(), table)
