"""Checkpoint archives.

A checkpoint is a zip archive holding ``meta.json`` and one ``.npy`` entry per
tensor (parameters as little-endian float32, batch-norm counters as int64).
``meta.json`` carries the format version, the config echo, free-form metadata
and a SHA-256 digest over every array entry.
"""

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ifmlab.errors import ChecksumMismatch, IoFailure, VersionMismatch
from ifmlab.mi import IFMHead
from ifmlab.models import Classifier, ClassifierConfig, DiscriminatorConfig, Discriminator

FORMAT_VERSION = 1


@dataclass
class CheckpointState:
    classifier_config: ClassifierConfig
    classifier_state: dict
    discriminator_configs: list = field(default_factory=list)
    discriminator_states: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def build_classifier(self, dtype=torch.float32):
        model = Classifier(self.classifier_config).to(dtype)
        model.load_state_dict(self.classifier_state)
        return model

    def build_ifm_head(self, dtype=torch.float32):
        discs = []
        for cfg, state in zip(self.discriminator_configs, self.discriminator_states):
            d = Discriminator(cfg).to(dtype)
            d.load_state_dict(state)
            discs.append(d)
        return IFMHead(discs)


def _to_numpy(t):
    arr = t.detach().cpu().numpy()
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    return arr.astype("<i8")


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def capture(classifier, ifm_head=None, metadata=None):
    """Snapshot module state into a CheckpointState (tensors cloned)."""
    discs = list(ifm_head) if ifm_head is not None else []
    return CheckpointState(
        classifier.config,
        {k: v.detach().clone() for k, v in classifier.state_dict().items()},
        [d.config for d in discs],
        [{k: v.detach().clone() for k, v in d.state_dict().items()} for d in discs],
        dict(metadata or {}),
    )


def save_checkpoint(state, path):
    entries = {f"classifier/{k}": _to_numpy(v) for k, v in state.classifier_state.items()}
    for i, sd in enumerate(state.discriminator_states):
        entries.update({f"disc{i}/{k}": _to_numpy(v) for k, v in sd.items()})
    digest = hashlib.sha256()
    blobs = {}
    for name in sorted(entries):
        blob = _npy_bytes(entries[name])
        blobs[name] = blob
        digest.update(name.encode())
        digest.update(blob)
    meta = {
        "format_version": FORMAT_VERSION,
        "classifier_config": state.classifier_config.to_dict(),
        "discriminator_configs": [c.to_dict() for c in state.discriminator_configs],
        "arrays": sorted(entries),
        "sha256": digest.hexdigest(),
        "metadata": state.metadata,
    }
    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, blob in blobs.items():
                # fixed timestamp keeps archives byte-identical across runs
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), blob)
            zf.writestr(
                zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)),
                json.dumps(meta, indent=2, sort_keys=True),
            )
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return Path(path)


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint; ``expected_config`` must match the stored classifier config."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            blobs = {name: zf.read(name + ".npy") for name in meta["arrays"]}
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError) as exc:
        raise ChecksumMismatch(f"corrupt checkpoint {path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {meta.get('format_version')}, expected {FORMAT_VERSION}")
    digest = hashlib.sha256()
    for name in sorted(blobs):
        digest.update(name.encode())
        digest.update(blobs[name])
    if digest.hexdigest() != meta["sha256"]:
        raise ChecksumMismatch(f"array digest mismatch in {path}")

    config = ClassifierConfig.from_dict(meta["classifier_config"])
    if expected_config is not None and config != expected_config:
        raise VersionMismatch(f"checkpoint config {config} does not match {expected_config}")
    disc_configs = [DiscriminatorConfig.from_dict(d) for d in meta["discriminator_configs"]]

    arrays = {name: torch.from_numpy(np.load(io.BytesIO(blob), allow_pickle=False)) for name, blob in blobs.items()}
    clf_state = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("classifier/")}
    disc_states = [
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(f"disc{i}/")}
        for i in range(len(disc_configs))
    ]
    return CheckpointState(config, clf_state, disc_configs, disc_states, meta["metadata"])
