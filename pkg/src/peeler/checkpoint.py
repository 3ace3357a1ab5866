"""Checkpoint text format.

A checkpoint is a JSON document with the config echo, its hash, the base
seed, the episode counter, every parameter tensor and the Adam moments.
Array values are stored as whitespace-separated decimals with 17
significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .optim import AdamState, TrainLoopState, init_state

FORMAT = "peeler-checkpoint/1"


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": " ".join("%.17g" % v for v in a.ravel())}


def decode_array(obj: dict) -> np.ndarray:
    shape = tuple(obj["shape"])
    text = obj["values"].split()
    data = np.array([float(v) for v in text], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"array payload has {data.size} values but shape {shape}")
    return data.reshape(shape)


def state_to_document(state: TrainLoopState, config: TrainConfig) -> dict:
    params = state.parameters()
    return {
        "format": FORMAT,
        "config": config.to_dict(),
        "config_hash": config.content_hash(),
        "training_hash": config.training_hash(),
        "base_seed": state.base_seed,
        "episode": state.episode,
        "head": {
            "kind": state.model.head.kind,
            "prototype_source": state.model.head.prototype_source,
            "precision_source": state.model.head.precision_source,
            "class_ids": list(state.model.head.class_ids),
        },
        "parameters": [{"name": k, **encode_array(p.data)} for k, p in params.items()],
        "adam": {
            "t": state.adam.t,
            "base_lr": state.adam.base_lr,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
            "rejected_steps": state.adam.rejected_steps,
            "m": [{"name": k, **encode_array(v)} for k, v in state.adam.m.items()],
            "v": [{"name": k, **encode_array(v)} for k, v in state.adam.v.items()],
        },
        "running": {k: (v if k == "n" else "%.17g" % v) for k, v in state.running.items()},
    }


def save_checkpoint(path: str | Path, state: TrainLoopState, config: TrainConfig) -> None:
    path = Path(path)
    doc = state_to_document(state, config)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format {doc.get('format')!r})")
    return doc


def config_from_document(doc: dict) -> TrainConfig:
    return TrainConfig(**doc["config"])


def load_state(doc: dict, config: TrainConfig, dataset, split) -> TrainLoopState:
    """Rebuild a training state; parameters are checked against the model the config describes."""
    state = init_state(config, dataset, split)
    params = state.parameters()
    stored = {p["name"]: decode_array(p) for p in doc["parameters"]}
    if set(stored) != set(params):
        raise ValueError(f"checkpoint parameters {sorted(stored)} do not match model {sorted(params)}")
    for k, p in params.items():
        if stored[k].shape != p.shape:
            raise ValueError(f"checkpoint parameter {k} has shape {stored[k].shape}, model expects {p.shape}")
        p.data = stored[k]
    if tuple(doc["head"]["class_ids"]) != state.model.head.class_ids:
        raise ValueError("checkpoint class table does not match the configured split")
    a = doc["adam"]
    state.adam = AdamState(
        m={e["name"]: decode_array(e) for e in a["m"]},
        v={e["name"]: decode_array(e) for e in a["v"]},
        t=int(a["t"]),
        base_lr=float(a["base_lr"]),
        beta1=float(a["beta1"]),
        beta2=float(a["beta2"]),
        eps=float(a["eps"]),
        rejected_steps=int(a["rejected_steps"]),
    )
    state.episode = int(doc["episode"])
    state.base_seed = int(doc["base_seed"])
    state.running = {k: (int(v) if k == "n" else float(v)) for k, v in doc["running"].items()}
    return state
