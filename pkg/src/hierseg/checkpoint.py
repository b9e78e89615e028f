"""``HSEG1`` checkpoint files: magic line, then an ``.npz`` archive.

Keys are ``param/<name>``, ``bn/<layer>/mean|var``, ``velocity/<name>``
and ``meta`` (UTF-8 JSON bytes: hierarchy text, configs, mode, flat space).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .hierarchy import FlatSpace, LabelHierarchy, parse_hierarchy, serialize
from .network import NetworkConfig, SegNet, build_flat_network, build_network
from .optim import OptimizerState

MAGIC = b"HSEG1\n"


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: dict,
                    state: Optional[OptimizerState] = None) -> None:
    payload = dict(arrays)
    if state is not None:
        for k, v in state.velocity.items():
            payload[f"velocity/{k}"] = v
        meta = {**meta, "optimizer": {"learning_rate": state.learning_rate, "momentum": state.momentum,
                                      "weight_decay": state.weight_decay}}
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict, Optional[OptimizerState]]:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise ValueError(f"{path} is not an HSEG1 checkpoint")
        body = fh.read()
    with np.load(io.BytesIO(body), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    velocity = {k[len("velocity/"):]: arrays.pop(k) for k in list(arrays) if k.startswith("velocity/")}
    state = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        state = OptimizerState(o["learning_rate"], o["momentum"], o["weight_decay"], velocity)
    return arrays, meta, state


@dataclass
class SavedModel:
    """Everything needed to run inference without the training files."""

    net: SegNet
    hierarchy: LabelHierarchy
    mode: str
    space: Optional[FlatSpace]
    meta: dict
    state: Optional[OptimizerState]


def save_model(path, net: SegNet, h: LabelHierarchy, mode: str = "hier",
               space: Optional[FlatSpace] = None, extra: Optional[dict] = None,
               state: Optional[OptimizerState] = None) -> None:
    if mode not in ("hier", "flat"):
        raise ValueError(f"mode must be 'hier' or 'flat', got {mode!r}")
    if mode == "flat" and space is None:
        raise ValueError("a flat model needs its label space")
    meta = {
        "mode": mode,
        "hierarchy": serialize(h),
        "network": net.cfg.to_dict(),
        "flat_space": None if space is None else {"classes": list(space.classes), "unlabeled": space.unlabeled},
        **(extra or {}),
    }
    save_checkpoint(path, net.state_arrays(), meta, state)


def load_model(path) -> SavedModel:
    arrays, meta, state = load_checkpoint(path)
    h = parse_hierarchy(meta["hierarchy"])
    cfg = NetworkConfig.from_dict(meta["network"])
    space = None
    if meta.get("flat_space"):
        fs = meta["flat_space"]
        space = FlatSpace(tuple(fs["classes"]), bool(fs["unlabeled"]))
    net = build_flat_network(space, cfg) if meta["mode"] == "flat" else build_network(h, cfg)
    net.load_state_arrays(arrays)
    return SavedModel(net, h, meta["mode"], space, meta, state)
