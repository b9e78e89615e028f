"""Bundled hierarchy configs and dataset presets patterned on real street-scene sets.

``cityscapes`` is dense with signs labelled only as ``traffic_sign``;
``vistas`` is dense with front/back sign labels; ``gtsdb`` has boxes of the
43 front sign types and nothing else. The ``toy`` presets match the
two-level toy hierarchy used by the experiments.
"""

from __future__ import annotations

from importlib import resources
from typing import Dict

from .hierarchy import DatasetSpec, LabelHierarchy, bind_dataset, load_hierarchy

CONFIGS = ("street", "toy")


def config_path(name: str):
    if name not in CONFIGS:
        raise KeyError(f"no bundled config {name!r}; choose from {CONFIGS}")
    return resources.files("hierseg") / "configs" / f"{name}.hier"


def load_config(name_or_path: str) -> LabelHierarchy:
    """A bundled config by name, or a ``.hier`` file path."""
    if name_or_path in CONFIGS:
        with resources.as_file(config_path(name_or_path)) as p:
            return load_hierarchy(p)
    return load_hierarchy(name_or_path)


_BIG_REGIONS = {"driveable": 0.45, "road": 0.45, "sky": 0.2, "building": 0.15}


def street_presets(h: LabelHierarchy) -> Dict[str, DatasetSpec]:
    cs = h.bindings["cityscapes"]
    vi = h.bindings["vistas"]
    gt = h.bindings["gtsdb"]
    cs_sign = next(k for k, v in cs.items() if v == "traffic_sign")
    vi_signs = {k: v for k, v in vi.items() if v in ("traffic_sign_front", "traffic_sign_back")}
    # a few large regions so leaf shares span more than two orders of magnitude
    cs_big = {k: s for name, s in _BIG_REGIONS.items() for k, v in cs.items() if v == name}
    vi_big = {k: s for name, s in _BIG_REGIONS.items() for k, v in vi.items() if v == name}
    return {
        "cityscapes": DatasetSpec("cityscapes", cs, "dense", shares={**cs_big, cs_sign: 0.01},
                                  objects=(cs_sign,),
                                  n_images=32, image_size=(128, 128)),
        "vistas": DatasetSpec("vistas", vi, "dense",
                              shares={**vi_big, **{k: 0.01 if v.endswith("front") else 0.002
                                                    for k, v in vi_signs.items()}},
                              objects=tuple(sorted(vi_signs)), n_images=32, image_size=(128, 128),
                              size_jitter=16),
        "gtsdb": DatasetSpec("gtsdb", gt, "bbox", shares={k: 0.002 for k in gt}, objects=tuple(sorted(gt)),
                             n_images=32, image_size=(128, 128)),
    }


def toy_presets() -> Dict[str, DatasetSpec]:
    regions = {0: "road", 1: "building", 2: "vegetation", 3: "sky"}
    signs = {4: "sign_a", 5: "sign_b", 6: "sign_c", 7: "sign_d"}
    return {
        "coarse": DatasetSpec("coarse", {**regions, 4: "traffic_sign"}, "dense", shares={4: 0.01}, objects=(4,),
                              n_images=64),
        "signs": DatasetSpec("signs", {**regions, **signs}, "bbox", shares={k: 0.02 for k in signs},
                             objects=tuple(signs), n_images=64),
        "extended": DatasetSpec("extended", {**regions, **signs}, "dense", shares={k: 0.0025 for k in signs},
                                objects=tuple(signs), n_images=64),
    }


def presets_for(h: LabelHierarchy) -> Dict[str, DatasetSpec]:
    """Presets whose labels all resolve in ``h``."""
    if all(d in h.bindings for d in ("cityscapes", "vistas", "gtsdb")):
        return street_presets(h)
    out: Dict[str, DatasetSpec] = {}
    for name, spec in toy_presets().items():
        try:
            bind_dataset(h, spec)
        except (KeyError, ValueError):
            continue
        out[name] = spec
    return out
