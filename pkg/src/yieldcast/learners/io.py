"""Model serialization: self-describing JSON, lossless to full float precision.

JSON's shortest round-trip decimal encoding preserves binary64 exactly;
non-finite values are rejected (allow_nan=False) since fitted parameters must
be finite.
"""

import json
from typing import Optional

import numpy as np

from ._tree import Tree
from .models import FittedModel

FORMAT_VERSION = 1


def _tree_to_dict(tree: Tree) -> dict:
    return {
        "feature": tree.feature.tolist(),
        "threshold": [float(v) for v in tree.threshold],
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "value": [float(v) for v in tree.value],
    }


def _tree_from_dict(d: dict) -> Tree:
    return Tree(
        feature=np.array(d["feature"], dtype=np.int32),
        threshold=np.array(d["threshold"], dtype=np.float64),
        left=np.array(d["left"], dtype=np.int32),
        right=np.array(d["right"], dtype=np.int32),
        value=np.array(d["value"], dtype=np.float64),
    )


def _clean_hyperparams(hp: dict) -> dict:
    out = {}
    for k, v in hp.items():
        if isinstance(v, (np.floating,)):
            v = float(v)
        elif isinstance(v, (np.integer,)):
            v = int(v)
        elif isinstance(v, (np.bool_,)):
            v = bool(v)
        out[k] = v
    return out


def model_to_dict(model: FittedModel) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "n_features": model.n_features,
        "feature_names": model.feature_names,
        "hyperparams": _clean_hyperparams(model.hyperparams),
        "intercept": float(model.intercept),
        "baseline": float(model.baseline),
        "learning_rate": float(model.learning_rate),
        "coefficients": None if model.coefficients is None else [float(v) for v in model.coefficients],
        "trees": None if model.trees is None else [_tree_to_dict(t) for t in model.trees],
    }
    if model.oob_masks is not None:
        doc["n_train"] = int(model.oob_masks.shape[1])
        doc["oob_rows"] = [np.nonzero(mask)[0].tolist() for mask in model.oob_masks]
    return doc


def model_from_dict(doc: dict) -> FittedModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    oob_masks = None
    if "oob_rows" in doc:
        n_train = doc["n_train"]
        oob_masks = np.zeros((len(doc["oob_rows"]), n_train), dtype=bool)
        for t, rows in enumerate(doc["oob_rows"]):
            oob_masks[t, rows] = True
    return FittedModel(
        kind=doc["kind"],
        n_features=doc["n_features"],
        feature_names=doc["feature_names"],
        hyperparams=doc["hyperparams"],
        intercept=doc["intercept"],
        baseline=doc["baseline"],
        learning_rate=doc["learning_rate"],
        coefficients=None if doc["coefficients"] is None else np.array(doc["coefficients"], dtype=np.float64),
        trees=None if doc["trees"] is None else [_tree_from_dict(t) for t in doc["trees"]],
        oob_masks=oob_masks,
    )


def dumps_model(model: FittedModel) -> str:
    return json.dumps(model_to_dict(model), allow_nan=False, indent=1)


def loads_model(text: str) -> FittedModel:
    return model_from_dict(json.loads(text))


def save_model(model: FittedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))
        fh.write("\n")


def load_model(path) -> FittedModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
