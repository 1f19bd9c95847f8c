"""Feature extractor (tanh MLP with unit-norm output) and cosine classifier."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def extract_features(params: Mapping[str, ad.Node], x, n_layers: int) -> ad.Node:
    """MLP forward pass followed by row normalization.

    Hidden layers use tanh; the last layer is affine.  ``params`` holds
    ``g.W{i}`` (in x out) and ``g.b{i}`` (1 x out).
    """
    h = ad.as_node(x)
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"g.W{i}"]), params[f"g.b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return ad.l2_normalize_rows(h)


def classify(params: Mapping[str, ad.Node], f: ad.Node, temperature: float = 0.05,
             kind: str = "cosine") -> ad.Node:
    """Logits ``f W^T / temperature`` (cosine) or ``f W^T + b`` (linear)."""
    logits = ad.matmul(f, ad.transpose(params["f.W"]))
    if kind == "cosine":
        return ad.scalar_mul(logits, 1.0 / temperature)
    if kind == "linear":
        return ad.add(logits, params["f.b"])
    raise ad.ParameterError(f"unknown classifier kind {kind!r}")


def predict(logits: ad.Node, temperature: float = 1.0) -> ad.Node:
    return ad.softmax_rows(logits, temperature)


class Model:
    """Parameter container for the extractor and classifier.

    Parameters are plain float64 arrays; :meth:`leaves` wraps them in fresh
    differentiable nodes for one forward/backward pass.
    """

    def __init__(self, input_dim: int, n_classes: int, hidden: Sequence[int] = (32,),
                 feature_dim: int = 16, classifier: str = "cosine",
                 clf_temperature: float = 0.05, rng: np.random.Generator | None = None):
        if classifier not in ("cosine", "linear"):
            raise ad.ParameterError(f"unknown classifier kind {classifier!r}")
        if clf_temperature <= 0:
            raise ad.ParameterError("classifier temperature must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.feature_dim = int(feature_dim)
        self.classifier = classifier
        self.clf_temperature = float(clf_temperature)
        sizes = [self.input_dim, *self.hidden, self.feature_dim]
        self.params: dict[str, np.ndarray] = {}
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"g.W{i}"] = glorot_uniform(rng, fi, fo)
            bound = 1.0 / np.sqrt(fi)
            self.params[f"g.b{i}"] = rng.uniform(-bound, bound, size=(1, fo))
        self.params["f.W"] = glorot_uniform(rng, self.n_classes, self.feature_dim)
        if classifier == "linear":
            self.params["f.b"] = np.zeros((1, self.n_classes))
        else:
            self.renormalize_classifier()

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def leaves(self, requires_grad: bool = True) -> dict[str, ad.Node]:
        make = ad.variable if requires_grad else ad.constant
        return {k: make(v) for k, v in self.params.items()}

    def features(self, x, leaves: Mapping[str, ad.Node] | None = None) -> ad.Node:
        leaves = leaves if leaves is not None else self.leaves(False)
        return extract_features(leaves, x, self.n_layers)

    def logits(self, f: ad.Node, leaves: Mapping[str, ad.Node] | None = None) -> ad.Node:
        leaves = leaves if leaves is not None else self.leaves(False)
        return classify(leaves, f, self.clf_temperature, self.classifier)

    def predict_proba(self, x, temperature: float = 1.0) -> np.ndarray:
        leaves = self.leaves(False)
        return predict(self.logits(self.features(x, leaves), leaves), temperature).value

    def renormalize_classifier(self) -> None:
        if self.classifier != "cosine":
            return
        w = self.params["f.W"]
        self.params["f.W"] = w / np.linalg.norm(w, axis=1, keepdims=True)

    def copy(self) -> "Model":
        other = object.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "hidden": list(self.hidden),
            "feature_dim": self.feature_dim,
            "classifier": self.classifier,
            "clf_temperature": self.clf_temperature,
        }


def save_checkpoint(path, model: Model, prototypes: np.ndarray | None = None) -> None:
    """Write a version-tagged ``.npz`` holding every named tensor.

    Arrays are stored as raw float64 so a load/save round trip is bit-exact.
    """
    import json

    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if prototypes is not None:
        arrays["prototypes"] = np.asarray(prototypes, dtype=np.float64)
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__arch__"] = np.array(json.dumps(model.architecture(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Model, np.ndarray | None]:
    import json

    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = json.loads(str(data["__arch__"]))
        model = Model(arch["input_dim"], arch["n_classes"], arch["hidden"], arch["feature_dim"],
                      arch["classifier"], arch["clf_temperature"])
        model.params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        protos = data["prototypes"].copy() if "prototypes" in data.files else None
    return model, protos
