"""Neuron selection: scoring criteria, Top-k masks, and keep-count validation.

A layer with n output channels and factorization rank z can only keep
k > z channels if the z-dimensional information flowing through its
(rectified) output is to remain recoverable; keeping all n channels is
always legal because it prunes nothing.  Masks are binary vectors over
output channels; the k highest-scoring channels survive, ties going to
the lower channel index so results are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError

CRITERIA = ("topk", "random", "apoz", "activation", "weight")


@dataclass
class OptimSettings:
    lr: float = 0.01
    momentum: float = 0.9
    iters: int = 400
    batch: int = 64
    max_grad_norm: float = 1.0


@dataclass
class PruneConfig:
    energy: float = 0.65
    layers: list[dict] = field(default_factory=list)  # [{"name": str, "keep": int}]
    criterion: str = "weight"
    optim: OptimSettings = field(default_factory=OptimSettings)
    seed: int = 0

    def keep_for(self, name: str) -> int | None:
        for entry in self.layers:
            if entry["name"] == name:
                return int(entry["keep"])
        return None

    def to_json(self) -> str:
        payload = {
            "energy": self.energy,
            "layers": self.layers,
            "criterion": self.criterion,
            "optim": asdict(self.optim),
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PruneConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"prune config is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise InvalidArgumentError("prune config must be a JSON object")
        cfg = cls()
        if "energy" in payload:
            cfg.energy = float(payload["energy"])
            if not 0.0 < cfg.energy <= 1.0:
                raise InvalidArgumentError(f"energy must be in (0, 1], got {cfg.energy}")
        layers = payload.get("layers", [])
        if not isinstance(layers, list):
            raise InvalidArgumentError("'layers' must be a list of {name, keep} objects")
        for entry in layers:
            if not isinstance(entry, dict) or "name" not in entry or "keep" not in entry:
                raise InvalidArgumentError(f"malformed layer entry {entry!r}")
            keep = entry["keep"]
            if int(keep) != keep or int(keep) < 1:
                raise InvalidArgumentError(
                    f"keep count for layer {entry['name']!r} must be a positive "
                    f"integer, got {keep!r}"
                )
            cfg.layers.append({"name": str(entry["name"]), "keep": int(keep)})
        cfg.criterion = str(payload.get("criterion", cfg.criterion))
        if cfg.criterion not in CRITERIA:
            raise InvalidArgumentError(
                f"unknown criterion {cfg.criterion!r}; expected one of {CRITERIA}"
            )
        optim = payload.get("optim", {})
        if not isinstance(optim, dict):
            raise InvalidArgumentError("'optim' must be an object")
        cfg.optim = OptimSettings(
            lr=float(optim.get("lr", cfg.optim.lr)),
            momentum=float(optim.get("momentum", cfg.optim.momentum)),
            iters=int(optim.get("iters", cfg.optim.iters)),
            batch=int(optim.get("batch", cfg.optim.batch)),
            max_grad_norm=float(optim.get("max_grad_norm", cfg.optim.max_grad_norm)),
        )
        if cfg.optim.lr < 0 or not 0 <= cfg.optim.momentum < 1:
            raise InvalidArgumentError("optimizer needs lr >= 0 and momentum in [0, 1)")
        if cfg.optim.iters < 1 or cfg.optim.batch < 1:
            raise InvalidArgumentError("optimizer iters and batch must be positive")
        if cfg.optim.max_grad_norm <= 0:
            raise InvalidArgumentError("optimizer max_grad_norm must be positive")
        cfg.seed = int(payload.get("seed", 0))
        return cfg


def valid_range(z: int, n: int) -> tuple[int, int]:
    """Inclusive (lo, hi) of legal keep counts: z < k <= n, plus the no-op k = n."""
    if not 0 <= z <= n:
        raise InvalidArgumentError(f"invalid rank/width pair z={z}, n={n}")
    return (min(z + 1, n), n)


def score_neurons(
    criterion: str,
    weight_matrix: np.ndarray | None = None,
    activations: np.ndarray | None = None,
    n: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Per-channel keep scores (higher = keep first) for one layer.

    weight: l1 norm of each filter (column of the reshaped weight);
    activation: mean |post-ReLU response| over batch and positions;
    apoz: negative mean fraction of exactly-zero responses;
    random: seeded uniform draws; topk: reverse channel index, so the
    first k channels survive.
    """
    if criterion not in CRITERIA:
        raise InvalidArgumentError(f"unknown criterion {criterion!r}")
    if n is None:
        if weight_matrix is not None:
            n = weight_matrix.shape[1]
        elif activations is not None:
            n = activations.shape[1]
        else:
            raise InvalidArgumentError("channel count cannot be inferred")
    if criterion == "topk":
        return np.arange(n, 0, -1, dtype=np.float64)
    if criterion == "random":
        return np.random.default_rng(seed).uniform(size=n)
    if criterion == "weight":
        if weight_matrix is None:
            raise InvalidArgumentError("weight criterion needs the layer weights")
        if weight_matrix.ndim != 2 or weight_matrix.shape[1] != n:
            raise InvalidArgumentError(
                f"weight matrix must be 2-D with {n} columns, got {weight_matrix.shape}"
            )
        return np.abs(weight_matrix.astype(np.float64)).sum(axis=0)
    # data-dependent criteria
    if activations is None:
        raise InvalidArgumentError(f"criterion {criterion!r} needs captured activations")
    act = np.asarray(activations, dtype=np.float64)
    if act.ndim == 4:
        act = np.moveaxis(act, 1, -1).reshape(-1, act.shape[1])
    if act.ndim != 2 or act.shape[1] != n:
        raise InvalidArgumentError(
            f"activations must have {n} channels, got shape {activations.shape}"
        )
    if criterion == "activation":
        return np.abs(act).mean(axis=0)
    return -(act == 0).mean(axis=0)  # apoz


def build_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary keep mask with ones at the k best scores (ties: lower index)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"keep count {k} out of range [1, {n}]")
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(n, dtype=np.float32)
    mask[order[:k]] = 1.0
    return mask


def validate_config(cfg: PruneConfig, report) -> list[dict]:
    """Check every configured keep count against its layer's valid range.

    Returns a list of violations (empty means the config is accepted);
    each violation carries the offending numbers and a human-readable
    message quoting the legal range.
    """
    violations = []
    for entry in cfg.layers:
        name, keep = entry["name"], int(entry["keep"])
        info = report.entry(name)
        z, n = info["z"], info["n"]
        if keep > n:
            violations.append({
                "layer": name, "keep": keep, "z": z, "n": n,
                "message": f"layer {name!r}: keep {keep} exceeds width {n}",
            })
        elif keep < n and keep <= z:
            violations.append({
                "layer": name, "keep": keep, "z": z, "n": n,
                "message": (
                    f"layer {name!r}: keep {keep} violates the necessary condition "
                    f"k > z; valid keep counts lie in ({z}, {n}]"
                ),
            })
    return violations
