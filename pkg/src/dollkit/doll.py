"""Diagnosis-oriented localization labels from an ensemble of weak classifiers.

Pipeline per image and observation c:

1. probabilities p_m^c from every model;
2. keep models with p_m^c > tau;
3. attributions for the kept models, weighted by the boosting weights W[m, c]
   and averaged over the kept set;
4. binarize at the plane's nearest-rank percentile (strictly-greater test).

Boosting weights come from a sequential SAMME-style pass over the models in a
fixed order, one pass per observation.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .explain import attribution_batch
from .formats import canonical_json, digest
from .models import predict

E_CLAMP = 1e-6
AGGREGATIONS = ("boosted", "averaged")


@dataclass
class PipelineConfig:
    tau: float = 0.1
    percentile: float = 80.0
    T: int = 5
    K: int = 3
    prediction_threshold: float = 0.5
    M: int = 5
    archs: tuple = ("cnn-s", "cnn-m", "cnn-d", "cnn-w")

    def __post_init__(self):
        self.archs = tuple(self.archs)

    def validate(self):
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("pipeline.tau", "must lie in [0, 1)")
        if not 0.0 < self.percentile < 100.0:
            raise ConfigError("pipeline.percentile", "must lie in (0, 100)")
        if int(self.T) < 1:
            raise ConfigError("pipeline.T", "must be >= 1")
        if int(self.K) < 2:
            raise ConfigError("pipeline.K", "must be >= 2")
        if not 0.0 < self.prediction_threshold < 1.0:
            raise ConfigError("pipeline.prediction_threshold", "must lie in (0, 1)")
        if int(self.M) < 1:
            raise ConfigError("pipeline.M", "must be >= 1")
        if not self.archs:
            raise ConfigError("pipeline.archs", "need at least one architecture")
        return self

    def model_order(self) -> list:
        """Model ids in boosting order: archs are cycled until M models exist."""
        return [f"{self.archs[m % len(self.archs)]}#{m}" for m in range(self.M)]

    def to_dict(self):
        d = asdict(self)
        d["archs"] = list(self.archs)
        return d


@dataclass
class BoostWeights:
    values: np.ndarray            # M x C
    model_order: list
    K: int
    errors: Optional[np.ndarray] = None   # weighted error e per (m, c) before clamping
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.model_order):
            raise ValueError("weights must be M x C with one row per model in model_order")
        if len(set(self.model_order)) != len(self.model_order):
            raise ValueError("model_order entries must be unique")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")

    def averaged(self) -> "BoostWeights":
        return BoostWeights(np.ones_like(self.values), list(self.model_order), self.K)

    def to_dict(self):
        return {"values": self.values.tolist(), "model_order": list(self.model_order), "K": self.K,
                "errors": None if self.errors is None else self.errors.tolist(),
                "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d):
        errors = None if d.get("errors") is None else np.asarray(d["errors"])
        return cls(np.asarray(d["values"]), list(d["model_order"]), int(d["K"]), errors,
                   list(d.get("warnings", [])))


def boost_weight(e, K: int):
    """Unclamped model weight log((1-e)/e) + log(K-1)."""
    e = np.asarray(e, dtype=np.float64)
    return np.log((1.0 - e) / e) + math.log(K - 1)


def max_boost_weight(K: int) -> float:
    return float(boost_weight(E_CLAMP, K))


def threshold_predictions(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def compute_boost_weights(predictions, labels, K: int = 3, model_order: Optional[Sequence[str]] = None,
                          history: Optional[list] = None) -> BoostWeights:
    """Sequential reweighting over models, one independent pass per observation.

    predictions: M x N x C hard labels, labels: N x C.  If ``history`` is a list,
    the normalised sample-weight vector after each (c, m) step is appended to it.
    Weighted errors of exactly 0 or 1 are clamped to [1e-6, 1 - 1e-6] with a
    warning; the raw weight drives the sample update and the reported weight is
    clipped to [0, W_max].
    """
    pred = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    M, N, C = pred.shape
    if y.shape != (N, C):
        raise ValueError(f"labels shape {y.shape} does not match predictions {pred.shape}")
    order = list(model_order) if model_order is not None else [f"m{m}" for m in range(M)]
    W = np.zeros((M, C))
    errors = np.zeros((M, C))
    notes = []
    w_max = max_boost_weight(K)
    for c in range(C):
        S = np.full(N, 1.0 / N)
        for m in range(M):
            miss = pred[m, :, c] != y[:, c]
            e = float(np.sum(S * miss) / np.sum(S))
            errors[m, c] = e
            if e <= 0.0 or e >= 1.0:
                msg = f"model {order[m]} observation {c}: weighted error {e:g} clamped"
                notes.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
            e = min(max(e, E_CLAMP), 1.0 - E_CLAMP)
            w = float(boost_weight(e, K))
            S = S * np.exp(w * miss)
            S = S / S.sum()
            if history is not None:
                history.append(S.copy())
            W[m, c] = min(max(w, 0.0), w_max)
    return BoostWeights(W, order, K, errors, notes)


def filter_models(probabilities, tau: float) -> list:
    """Indices of models whose probability strictly exceeds tau."""
    return [i for i, p in enumerate(np.asarray(probabilities, dtype=np.float64)) if p > tau]


class NoEvidence(ValueError):
    """No model passed the probability filter for this observation."""


def aggregate(maps, weights) -> np.ndarray:
    """Weighted mean of attribution planes over the selected models."""
    maps = np.asarray(maps, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(maps) == 0:
        raise NoEvidence("empty model set")
    if weights.shape != (len(maps),):
        raise ValueError("one weight per map required")
    return np.tensordot(weights, maps, axes=1) / len(maps)


def nearest_rank(n_values: int, percentile: float) -> int:
    """1-based nearest-rank index ceil(p/100 * n), computed exactly."""
    rank = math.ceil(Fraction(str(percentile)) * n_values / 100)
    return min(max(rank, 1), n_values)


def binarize(plane, percentile: float = 80.0) -> np.ndarray:
    plane = np.asarray(plane)
    flat = np.sort(plane, axis=None)
    threshold = flat[nearest_rank(flat.size, percentile) - 1]
    return (plane > threshold).astype(np.uint8)


@dataclass
class Ensemble:
    models: list
    ids: list

    def __post_init__(self):
        if len(self.models) != len(self.ids) or len(set(self.ids)) != len(self.ids):
            raise ValueError("ensemble needs one unique id per model")

    def __len__(self):
        return len(self.models)

    def predict(self, images) -> np.ndarray:
        """M x N x C probabilities."""
        return np.stack([predict(m, images) for m in self.models])


@dataclass
class DoLLMask:
    planes: np.ndarray                    # C x H x W uint8 in {0, 1}
    observation_names: list
    source_image_id: str = ""
    config_digest: str = ""
    model_order: list = field(default_factory=list)
    aggregation: str = "boosted"

    def manifest(self) -> dict:
        return {"observation_names": list(self.observation_names),
                "source_image_id": self.source_image_id, "config_digest": self.config_digest,
                "model_order": list(self.model_order), "aggregation": self.aggregation}


def _weights_for(weights: BoostWeights, ensemble: Ensemble, aggregation: str) -> np.ndarray:
    if list(weights.model_order) != list(ensemble.ids):
        raise ValueError("boost weights were computed for a different model order")
    if aggregation == "boosted":
        return weights.values
    if aggregation == "averaged":
        return np.ones_like(weights.values)
    raise ConfigError("aggregation", f"expected one of {AGGREGATIONS}, got {aggregation!r}")


def generate_dolls(images: np.ndarray, ensemble: Ensemble, weights: BoostWeights, config: PipelineConfig,
                   aggregations: Sequence[str] = ("boosted",), chunk: int = 128) -> dict:
    """DoLL planes for a batch of images (N x ch x H x W) -> {aggregation: N x C x H x W uint8}.

    Attributions are computed once per (model, observation) for the images that
    pass the tau filter and shared by every requested aggregation.
    """
    config.validate()
    images = np.asarray(images, dtype=np.float32)
    mats = {a: _weights_for(weights, ensemble, a) for a in aggregations}
    N, H, W = len(images), images.shape[-2], images.shape[-1]
    C = weights.values.shape[1]
    out = {a: np.zeros((N, C, H, W), np.uint8) for a in aggregations}
    for s0 in range(0, N, chunk):
        x = images[s0:s0 + chunk]
        probs = ensemble.predict(x)                       # M x n x C
        keep = probs > config.tau
        for c in range(C):
            sums = {a: np.zeros((len(x), H, W)) for a in aggregations}
            for m, model in enumerate(ensemble.models):
                idx = np.flatnonzero(keep[m, :, c])
                if idx.size == 0:
                    continue
                attr = np.abs(attribution_batch(model, x[idx], c, config.T)).astype(np.float64)
                for a in aggregations:
                    sums[a][idx] += mats[a][m, c] * attr
            counts = keep[:, :, c].sum(axis=0)
            for i in range(len(x)):
                if counts[i] == 0:
                    continue
                for a in aggregations:
                    out[a][s0 + i, c] = binarize(sums[a][i] / counts[i], config.percentile)
    return out


def generate_doll(image, ensemble: Ensemble, weights: BoostWeights, config: PipelineConfig,
                  observation_names=None, image_id: str = "", aggregation: str = "boosted") -> DoLLMask:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    planes = generate_dolls(image[None], ensemble, weights, config, (aggregation,))[aggregation][0]
    names = list(observation_names) if observation_names else [f"obs{c}" for c in range(len(planes))]
    return DoLLMask(planes, names, image_id, digest(config.to_dict()), list(ensemble.ids), aggregation)


# --- DOLL1 file format -----------------------------------------------------

DOLL_MAGIC = b"DOLL"
DOLL_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


def encode_doll(mask: DoLLMask) -> bytes:
    planes = np.asarray(mask.planes)
    C, H, W = planes.shape
    if planes.size and planes.max() > 1:
        raise ValueError("DoLL planes must be binary")
    manifest = canonical_json(mask.manifest()).encode("utf-8")
    packed = np.packbits(planes.astype(np.uint8), axis=-1, bitorder="big")
    return (_HEADER.pack(DOLL_MAGIC, DOLL_VERSION, C, H, W) + struct.pack("<I", len(manifest))
            + manifest + packed.tobytes())


def decode_doll(buf: bytes) -> DoLLMask:
    if len(buf) < _HEADER.size + 4:
        raise FormatError("truncated header", len(buf))
    magic, version, C, H, W = _HEADER.unpack_from(buf, 0)
    if magic != DOLL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != DOLL_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (mlen,) = struct.unpack_from("<I", buf, _HEADER.size)
    start = _HEADER.size + 4
    if start + mlen > len(buf):
        raise FormatError("truncated manifest", len(buf))
    try:
        manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt manifest: {exc}", start) from None
    row_bytes = (W + 7) // 8
    body = start + mlen
    need = body + C * H * row_bytes
    if len(buf) < need:
        raise FormatError("truncated plane data", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after plane data", need)
    packed = np.frombuffer(buf, np.uint8, count=C * H * row_bytes, offset=body).reshape(C, H, row_bytes)
    if W % 8 and np.any(packed[..., -1] & np.uint8((1 << (8 - W % 8)) - 1)):
        raise FormatError("non-zero row padding bits", body)
    planes = np.unpackbits(packed, axis=-1, count=W, bitorder="big")
    return DoLLMask(planes, manifest["observation_names"], manifest["source_image_id"],
                    manifest["config_digest"], manifest["model_order"], manifest.get("aggregation", "boosted"))


def write_doll(mask: DoLLMask, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_doll(mask))


def read_doll(path) -> DoLLMask:
    return decode_doll(Path(path).read_bytes())
