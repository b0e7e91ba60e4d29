"""Supervised models: MLP baseline, gradient-boosted trees, and a small CNN.

The MLP is implemented directly in numpy (two hidden layers, rectifier
between them, softmax cross-entropy, adaptive-moment updates) so its
analytic gradients can be checked against finite differences. The GBT is
backed by scikit-learn behind the preset contract (depth 10, 60 rounds,
multiclass deviance). The CNN trains end-to-end on pixels in torch, with an
optional class-weighted loss.
"""

from __future__ import annotations

import io
import json
import pickle
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .seeds import derive_seed, rng_for

MODEL_MAGIC = b"CLSF1"


class ClassifyError(Exception):
    pass


def _check_labels(y: np.ndarray) -> np.ndarray:
    classes = np.unique(y)
    if len(classes) < 2:
        raise ClassifyError("training labels must cover at least 2 classes")
    return classes


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, int] = (512, 100)
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp_init(d_in: int, hidden: tuple[int, int], n_classes: int, seed: int) -> dict:
    rng = np.random.default_rng(derive_seed(seed, "mlp-init"))
    h1, h2 = hidden
    def layer(fan_in, fan_out):
        scale = np.sqrt(2.0 / fan_in)
        return rng.normal(0.0, scale, size=(fan_in, fan_out))
    return {
        "W1": layer(d_in, h1), "b1": np.zeros(h1),
        "W2": layer(h1, h2), "b2": np.zeros(h2),
        "W3": layer(h2, n_classes), "b3": np.zeros(n_classes),
    }


def mlp_forward(params: dict, X: np.ndarray) -> np.ndarray:
    h1 = np.maximum(X @ params["W1"] + params["b1"], 0.0)
    h2 = h1 @ params["W2"] + params["b2"]
    return h2 @ params["W3"] + params["b3"]


def mlp_loss_and_grads(params: dict, X: np.ndarray, y_idx: np.ndarray) -> tuple[float, dict]:
    """Mean cross-entropy and its analytic gradients."""
    n = X.shape[0]
    a1 = X @ params["W1"] + params["b1"]
    h1 = np.maximum(a1, 0.0)
    h2 = h1 @ params["W2"] + params["b2"]
    logits = h2 @ params["W3"] + params["b3"]
    probs = _softmax(logits)
    loss = float(-np.log(probs[np.arange(n), y_idx] + 1e-300).mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), y_idx] -= 1.0
    dlogits /= n
    grads = {
        "W3": h2.T @ dlogits, "b3": dlogits.sum(axis=0),
    }
    dh2 = dlogits @ params["W3"].T
    grads["W2"] = h1.T @ dh2
    grads["b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ params["W2"].T) * (a1 > 0.0)
    grads["W1"] = X.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    return loss, grads


def train_mlp(X: np.ndarray, y: np.ndarray, config: MlpConfig):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ClassifyError("empty training set")
    classes = _check_labels(y)
    class_to_idx = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([class_to_idx[c] for c in y])

    params = _mlp_init(X.shape[1], config.hidden_sizes, len(classes), config.seed)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rng = rng_for(config.seed, "mlp-batches")
    t = 0
    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(X.shape[0])
        losses = []
        for start in range(0, X.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = mlp_loss_and_grads(params, X[idx], y_idx[idx])
            if not np.isfinite(loss):
                raise ClassifyError("non-finite training loss")
            t += 1
            for k in params:
                m[k] = beta1 * m[k] + (1 - beta1) * grads[k]
                v[k] = beta2 * v[k] + (1 - beta2) * grads[k] ** 2
                mh = m[k] / (1 - beta1**t)
                vh = v[k] / (1 - beta2**t)
                params[k] -= config.learning_rate * mh / (np.sqrt(vh) + eps)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return TrainedModel(kind="mlp", config=config, payload=params,
                        classes=tuple(classes.tolist()), history=epoch_losses)


# ---------------------------------------------------------------------------
# GBT (scikit-learn engine behind the preset contract)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbtConfig:
    max_depth: int = 10
    iterations: int = 60
    learning_rate: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_gbt(X: np.ndarray, y: np.ndarray, config: GbtConfig):
    from sklearn.ensemble import GradientBoostingClassifier

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ClassifyError("empty training set")
    classes = _check_labels(y)
    model = GradientBoostingClassifier(
        n_estimators=config.iterations,
        max_depth=config.max_depth,
        learning_rate=config.learning_rate,
        random_state=config.seed % (2**32),
    )
    model.fit(X, y.astype(str))
    # training log-loss per boosting round, for the stagewise-fit check
    history = []
    y_idx = np.searchsorted(model.classes_, y.astype(str))
    for probs in model.staged_predict_proba(X):
        history.append(float(-np.log(probs[np.arange(len(y)), y_idx] + 1e-300).mean()))
    return TrainedModel(kind="gbt", config=config, payload=model,
                        classes=tuple(str(c) for c in classes.tolist()), history=history)


# ---------------------------------------------------------------------------
# CNN
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CnnConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    dense_units: int = 64
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    class_weights: dict | None = None  # label -> positive weight
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.class_weights is not None:
            d["class_weights"] = {str(k): v for k, v in self.class_weights.items()}
        return d


def _build_cnn(config: CnnConfig, image_size: int, n_classes: int):
    import torch.nn as nn

    layers = []
    in_ch = 1
    size = image_size
    for ch in config.conv_channels:
        layers += [nn.Conv2d(in_ch, ch, config.kernel_size, padding=config.kernel_size // 2),
                   nn.ReLU(inplace=True), nn.MaxPool2d(2)]
        in_ch = ch
        size //= 2
    layers += [nn.Flatten(), nn.Linear(in_ch * size * size, config.dense_units),
               nn.ReLU(inplace=True), nn.Linear(config.dense_units, n_classes)]
    return nn.Sequential(*layers)


def inverse_frequency_weights(y: np.ndarray) -> dict:
    """Inverse class frequency, normalized to mean 1."""
    classes, counts = np.unique(y, return_counts=True)
    inv = {c: len(y) / (len(classes) * n) for c, n in zip(classes, counts)}
    return inv


def weighted_batch_loss(log_probs: np.ndarray, y_idx: np.ndarray, weights: np.ndarray) -> float:
    """Reference scalar recomputation of the weighted cross-entropy."""
    return float(np.mean(weights * -log_probs[np.arange(len(y_idx)), y_idx]))


def train_cnn(images: list[np.ndarray], y: np.ndarray, config: CnnConfig):
    import torch
    import torch.nn.functional as F

    y = np.asarray(y)
    if len(images) == 0:
        raise ClassifyError("empty training set")
    size = images[0].shape[0]
    for img in images:
        if img.shape != (size, size):
            raise ClassifyError("images must share one square size")
    classes = _check_labels(y)
    class_to_idx = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([class_to_idx[c] for c in y])
    if config.class_weights is not None:
        for c, w in config.class_weights.items():
            if not (np.isfinite(w) and w > 0):
                raise ClassifyError(f"class weight for {c!r} must be finite and positive")
        sample_w = np.array([config.class_weights[c] for c in y], dtype=np.float32)
    else:
        sample_w = np.ones(len(y), dtype=np.float32)

    torch.manual_seed(derive_seed(config.seed, "cnn-init"))
    net = _build_cnn(config, size, len(classes))
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = rng_for(config.seed, "cnn-batches")
    data = torch.from_numpy(np.stack(images).astype(np.float32) / 255.0).unsqueeze(1)
    targets = torch.from_numpy(y_idx)
    w = torch.from_numpy(sample_w)

    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(images), config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            logits = net(data[idx])
            ce = F.cross_entropy(logits, targets[idx], reduction="none")
            loss = (w[idx] * ce).mean()
            if not torch.isfinite(loss):
                raise ClassifyError("non-finite training loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))

    buf = io.BytesIO()
    torch.save(net.state_dict(), buf)
    payload = {"state": buf.getvalue(), "image_size": size}
    return TrainedModel(kind="cnn", config=config, payload=payload,
                        classes=tuple(classes.tolist()), history=epoch_losses)


# ---------------------------------------------------------------------------
# Shared model surface
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    kind: str  # mlp | gbt | cnn
    config: object
    payload: object
    classes: tuple
    history: list = field(default_factory=list)


def predict_proba(model: TrainedModel, inputs) -> np.ndarray:
    """Per-row probability vectors, columns aligned with model.classes."""
    if model.kind == "mlp":
        X = np.asarray(inputs, dtype=np.float64)
        if X.shape[1] != model.payload["W1"].shape[0]:
            raise ClassifyError(
                f"feature width {X.shape[1]} does not match model input {model.payload['W1'].shape[0]}")
        return _softmax(mlp_forward(model.payload, X))
    if model.kind == "gbt":
        X = np.asarray(inputs, dtype=np.float64)
        sk = model.payload
        probs = sk.predict_proba(X)
        order = [list(sk.classes_).index(str(c)) for c in model.classes]
        return probs[:, order]
    if model.kind == "cnn":
        import torch

        size = model.payload["image_size"]
        for img in inputs:
            if img.shape != (size, size):
                raise ClassifyError(f"image shape {img.shape} does not match model size {size}")
        net = _build_cnn(model.config, size, len(model.classes))
        net.load_state_dict(torch.load(io.BytesIO(model.payload["state"]), weights_only=True))
        net.eval()
        data = torch.from_numpy(np.stack(inputs).astype(np.float32) / 255.0).unsqueeze(1)
        with torch.no_grad():
            out = []
            for start in range(0, len(inputs), 256):
                out.append(torch.softmax(net(data[start : start + 256]), dim=1).numpy())
        return np.concatenate(out, axis=0).astype(np.float64)
    raise ClassifyError(f"unknown model kind {model.kind!r}")


def save_model(model: TrainedModel, path: Path) -> None:
    if model.kind == "mlp":
        buf = io.BytesIO()
        np.savez(buf, **model.payload)
        blob = buf.getvalue()
    elif model.kind == "gbt":
        blob = pickle.dumps(model.payload)
    elif model.kind == "cnn":
        blob = pickle.dumps(model.payload)
    else:
        raise ClassifyError(f"unknown model kind {model.kind!r}")
    header = json.dumps({
        "kind": model.kind,
        "config": model.config.to_dict(),
        "classes": [str(c) for c in model.classes],
        "history": model.history,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


_CONFIGS = {"mlp": MlpConfig, "gbt": GbtConfig, "cnn": CnnConfig}


def load_model(path: Path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:5] != MODEL_MAGIC:
        raise ClassifyError(f"bad model magic in {path}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    blob = data[9 + hlen :]
    kind = header["kind"]
    cfg_cls = _CONFIGS[kind]
    cfg_dict = dict(header["config"])
    for key in ("hidden_sizes", "conv_channels"):
        if key in cfg_dict:
            cfg_dict[key] = tuple(cfg_dict[key])
    config = cfg_cls(**cfg_dict)
    if kind == "mlp":
        with np.load(io.BytesIO(blob)) as z:
            payload = {k: z[k] for k in z.files}
    else:
        payload = pickle.loads(blob)
    return TrainedModel(kind=kind, config=config, payload=payload,
                        classes=tuple(header["classes"]), history=header["history"])
