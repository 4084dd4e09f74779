"""From-scratch classifier head and training loop.

The head is four dense layers (1024, 512, 256, 1 units) fed by the path
outputs of the convolutional front end. Hidden layers use batch
normalization (optional) followed by ReLU; the output unit is a sigmoid.
Kernel coefficients backpropagate jointly with the head when trainable.
All math is float64 numpy; training is deterministic given the seed.
"""

import copy
import json
from dataclasses import dataclass, asdict

import numpy as np

from .features import path_outputs, path_set

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-12
HIDDEN_UNITS = (1024, 512, 256)
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the history up to the last finite epoch."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class ModelConfig:
    path_count: int = 16
    kernels_trainable: bool = True
    fixed_kernels: tuple = None
    seed: int = 0
    learning_rate: float = 1e-3
    lr_halving_period: int = 6
    epochs: int = 30
    batch_size: int = 256
    batchnorm: bool = True
    hidden: tuple = HIDDEN_UNITS

    def __post_init__(self):
        if not 1 <= self.path_count <= 16:
            raise ValueError("path_count must be in 1..16")
        self.hidden = tuple(self.hidden)
        if self.fixed_kernels is not None:
            k1, k2 = self.fixed_kernels
            self.fixed_kernels = (
                np.asarray(k1, dtype=float).tolist(),
                np.asarray(k2, dtype=float).tolist(),
            )


@dataclass
class Metrics:
    accuracy: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self):
        return asdict(self)


def lr_for_epoch(config, epoch):
    """Learning rate of 0-based ``epoch``: halved every halving period."""
    return config.learning_rate * 0.5 ** (epoch // config.lr_halving_period)


def loss_bce(p, y):
    """Binary cross-entropy (natural log) with probability clamping."""
    p = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray
    has_batchnorm: bool = False
    gamma: np.ndarray = None
    beta: np.ndarray = None
    run_mean: np.ndarray = None
    run_var: np.ndarray = None
    momentum: float = BN_MOMENTUM


class Model:
    """Kernel coefficients plus the dense head, with forward/backward."""

    def __init__(self, config, kernels1=None, kernels2=None):
        self.config = config
        self.paths = path_set(config.path_count)
        rng = np.random.default_rng([config.seed, 0])
        if kernels1 is None and config.fixed_kernels is not None:
            kernels1, kernels2 = config.fixed_kernels
        self.k1 = np.asarray(kernels1, dtype=float) if kernels1 is not None else rng.uniform(-1, 1, (4, 4))
        self.k2 = np.asarray(kernels2, dtype=float) if kernels2 is not None else rng.uniform(-1, 1, (4, 4))
        self.layers = []
        dims = [config.path_count, *config.hidden, 1]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, (fan_out, fan_in))
            b = np.zeros(fan_out)
            is_hidden = i < len(dims) - 2
            use_bn = config.batchnorm and is_hidden
            self.layers.append(
                DenseLayer(
                    w=w,
                    b=b,
                    has_batchnorm=use_bn,
                    gamma=np.ones(fan_out) if use_bn else None,
                    beta=np.zeros(fan_out) if use_bn else None,
                    run_mean=np.zeros(fan_out) if use_bn else None,
                    run_var=np.ones(fan_out) if use_bn else None,
                )
            )

    # -- parameter bookkeeping ------------------------------------------

    def parameters(self):
        """Name -> array view of every trainable parameter."""
        params = {"k1": self.k1, "k2": self.k2}
        for i, layer in enumerate(self.layers):
            params[f"w{i}"] = layer.w
            params[f"b{i}"] = layer.b
            if layer.has_batchnorm:
                params[f"gamma{i}"] = layer.gamma
                params[f"beta{i}"] = layer.beta
        return params

    def features(self, coeffs):
        """Path outputs for a (batch, 4, 4) array of Pauli coefficients."""
        return path_outputs(coeffs, self.k1, self.k2, self.paths)

    # -- forward ---------------------------------------------------------

    def forward_features(self, x, training=False):
        """Probabilities for a (batch, l) feature array, plus a cache."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cache = {"x0": x, "layers": []}
        a = x
        for i, layer in enumerate(self.layers):
            z = a @ layer.w.T + layer.b
            lc = {"x": a, "z": z}
            if layer.has_batchnorm:
                if training:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    layer.run_mean += layer.momentum * (mu - layer.run_mean)
                    layer.run_var += layer.momentum * (var - layer.run_var)
                else:
                    mu, var = layer.run_mean, layer.run_var
                inv_std = 1 / np.sqrt(var + BN_EPS)
                zhat = (z - mu) * inv_std
                y = layer.gamma * zhat + layer.beta
                lc.update(zhat=zhat, inv_std=inv_std, y=y)
            else:
                y = z
                lc["y"] = y
            if i < len(self.layers) - 1:
                a = np.maximum(y, 0.0)
            else:
                a = y
            cache["layers"].append(lc)
        p = _sigmoid(a[:, 0])
        cache["p"] = p
        return p, cache

    def forward(self, sample):
        """Inference probability for a single feature vector."""
        p, _ = self.forward_features(np.asarray(sample, dtype=float)[None, :])
        return float(p[0])

    def predict_proba(self, coeffs, batch=4096):
        """Inference probabilities straight from Pauli coefficients."""
        out = np.empty(len(coeffs))
        for start in range(0, len(coeffs), batch):
            sl = slice(start, start + batch)
            p, _ = self.forward_features(self.features(coeffs[sl]))
            out[sl] = p
        return out

    # -- backward --------------------------------------------------------

    def backward(self, cache, y, coeffs=None):
        """Mean-BCE gradients for every parameter of the model.

        ``coeffs`` must be the batch Pauli coefficients when kernels are
        trainable (the feature gradient is pushed through the bilinear
        front end); frozen kernels get exactly zero gradients.
        """
        y = np.asarray(y, dtype=float)
        batch = len(y)
        grads = {}
        delta = ((cache["p"] - y) / batch)[:, None]
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            lc = cache["layers"][i]
            if i < len(self.layers) - 1:
                delta = delta * (lc["y"] > 0)
            if layer.has_batchnorm:
                zc = lc["z"] - lc["z"].mean(axis=0)
                grads[f"gamma{i}"] = np.sum(delta * lc["zhat"], axis=0)
                grads[f"beta{i}"] = np.sum(delta, axis=0)
                dzhat = delta * layer.gamma
                # Backprop through batch statistics.
                dvar = np.sum(dzhat * zc, axis=0) * (-0.5) * lc["inv_std"] ** 3
                dmu = -np.sum(dzhat, axis=0) * lc["inv_std"] - dvar * 2 * zc.mean(axis=0)
                delta = dzhat * lc["inv_std"] + (dvar * 2 * zc + dmu) / len(zc)
            grads[f"w{i}"] = delta.T @ lc["x"]
            grads[f"b{i}"] = delta.sum(axis=0)
            delta = delta @ layer.w
        dx = delta  # gradient w.r.t. the feature vector
        if self.config.kernels_trainable:
            if coeffs is None:
                raise ValueError("coeffs required to differentiate kernels")
            k1p = np.stack([self.k1[m - 1] for m, _ in self.paths])
            k2p = np.stack([self.k2[n - 1] for _, n in self.paths])
            g1 = np.einsum("bp,bij,pj->pi", dx, coeffs, k2p)
            g2 = np.einsum("bp,bij,pi->pj", dx, coeffs, k1p)
            grads["k1"] = np.zeros((4, 4))
            grads["k2"] = np.zeros((4, 4))
            for p, (m, n) in enumerate(self.paths):
                grads["k1"][m - 1] += g1[p]
                grads["k2"][n - 1] += g2[p]
        else:
            grads["k1"] = np.zeros((4, 4))
            grads["k2"] = np.zeros((4, 4))
        return grads

    def batch_loss(self, coeffs, y, training=True):
        p, cache = self.forward_features(self.features(coeffs), training=training)
        return loss_bce(p, y), p, cache


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for key, value in params.items():
            g = grads[key]
            self.m[key] += (1 - self.beta1) * (g - self.m[key])
            self.v[key] += (1 - self.beta2) * (g * g - self.v[key])
            value -= lr * (self.m[key] / c1) / (np.sqrt(self.v[key] / c2) + self.eps)


def split_indices(n, seed, fractions=(0.7, 0.1, 0.2)):
    """Deterministic train/val/test index split."""
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def train(config, train_set, val_set):
    """Mini-batch Adam training; returns the best-validation model and history.

    ``train_set`` and ``val_set`` are (coeffs, labels) pairs. The learning
    rate halves every ``lr_halving_period`` epochs. A non-finite loss
    aborts with TrainingDivergedError carrying the finished epochs.
    """
    train_c, train_y = train_set
    val_c, val_y = val_set
    if len(train_c) == 0 or len(val_c) == 0:
        raise ValueError("train and validation sets must be non-empty")
    model = Model(config)
    optimizer = _Adam(model.parameters())
    shuffle_rng = np.random.default_rng([config.seed, 1])

    frozen = not config.kernels_trainable
    if frozen:
        train_x = model.features(train_c)
        val_x = model.features(val_c)

    history = []
    best = None
    for epoch in range(config.epochs):
        lr = lr_for_epoch(config, epoch)
        order = shuffle_rng.permutation(len(train_c))
        losses = []
        correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            y = train_y[idx].astype(float)
            if frozen:
                x = train_x[idx]
                coeffs = None
            else:
                coeffs = train_c[idx]
                x = model.features(coeffs)
            p, cache = model.forward_features(x, training=True)
            loss = loss_bce(p, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss in epoch {epoch + 1}; "
                    f"last finite epoch: {len(history)}",
                    history,
                )
            losses.append(loss)
            correct += int(np.sum((p >= 0.5) == (y >= 0.5)))
            grads = model.backward(cache, y, coeffs)
            optimizer.step(model.parameters(), grads, lr)

        if frozen:
            val_p, _ = model.forward_features(val_x)
        else:
            val_p = model.predict_proba(val_c)
        val_loss = loss_bce(val_p, val_y.astype(float))
        val_acc = float(np.mean((val_p >= 0.5) == (val_y >= 0.5)))
        history.append(
            {
                "epoch": epoch + 1,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "train_acc": correct / len(order),
                "val_loss": val_loss,
                "val_acc": val_acc,
            }
        )
        if best is None or val_acc > best[0]:
            best = (val_acc, copy.deepcopy(model))

    return best[1], history


def evaluate(model, test_set):
    """Threshold at 0.5 (p >= 0.5 predicts discordant) and count outcomes."""
    coeffs, labels = test_set
    p = model.predict_proba(coeffs)
    pred = p >= 0.5
    truth = labels.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    accuracy = (tp + tn) / max(len(labels), 1)
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(accuracy, recall, f1, tp, fp, tn, fn)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path, metadata=None):
    """Versioned binary checkpoint plus a JSON metadata sidecar."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "config_json": np.frombuffer(
            json.dumps(asdict(model.config)).encode(), dtype=np.uint8
        ),
        "k1": model.k1,
        "k2": model.k2,
    }
    for i, layer in enumerate(model.layers):
        arrays[f"w{i}"] = layer.w
        arrays[f"b{i}"] = layer.b
        arrays[f"bn{i}"] = np.array(layer.has_batchnorm)
        if layer.has_batchnorm:
            arrays[f"gamma{i}"] = layer.gamma
            arrays[f"beta{i}"] = layer.beta
            arrays[f"run_mean{i}"] = layer.run_mean
            arrays[f"run_var{i}"] = layer.run_var
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    with open(str(path) + ".json", "w") as fh:
        json.dump(metadata or {}, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Rebuild the model saved by save_checkpoint; returns (model, metadata)."""
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        raw = json.loads(bytes(data["config_json"]).decode())
        config = ModelConfig(**raw)
        model = Model(config, kernels1=data["k1"], kernels2=data["k2"])
        for i, layer in enumerate(model.layers):
            layer.w = data[f"w{i}"].copy()
            layer.b = data[f"b{i}"].copy()
            if bool(data[f"bn{i}"]):
                layer.gamma = data[f"gamma{i}"].copy()
                layer.beta = data[f"beta{i}"].copy()
                layer.run_mean = data[f"run_mean{i}"].copy()
                layer.run_var = data[f"run_var{i}"].copy()
    try:
        with open(str(path) + ".json") as fh:
            metadata = json.load(fh)
    except FileNotFoundError:
        metadata = {}
    return model, metadata
