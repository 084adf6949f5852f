"""Neural cost models written directly against numpy.

Two architectures:

* ``ComputeCostModel`` - a shared per-table encoder (5 -> 128 -> 32), an
  element-wise sum over the tables of a device, then a head (32 -> 64 -> 1).
* ``CommCostModel`` - a plain MLP from ``[starts ++ device_dims]`` (2D values)
  through 128-64-32-16 to D per-device costs.

Both regress milliseconds with a mean-squared-error loss and are trained with
Adam on shuffled mini-batches, keeping the snapshot with the lowest
validation loss.

Inference for the compute model pools table encodings in 2**-32 fixed point,
which makes the sum exactly associative: any ordering of the same tables
gives a bit-identical prediction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidArgument, TrainingDiverged
from .tables import TableConfig, table_size_bytes

FEATURE_VERSION = 1
NUM_FEATURES = 5
DIM_NORM = 128.0
LOG_HASH_NORM = 8.0
POOLING_NORM = 50.0
SKEW_NORM = 2.0
SIZE_NORM = 1e9

START_NORM_MS = 20.0
DEVICE_DIM_NORM = 1024.0

QSCALE = 2.0**32
_QMAX = 2.0**30  # keeps sums of a few thousand encodings inside int64


def featurize(t: TableConfig) -> np.ndarray:
    return np.array(
        [
            t.dim / DIM_NORM,
            math.log10(t.hash_size) / LOG_HASH_NORM,
            t.pooling_factor / POOLING_NORM,
            t.skew / SKEW_NORM,
            table_size_bytes(t) / SIZE_NORM,
        ],
        dtype=np.float64,
    )


# --- dense layers ------------------------------------------------------------

class MLP:
    """Fully connected stack with ReLU between layers.

    ``out_relu`` also rectifies the last layer, used for the set encoder whose
    outputs are summed.
    """

    def __init__(self, sizes: Sequence[int], rng=None, out_relu: bool = False, zero: bool = False):
        self.sizes = list(sizes)
        self.out_relu = out_relu
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))
            self.params += [W, np.zeros(fan_out)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def _relu_at(self, i: int) -> bool:
        return i < self.n_layers - 1 or self.out_relu

    def forward(self, X):
        acts = [X]
        h = X
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if self._relu_at(i):
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        grads: list[np.ndarray] = [None] * len(self.params)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if self._relu_at(i):
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def relu_masks(self, acts, start: int = 0) -> list[np.ndarray]:
        return [acts[i + 1] > 0 for i in range(start, self.n_layers) if self._relu_at(i)]

    def tail(self, k: int, Z):
        """Finish a forward pass from layer ``k``'s pre-activation ``Z``.

        ``Z`` may carry leading stack axes; returns the output and the ReLU
        masks of layers ``k`` onwards.
        """
        h = Z
        masks = []
        for i in range(k, self.n_layers):
            if i > k:
                h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if self._relu_at(i):
                m = h > 0
                masks.append(m)
                h = np.where(m, h, 0.0)
        return h, masks

    def forward_one(self, x: np.ndarray) -> np.ndarray:
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if self._relu_at(i):
                h = np.maximum(h, 0.0)
        return h

    def to_list(self) -> list[dict]:
        return [
            {"shape": list(self.params[2 * i].shape),
             "W": self.params[2 * i].ravel().tolist(),
             "b": self.params[2 * i + 1].tolist()}
            for i in range(self.n_layers)
        ]

    @classmethod
    def from_list(cls, layers: list[dict], out_relu: bool = False) -> "MLP":
        sizes = [layers[0]["shape"][0]] + [layer["shape"][1] for layer in layers]
        net = cls(sizes, out_relu=out_relu, zero=True)
        for i, layer in enumerate(layers):
            net.params[2 * i] = np.asarray(layer["W"], dtype=np.float64).reshape(layer["shape"])
            net.params[2 * i + 1] = np.asarray(layer["b"], dtype=np.float64)
        return net


# --- datasets ----------------------------------------------------------------

@dataclass
class SetDataset:
    """Variable-size table sets stored as flat feature rows plus offsets."""

    features: np.ndarray  # (rows, 5)
    offsets: np.ndarray  # (n + 1,)
    y: np.ndarray  # (n,)

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_sets(cls, feature_sets: Sequence[np.ndarray], y) -> "SetDataset":
        lengths = [len(f) for f in feature_sets]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        feats = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, NUM_FEATURES)
                                for f in feature_sets])
        return cls(feats, offsets, np.asarray(y, dtype=np.float64))

    def batch(self, idx: np.ndarray):
        lengths = self.offsets[idx + 1] - self.offsets[idx]
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        rows = np.repeat(self.offsets[idx] - starts, lengths) + np.arange(lengths.sum())
        return self.features[rows], starts, self.y[idx]


@dataclass
class VectorDataset:
    X: np.ndarray  # (n, in)
    Y: np.ndarray  # (n, out)

    def __len__(self):
        return len(self.X)

    def batch(self, idx):
        return self.X[idx], self.Y[idx]


# --- models ------------------------------------------------------------------

class MLPRegressor:
    """MSE regression with an MLP; targets are divided by ``y_scale`` internally."""

    kind = "mlp"

    def __init__(self, sizes, seed: int = 0, zero: bool = False):
        self.net = MLP(sizes, np.random.default_rng(seed), zero=zero)
        self.y_scale = 1.0

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, values):
        self.net.params = list(values)

    def fit_scale(self, data: VectorDataset, idx):
        rms = float(np.sqrt(np.mean(data.Y[idx] ** 2)))
        self.y_scale = rms if rms > 0 else 1.0

    def loss_and_grads(self, X, Y):
        out, acts = self.net.forward(X)
        diff = out - Y / self.y_scale
        n = diff.size
        loss = float(np.sum(diff * diff) / n)
        grads, _ = self.net.backward(acts, 2.0 * diff / n)
        return loss, grads

    def perturbed_losses(self, X, Y, step: float):
        """Yield ``(param, flat_idx, loss_up, loss_down, kink)`` for every scalar parameter."""
        _, acts = self.net.forward(X)
        target = Y / self.y_scale
        net = self.net
        for k in range(net.n_layers):
            base = net.relu_masks(acts, k)
            for slot, idx, Zu, Zd in _layer_perturbations(acts[k], *net.params[2 * k:2 * k + 2], step):
                (ou, mu), (od, md) = net.tail(k, Zu), net.tail(k, Zd)
                yield (2 * k + slot, idx, _stacked_mse(ou, target), _stacked_mse(od, target),
                       _flips(mu, base) | _flips(md, base))

    def batch_loss_and_grads(self, data: VectorDataset, idx):
        return self.loss_and_grads(*data.batch(idx))

    def predict_batch(self, X) -> np.ndarray:
        return self.net.forward(X)[0] * self.y_scale

    def mse(self, data: VectorDataset, idx) -> float:
        X, Y = data.batch(idx)
        return float(np.mean((self.predict_batch(X) - Y) ** 2))


class CommCostModel(MLPRegressor):
    kind = "comm"
    HIDDEN = (128, 64, 32, 16)

    def __init__(self, num_devices: int, direction: str = "fwd", seed: int = 0, zero: bool = False):
        if direction not in ("fwd", "bwd"):
            raise InvalidArgument("direction must be 'fwd' or 'bwd'")
        super().__init__([2 * num_devices, *self.HIDDEN, num_devices], seed=seed, zero=zero)
        self.num_devices = num_devices
        self.direction = direction

    @staticmethod
    def encode(starts, device_dims) -> np.ndarray:
        # fixed ordering: starts first, then device dims
        return np.concatenate([np.asarray(starts, dtype=np.float64) / START_NORM_MS,
                               np.asarray(device_dims, dtype=np.float64) / DEVICE_DIM_NORM])


def predict_comm(model: CommCostModel, starts, device_dims) -> np.ndarray:
    D = model.num_devices
    if len(starts) != D or len(device_dims) != D:
        raise InvalidArgument(f"model expects {D} starts and {D} device dims")
    out = model.net.forward_one(CommCostModel.encode(starts, device_dims)) * model.y_scale
    return np.maximum(out, 0.0)


class ComputeCostModel:
    kind = "compute"
    ENCODER = (NUM_FEATURES, 128, 32)
    HEAD = (32, 64, 1)

    def __init__(self, seed: int = 0, zero: bool = False):
        rng = np.random.default_rng(seed)
        self.encoder = MLP(self.ENCODER, rng, out_relu=True, zero=zero)
        self.head = MLP(self.HEAD, rng, zero=zero)
        self.y_scale = 1.0

    @property
    def params(self):
        return self.encoder.params + self.head.params

    @params.setter
    def params(self, values):
        values = list(values)
        k = len(self.encoder.params)
        self.encoder.params, self.head.params = values[:k], values[k:]

    def fit_scale(self, data: SetDataset, idx):
        rms = float(np.sqrt(np.mean(data.y[idx] ** 2)))
        self.y_scale = rms if rms > 0 else 1.0

    def _forward(self, feats, starts):
        enc, enc_acts = self.encoder.forward(feats)
        pooled = np.add.reduceat(enc, starts, axis=0)
        out, head_acts = self.head.forward(pooled)
        return out[:, 0], enc_acts, head_acts, starts

    def loss_and_grads(self, feats, starts, y):
        out, enc_acts, head_acts, starts = self._forward(feats, starts)
        diff = out - y / self.y_scale
        n = diff.size
        loss = float(np.sum(diff * diff) / n)
        head_grads, g_pooled = self.head.backward(head_acts, (2.0 * diff / n)[:, None])
        seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(feats))))
        enc_grads, _ = self.encoder.backward(enc_acts, g_pooled[seg])
        return loss, enc_grads + head_grads

    def perturbed_losses(self, feats, starts, y, step: float):
        """Yield ``(param, flat_idx, loss_up, loss_down, kink)`` for every scalar parameter."""
        _, enc_acts, head_acts, _ = self._forward(feats, starts)
        target = (y / self.y_scale)[:, None]
        enc, head = self.encoder, self.head
        head_base = head.relu_masks(head_acts)
        n_enc = len(enc.params)

        def through_head(enc_out):
            pooled = np.add.reduceat(enc_out, starts, axis=-2)
            W, b = head.params[0], head.params[1]
            return head.tail(0, pooled @ W + b)

        for k in range(enc.n_layers):
            base = enc.relu_masks(enc_acts, k)
            for slot, idx, Zu, Zd in _layer_perturbations(enc_acts[k], *enc.params[2 * k:2 * k + 2], step):
                losses, kink = [], np.zeros(len(idx), dtype=bool)
                for Z in (Zu, Zd):
                    e_out, e_masks = enc.tail(k, Z)
                    out, h_masks = through_head(e_out)
                    losses.append(_stacked_mse(out, target))
                    kink |= _flips(e_masks, base) | _flips(h_masks, head_base)
                yield 2 * k + slot, idx, losses[0], losses[1], kink
        for k in range(head.n_layers):
            base = head.relu_masks(head_acts, k)
            for slot, idx, Zu, Zd in _layer_perturbations(head_acts[k], *head.params[2 * k:2 * k + 2], step):
                (ou, mu), (od, md) = head.tail(k, Zu), head.tail(k, Zd)
                yield (n_enc + 2 * k + slot, idx, _stacked_mse(ou, target), _stacked_mse(od, target),
                       _flips(mu, base) | _flips(md, base))

    def batch_loss_and_grads(self, data: SetDataset, idx):
        return self.loss_and_grads(*data.batch(idx))

    def predict_batch(self, feats, starts) -> np.ndarray:
        return self._forward(feats, starts)[0] * self.y_scale

    def mse(self, data: SetDataset, idx) -> float:
        feats, starts, y = data.batch(idx)
        return float(np.mean((self.predict_batch(feats, starts) - y) ** 2))

    # inference path shared with the search engines
    def encode_table(self, t: TableConfig) -> np.ndarray:
        return self.encoder.forward_one(featurize(t))

    def head_from_quantized(self, qsum: np.ndarray) -> float:
        # accumulate in the same order as the search kernels so values agree bitwise
        W1, b1, W2, b2 = self.head.params
        x = qsum.astype(np.float64) / QSCALE
        h = b1.copy()
        for i in range(len(x)):
            h += x[i] * W1[i]
        out = (float(np.cumsum(np.where(h > 0.0, h * W2[:, 0], 0.0))[-1]) + b2[0]) * self.y_scale
        return max(out, 0.0)


def quantize_encoding(enc: np.ndarray) -> np.ndarray:
    if not np.all(np.abs(enc) < _QMAX):
        raise InvalidArgument("table encoding too large for fixed-point pooling")
    return np.rint(enc * QSCALE).astype(np.int64)


def predict_compute(model: ComputeCostModel, tables: Sequence[TableConfig]) -> float:
    if len(tables) == 0:
        raise InvalidArgument("predict_compute needs at least one table")
    qsum = np.zeros(ComputeCostModel.ENCODER[-1], dtype=np.int64)
    for t in tables:
        qsum += quantize_encoding(model.encode_table(t))
    return model.head_from_quantized(qsum)


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise InvalidArgument("split fractions must sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def split_indices(n: int, cfg: TrainConfig):
    perm = np.random.default_rng(cfg.seed).permutation(n)
    n_train = int(round(cfg.split[0] * n))
    n_valid = int(round(cfg.split[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]


def train(model, data, config: TrainConfig = TrainConfig(), log=None):
    """Fit ``model`` in place; returns ``(model, metrics)`` with MSE in ms^2."""
    if len(data) < 10:
        raise InvalidArgument("training needs at least 10 samples")
    tr, va, te = split_indices(len(data), config)
    model.fit_scale(data, tr)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.params, config)
    best = (math.inf, 0, [p.copy() for p in model.params])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(tr)
        for s in range(0, len(order), config.batch_size):
            loss, grads = model.batch_loss_and_grads(data, order[s:s + config.batch_size])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(model.params, grads)
        valid = model.mse(data, va if len(va) else tr)
        if not math.isfinite(valid):
            raise TrainingDiverged(epoch)
        if valid < best[0]:
            best = (valid, epoch, [p.copy() for p in model.params])
        if log is not None and (epoch % 50 == 0 or epoch == config.epochs):
            log(f"epoch {epoch}: valid mse {valid:.5g}")
    model.params = best[2]
    metrics = {
        "train_mse": model.mse(data, tr),
        "valid_mse": best[0],
        "test_mse": model.mse(data, te) if len(te) else float("nan"),
        "best_epoch": best[1],
        "n_train": len(tr),
        "n_valid": len(va),
        "n_test": len(te),
    }
    return model, metrics


# --- gradient checking -------------------------------------------------------

_FD_CHUNK = 2048


def _layer_perturbations(H, W, b, step):
    """Pre-activations of one layer with each of its parameters nudged by +/- step.

    Nudging ``W[i, j]`` only moves column ``j`` of ``H @ W + b`` by
    ``step * H[:, i]``, so the perturbed copies are stacked on a new leading
    axis instead of re-running the whole network per parameter.
    """
    Z = H @ W + b
    n_in, n_out = W.shape
    for slot, total in ((0, n_in * n_out), (1, n_out)):
        for lo in range(0, total, _FD_CHUNK):
            idx = np.arange(lo, min(lo + _FD_CHUNK, total))
            if slot == 0:
                rows, cols = idx // n_out, idx % n_out
                delta = step * H[:, rows].T
            else:
                cols = idx
                delta = np.full((len(idx), H.shape[0]), step)
            P = np.arange(len(idx))
            Zu = np.repeat(Z[None], len(idx), axis=0)
            Zd = Zu.copy()
            Zu[P, :, cols] += delta
            Zd[P, :, cols] -= delta
            yield slot, idx, Zu, Zd


def _stacked_mse(out, target):
    diff = out - target
    return np.sum(diff.reshape(len(diff), -1) ** 2, axis=1) / diff[0].size


def _flips(masks, base):
    P = len(masks[0]) if masks else 0
    flipped = np.zeros(P, dtype=bool)
    for m, b in zip(masks, base):
        flipped |= (m != b).reshape(P, -1).any(axis=1)
    return flipped


def gradient_check(model, sample, step: float = 1e-4, return_skipped: bool = False):
    """Largest relative gap between backprop and central differences.

    ``sample`` is whatever the model's ``loss_and_grads`` takes, e.g.
    ``(X, Y)`` for an MLP regressor or ``(feats, starts, y)`` for the
    compute model. Every scalar parameter is checked; relative error uses
    ``|a - n| / max(|a| + |n|, 1e-8)``.

    A coordinate whose +/- step flips some ReLU on or off straddles a kink,
    where the loss is not differentiable and the difference quotient measures
    a different function; such coordinates are skipped (and counted when
    ``return_skipped`` is set).
    """
    _, analytic = model.loss_and_grads(*sample)
    worst = 0.0
    skipped = 0
    for p, idx, up, down, kink in model.perturbed_losses(*sample, step=step):
        a = analytic[p].reshape(-1)[idx]
        numeric = (up - down) / (2.0 * step)
        err = np.abs(a - numeric) / np.maximum(np.abs(a) + np.abs(numeric), 1e-8)
        skipped += int(kink.sum())
        if (~kink).any():
            worst = max(worst, float(err[~kink].max()))
    return (worst, skipped) if return_skipped else worst


# --- persistence -------------------------------------------------------------

def model_to_dict(model, config: TrainConfig | None = None, metrics: dict | None = None) -> dict:
    d = {"kind": model.kind, "y_scale": model.y_scale, "feature_version": FEATURE_VERSION}
    if isinstance(model, ComputeCostModel):
        d["encoder"] = model.encoder.to_list()
        d["head"] = model.head.to_list()
        d["normalization"] = {"dim": DIM_NORM, "log10_hash": LOG_HASH_NORM,
                              "pooling": POOLING_NORM, "skew": SKEW_NORM, "size_bytes": SIZE_NORM}
    elif isinstance(model, CommCostModel):
        d["num_devices"] = model.num_devices
        d["direction"] = model.direction
        d["layers"] = model.net.to_list()
        d["normalization"] = {"starts_ms": START_NORM_MS, "device_dims": DEVICE_DIM_NORM,
                              "input_order": "starts,device_dims"}
    else:
        d["layers"] = model.net.to_list()
    if config is not None:
        d["train_config"] = config.to_dict()
        d["train_config_fingerprint"] = config.fingerprint()
    if metrics is not None:
        d["metrics"] = metrics
    return d


def model_from_dict(d: dict):
    if d.get("feature_version", FEATURE_VERSION) != FEATURE_VERSION:
        raise ConfigurationError("weight file uses an incompatible feature version")
    kind = d["kind"]
    if kind == "compute":
        m = ComputeCostModel(zero=True)
        m.encoder = MLP.from_list(d["encoder"], out_relu=True)
        m.head = MLP.from_list(d["head"])
    elif kind == "comm":
        m = CommCostModel(int(d["num_devices"]), d["direction"], zero=True)
        m.net = MLP.from_list(d["layers"])
    else:
        sizes = [d["layers"][0]["shape"][0]] + [layer["shape"][1] for layer in d["layers"]]
        m = MLPRegressor(sizes, zero=True)
        m.net = MLP.from_list(d["layers"])
    m.y_scale = float(d["y_scale"])
    return m


def save_model(model, path, config: TrainConfig | None = None, metrics: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, config, metrics), sort_keys=True) + "\n")


def load_model(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"missing model file {path}")
    return model_from_dict(json.loads(path.read_text()))


def file_fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


MODEL_FILES = {"compute": "compute.json", "comm-fwd": "comm-fwd.json", "comm-bwd": "comm-bwd.json"}


@dataclass
class CostModelBundle:
    compute: ComputeCostModel
    comm_fwd: CommCostModel
    comm_bwd: CommCostModel
    fingerprints: dict | None = None

    @property
    def num_devices(self) -> int:
        return self.comm_fwd.num_devices

    @classmethod
    def load(cls, directory) -> "CostModelBundle":
        directory = Path(directory)
        paths = {k: directory / f for k, f in MODEL_FILES.items()}
        models = {k: load_model(p) for k, p in paths.items()}
        if models["comm-fwd"].num_devices != models["comm-bwd"].num_devices:
            raise ConfigurationError("forward and backward comm models disagree on device count")
        return cls(models["compute"], models["comm-fwd"], models["comm-bwd"],
                   {k: file_fingerprint(p) for k, p in paths.items()})

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_model(self.compute, directory / MODEL_FILES["compute"])
        save_model(self.comm_fwd, directory / MODEL_FILES["comm-fwd"])
        save_model(self.comm_bwd, directory / MODEL_FILES["comm-bwd"])
