"""Two-layer LSTM regressor: forward pass, BPTT gradients, training loop.

The recurrent cell follows the classic gated update: input/forget/output
gates squash affine maps of the current input and the previous hidden
vector, the candidate cell state goes through tanh, the cell state blends
candidate and carry-over, and the hidden output is the gated tanh of the
cell state. A final affine projection of the top layer's last hidden
vector yields the scalar SOC estimate.

Parameters live in per-gate float64 arrays; training runs Adam over
mini-batches with global-norm gradient clipping and optional early
stopping on a chronological validation tail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ChannelSetError, DivergenceError, NonFiniteError, SchemaError, ShapeError
from .numerics import (
    AdamState,
    Array,
    adam_update,
    affine,
    clip_global_norm,
    sigmoid,
    tanh_act,
    uniform_init,
)
from .signals import ChannelStats, WindowedDataset

GATES = ("i", "f", "c", "o")

CHECKPOINT_FORMAT = "socsense-checkpoint-v1"


@dataclass
class LstmLayerParams:
    """One recurrent layer: per-gate input weights, recurrent weights, biases."""

    w_x: dict[str, Array]  # gate -> (hidden, input_dim)
    w_h: dict[str, Array]  # gate -> (hidden, hidden)
    b: dict[str, Array]    # gate -> (hidden,)

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden: int) -> "LstmLayerParams":
        w_x = {g: uniform_init(rng, (hidden, input_dim), fan_in=input_dim) for g in GATES}
        w_h = {g: uniform_init(rng, (hidden, hidden), fan_in=hidden) for g in GATES}
        b = {g: np.zeros(hidden) for g in GATES}
        # forget gate starts open so long windows keep their cell memory early in training
        b["f"] = np.ones(hidden)
        return cls(w_x=w_x, w_h=w_h, b=b)

    @property
    def hidden(self) -> int:
        return self.w_x["i"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x["i"].shape[1]


@dataclass
class LayerState:
    """Cell state and hidden output of one layer at one time step."""

    h: Array
    c: Array

    @classmethod
    def zeros(cls, hidden: int) -> "LayerState":
        return cls(h=np.zeros(hidden), c=np.zeros(hidden))


@dataclass
class LstmModel:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    w_out: Array          # (hidden,)
    b_out: float
    channels: tuple[str, ...]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: tuple[str, ...] | list[str],
             hidden: int = 100) -> "LstmModel":
        channels = tuple(channels)
        l1 = LstmLayerParams.init(rng, input_dim=len(channels), hidden=hidden)
        l2 = LstmLayerParams.init(rng, input_dim=hidden, hidden=hidden)
        w_out = uniform_init(rng, (hidden,), fan_in=hidden)
        return cls(layer1=l1, layer2=l2, w_out=w_out, b_out=0.0, channels=channels)

    @property
    def hidden_size(self) -> int:
        return self.layer1.hidden

    @property
    def input_dim(self) -> int:
        return self.layer1.input_dim

    def param_dict(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for label, layer in (("layer1", self.layer1), ("layer2", self.layer2)):
            for g in GATES:
                out[f"{label}.w_x.{g}"] = layer.w_x[g]
                out[f"{label}.w_h.{g}"] = layer.w_h[g]
                out[f"{label}.b.{g}"] = layer.b[g]
        out["head.w"] = self.w_out
        out["head.b"] = np.asarray(self.b_out, dtype=float)
        return out

    def with_params(self, params: dict[str, Array]) -> "LstmModel":
        def layer(label: str) -> LstmLayerParams:
            return LstmLayerParams(
                w_x={g: params[f"{label}.w_x.{g}"] for g in GATES},
                w_h={g: params[f"{label}.w_h.{g}"] for g in GATES},
                b={g: params[f"{label}.b.{g}"] for g in GATES},
            )
        return LstmModel(layer1=layer("layer1"), layer2=layer("layer2"),
                         w_out=params["head.w"], b_out=float(params["head.b"]),
                         channels=self.channels)


def cell_step(params: LstmLayerParams, x: Array, prev: LayerState) -> LayerState:
    """One gated recurrent update on a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise ShapeError(
            f"cell_step: input has shape {x.shape}, layer expects ({params.input_dim},)"
        )
    if prev.h.shape != (params.hidden,) or prev.c.shape != (params.hidden,):
        raise ShapeError(
            f"cell_step: state shapes {prev.h.shape}/{prev.c.shape}, "
            f"layer expects ({params.hidden},)"
        )
    i = sigmoid(affine(params.w_x["i"], x, params.b["i"]) + params.w_h["i"] @ prev.h)
    f = sigmoid(affine(params.w_x["f"], x, params.b["f"]) + params.w_h["f"] @ prev.h)
    o = sigmoid(affine(params.w_x["o"], x, params.b["o"]) + params.w_h["o"] @ prev.h)
    c_tilde = tanh_act(affine(params.w_x["c"], x, params.b["c"]) + params.w_h["c"] @ prev.h)
    c = f * prev.c + i * c_tilde
    h = o * np.tanh(c)
    for name, gate in (("input", i), ("forget", f), ("output", o)):
        assert np.all(gate >= 0.0) and np.all(gate <= 1.0), f"{name} gate left [0,1]"
    assert np.all(np.abs(c_tilde) <= 1.0), "cell candidate left [-1,1]"
    assert np.all(np.abs(h) <= 1.0), "hidden output left [-1,1]"
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise NonFiniteError("cell_step: non-finite cell or hidden state")
    return LayerState(h=h, c=c)


class _LayerCache:
    """Activations kept for backpropagation through time, (B, S, H) each."""

    __slots__ = ("inputs", "i", "f", "o", "g", "c", "tanh_c", "outputs")

    def __init__(self, batch: int, steps: int, hidden: int):
        shape = (batch, steps, hidden)
        self.i = np.empty(shape)
        self.f = np.empty(shape)
        self.o = np.empty(shape)
        self.g = np.empty(shape)
        self.c = np.empty(shape)
        self.tanh_c = np.empty(shape)
        self.inputs: Array = None   # type: ignore[assignment]
        self.outputs: Array = None  # type: ignore[assignment]


# fused layout groups the sigmoid gates first so one activation call covers them
_FUSED_ORDER = ("i", "f", "o", "c")


def _stacked_weights(layer: LstmLayerParams) -> tuple[Array, Array, Array]:
    """Gate weights fused along the output axis, order (i, f, o, c)."""
    wx = np.concatenate([layer.w_x[g].T for g in _FUSED_ORDER], axis=1)  # (D, 4H)
    wh = np.concatenate([layer.w_h[g].T for g in _FUSED_ORDER], axis=1)  # (H, 4H)
    b = np.concatenate([layer.b[g] for g in _FUSED_ORDER])               # (4H,)
    return wx, wh, b


def _layer_forward(layer: LstmLayerParams, inputs: Array,
                   keep_cache: bool) -> tuple[Array, _LayerCache | None]:
    """Run one layer over a (batch, steps, dim) block; returns (batch, steps, hidden)."""
    batch, steps, dim = inputs.shape
    if dim != layer.input_dim:
        raise ShapeError(
            f"layer forward: inputs have {dim} channels, layer expects {layer.input_dim}"
        )
    hidden = layer.hidden
    wx, wh, b = _stacked_weights(layer)
    inputs = np.ascontiguousarray(inputs)
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    outputs = np.empty((batch, steps, hidden))
    cache = _LayerCache(batch, steps, hidden) if keep_cache else None
    # preallocated step buffers keep the loop free of large allocations
    pre = np.empty((batch, 4 * hidden))
    rec = np.empty((batch, 4 * hidden))
    scratch = np.empty((batch, hidden))
    c_next = np.empty((batch, hidden))
    for t in range(steps):
        np.matmul(inputs[:, t, :], wx, out=pre)
        np.matmul(h, wh, out=rec)
        pre += rec
        pre += b
        sig = pre[:, :3 * hidden]
        # logistic via tanh identity, in place
        sig *= 0.5
        np.tanh(sig, out=sig)
        sig *= 0.5
        sig += 0.5
        if sig.min() < 0.0 or sig.max() > 1.0:
            raise NonFiniteError(f"layer forward: gate left [0,1] at step {t}")
        i = sig[:, :hidden]
        f = sig[:, hidden:2 * hidden]
        o = sig[:, 2 * hidden:]
        g = pre[:, 3 * hidden:]
        np.tanh(g, out=g)
        np.multiply(f, c, out=c_next)
        np.multiply(i, g, out=scratch)
        c_next += scratch
        h = outputs[:, t, :]
        np.tanh(c_next, out=scratch)          # scratch = tanh(c)
        np.multiply(o, scratch, out=h)        # hidden output written straight to outputs
        # NaN/Inf in any gate propagates into these sums
        if not np.isfinite(c_next.sum() + h.sum()):
            raise NonFiniteError(f"layer forward: non-finite state at step {t}")
        if cache is not None:
            cache.i[:, t, :] = i
            cache.f[:, t, :] = f
            cache.o[:, t, :] = o
            cache.g[:, t, :] = g
            cache.c[:, t, :] = c_next
            cache.tanh_c[:, t, :] = scratch
        c, c_next = c_next, c
    if cache is not None:
        cache.inputs = inputs
        cache.outputs = outputs
    return outputs, cache


def _layer_backward(layer: LstmLayerParams, cache: _LayerCache,
                    d_out: Array) -> tuple[dict[str, Array], Array]:
    """Backprop through one layer given gradients w.r.t. its outputs."""
    batch, steps, hidden = d_out.shape
    dim = layer.input_dim
    wx, wh, _ = _stacked_weights(layer)
    wh_t = np.ascontiguousarray(wh.T)
    d_pre_all = np.empty((batch, steps, 4 * hidden))
    dh = np.empty((batch, hidden))
    dc = np.empty((batch, hidden))
    tmp = np.empty((batch, hidden))
    dh_rec = np.zeros((batch, hidden))
    dc_carry = np.zeros((batch, hidden))
    zeros = np.zeros((batch, hidden))
    for t in reversed(range(steps)):
        i = cache.i[:, t, :]
        f = cache.f[:, t, :]
        o = cache.o[:, t, :]
        g = cache.g[:, t, :]
        tanh_c = cache.tanh_c[:, t, :]
        c_prev = cache.c[:, t - 1, :] if t > 0 else zeros
        d_pre = d_pre_all[:, t, :]
        d_pre_i = d_pre[:, :hidden]
        d_pre_f = d_pre[:, hidden:2 * hidden]
        d_pre_o = d_pre[:, 2 * hidden:3 * hidden]
        d_pre_g = d_pre[:, 3 * hidden:]
        np.add(d_out[:, t, :], dh_rec, out=dh)
        np.multiply(dh, tanh_c, out=d_pre_o)            # output-gate branch (pre o'(pre))
        np.multiply(tanh_c, tanh_c, out=tmp)            # dc = dh*o*(1-tanh_c^2) + carry
        np.subtract(1.0, tmp, out=tmp)
        tmp *= o
        tmp *= dh
        np.add(tmp, dc_carry, out=dc)
        np.subtract(1.0, i, out=tmp)                    # input gate
        tmp *= i
        tmp *= g
        np.multiply(tmp, dc, out=d_pre_i)
        np.subtract(1.0, f, out=tmp)                    # forget gate
        tmp *= f
        tmp *= c_prev
        np.multiply(tmp, dc, out=d_pre_f)
        np.subtract(1.0, o, out=tmp)                    # finish output gate
        tmp *= o
        d_pre_o *= tmp
        np.multiply(g, g, out=tmp)                      # cell candidate
        np.subtract(1.0, tmp, out=tmp)
        tmp *= i
        np.multiply(tmp, dc, out=d_pre_g)
        if not np.isfinite(d_pre.sum()):
            raise NonFiniteError(f"layer backward: non-finite gradient at step {t}")
        np.matmul(d_pre, wh_t, out=dh_rec)
        np.multiply(dc, f, out=dc_carry)
    # weight gradients in three large matmuls over the flattened time axis
    flat = d_pre_all.reshape(batch * steps, 4 * hidden)
    d_wx = cache.inputs.reshape(batch * steps, dim).T @ flat
    h_prev = np.concatenate([np.zeros((batch, 1, hidden)), cache.outputs[:, :-1, :]], axis=1)
    d_wh = h_prev.reshape(batch * steps, hidden).T @ flat
    d_b = flat.sum(axis=0)
    d_inputs = d_pre_all @ wx.T
    grads: dict[str, Array] = {}
    for idx, gate in enumerate(_FUSED_ORDER):
        sl = slice(idx * hidden, (idx + 1) * hidden)
        grads[f"w_x.{gate}"] = d_wx[:, sl].T
        grads[f"w_h.{gate}"] = d_wh[:, sl].T
        grads[f"b.{gate}"] = d_b[sl]
    return grads, d_inputs


def _check_window_shape(model: LstmModel, windows: Array) -> Array:
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3:
        raise ShapeError(f"forward: expected (batch, steps, channels), got {windows.shape}")
    if windows.shape[2] != model.input_dim:
        raise ChannelSetError(
            f"forward: model expects {model.input_dim} channels {list(model.channels)}, "
            f"windows provide {windows.shape[2]}"
        )
    return windows


def forward_batch(model: LstmModel, windows: Array) -> Array:
    """Predict SOC for a (batch, steps, channels) block of windows."""
    windows = _check_window_shape(model, windows)
    h1, _ = _layer_forward(model.layer1, windows, keep_cache=False)
    h2, _ = _layer_forward(model.layer2, h1, keep_cache=False)
    return h2[:, -1, :] @ model.w_out + model.b_out


def forward_sequence(model: LstmModel, window: Array) -> tuple[float, list[LayerState]]:
    """Predict SOC for one window; also returns each layer's final state."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2:
        raise ShapeError(f"forward_sequence: expected (steps, channels), got {window.shape}")
    batch = _check_window_shape(model, window[None, :, :])
    h1, cache1 = _layer_forward(model.layer1, batch, keep_cache=True)
    h2, cache2 = _layer_forward(model.layer2, h1, keep_cache=True)
    pred = float(h2[0, -1, :] @ model.w_out + model.b_out)
    states = [
        LayerState(h=cache1.outputs[0, -1, :].copy(), c=cache1.c[-1][0].copy()),
        LayerState(h=cache2.outputs[0, -1, :].copy(), c=cache2.c[-1][0].copy()),
    ]
    return pred, states


def predict_dataset(model: LstmModel, dataset: WindowedDataset,
                    chunk: int = 4096) -> Array:
    """Predictions over a windowed dataset, checking channel identities."""
    if tuple(dataset.channels) != tuple(model.channels):
        raise ChannelSetError(
            f"predict: model channels {list(model.channels)} but dataset has "
            f"{list(dataset.channels)}"
        )
    preds = np.empty(len(dataset.targets))
    with threadpool_limits(limits=1, user_api="blas"):
        for start in range(0, len(preds), chunk):
            stop = min(start + chunk, len(preds))
            preds[start:stop] = forward_batch(model, dataset.windows[start:stop])
    return preds


def mse_loss(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ShapeError(
            f"mse_loss: predictions {predictions.shape} vs targets {targets.shape}"
        )
    if predictions.size == 0:
        raise ShapeError("mse_loss: empty input")
    diff = predictions - targets
    return float(np.mean(diff * diff))


def backward(model: LstmModel, windows: Array, targets: Array
             ) -> tuple[float, dict[str, Array]]:
    """Loss and exact BPTT gradients of the mean-squared error over a batch."""
    windows = _check_window_shape(model, windows)
    targets = np.asarray(targets, dtype=float)
    if windows.shape[0] == 0:
        raise ShapeError("backward: empty batch")
    if targets.shape != (windows.shape[0],):
        raise ShapeError(
            f"backward: {windows.shape[0]} windows but targets {targets.shape}"
        )
    h1, cache1 = _layer_forward(model.layer1, windows, keep_cache=True)
    h2, cache2 = _layer_forward(model.layer2, h1, keep_cache=True)
    last = h2[:, -1, :]
    preds = last @ model.w_out + model.b_out
    err = preds - targets
    batch = windows.shape[0]
    loss = float(np.mean(err * err))
    d_pred = 2.0 * err / batch
    grads: dict[str, Array] = {
        "head.w": last.T @ d_pred,
        "head.b": np.asarray(float(np.sum(d_pred))),
    }
    d_h2 = np.zeros_like(h2)
    d_h2[:, -1, :] = np.outer(d_pred, model.w_out)
    g2, d_h1 = _layer_backward(model.layer2, cache2, d_h2)
    g1, _ = _layer_backward(model.layer1, cache1, d_h1)
    for key, val in g2.items():
        grads[f"layer2.{key}"] = val
    for key, val in g1.items():
        grads[f"layer1.{key}"] = val
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 6000
    patience: int | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int | None = 64
    clip_norm: float = 5.0
    window_length: int = 50
    val_fraction: float = 0.1
    seed: int = 0
    # False: per-epoch loss is the mean of minibatch losses (no extra passes);
    # True: re-evaluate the full training loss after every epoch
    track_full_loss: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class TrainResult:
    model: LstmModel
    train_loss: list[float]
    val_loss: list[float] | None
    best_epoch: int
    epochs_run: int


def _dataset_loss(model: LstmModel, windows: Array, targets: Array, chunk: int = 4096) -> float:
    total = 0.0
    n = windows.shape[0]
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        preds = forward_batch(model, windows[start:stop])
        diff = preds - targets[start:stop]
        total += float(np.sum(diff * diff))
    return total / n


def train(model: LstmModel, dataset: WindowedDataset, config: TrainConfig) -> TrainResult:
    """Adam over shuffled mini-batches with clipping and early stopping.

    The validation tail (chronological last val_fraction of the given
    dataset) never contributes gradients; early stopping watches it when
    present, otherwise the training loss. The best parameters seen are
    restored at the end when early stopping is active.
    """
    n = len(dataset.targets)
    if n == 0:
        raise ShapeError("train: empty dataset")
    if dataset.windows.shape[1] != config.window_length:
        raise ShapeError(
            f"train: dataset windows have length {dataset.windows.shape[1]}, "
            f"config says {config.window_length}"
        )
    n_val = int(round(config.val_fraction * n))
    if n_val >= n:
        n_val = n - 1
    n_fit = n - n_val
    fit_w, fit_y = dataset.windows[:n_fit], dataset.targets[:n_fit]
    val_w, val_y = dataset.windows[n_fit:], dataset.targets[n_fit:]

    rng = np.random.default_rng(config.seed)
    params = model.param_dict()
    state = AdamState.init(params, learning_rate=config.learning_rate,
                           beta1=config.beta1, beta2=config.beta2,
                           epsilon=config.epsilon)
    batch_size = config.batch_size or n_fit
    batch_size = max(1, min(batch_size, n_fit))

    train_hist: list[float] = []
    val_hist: list[float] = []
    best = np.inf
    best_epoch = 0
    best_params = {k: v.copy() for k, v in params.items()}
    wait = 0
    current = model
    epochs_run = 0
    # BLAS threading hurts on the small recurrent matmuls; pin to one thread
    with threadpool_limits(limits=1, user_api="blas"):
        for epoch in range(config.max_epochs):
            epochs_run = epoch + 1
            order = rng.permutation(n_fit)
            batch_losses = []
            for start in range(0, n_fit, batch_size):
                idx = order[start:start + batch_size]
                try:
                    loss, grads = backward(current, fit_w[idx], fit_y[idx])
                except NonFiniteError as exc:
                    raise DivergenceError(f"training diverged at epoch {epoch}: {exc}",
                                          epoch) from exc
                if not np.isfinite(loss):
                    raise DivergenceError(f"training loss non-finite at epoch {epoch}", epoch)
                batch_losses.append(loss)
                grads, _ = clip_global_norm(grads, config.clip_norm)
                params, state = adam_update(params, grads, state)
                current = current.with_params(params)
            if config.track_full_loss:
                epoch_loss = _dataset_loss(current, fit_w, fit_y)
            else:
                epoch_loss = float(np.mean(batch_losses))
            if not np.isfinite(epoch_loss):
                raise DivergenceError(f"training loss non-finite at epoch {epoch}", epoch)
            train_hist.append(epoch_loss)
            watch = epoch_loss
            if n_val:
                v = _dataset_loss(current, val_w, val_y)
                val_hist.append(v)
                watch = v
            if watch < best:
                best = watch
                best_epoch = epoch
                best_params = {k: v.copy() for k, v in params.items()}
                wait = 0
            else:
                wait += 1
                if config.patience is not None and wait > config.patience:
                    break
    if config.patience is not None:
        current = current.with_params(best_params)
    return TrainResult(model=current, train_loss=train_hist,
                       val_loss=val_hist if n_val else None,
                       best_epoch=best_epoch, epochs_run=epochs_run)


def save_checkpoint(model: LstmModel, path: str | Path,
                    stats: ChannelStats | None = None,
                    window_length: int | None = None,
                    config_sha256: str | None = None,
                    meta: dict | None = None) -> None:
    """Write the model (and the data maps needed at inference) as JSON."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "hidden_size": model.hidden_size,
        "channels": list(model.channels),
        "layers": [
            {
                "w_x": {g: layer.w_x[g].tolist() for g in GATES},
                "w_h": {g: layer.w_h[g].tolist() for g in GATES},
                "b": {g: layer.b[g].tolist() for g in GATES},
            }
            for layer in (model.layer1, model.layer2)
        ],
        "w_out": model.w_out.tolist(),
        "b_out": model.b_out,
        "window_length": window_length,
        "normalization": stats.to_json() if stats is not None else None,
        "config_sha256": config_sha256,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[LstmModel, ChannelStats | None, dict]:
    """Read a checkpoint; returns (model, normalization stats, metadata)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"unrecognized checkpoint format in {path}")
    layers = []
    for spec in raw["layers"]:
        layers.append(LstmLayerParams(
            w_x={g: np.asarray(spec["w_x"][g], dtype=float) for g in GATES},
            w_h={g: np.asarray(spec["w_h"][g], dtype=float) for g in GATES},
            b={g: np.asarray(spec["b"][g], dtype=float) for g in GATES},
        ))
    model = LstmModel(layer1=layers[0], layer2=layers[1],
                      w_out=np.asarray(raw["w_out"], dtype=float),
                      b_out=float(raw["b_out"]),
                      channels=tuple(raw["channels"]))
    stats = ChannelStats.from_json(raw["normalization"]) if raw.get("normalization") else None
    meta = {
        "window_length": raw.get("window_length"),
        "config_sha256": raw.get("config_sha256"),
        "meta": raw.get("meta", {}),
    }
    return model, stats, meta
