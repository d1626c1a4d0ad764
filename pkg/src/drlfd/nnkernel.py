"""Small numpy neural-network kernel with hand-written backpropagation.

A network is a linear chain of :class:`LayerSpec` entries wrapped in a
:class:`Network`, which resolves shapes once and then runs ``forward`` /
``backward`` over a parameter dict. Tensors are float64 numpy arrays with the
batch on axis 0; images are NHWC. ``concat`` layers pull an auxiliary input by
name (e.g. the robot state), and recurrent cells consume ``(B, L, D)``
sequences and return the last hidden state unless ``return_sequences`` is set.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from drlfd.validation import CheckpointError, ValidationError

LAYER_KINDS = ("conv2d", "dense", "flatten", "concat", "relu", "tanh",
               "rnn_cell", "gru_cell", "lstm_cell")
RECURRENT_KINDS = ("rnn_cell", "gru_cell", "lstm_cell")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    units: int = 0
    hidden: int = 0
    source: str = ""
    width: int = 0
    return_sequences: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}", field="kind", rule="enum")
        need = {"conv2d": ("filters", "kernel", "stride"), "dense": ("units",),
                "concat": ("width",), "rnn_cell": ("hidden",), "gru_cell": ("hidden",),
                "lstm_cell": ("hidden",)}.get(self.kind, ())
        for name in need:
            if getattr(self, name) <= 0:
                raise ValidationError(f"{self.kind}: {name} must be positive", field=name, rule="positive")
        if self.padding < 0:
            raise ValidationError(f"{self.kind}: padding must be >= 0", field="padding", rule="positive")
        if self.kind == "concat" and not self.source:
            raise ValidationError("concat: source name required", field="source", rule="missing")

    def to_dict(self) -> dict:
        defaults = LayerSpec.__dataclass_fields__
        return {k: v for k, v in asdict(self).items()
                if k == "kind" or v != defaults[k].default}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _he_uniform(rng, fan_in, shape):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


# --------------------------------------------------------------------------
# Layer implementations: each has shape(spec, in_shape, aux_widths) ->
# out_shape, init(spec, in_shape, rng) -> params, forward(...), backward(...).
# --------------------------------------------------------------------------

class LayerImpl(NamedTuple):
    shape: Callable
    init: Callable
    forward: Callable
    backward: Callable


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _conv_shape(spec, in_shape):
    if len(in_shape) != 3:
        raise ValidationError(f"conv2d expects (H, W, C) input, got {in_shape}", field="shape", rule="rank")
    H, W, C = in_shape
    Ho = _conv_out(H, spec.kernel, spec.stride, spec.padding)
    Wo = _conv_out(W, spec.kernel, spec.stride, spec.padding)
    if Ho <= 0 or Wo <= 0:
        raise ValidationError(f"conv2d kernel {spec.kernel} too large for input {in_shape}",
                              field="kernel", rule="shape")
    return (Ho, Wo, spec.filters)


def _conv_init(spec, in_shape, rng):
    C = in_shape[2]
    k = spec.kernel
    return {"W": _he_uniform(rng, k * k * C, (k, k, C, spec.filters)), "b": np.zeros(spec.filters)}


def _conv_forward(spec, p, x, aux, hidden):
    k, s, pad = spec.kernel, spec.stride, spec.padding
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    B, Hp, Wp, C = x.shape
    Ho = (Hp - k) // s + 1
    Wo = (Wp - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    # (B, Ho, Wo, C, k, k) -> rows ordered (ki, kj, c) to match W's layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * C)
    Wm = p["W"].reshape(k * k * C, spec.filters)
    y = (cols @ Wm + p["b"]).reshape(B, Ho, Wo, spec.filters)
    return y, (cols, x.shape)


def _conv_backward(spec, p, cache, dy):
    cols, xshape = cache
    k, s, pad = spec.kernel, spec.stride, spec.padding
    B, Hp, Wp, C = xshape
    _, Ho, Wo, F = dy.shape
    dyf = dy.reshape(-1, F)
    Wm = p["W"].reshape(k * k * C, F)
    grads = {"W": (cols.T @ dyf).reshape(p["W"].shape), "b": dyf.sum(axis=0)}
    dcols = (dyf @ Wm.T).reshape(B, Ho, Wo, k, k, C)
    dx = np.zeros(xshape)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    if pad:
        dx = dx[:, pad:Hp - pad, pad:Wp - pad, :]
    return dx, grads, {}


def _dense_shape(spec, in_shape):
    return tuple(in_shape[:-1]) + (spec.units,)


def _dense_init(spec, in_shape, rng):
    D = in_shape[-1]
    return {"W": _he_uniform(rng, D, (D, spec.units)), "b": np.zeros(spec.units)}


def _dense_forward(spec, p, x, aux, hidden):
    return x @ p["W"] + p["b"], x


def _dense_backward(spec, p, x, dy):
    D = x.shape[-1]
    x2 = x.reshape(-1, D)
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads = {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}
    return dy @ p["W"].T, grads, {}


def _flatten_shape(spec, in_shape):
    return (int(np.prod(in_shape)),)


def _flatten_forward(spec, p, x, aux, hidden):
    return x.reshape(x.shape[0], -1), x.shape


def _flatten_backward(spec, p, shape, dy):
    return dy.reshape(shape), {}, {}


def _concat_shape(spec, in_shape):
    return tuple(in_shape[:-1]) + (in_shape[-1] + spec.width,)


def _concat_forward(spec, p, x, aux, hidden):
    if aux is None or spec.source not in aux:
        raise ValidationError(f"concat: auxiliary input {spec.source!r} not provided",
                              field=spec.source, rule="missing")
    a = np.asarray(aux[spec.source], dtype=float)
    if a.shape[:-1] != x.shape[:-1] or a.shape[-1] != spec.width:
        raise ValidationError(
            f"concat: {spec.source!r} has shape {a.shape}, expected {x.shape[:-1] + (spec.width,)}",
            field=spec.source, rule="shape")
    return np.concatenate([x, a], axis=-1), x.shape[-1]


def _concat_backward(spec, p, D, dy):
    return dy[..., :D], {}, {spec.source: dy[..., D:]}


def _same_shape(spec, in_shape):
    return tuple(in_shape)


def _no_params(spec, in_shape, rng):
    return {}


def _relu_forward(spec, p, x, aux, hidden):
    mask = x > 0
    return x * mask, mask


def _relu_backward(spec, p, mask, dy):
    return dy * mask, {}, {}


def _tanh_forward(spec, p, x, aux, hidden):
    y = np.tanh(x)
    return y, y


def _tanh_backward(spec, p, y, dy):
    return dy * (1.0 - y * y), {}, {}


def _rec_shape(spec, in_shape):
    if len(in_shape) != 2:
        raise ValidationError(f"{spec.kind} expects (L, D) input, got {in_shape}", field="shape", rule="rank")
    L = in_shape[0]
    return (L, spec.hidden) if spec.return_sequences else (spec.hidden,)


_GATES = {"rnn_cell": 1, "gru_cell": 3, "lstm_cell": 4}


def _rec_init(spec, in_shape, rng):
    D = in_shape[-1]
    H = spec.hidden
    G = _GATES[spec.kind]
    lim = 1.0 / np.sqrt(H)
    p = {"W": rng.uniform(-lim, lim, (D, G * H)), "U": rng.uniform(-lim, lim, (H, G * H)),
         "b": np.zeros(G * H)}
    if spec.kind == "lstm_cell":
        p["b"][H:2 * H] = 1.0
    return p


def _initial_state(spec, hidden, B):
    H = spec.hidden
    h0 = np.zeros((B, H)) if hidden is None or "h" not in hidden else np.asarray(hidden["h"], float)
    c0 = None
    if spec.kind == "lstm_cell":
        c0 = np.zeros((B, H)) if hidden is None or "c" not in hidden else np.asarray(hidden["c"], float)
    return h0, c0


def _rec_forward(spec, p, x, aux, hidden):
    B, L, _ = x.shape
    H = spec.hidden
    W, U, b = p["W"], p["U"], p["b"]
    h, c = _initial_state(spec, hidden, B)
    xw = x @ W + b  # (B, L, G*H)
    hs = [h]
    steps = []
    for t in range(L):
        hp = hs[-1]
        if spec.kind == "rnn_cell":
            h = np.tanh(xw[:, t] + hp @ U)
            steps.append(h)
        elif spec.kind == "gru_cell":
            hu = hp @ U
            z = _sigmoid(xw[:, t, :H] + hu[:, :H])
            r = _sigmoid(xw[:, t, H:2 * H] + hu[:, H:2 * H])
            hn = hu[:, 2 * H:]
            n = np.tanh(xw[:, t, 2 * H:] + r * hn)
            h = (1.0 - z) * n + z * hp
            steps.append((z, r, n, hn))
        else:
            g = xw[:, t] + hp @ U
            i = _sigmoid(g[:, :H])
            f = _sigmoid(g[:, H:2 * H])
            gg = np.tanh(g[:, 2 * H:3 * H])
            o = _sigmoid(g[:, 3 * H:])
            cp = c
            c = f * cp + i * gg
            tc = np.tanh(c)
            h = o * tc
            steps.append((i, f, gg, o, cp, tc))
        hs.append(h)
    out = np.stack(hs[1:], axis=1) if spec.return_sequences else hs[-1]
    return out, (x, hs, steps)


def _rec_backward(spec, p, cache, dy):
    x, hs, steps = cache
    B, L, D = x.shape
    H = spec.hidden
    W, U = p["W"], p["U"]
    dxw = np.zeros((B, L, W.shape[1]))
    dU = np.zeros_like(U)
    if spec.return_sequences:
        dh_out = dy
    else:
        dh_out = np.zeros((B, L, H))
        dh_out[:, -1] = dy
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in reversed(range(L)):
        dh = dh + dh_out[:, t]
        hp = hs[t]
        if spec.kind == "rnn_cell":
            h = steps[t]
            da = dh * (1.0 - h * h)
            dxw[:, t] = da
            dU += hp.T @ da
            dh = da @ U.T
        elif spec.kind == "gru_cell":
            z, r, n, hn = steps[t]
            dn = dh * (1.0 - z)
            dz = dh * (hp - n)
            dhp = dh * z
            dan = dn * (1.0 - n * n)
            dr = dan * hn
            dhn = dan * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dxw[:, t, :H] = daz
            dxw[:, t, H:2 * H] = dar
            dxw[:, t, 2 * H:] = dan
            dhu = np.concatenate([daz, dar, dhn], axis=1)
            dU += hp.T @ dhu
            dh = dhp + dhu @ U.T
        else:
            i, f, gg, o, cp, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * gg
            dgg = dc * i
            df = dc * cp
            dga = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                                  dgg * (1.0 - gg * gg), do * o * (1.0 - o)], axis=1)
            dxw[:, t] = dga
            dU += hp.T @ dga
            dh = dga @ U.T
            dc = dc * f
    dxw2 = dxw.reshape(-1, dxw.shape[-1])
    grads = {"W": x.reshape(-1, D).T @ dxw2, "U": dU, "b": dxw2.sum(axis=0)}
    dx = dxw @ W.T
    dhidden = {"h": dh}
    if spec.kind == "lstm_cell":
        dhidden["c"] = dc
    return dx, grads, {"__hidden__": dhidden}


LAYERS: dict[str, LayerImpl] = {
    "conv2d": LayerImpl(_conv_shape, _conv_init, _conv_forward, _conv_backward),
    "dense": LayerImpl(_dense_shape, _dense_init, _dense_forward, _dense_backward),
    "flatten": LayerImpl(_flatten_shape, _no_params, _flatten_forward, _flatten_backward),
    "concat": LayerImpl(_concat_shape, _no_params, _concat_forward, _concat_backward),
    "relu": LayerImpl(_same_shape, _no_params, _relu_forward, _relu_backward),
    "tanh": LayerImpl(_same_shape, _no_params, _tanh_forward, _tanh_backward),
    "rnn_cell": LayerImpl(_rec_shape, _rec_init, _rec_forward, _rec_backward),
    "gru_cell": LayerImpl(_rec_shape, _rec_init, _rec_forward, _rec_backward),
    "lstm_cell": LayerImpl(_rec_shape, _rec_init, _rec_forward, _rec_backward),
}


class Network:
    """A validated chain of layers with a fixed per-sample input shape.

    Parameters are kept outside the network in a flat dict keyed
    ``"<layer index>.<name>"`` so they can be checkpointed and updated by the
    optimizer directly.
    """

    def __init__(self, layers, in_shape):
        self.layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in layers)
        self.in_shape = tuple(int(s) for s in in_shape)
        shapes = [self.in_shape]
        for i, spec in enumerate(self.layers):
            try:
                shapes.append(tuple(LAYERS[spec.kind].shape(spec, shapes[-1])))
            except ValidationError as exc:
                raise ValidationError(f"layer {i} ({spec.kind}): {exc}", field=f"layer{i}", rule=exc.rule) from exc
        self.shapes = shapes
        self.out_shape = shapes[-1]

    @property
    def aux_widths(self) -> dict[str, int]:
        return {s.source: s.width for s in self.layers if s.kind == "concat"}

    def param_shapes(self) -> dict[str, tuple]:
        rng = np.random.default_rng(0)
        return {k: v.shape for k, v in self.init_params(rng).items()}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i, spec in enumerate(self.layers):
            for name, value in LAYERS[spec.kind].init(spec, self.shapes[i], rng).items():
                params[f"{i}.{name}"] = value
        return params

    def _layer_params(self, params, i):
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def forward(self, params, x, aux=None, hidden=None):
        """Run the chain. ``hidden`` maps recurrent layer index to {"h", "c"}."""
        x = np.asarray(x, dtype=float)
        if tuple(x.shape[1:]) != self.in_shape:
            raise ValidationError(f"input shape {x.shape[1:]} does not match network input {self.in_shape}",
                                  field="input", rule="shape")
        caches = []
        for i, spec in enumerate(self.layers):
            h0 = hidden.get(i) if hidden else None
            x, c = LAYERS[spec.kind].forward(spec, self._layer_params(params, i), x, aux, h0)
            caches.append(c)
        return x, {"params": params, "caches": caches, "out_shape": x.shape}

    def backward(self, cache, dy):
        """Return ``(dx, grads, daux)`` for upstream gradient ``dy``.

        ``daux`` holds gradients for the concat sources and, under
        ``"hidden"``, for the initial recurrent states.
        """
        dy = np.asarray(dy, dtype=float)
        if dy.shape != cache["out_shape"]:
            raise ValidationError(f"gradient shape {dy.shape} does not match output {cache['out_shape']}",
                                  field="dy", rule="shape")
        params = cache["params"]
        grads = {}
        daux: dict = {}
        for i in reversed(range(len(self.layers))):
            spec = self.layers[i]
            dy, g, extra = LAYERS[spec.kind].backward(spec, self._layer_params(params, i), cache["caches"][i], dy)
            for name, value in g.items():
                grads[f"{i}.{name}"] = value
            for name, value in extra.items():
                if name == "__hidden__":
                    daux.setdefault("hidden", {})[i] = value
                else:
                    daux[name] = daux.get(name, 0) + value
        return dy, grads, daux

    def to_dict(self) -> dict:
        return {"in_shape": list(self.in_shape), "layers": [s.to_dict() for s in self.layers]}


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def mae_loss(pred, truth):
    """Mean absolute error and its (sub)gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {truth.shape}", field="pred", rule="shape")
    d = pred - truth
    n = d.size
    return float(np.mean(np.abs(d))), np.sign(d) / n


def pose_loss(pred, truth, w_pos: float = 1.0, w_ori: float = 1.0):
    """Squared position error plus quaternion distance on ``(B, 7)`` poses.

    The predicted quaternion is renormalized before the inner product and the
    gradient flows through that normalization.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.shape[-1] != 7:
        raise ValidationError(f"expected matching (B, 7) arrays, got {pred.shape} and {truth.shape}",
                              field="pred", rule="shape")
    pred = pred.reshape(-1, 7)
    truth = truth.reshape(-1, 7)
    B = pred.shape[0]
    u = pred[:, :4]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norm < 1e-8):
        raise ValidationError("predicted quaternion has near-zero norm", field="pred", rule="norm")
    qh = u / norm
    q = truth[:, :4]
    dot = np.sum(q * qh, axis=1, keepdims=True)
    dp = pred[:, 4:] - truth[:, 4:]
    loss = w_pos * np.sum(dp * dp) / B + w_ori * np.sum(1.0 - dot * dot) / B
    grad = np.empty_like(pred)
    grad[:, 4:] = w_pos * 2.0 * dp / B
    gq = w_ori * (-2.0 * dot * q) / B
    grad[:, :4] = (gq - qh * np.sum(qh * gq, axis=1, keepdims=True)) / norm
    return float(loss), grad.reshape(pred.shape)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper = AdamHyper(),
              frozen: frozenset = frozenset()):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"non-finite gradient for parameter {name!r}", field=name, rule="finite")
        if params[name].shape != g.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}",
                                  field=name, rule="shape")
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        if name in frozen:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict  # name -> max relative error
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e >= self.tol]

    def __str__(self):
        lines = [f"{'PASS' if e < self.tol else 'FAIL'} {k:<16s} max_rel_err={e:.3e}" for k, e in self.errors.items()]
        return "\n".join(lines)


def relative_error(analytic, numeric, abs_floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    rel[diff < abs_floor] = 0.0
    return float(rel.max()) if rel.size else 0.0


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2.0 * h)
    return g


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def grad_check(net: Network, seed: int = 0, batch: int = 2, h: float = 1e-5,
               tol: float = 1e-4, with_hidden: bool = True, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences for every parameter.

    The scalar objective is ``sum(w * net(x))`` with fixed random ``w``;
    inputs, auxiliary concat inputs and initial recurrent states are checked
    too (reported as ``input``, ``aux:<name>`` and ``hidden<i>.<h|c>``).
    """
    rng = np.random.default_rng(seed)
    params = net.init_params(rng)
    for k in params:
        params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
    x = _away_from_zero(rng, (batch,) + net.in_shape)
    aux = {}
    for i, spec in enumerate(net.layers):
        if spec.kind == "concat":
            aux[spec.source] = _away_from_zero(rng, (batch,) + net.shapes[i][:-1] + (spec.width,))
    hidden = {}
    if with_hidden:
        for i, spec in enumerate(net.layers):
            if spec.kind in RECURRENT_KINDS:
                hidden[i] = {"h": 0.5 * rng.normal(size=(batch, spec.hidden))}
                if spec.kind == "lstm_cell":
                    hidden[i]["c"] = 0.5 * rng.normal(size=(batch, spec.hidden))
    y, cache = net.forward(params, x, aux, hidden)
    w = rng.normal(size=y.shape)

    def objective():
        out, _ = net.forward(params, x, aux, hidden)
        return float(np.sum(w * out))

    dx, grads, daux = net.backward(cache, w)

    def err(a, target):
        return relative_error(a, numeric_grad(objective, target, h), abs_floor)

    errors = {}
    for name in sorted(params):
        errors[name] = err(grads.get(name, np.zeros_like(params[name])), params[name])
    errors["input"] = err(dx, x)
    for name, value in aux.items():
        errors[f"aux:{name}"] = err(daux.get(name, np.zeros_like(value)), value)
    for i, state in hidden.items():
        for key, value in state.items():
            errors[f"hidden{i}.{key}"] = err(daux["hidden"][i][key], value)
    return GradCheckReport(errors=errors, tol=tol)


def loss_grad_check(loss_fn: Callable, pred: np.ndarray, truth: np.ndarray, h: float = 1e-5,
                    abs_floor: float = 1e-6, **kw) -> float:
    """Max relative error of a loss function's analytic gradient."""
    pred = np.array(pred, dtype=float)
    _, g = loss_fn(pred, truth, **kw)
    num = numeric_grad(lambda: loss_fn(pred, truth, **kw)[0], pred, h)
    return relative_error(g, num, abs_floor)


def random_chain(kind: str, rng: np.random.Generator):
    """A small network exercising ``kind``; shapes drawn from ``rng``."""
    S = LayerSpec
    B = int(rng.integers(1, 4))
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        H, W = int(rng.integers(k, k + 5)), int(rng.integers(k, k + 5))
        layer = S("conv2d", filters=int(rng.integers(1, 4)), kernel=k, stride=int(rng.integers(1, 3)),
                  padding=int(rng.integers(0, 2)))
        return Network([layer], (H, W, int(rng.integers(1, 4)))), B
    if kind == "flatten":
        return Network([S("flatten"), S("dense", units=3)], tuple(int(v) for v in rng.integers(1, 4, 3))), B
    if kind == "concat":
        w = int(rng.integers(1, 5))
        return Network([S("concat", source="aux", width=w), S("dense", units=3)],
                          (int(rng.integers(1, 6)),)), B
    if kind in RECURRENT_KINDS:
        return Network([S(kind, hidden=int(rng.integers(1, 5)))],
                          (int(rng.integers(1, 4)), int(rng.integers(1, 5)))), B
    if kind == "dense":
        return Network([S("dense", units=int(rng.integers(1, 6)))], (int(rng.integers(1, 6)),)), B
    return Network([S("dense", units=4), S(kind)], (int(rng.integers(1, 6)),)), B


def check_layer_kinds(kinds=LAYER_KINDS, trials: int = 20, seed: int = 0, tol: float = 1e-4,
                      abs_floor: float = 1e-6) -> dict:
    """Worst relative error per layer kind over ``trials`` random shapes each, plus both losses."""
    out = {}
    for kind in kinds:
        if kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {kind!r}", field="kinds", rule="enum")
        worst, name = 0.0, ""
        for i in range(trials):
            rng = np.random.default_rng([seed, LAYER_KINDS.index(kind), i])
            net, B = random_chain(kind, rng)
            rep = grad_check(net, seed=int(rng.integers(2 ** 31)), batch=B, tol=tol, abs_floor=abs_floor)
            n, e = rep.worst
            if e >= worst:
                worst, name = e, n
        out[kind] = {"max_rel_error": worst, "worst_param": name, "passed": worst < tol}
    for loss in ("pose_loss", "mae_loss"):
        worst = 0.0
        for i in range(trials):
            rng = np.random.default_rng([seed, 100 + len(loss), i])
            n = int(rng.integers(1, 5))
            truth = np.concatenate([_unit(rng, n), rng.normal(size=(n, 3))], axis=1)
            pred = truth + rng.normal(scale=0.3, size=truth.shape)
            if loss == "pose_loss":
                e = loss_grad_check(pose_loss, pred, truth, abs_floor=abs_floor, w_pos=float(rng.uniform(0.5, 2)),
                                    w_ori=float(rng.uniform(0.5, 2)))
            else:
                e = loss_grad_check(mae_loss, pred, truth, abs_floor=abs_floor)
            worst = max(worst, e)
        out[loss] = {"max_rel_error": worst, "worst_param": "pred", "passed": worst < tol}
    return out


def _unit(rng, n):
    q = rng.normal(size=(n, 4))
    q *= np.sign(q[:, :1])
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Tensor container
# --------------------------------------------------------------------------

MAGIC = b"DRLFDTSR"
FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def params_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def dump_tensors(tensors: dict, meta: dict) -> bytes:
    """Serialize named float64 tensors plus a JSON ``meta`` block.

    Layout: magic, u32 version, u64 header length, JSON header (tensor names,
    shapes, byte offsets, meta), little-endian f8 payload, u32 CRC32 trailer.
    """
    entries = []
    payload = io.BytesIO()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": payload.tell(), "count": int(arr.size)})
        payload.write(arr.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + payload.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_tensors(blob: bytes) -> tuple[dict, dict]:
    head = len(MAGIC) + 12
    if len(blob) < head + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a tensor container (bad magic or too short)")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checksum mismatch: file is truncated or corrupted")
    try:
        header = json.loads(blob[head:head + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    data = blob[head + hlen:-4]
    tensors = {}
    for e in header["tensors"]:
        start, count = e["offset"], e["count"]
        if start + 8 * count > len(data):
            raise CheckpointError(f"tensor {e['name']} extends past end of payload")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return tensors, header["meta"]
