"""Neural-network layers on top of the autodiff tensor core.

Layers own their parameters (uniform +-sqrt(1/fan_in) init, zero biases)
and register them under dotted paths for checkpointing. Convolution, batch
norm, pooling and the bidirectional GRU implement fused backward passes
rather than composing primitives, since they dominate runtime.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .tensor import Tensor, _make, _needs_graph, _sigmoid, dropout, ensure_tensor

_EINSUM_KW = {"optimize": True}


class Module:
    """Minimal container tracking parameters, buffers and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self._set_training(True)
        return self

    def eval(self):
        self._set_training(False)
        return self

    def _set_training(self, flag: bool):
        object.__setattr__(self, "training", flag)
        for mod in self._modules.values():
            mod._set_training(flag)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = (set(own_params) | set(own_buffers)) - set(state)
        if strict and missing:
            raise ConfigError(f"state dict missing entries: {sorted(missing)}")
        for name, value in state.items():
            if name in own_params:
                target = own_params[name].data
            elif name in own_buffers:
                target = own_buffers[name]
            elif strict:
                raise ConfigError(f"unexpected state entry: {name}")
            else:
                continue
            if target.shape != value.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {target.shape} vs {value.shape}"
                )
            target[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for mod in modules:
            self.append(mod)

    def append(self, mod: Module):
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, weight, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; preserves HxW."""
    x, weight, bias = ensure_tensor(x), ensure_tensor(weight), ensure_tensor(bias)
    if x.data.ndim != 4:
        raise ConfigError(f"conv2d expects (B, C, H, W), got {x.data.shape}")
    c_out, c_in, kh, kw = weight.data.shape
    if (kh, kw) != (3, 3):
        raise ConfigError(f"only 3x3 kernels supported, got {(kh, kw)}")
    if x.data.shape[1] != c_in:
        raise ConfigError(
            f"input has {x.data.shape[1]} channels, kernel expects {c_in}"
        )
    batch, _, height, width = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    use_im2col = c_in * c_out <= 32

    if use_im2col:
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))       # B,C,H,W,3,3
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch, height * width, c_in * 9)
        out = cols @ weight.data.reshape(c_out, -1).T
        out_data = out.transpose(0, 2, 1).reshape(batch, c_out, height, width)
    else:
        out_data = np.zeros((batch, c_out, height, width), x.data.dtype)
        for i in range(3):
            for j in range(3):
                out_data += np.einsum(
                    "bchw,oc->bohw",
                    xp[:, :, i:i + height, j:j + width],
                    weight.data[:, :, i, j], **_EINSUM_KW,
                )
    out_data += bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        if _needs_graph(bias):
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if _needs_graph(weight):
            gw = np.zeros_like(weight.data)
            for i in range(3):
                for j in range(3):
                    gw[:, :, i, j] = np.einsum(
                        "bohw,bchw->oc", g,
                        xp[:, :, i:i + height, j:j + width], **_EINSUM_KW,
                    )
            weight.accumulate_grad(gw)
        if _needs_graph(x):
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + height, j:j + width] += np.einsum(
                        "bohw,oc->bchw", g, weight.data[:, :, i, j], **_EINSUM_KW,
                    )
            x.accumulate_grad(gxp[:, :, 1:height + 1, 1:width + 1])

    return _make(out_data, (x, weight, bias), backward)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.weight = _param(_uniform_init(rng, (c_out, c_in, 3, 3), c_in * 9, dtype))
        self.bias = _param(np.zeros(c_out, dtype))

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = _param(np.ones(channels, dtype))
        self.shift = _param(np.zeros(channels, dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x):
        x = ensure_tensor(x)
        if x.data.ndim != 4:
            raise ConfigError(f"batchnorm expects (B, C, H, W), got {x.data.shape}")
        b, c, h, w = x.data.shape
        scale, shift = self.scale, self.shift
        if self.training:
            n = b * h * w
            if n <= 1:
                raise DataError("batch statistics need more than one value per channel")
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * (var * n / max(n - 1, 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out_data = xhat * scale.data.reshape(1, c, 1, 1) + shift.data.reshape(1, c, 1, 1)
        training = self.training

        def backward(g):
            if _needs_graph(shift):
                shift.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if _needs_graph(scale):
                scale.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if _needs_graph(x):
                gxhat = g * scale.data.reshape(1, c, 1, 1)
                if training:
                    m1 = gxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    m2 = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gx = (gxhat - m1 - xhat * m2) * inv_std.reshape(1, c, 1, 1)
                else:
                    gx = gxhat * inv_std.reshape(1, c, 1, 1)
                x.accumulate_grad(gx)

        return _make(out_data, (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# pooling and interpolation

def avg_pool2d(x, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling with floor semantics (partial windows dropped)."""
    x = ensure_tensor(x)
    kt, kf = kernel
    if x.data.ndim != 4:
        raise ConfigError(f"avg_pool2d expects (B, C, H, W), got {x.data.shape}")
    b, c, h, w = x.data.shape
    if kt > h or kf > w:
        raise ConfigError(f"pool kernel {kernel} larger than input {(h, w)}")
    ho, wo = h // kt, w // kf
    cropped = x.data[:, :, :ho * kt, :wo * kf]
    out_data = cropped.reshape(b, c, ho, kt, wo, kf).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        expanded = np.broadcast_to(
            g[:, :, :, None, :, None] / (kt * kf), (b, c, ho, kt, wo, kf)
        )
        gx[:, :, :ho * kt, :wo * kf] = expanded.reshape(b, c, ho * kt, wo * kf)
        x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


class AvgPool2d(Module):
    def __init__(self, kernel: tuple[int, int]):
        super().__init__()
        self.kernel = tuple(kernel)

    def forward(self, x):
        return avg_pool2d(x, self.kernel)


def nearest_indices(t_src: int, t_dst: int) -> np.ndarray:
    """Source index for each target step: floor((i + 0.5) * T_src / T_dst)."""
    if t_dst < 1:
        raise ConfigError(f"target step count must be >= 1, got {t_dst}")
    if t_src < 1:
        raise ConfigError(f"source step count must be >= 1, got {t_src}")
    idx = np.floor((np.arange(t_dst) + 0.5) * t_src / t_dst).astype(np.int64)
    return np.clip(idx, 0, t_src - 1)


def interp_nearest_time(x, t_dst: int) -> Tensor:
    """Nearest-neighbor resampling along the time axis of (B, T, D)."""
    x = ensure_tensor(x)
    if x.data.ndim != 3:
        raise ConfigError(f"interp expects (B, T, D), got {x.data.shape}")
    t_src = x.data.shape[1]
    idx = nearest_indices(t_src, t_dst)
    if t_src == t_dst and np.array_equal(idx, np.arange(t_src)):
        return x
    gather = np.zeros((t_dst, t_src), x.data.dtype)
    gather[np.arange(t_dst), idx] = 1.0
    out_data = np.matmul(gather, x.data)

    def backward(g):
        x.accumulate_grad(np.matmul(gather.T, g))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# linear

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.weight = _param(_uniform_init(rng, (d_out, d_in), d_in, dtype))
        self.bias = _param(np.zeros(d_out, dtype))

    def forward(self, x):
        x = ensure_tensor(x)
        weight, bias = self.weight, self.bias
        out_data = x.data @ weight.data.T + bias.data

        def backward(g):
            if _needs_graph(bias):
                bias.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))
            if _needs_graph(weight):
                g2 = g.reshape(-1, g.shape[-1])
                x2 = x.data.reshape(-1, x.data.shape[-1])
                weight.accumulate_grad(g2.T @ x2)
            if _needs_graph(x):
                x.accumulate_grad(g @ weight.data)

        return _make(out_data, (x, weight, bias), backward)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x):
        return dropout(x, self.p, self.rng, self.training)


# ---------------------------------------------------------------------------
# bidirectional GRU

def _gru_direction_forward(x: np.ndarray, w_ih, w_hh, b_ih, b_hh):
    """Returns (outputs (B,T,H), cache). Gate order: reset, update, candidate."""
    batch, steps, _ = x.shape
    hid = w_hh.shape[1]
    xp = x.reshape(-1, x.shape[-1]) @ w_ih.T + b_ih
    xp = xp.reshape(batch, steps, 3 * hid)
    outs = np.empty((batch, steps, hid), x.dtype)
    cache_r = np.empty((steps, batch, hid), x.dtype)
    cache_z = np.empty_like(cache_r)
    cache_n = np.empty_like(cache_r)
    cache_hn = np.empty_like(cache_r)
    cache_hprev = np.empty_like(cache_r)
    h = np.zeros((batch, hid), x.dtype)
    for t in range(steps):
        gh = h @ w_hh.T + b_hh
        r = _sigmoid(xp[:, t, :hid] + gh[:, :hid])
        z = _sigmoid(xp[:, t, hid:2 * hid] + gh[:, hid:2 * hid])
        hn = gh[:, 2 * hid:]
        n = np.tanh(xp[:, t, 2 * hid:] + r * hn)
        cache_r[t], cache_z[t], cache_n[t] = r, z, n
        cache_hn[t], cache_hprev[t] = hn, h
        h = (1.0 - z) * n + z * h
        outs[:, t] = h
    return outs, (xp.shape, cache_r, cache_z, cache_n, cache_hn, cache_hprev)


def _gru_direction_backward(g_out: np.ndarray, x: np.ndarray, w_ih, w_hh, cache):
    """BPTT for one direction; returns grads for (x, w_ih, w_hh, b_ih, b_hh)."""
    xp_shape, cache_r, cache_z, cache_n, cache_hn, cache_hprev = cache
    batch, steps, hid = g_out.shape
    d_xp = np.empty(xp_shape, g_out.dtype)
    d_w_hh = np.zeros_like(w_hh)
    d_b_hh = np.zeros(3 * hid, g_out.dtype)
    dh = np.zeros((batch, hid), g_out.dtype)
    dgh = np.empty((batch, 3 * hid), g_out.dtype)
    for t in range(steps - 1, -1, -1):
        dh = dh + g_out[:, t]
        r, z, n = cache_r[t], cache_z[t], cache_n[t]
        hn, hprev = cache_hn[t], cache_hprev[t]
        dz = dh * (hprev - n)
        dn = dh * (1.0 - z)
        dhprev = dh * z
        dan = dn * (1.0 - n * n)
        dar = (dan * hn) * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgh[:, :hid] = dar
        dgh[:, hid:2 * hid] = daz
        dgh[:, 2 * hid:] = dan * r
        d_xp[:, t, :hid] = dar
        d_xp[:, t, hid:2 * hid] = daz
        d_xp[:, t, 2 * hid:] = dan
        d_w_hh += dgh.T @ hprev
        d_b_hh += dgh.sum(axis=0)
        dh = dhprev + dgh @ w_hh
    d_xp2 = d_xp.reshape(-1, 3 * hid)
    x2 = x.reshape(-1, x.shape[-1])
    d_w_ih = d_xp2.T @ x2
    d_b_ih = d_xp2.sum(axis=0)
    d_x = (d_xp2 @ w_ih).reshape(x.shape)
    return d_x, d_w_ih, d_w_hh, d_b_ih, d_b_hh


class BiGRU(Module):
    """Bidirectional GRU; outputs per-step [forward, backward] concatenation."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        self.fw_w_ih = _param(_uniform_init(rng, (3 * hidden, d_in), d_in, dtype))
        self.fw_w_hh = _param(_uniform_init(rng, (3 * hidden, hidden), hidden, dtype))
        self.fw_b_ih = _param(np.zeros(3 * hidden, dtype))
        self.fw_b_hh = _param(np.zeros(3 * hidden, dtype))
        self.bw_w_ih = _param(_uniform_init(rng, (3 * hidden, d_in), d_in, dtype))
        self.bw_w_hh = _param(_uniform_init(rng, (3 * hidden, hidden), hidden, dtype))
        self.bw_b_ih = _param(np.zeros(3 * hidden, dtype))
        self.bw_b_hh = _param(np.zeros(3 * hidden, dtype))

    def forward(self, x):
        x = ensure_tensor(x)
        if x.data.ndim != 3:
            raise ConfigError(f"gru expects (B, T, D), got {x.data.shape}")
        if x.data.shape[1] < 1:
            raise ConfigError("gru needs at least one time step")
        hid = self.hidden
        fw = (self.fw_w_ih, self.fw_w_hh, self.fw_b_ih, self.fw_b_hh)
        bw = (self.bw_w_ih, self.bw_w_hh, self.bw_b_ih, self.bw_b_hh)
        x_rev = x.data[:, ::-1]
        out_f, cache_f = _gru_direction_forward(x.data, *(p.data for p in fw))
        out_b_rev, cache_b = _gru_direction_forward(x_rev, *(p.data for p in bw))
        out_data = np.concatenate([out_f, out_b_rev[:, ::-1]], axis=2)

        def backward(g):
            g_f = np.ascontiguousarray(g[:, :, :hid])
            g_b = np.ascontiguousarray(g[:, ::-1, hid:])
            dx_f, dwi_f, dwh_f, dbi_f, dbh_f = _gru_direction_backward(
                g_f, x.data, fw[0].data, fw[1].data, cache_f)
            dx_b, dwi_b, dwh_b, dbi_b, dbh_b = _gru_direction_backward(
                g_b, x_rev, bw[0].data, bw[1].data, cache_b)
            for param, grad in zip(fw + bw, (dwi_f, dwh_f, dbi_f, dbh_f,
                                             dwi_b, dwh_b, dbi_b, dbh_b)):
                if _needs_graph(param):
                    param.accumulate_grad(grad)
            if _needs_graph(x):
                x.accumulate_grad(dx_f + dx_b[:, ::-1])

        return _make(out_data, (x,) + fw + bw, backward)
