"""Dense, conv2d, ReLU and max-pool layers.

Every layer has three passes over batched arrays:

* ``forward``/``backward``: ordinary evaluation and exact reverse-mode
  gradients.
* ``interval_forward``: sound elementwise bounds for a box of inputs.
* ``interval_forward_cached``/``interval_backward``: the same bounds with
  a cache so a loss on the bounds can be differentiated w.r.t. parameters.

Conv and pool layers take ``(N, C, H, W)`` or an unbatched ``(C, H, W)``;
dense layers take ``(..., in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import IntervalTensor, ShapeError, as_tensor


class StaleCacheError(RuntimeError):
    """A cache was used with a different layer, shape or parameter version."""


class NonAffineLayerError(TypeError):
    pass


@dataclass
class LayerCache:
    layer_id: int
    version: int
    out_shape: tuple[int, ...]
    squeeze: bool = False
    data: dict[str, Any] = field(default_factory=dict)


class Layer:
    kind = "layer"
    affine = False

    def __init__(self):
        self.name = self.kind
        self.version = 0

    def params(self) -> list[tuple[str, np.ndarray]]:
        return []

    def bump(self) -> None:
        """Mark parameters as changed; invalidates outstanding caches."""
        self.version += 1

    def _cache(self, out: np.ndarray, squeeze: bool = False, **data) -> LayerCache:
        return LayerCache(id(self), self.version, out.shape, squeeze, data)

    def _check_cache(self, cache: LayerCache, grad: np.ndarray) -> None:
        if cache.layer_id != id(self) or cache.version != self.version:
            raise StaleCacheError(f"{self.name}: cache does not belong to this layer state")
        if grad.shape != cache.out_shape:
            raise ShapeError(
                f"{self.name}: gradient shape {grad.shape} != forward output {cache.out_shape}"
            )

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out, cache):
        raise NotImplementedError

    def interval_forward_cached(self, lower, upper):
        raise NotImplementedError

    def interval_backward(self, grad_lower, grad_upper, cache):
        raise NotImplementedError

    def interval_forward(self, iv: IntervalTensor) -> IntervalTensor:
        lo, up, _ = self.interval_forward_cached(iv.lower, iv.upper)
        return IntervalTensor(lo, up)

    # Joint passes carry the clean batch, the lower bounds and the upper
    # bounds stacked along axis 0 as one (3N, ...) array.

    def joint_forward(self, s):
        n = s.shape[0] // 3
        y, c1 = self.forward(s[:n])
        lo, up, c2 = self.interval_forward_cached(s[n : 2 * n], s[2 * n :])
        return np.concatenate([y, lo, up]), (n, c1, c2)

    def joint_backward(self, gs, cache, need_input=True):
        n, c1, c2 = cache
        gx, p1 = self.backward(gs[:n], c1)
        g_lo, g_up, p2 = self.interval_backward(gs[n : 2 * n], gs[2 * n :], c2)
        return np.concatenate([gx, g_lo, g_up]), [a + b for a, b in zip(p1, p2)]


def _batched4(layer: Layer, x) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"{layer.name}: expected (N,C,H,W) or (C,H,W), got {x.shape}")
    return x, False


# -- dense --------------------------------------------------------------------


class Dense(Layer):
    kind = "dense"
    affine = True

    def __init__(self, W, b=None):
        super().__init__()
        self.W = as_tensor(W)
        if self.W.ndim != 2:
            raise ShapeError(f"dense weight must be rank 2, got {self.W.shape}")
        self.b = np.zeros(self.W.shape[0]) if b is None else as_tensor(b)
        if self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense bias {self.b.shape} does not match {self.W.shape[0]} rows")

    def params(self):
        return [("weight", self.W), ("bias", self.b)]

    @property
    def weight_rows(self) -> np.ndarray:
        return self.W

    def output_shape(self, in_shape):
        self._check(in_shape)
        return tuple(in_shape[:-1]) + (self.W.shape[0],)

    def _check(self, shape):
        if not shape or shape[-1] != self.W.shape[1]:
            raise ShapeError(f"{self.name}: expected last dim {self.W.shape[1]}, got shape {tuple(shape)}")

    def forward(self, x):
        x = as_tensor(x)
        self._check(x.shape)
        y = x @ self.W.T + self.b
        return y, self._cache(y, x=x)

    def backward(self, grad_out, cache, need_input=True):
        g = as_tensor(grad_out)
        self._check_cache(cache, g)
        x = cache.data["x"]
        g2 = g.reshape(-1, self.W.shape[0])
        x2 = x.reshape(-1, self.W.shape[1])
        return g @ self.W, [g2.T @ x2, g2.sum(axis=0)]

    def abs_response(self, in_shape) -> np.ndarray:
        return np.abs(self.W).sum(axis=1)

    def abs_response_grad(self, g, in_shape) -> np.ndarray:
        """d<g, abs_response>/dW for ``g`` shaped like ``abs_response``."""
        return np.sign(self.W) * g[:, None]

    def interval_forward_cached(self, lower, upper):
        lower, upper = as_tensor(lower), as_tensor(upper)
        self._check(lower.shape)
        c, r = (lower + upper) / 2.0, (upper - lower) / 2.0
        c_out = c @ self.W.T + self.b
        r_out = r @ np.abs(self.W).T
        lo, up = c_out - r_out, c_out + r_out
        return lo, up, self._cache(lo, c=c, r=r)

    def interval_backward(self, grad_lower, grad_upper, cache):
        self._check_cache(cache, grad_lower)
        gc = grad_lower + grad_upper
        gr = grad_upper - grad_lower
        c, r = cache.data["c"], cache.data["r"]
        out_dim, in_dim = self.W.shape
        gc2, gr2 = gc.reshape(-1, out_dim), gr.reshape(-1, out_dim)
        gW = gc2.T @ c.reshape(-1, in_dim) + np.sign(self.W) * (gr2.T @ r.reshape(-1, in_dim))
        gb = gc2.sum(axis=0)
        g_c_in = gc @ self.W
        g_r_in = gr @ np.abs(self.W)
        return (g_c_in - g_r_in) / 2.0, (g_c_in + g_r_in) / 2.0, [gW, gb]


# -- conv2d -------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


class Conv2d(Layer):
    """Cross-correlation (no kernel flip) with zero padding.

    Patch matrices are laid out ``(C*kh*kw, N*Ho*Wo)`` so each kernel
    offset is one contiguous block copy.
    """

    kind = "conv2d"
    affine = True

    def __init__(self, kernel, bias=None, stride=1, padding=0):
        super().__init__()
        self.kernel = as_tensor(kernel)
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got {self.kernel.shape}")
        out_ch = self.kernel.shape[0]
        self.bias = np.zeros(out_ch) if bias is None else as_tensor(bias)
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"conv bias {self.bias.shape} does not match {out_ch} output channels")
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("stride must be positive and padding non-negative")

    def params(self):
        return [("weight", self.kernel), ("bias", self.bias)]

    @property
    def weight_rows(self) -> np.ndarray:
        return self.kernel.reshape(self.kernel.shape[0], -1)

    def output_shape(self, in_shape):
        c, h, w = in_shape[-3:]
        out_ch, in_ch, kh, kw = self.kernel.shape
        if c != in_ch:
            raise ShapeError(f"{self.name}: expected {in_ch} input channels, got {c}")
        (sh, sw), (ph, pw) = self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: {kh}x{kw} kernel does not fit a {h}x{w} input")
        return tuple(in_shape[:-3]) + (out_ch, ho, wo)

    @staticmethod
    def _patches(x, kh, kw, stride, pad):
        (sh, sw), (ph, pw) = stride, pad
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        n, c, ho, wo = win.shape[:4]
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo), ho, wo

    def _cols(self, x):
        _, _, kh, kw = self.kernel.shape
        return self._patches(x, kh, kw, self.stride, self.padding)

    @staticmethod
    def _apply(cols, n, ho, wo, kmat, bias=None):
        y = kmat @ cols
        if bias is not None:
            y += bias[:, None]
        return y.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3)

    @staticmethod
    def _rows(g):
        """(N, out, Ho, Wo) -> (out, N*Ho*Wo)"""
        return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)

    def _col2im(self, dcols, in_shape, ho, wo):
        n, c, h, w = in_shape
        _, _, kh, kw = self.kernel.shape
        (sh, sw), (ph, pw) = self.stride, self.padding
        dcols = dcols.reshape(c, kh, kw, n, ho, wo)
        gx = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += (
                    dcols[:, i, j].transpose(1, 0, 2, 3)
                )
        return gx[:, :, ph : ph + h, pw : pw + w]

    def _grad_input(self, g, kmat, in_shape):
        """Input gradient for output gradient ``g`` (N, out, Ho, Wo) under ``kmat``."""
        out_ch, in_ch, kh, kw = self.kernel.shape
        (sh, sw), (ph, pw) = self.stride, self.padding
        if (sh, sw) != (1, 1) or ph > kh - 1 or pw > kw - 1:
            return self._col2im(kmat.T @ self._rows(g), in_shape, g.shape[2], g.shape[3])
        # stride 1: correlate the re-padded gradient with the flipped, transposed kernel
        cols, h, w = self._patches(g, kh, kw, (1, 1), (kh - 1 - ph, kw - 1 - pw))
        flipped = kmat.reshape(out_ch, in_ch, kh, kw)[:, :, ::-1, ::-1]
        kt = flipped.transpose(1, 0, 2, 3).reshape(in_ch, -1)
        return self._apply(cols, g.shape[0], h, w, kt)

    def forward(self, x):
        x, squeeze = _batched4(self, x)
        self.output_shape(x.shape)
        cols, ho, wo = self._cols(x)
        y = self._apply(cols, x.shape[0], ho, wo, self.weight_rows, self.bias)
        cache = self._cache(y, cols=cols, in_shape=x.shape)
        return (y[0] if squeeze else y), cache

    def backward(self, grad_out, cache, need_input=True):
        g = as_tensor(grad_out)
        squeeze = g.ndim == 3
        if squeeze:
            g = g[None]
        self._check_cache(cache, g)
        g2 = self._rows(g)
        gk = (g2 @ cache.data["cols"].T).reshape(self.kernel.shape)
        gb = g2.sum(axis=1)
        if not need_input:
            return None, [gk, gb]
        gx = self._grad_input(g, self.weight_rows, cache.data["in_shape"])
        return (gx[0] if squeeze else gx), [gk, gb]

    def interval_forward_cached(self, lower, upper):
        lower, sq = _batched4(self, lower)
        upper, _ = _batched4(self, upper)
        self.output_shape(lower.shape)
        n = lower.shape[0]
        both = np.concatenate([(lower + upper) / 2.0, (upper - lower) / 2.0])
        cols, ho, wo = self._cols(both)
        half = cols.shape[1] // 2
        c_cols, r_cols = cols[:, :half], cols[:, half:]
        c_out = self._apply(c_cols, n, ho, wo, self.weight_rows, self.bias)
        r_out = self._apply(r_cols, n, ho, wo, np.abs(self.weight_rows))
        lo, up = c_out - r_out, c_out + r_out
        cache = self._cache(lo, c_cols=c_cols, r_cols=r_cols, in_shape=lower.shape)
        if sq:
            return lo[0], up[0], cache
        return lo, up, cache

    def interval_backward(self, grad_lower, grad_upper, cache):
        gl, gu = as_tensor(grad_lower), as_tensor(grad_upper)
        squeeze = gl.ndim == 3
        if squeeze:
            gl, gu = gl[None], gu[None]
        self._check_cache(cache, gl)
        gc, gr = gl + gu, gu - gl
        gc2, gr2 = self._rows(gc), self._rows(gr)
        kmat = self.weight_rows
        gk = gc2 @ cache.data["c_cols"].T + np.sign(kmat) * (gr2 @ cache.data["r_cols"].T)
        gb = gc2.sum(axis=1)
        in_shape = cache.data["in_shape"]
        g_c = self._grad_input(gc, kmat, in_shape)
        g_r = self._grad_input(gr, np.abs(kmat), in_shape)
        g_lo, g_up = (g_c - g_r) / 2.0, (g_c + g_r) / 2.0
        if squeeze:
            g_lo, g_up = g_lo[0], g_up[0]
        return g_lo, g_up, [gk.reshape(self.kernel.shape), gb]

    def joint_forward(self, s):
        self.output_shape(s.shape)
        n = s.shape[0] // 3
        x, lo, up = s[:n], s[n : 2 * n], s[2 * n :]
        cols, ho, wo = self._cols(np.concatenate([x, (lo + up) / 2.0, (up - lo) / 2.0]))
        m = cols.shape[1] // 3
        xc = self._apply(cols[:, : 2 * m], 2 * n, ho, wo, self.weight_rows, self.bias)
        r_out = self._apply(cols[:, 2 * m :], n, ho, wo, np.abs(self.weight_rows))
        out = np.empty((3 * n,) + xc.shape[1:])
        out[:n] = xc[:n]
        np.subtract(xc[n:], r_out, out=out[n : 2 * n])
        np.add(xc[n:], r_out, out=out[2 * n :])
        return out, self._cache(out, cols=cols, in_shape=s.shape)

    def joint_backward(self, gs, cache, need_input=True):
        self._check_cache(cache, gs)
        n = gs.shape[0] // 3
        gy, gl, gu = gs[:n], gs[n : 2 * n], gs[2 * n :]
        g_xcr = np.concatenate([gy, gl + gu, gu - gl])
        g2 = self._rows(g_xcr)
        cols = cache.data["cols"]
        m = cols.shape[1] // 3
        kmat = self.weight_rows
        gk = g2[:, : 2 * m] @ cols[:, : 2 * m].T + np.sign(kmat) * (g2[:, 2 * m :] @ cols[:, 2 * m :].T)
        pgrads = [gk.reshape(self.kernel.shape), g2[:, : 2 * m].sum(axis=1)]
        if not need_input:
            return None, pgrads
        in_shape = cache.data["in_shape"]
        both = self._grad_input(g_xcr[: 2 * n], kmat, (2 * n,) + tuple(in_shape[1:]))
        g_r = self._grad_input(g_xcr[2 * n :], np.abs(kmat), (n,) + tuple(in_shape[1:]))
        g_c = both[n:]
        gin = np.empty(in_shape)
        gin[:n] = both[:n]
        np.subtract(g_c, g_r, out=gin[n : 2 * n])
        np.add(g_c, g_r, out=gin[2 * n :])
        gin[n:] *= 0.5
        return gin, pgrads

    def abs_response(self, in_shape) -> np.ndarray:
        """``|K|`` correlated with an all-ones input (zero padded): (out, Ho, Wo)."""
        ones = np.ones((1,) + tuple(in_shape[-3:]))
        cols, ho, wo = self._cols(ones)
        return self._apply(cols, 1, ho, wo, np.abs(self.weight_rows))[0]

    def abs_response_grad(self, g, in_shape) -> np.ndarray:
        """d<g, abs_response>/dK for ``g`` shaped (out, Ho, Wo)."""
        ones = np.ones((1,) + tuple(in_shape[-3:]))
        cols, _, _ = self._cols(ones)
        g2 = g.reshape(g.shape[0], -1)
        return (np.sign(self.weight_rows) * (g2 @ cols.T)).reshape(self.kernel.shape)


# -- relu ---------------------------------------------------------------------


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        x = as_tensor(x)
        mask = x > 0
        y = np.maximum(x, 0.0)
        return y, self._cache(y, mask=mask)

    def backward(self, grad_out, cache):
        g = as_tensor(grad_out)
        self._check_cache(cache, g)
        # subgradient at exactly 0 is 0
        return g * cache.data["mask"], []

    def interval_forward_cached(self, lower, upper):
        ml, mu = lower > 0, upper > 0
        lo = np.maximum(lower, 0.0)
        return lo, np.maximum(upper, 0.0), self._cache(lo, ml=ml, mu=mu)

    def interval_backward(self, grad_lower, grad_upper, cache):
        self._check_cache(cache, grad_lower)
        return (
            grad_lower * cache.data["ml"],
            grad_upper * cache.data["mu"],
            [],
        )

    def joint_forward(self, s):
        # monotone and elementwise: the stacked rows go through unchanged
        return self.forward(s)

    def joint_backward(self, gs, cache, need_input=True):
        return self.backward(gs, cache)


# -- maxpool ------------------------------------------------------------------


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = _pair(window)
        self.stride = _pair(stride if stride is not None else window)
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ValueError("window and stride must be positive")

    def output_shape(self, in_shape):
        c, h, w = in_shape[-3:]
        (wh, ww), (sh, sw) = self.window, self.stride
        if h < wh or w < ww or (h - wh) % sh or (w - ww) % sw:
            raise ShapeError(
                f"{self.name}: {wh}x{ww}/{sh}x{sw} pooling leaves partial windows on a {h}x{w} input"
            )
        return tuple(in_shape[:-3]) + (c, (h - wh) // sh + 1, (w - ww) // sw + 1)

    def _pool(self, x):
        (wh, ww), (sh, sw) = self.window, self.stride
        ho = (x.shape[2] - wh) // sh + 1
        wo = (x.shape[3] - ww) // sw + 1
        best = x[:, :, 0 : sh * (ho - 1) + 1 : sh, 0 : sw * (wo - 1) + 1 : sw].copy()
        arg = np.zeros(best.shape, dtype=np.intp)
        for k in range(1, wh * ww):
            i, j = divmod(k, ww)
            v = x[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
            # strict comparison keeps the first row-major maximum on ties
            upd = v > best
            np.maximum(best, v, out=best)
            np.copyto(arg, k, where=upd)
        return best, arg

    def _unpool(self, g, arg, in_shape):
        (wh, ww), (sh, sw) = self.window, self.stride
        ho, wo = g.shape[2], g.shape[3]
        gx = np.zeros(in_shape)
        for k in range(wh * ww):
            i, j = divmod(k, ww)
            gx[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * (arg == k)
        return gx

    def forward(self, x):
        x, squeeze = _batched4(self, x)
        self.output_shape(x.shape)
        y, arg = self._pool(x)
        cache = self._cache(y, arg=arg, in_shape=x.shape)
        return (y[0] if squeeze else y), cache

    def backward(self, grad_out, cache):
        g = as_tensor(grad_out)
        squeeze = g.ndim == 3
        if squeeze:
            g = g[None]
        self._check_cache(cache, g)
        gx = self._unpool(g, cache.data["arg"], cache.data["in_shape"])
        return (gx[0] if squeeze else gx), []

    def interval_forward_cached(self, lower, upper):
        lower, sq = _batched4(self, lower)
        upper, _ = _batched4(self, upper)
        self.output_shape(lower.shape)
        lo, arg_l = self._pool(lower)
        up, arg_u = self._pool(upper)
        cache = self._cache(lo, arg_l=arg_l, arg_u=arg_u, in_shape=lower.shape)
        if sq:
            return lo[0], up[0], cache
        return lo, up, cache

    def interval_backward(self, grad_lower, grad_upper, cache):
        gl, gu = as_tensor(grad_lower), as_tensor(grad_upper)
        squeeze = gl.ndim == 3
        if squeeze:
            gl, gu = gl[None], gu[None]
        self._check_cache(cache, gl)
        shape = cache.data["in_shape"]
        g_lo = self._unpool(gl, cache.data["arg_l"], shape)
        g_up = self._unpool(gu, cache.data["arg_u"], shape)
        if squeeze:
            g_lo, g_up = g_lo[0], g_up[0]
        return g_lo, g_up, []

    def joint_forward(self, s):
        # monotone and elementwise: the stacked rows go through unchanged
        return self.forward(s)

    def joint_backward(self, gs, cache, need_input=True):
        return self.backward(gs, cache)


def weight_norms(layer: Layer) -> tuple[float, float, np.ndarray]:
    """(sum |W|, max row L1, per-row L2) for an affine layer; bias excluded.

    A conv row is one output channel's flattened kernel.
    """
    if not layer.affine:
        raise NonAffineLayerError(f"non-affine layer: {layer.kind}")
    rows = np.abs(layer.weight_rows)
    row_l1 = rows.sum(axis=1)
    return float(rows.sum()), float(row_l1.max()), np.sqrt((layer.weight_rows**2).sum(axis=1))


__all__ = [
    "Conv2d",
    "Dense",
    "Layer",
    "LayerCache",
    "MaxPool2d",
    "NonAffineLayerError",
    "ReLU",
    "StaleCacheError",
    "weight_norms",
]
