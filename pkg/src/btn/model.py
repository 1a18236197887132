"""Layer chains and the micro multi-column density-map network."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .layers import Conv2d, Layer, MaxPool2d, ReLU, weight_norms
from .numerics import IntervalTensor, ShapeError, as_tensor, reduce_sum
from .rng import CounterRNG

INIT_STREAM = 1


class GeometryError(ValueError):
    """Kernel/pool geometry incompatible with the declared input shape."""


class UnsupportedArchitectureError(TypeError):
    pass


def _check_interval(lo, up, name):
    if __debug__ and np.any(lo > up):
        raise AssertionError(f"interval inverted after {name}")


class Chain:
    """An ordered list of layers with whole-chain passes.

    Gradients are accumulated into a dict keyed ``"<layer name>.<role>"``.
    """

    def __init__(self, layers: list[Layer], prefix: str = "layer"):
        self.layers = list(layers)
        self.prefix = prefix
        counts: dict[str, int] = {}
        for layer in self.layers:
            i = counts.get(layer.kind, 0)
            counts[layer.kind] = i + 1
            layer.name = f"{prefix}.{layer.kind}{i}"
        # ReLU and max-pool commute (both monotone, max of relu == relu of
        # max, same argmax), so pooling first halves the full-resolution work.
        self.plan = list(self.layers)
        for i in range(len(self.plan) - 1):
            if self.plan[i].kind == "relu" and self.plan[i + 1].kind == "maxpool2d":
                self.plan[i], self.plan[i + 1] = self.plan[i + 1], self.plan[i]

    def parameters(self) -> list[tuple[str, str, np.ndarray]]:
        return [(layer.name, role, p) for layer in self.layers for role, p in layer.params()]

    def affine_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.affine]

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def bump(self) -> None:
        for layer in self.layers:
            layer.bump()

    @staticmethod
    def _accumulate(grads, layer, pgrads):
        for (role, _), g in zip(layer.params(), pgrads):
            key = f"{layer.name}.{role}"
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    def forward(self, x):
        caches = []
        for layer in self.plan:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, grad, caches, grads, need_input=True):
        for i in range(len(self.plan) - 1, -1, -1):
            layer = self.plan[i]
            if i == 0 and layer.affine:
                grad, pgrads = layer.backward(grad, caches[i], need_input=need_input)
            else:
                grad, pgrads = layer.backward(grad, caches[i])
            self._accumulate(grads, layer, pgrads)
        return grad

    def interval_forward_cached(self, lower, upper, start: int = 0):
        caches = []
        for layer in self.plan[start:]:
            lower, upper, cache = layer.interval_forward_cached(lower, upper)
            _check_interval(lower, upper, layer.name)
            caches.append(cache)
        return lower, upper, caches

    def interval_backward(self, gl, gu, caches, grads, start: int = 0):
        for layer, cache in zip(reversed(self.plan[start:]), reversed(caches)):
            gl, gu, pgrads = layer.interval_backward(gl, gu, cache)
            self._accumulate(grads, layer, pgrads)
        return gl, gu

    # L2 ball: exact per-neuron range of the first affine layer, then boxes.

    def _first_affine(self) -> Layer:
        first = self.layers[0]
        if not first.affine:
            raise UnsupportedArchitectureError(
                f"{self.prefix}: L2 certification needs an affine first layer, got {first.kind}"
            )
        return first

    def l2_forward_cached(self, x, eps: float):
        first = self._first_affine()
        z, c0 = first.forward(x)
        rad = self._row_radius(first, z, eps)
        lo, up, rest = self.interval_forward_cached(z - rad, z + rad, start=1)
        return lo, up, (c0, z.shape, rest)

    @staticmethod
    def _row_radius(layer, z, eps):
        _, _, row_l2 = weight_norms(layer)
        if layer.kind == "dense":
            return np.broadcast_to(eps * row_l2, z.shape)
        return np.broadcast_to((eps * row_l2)[:, None, None], z.shape)

    def l2_backward(self, gl, gu, caches, grads, eps: float):
        c0, zshape, rest = caches
        first = self.layers[0]
        gl, gu = self.interval_backward(gl, gu, rest, grads, start=1)
        gz = gl + gu
        gr = gu - gl
        gx, pgrads = first.backward(gz, c0)
        pgrads[0] = pgrads[0] + self._row_radius_grad(first, gr, eps)
        self._accumulate(grads, first, pgrads)
        return gx

    # Fused clean + certified pass used by training. The input set is the
    # unclamped Linf box or the L2 ball around x; in both cases the first
    # affine layer's output interval is centred on its clean output.

    def _first_radius(self, first, x, z, eps, norm):
        if norm == "linf":
            resp = first.abs_response(x.shape)
            return np.broadcast_to(eps * resp, z.shape)
        return self._row_radius(first, z, eps)

    def joint_forward(self, x, eps: float, norm: str):
        first = self._first_affine()
        z, c0 = first.forward(x)
        rad = self._first_radius(first, x, z, eps, norm)
        s = np.concatenate([z, z - rad, z + rad])
        caches = []
        for layer in self.plan[1:]:
            s, cache = layer.joint_forward(s)
            caches.append(cache)
        n = x.shape[0]
        _check_interval(s[n : 2 * n], s[2 * n :], self.prefix)
        return s, (c0, x.shape, caches)

    def joint_backward(self, gs, caches, grads, eps: float, norm: str):
        c0, in_shape, rest = caches
        for layer, cache in zip(reversed(self.plan[1:]), reversed(rest)):
            gs, pgrads = layer.joint_backward(gs, cache)
            self._accumulate(grads, layer, pgrads)
        first = self.layers[0]
        n = in_shape[0]
        gy, gl, gu = gs[:n], gs[n : 2 * n], gs[2 * n :]
        _, pgrads = first.backward(gy + gl + gu, c0, need_input=False)
        gr = gu - gl
        if norm == "linf":
            pgrads[0] = pgrads[0] + eps * first.abs_response_grad(gr.sum(axis=0), in_shape)
        else:
            pgrads[0] = pgrads[0] + self._row_radius_grad(first, gr, eps)
        self._accumulate(grads, first, pgrads)

    @staticmethod
    def _row_radius_grad(first, gr, eps):
        rows = first.weight_rows
        if first.kind == "dense":
            g_rad = gr.reshape(-1, rows.shape[0]).sum(axis=0)
        else:
            axes = tuple(i for i in range(gr.ndim) if i != gr.ndim - 3)
            g_rad = gr.sum(axis=axes)
        norms = np.sqrt((rows**2).sum(axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        g_rows = (eps * g_rad / safe)[:, None] * rows
        return g_rows.reshape(first.params()[0][1].shape)


class Sequential:
    """A single chain used as a whole model (toy nets, dense stacks)."""

    def __init__(self, layers: list[Layer]):
        self.chain = Chain(layers)

    @property
    def layers(self) -> list[Layer]:
        return self.chain.layers

    def parameters(self):
        return self.chain.parameters()

    def affine_layers(self) -> list[Layer]:
        return self.chain.affine_layers()

    def first_affine_layers(self) -> list[Layer]:
        return [self.chain._first_affine()]

    def bump(self) -> None:
        self.chain.bump()

    def forward(self, x):
        return self.chain.forward(as_tensor(x))

    def backward(self, grad, caches, need_input=True):
        grads: dict[str, np.ndarray] = {}
        gx = self.chain.backward(grad, caches, grads, need_input)
        return gx, grads

    def interval_forward_cached(self, lower, upper):
        return self.chain.interval_forward_cached(as_tensor(lower), as_tensor(upper))

    def interval_forward(self, iv: IntervalTensor) -> IntervalTensor:
        lo, up, _ = self.interval_forward_cached(iv.lower, iv.upper)
        return IntervalTensor(lo, up)

    def interval_backward(self, gl, gu, caches):
        grads: dict[str, np.ndarray] = {}
        self.chain.interval_backward(gl, gu, caches, grads)
        return grads

    def l2_forward_cached(self, x, eps):
        return self.chain.l2_forward_cached(as_tensor(x), eps)

    def l2_backward(self, gl, gu, caches, eps):
        grads: dict[str, np.ndarray] = {}
        self.chain.l2_backward(gl, gu, caches, grads, eps)
        return grads

    def joint_forward(self, x, eps, norm):
        """Clean output and certified interval: (y, lower, upper, caches)."""
        x = as_tensor(x)
        s, caches = self.chain.joint_forward(x, eps, norm)
        n = x.shape[0]
        return s[:n], s[n : 2 * n], s[2 * n :], caches

    def joint_backward(self, gy, gl, gu, caches, eps, norm):
        grads: dict[str, np.ndarray] = {}
        self.chain.joint_backward(np.concatenate([gy, gl, gu]), caches, grads, eps, norm)
        return grads


class MultiColumnModel:
    """Parallel conv columns, channel concatenation, 1x1 fusion to one channel."""

    def __init__(self, columns: list[Chain], fusion: Conv2d, input_shape, config: ModelConfig | None = None):
        self.columns = columns
        self.fusion = fusion
        fusion.name = "fusion.conv2d0"
        self.input_shape = tuple(input_shape)
        self.config = config
        out_shapes = [col.output_shape(self.input_shape) for col in columns]
        spatial = {s[1:] for s in out_shapes}
        if len(spatial) != 1:
            raise GeometryError(f"columns disagree on output extents: {sorted(spatial)}")
        self.channel_splits = np.cumsum([s[0] for s in out_shapes])[:-1]
        if fusion.kernel.shape[1] != sum(s[0] for s in out_shapes):
            raise GeometryError("fusion input channels must equal the summed column channels")
        self.output_shape = fusion.output_shape((int(sum(s[0] for s in out_shapes)),) + spatial.pop())

    @property
    def layers(self) -> list[Layer]:
        return [layer for col in self.columns for layer in col.layers] + [self.fusion]

    def parameters(self) -> list[tuple[str, str, np.ndarray]]:
        params = [p for col in self.columns for p in col.parameters()]
        return params + [(self.fusion.name, role, p) for role, p in self.fusion.params()]

    def affine_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.affine]

    def first_affine_layers(self) -> list[Layer]:
        return [col._first_affine() for col in self.columns]

    def bump(self) -> None:
        for col in self.columns:
            col.bump()
        self.fusion.bump()

    def _check_input(self, x):
        if tuple(x.shape[-3:]) != self.input_shape or x.ndim not in (3, 4):
            raise ShapeError(f"model input {x.shape} does not match {self.input_shape}")

    def _split(self, g):
        return np.split(g, self.channel_splits, axis=-3)

    def forward(self, x):
        x = as_tensor(x)
        self._check_input(x)
        outs, caches = zip(*(col.forward(x) for col in self.columns))
        y, fcache = self.fusion.forward(np.concatenate(outs, axis=-3))
        return y, (list(caches), fcache)

    def backward(self, grad, caches, need_input=True):
        """Reverse pass; returns (input gradient or None, parameter gradients)."""
        col_caches, fcache = caches
        grads: dict[str, np.ndarray] = {}
        gcat, pgrads = self.fusion.backward(grad, fcache)
        Chain._accumulate(grads, self.fusion, pgrads)
        gx = None
        for col, g, cache in zip(self.columns, self._split(gcat), col_caches):
            gi = col.backward(g, cache, grads, need_input)
            if need_input:
                gx = gi if gx is None else gx + gi
        return gx, grads

    def _fuse(self, parts, caches):
        lo = np.concatenate([p[0] for p in parts], axis=-3)
        up = np.concatenate([p[1] for p in parts], axis=-3)
        flo, fup, fcache = self.fusion.interval_forward_cached(lo, up)
        _check_interval(flo, fup, self.fusion.name)
        return flo, fup, (caches, fcache)

    def interval_forward_cached(self, lower, upper):
        lower, upper = as_tensor(lower), as_tensor(upper)
        self._check_input(lower)
        parts = [col.interval_forward_cached(lower, upper) for col in self.columns]
        return self._fuse(parts, [p[2] for p in parts])

    def interval_forward(self, iv: IntervalTensor) -> IntervalTensor:
        lo, up, _ = self.interval_forward_cached(iv.lower, iv.upper)
        return IntervalTensor(lo, up)

    def _unfuse(self, gl, gu, fcache, grads):
        gl, gu, pgrads = self.fusion.interval_backward(gl, gu, fcache)
        Chain._accumulate(grads, self.fusion, pgrads)
        return self._split(gl), self._split(gu)

    def interval_backward(self, gl, gu, caches):
        col_caches, fcache = caches
        grads: dict[str, np.ndarray] = {}
        gls, gus = self._unfuse(gl, gu, fcache, grads)
        for col, a, b, cache in zip(self.columns, gls, gus, col_caches):
            col.interval_backward(a, b, cache, grads)
        return grads

    def l2_forward_cached(self, x, eps):
        x = as_tensor(x)
        self._check_input(x)
        parts = [col.l2_forward_cached(x, eps) for col in self.columns]
        return self._fuse(parts, [p[2] for p in parts])

    def l2_backward(self, gl, gu, caches, eps):
        col_caches, fcache = caches
        grads: dict[str, np.ndarray] = {}
        gls, gus = self._unfuse(gl, gu, fcache, grads)
        for col, a, b, cache in zip(self.columns, gls, gus, col_caches):
            col.l2_backward(a, b, cache, grads, eps)
        return grads

    def joint_forward(self, x, eps, norm):
        """Clean density and certified density interval for a batch ``x``.

        Returns ``(y, lower, upper, caches)``.
        """
        x = as_tensor(x)
        if x.ndim != 4:
            raise ShapeError(f"joint pass needs a batched (N,C,H,W) input, got {x.shape}")
        self._check_input(x)
        parts = [col.joint_forward(x, eps, norm) for col in self.columns]
        s, fcache = self.fusion.joint_forward(np.concatenate([p[0] for p in parts], axis=1))
        n = x.shape[0]
        _check_interval(s[n : 2 * n], s[2 * n :], self.fusion.name)
        return s[:n], s[n : 2 * n], s[2 * n :], ([p[1] for p in parts], fcache)

    def joint_backward(self, gy, gl, gu, caches, eps, norm):
        col_caches, fcache = caches
        grads: dict[str, np.ndarray] = {}
        gs, pgrads = self.fusion.joint_backward(np.concatenate([gy, gl, gu]), fcache)
        Chain._accumulate(grads, self.fusion, pgrads)
        for col, g, cache in zip(self.columns, self._split(gs), col_caches):
            col.joint_backward(g, cache, grads, eps, norm)
        return grads


def _uniform_init(rng: CounterRNG, shape, fan_in: int) -> np.ndarray:
    s = np.sqrt(1.0 / fan_in)
    n = int(np.prod(shape))
    return rng.uniform(-s, s, n).reshape(shape)


def build_mcnn_micro(cfg: ModelConfig | None = None) -> MultiColumnModel:
    """Three conv/ReLU columns with two 2x2 pools each, fused by a 1x1 conv.

    Weights are uniform in +-sqrt(1/fan_in) from the seeded init stream,
    biases start at zero.
    """
    cfg = cfg or ModelConfig()
    in_ch, h, w = cfg.input_shape
    if h % 4 or w % 4:
        raise GeometryError(f"input extents {h}x{w} must be divisible by 4 (two 2x2 pools)")
    rng = CounterRNG.from_seed(cfg.seed).split(INIT_STREAM)
    columns = []
    for ci, (kernels, channels) in enumerate(zip(cfg.column_kernels, cfg.column_channels)):
        layers: list[Layer] = []
        c_prev, hh, ww = in_ch, h, w
        for li, (k, c_out) in enumerate(zip(kernels, channels)):
            if k > hh or k > ww:
                raise GeometryError(
                    f"column {ci} conv {li}: kernel {k} exceeds its {hh}x{ww} input"
                )
            fan_in = c_prev * k * k
            layers.append(Conv2d(_uniform_init(rng, (c_out, c_prev, k, k), fan_in), padding=k // 2))
            layers.append(ReLU())
            if li < 2:
                layers.append(MaxPool2d(2, 2))
                hh, ww = hh // 2, ww // 2
            c_prev = c_out
        columns.append(Chain(layers, prefix=f"col{ci}"))
    total = sum(ch[-1] for ch in cfg.column_channels)
    fusion = Conv2d(_uniform_init(rng, (1, total, 1, 1), total))
    return MultiColumnModel(columns, fusion, cfg.input_shape, cfg)


def predicted_count(density) -> float:
    """Sum of the raw density map; negative pixels are not clamped."""
    return reduce_sum(density)


def batch_counts(density) -> np.ndarray:
    """Per-image counts for a batched ``(N, 1, h, w)`` density map."""
    density = as_tensor(density)
    return np.array([predicted_count(d) for d in density])
