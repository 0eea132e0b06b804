"""Dense NCHW numeric core: forward/backward primitives, a gradient tape and Adam.

Tensors are plain ``numpy`` arrays of shape ``(n, c, h, w)``. Every primitive
takes an optional :class:`GradTape`; when given, the call is recorded so that
``tape.backward(loss)`` can replay it in reverse. Without a tape the primitives
run as pure inference with no bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class TapeError(RuntimeError):
    """Raised when backward is requested for something that was never recorded."""


def _check_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} must be a rank-4 (n, c, h, w) array, got shape {x.shape}")


@dataclass(eq=False)
class ConvLayer:
    """Stride-1, same-padded 2-D convolution with an odd kernel."""

    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    name: str = ""

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"weight must be (out, in, kh, kw), got {self.weight.shape}")
        kh, kw = self.kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel size must be odd for same padding, got {kh}x{kw}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match out_channels={self.out_channels}"
            )

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, kernel_size: int, name: str = "",
              dtype=DTYPE) -> "ConvLayer":
        return cls(np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype),
                   np.zeros(out_channels, dtype), name)

    @property
    def kernel_size(self) -> tuple[int, int]:
        return int(self.weight.shape[2]), int(self.weight.shape[3])

    @property
    def in_channels(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[0])

    @property
    def padding(self) -> tuple[int, int]:
        kh, kw = self.kernel_size
        return kh // 2, kw // 2

    @property
    def parameter_count(self) -> int:
        kh, kw = self.kernel_size
        return (kh * kw * self.in_channels + 1) * self.out_channels

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weight.astype(dtype), self.bias.astype(dtype), self.name)


@dataclass
class _Record:
    output: np.ndarray
    inputs: tuple[np.ndarray, ...]
    backward: Callable  # (grad_out) -> (input grads tuple, {layer: (dW, db)})


class Gradients:
    """Result of :meth:`GradTape.backward`."""

    def __init__(self, layer_grads: dict, value_grads: dict):
        self._layers = layer_grads
        self._values = value_grads

    def layer(self, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
        if layer not in self._layers:
            raise KeyError(f"layer {layer.name!r} was not touched by the recorded forward pass")
        return self._layers[layer]

    def wrt(self, x: np.ndarray) -> np.ndarray:
        """Gradient with respect to a watched or intermediate array."""
        try:
            return self._values[id(x)]
        except KeyError:
            raise KeyError("array is not watched and was not produced by a recorded op") from None

    def __contains__(self, layer: ConvLayer) -> bool:
        return layer in self._layers


class GradTape:
    """Ordered record of primitive applications.

    Arrays passed to :meth:`watch` (and every recorded output) receive input
    gradients; anything else is treated as a constant, which lets the first
    convolution skip its input-gradient work.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._by_output: dict[int, int] = {}
        self._tracked: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, x: np.ndarray) -> np.ndarray:
        self._tracked[id(x)] = x
        return x

    def requires_grad(self, x: np.ndarray) -> bool:
        return id(x) in self._tracked

    def record(self, output, inputs, backward) -> None:
        self._by_output[id(output)] = len(self._records)
        self._records.append(_Record(output, tuple(inputs), backward))
        self._tracked[id(output)] = output

    def backward(self, loss: np.ndarray, grad: np.ndarray | float = 1.0) -> Gradients:
        if not self._records:
            raise TapeError("backward called on an empty tape: no forward pass was recorded")
        if id(loss) not in self._by_output:
            raise TapeError("backward target was not produced by an operation on this tape")
        value_grads: dict[int, np.ndarray] = {
            id(loss): np.broadcast_to(np.asarray(grad, dtype=loss.dtype), loss.shape).copy()
        }
        layer_grads: dict[ConvLayer, tuple[np.ndarray, np.ndarray]] = {}
        stop = self._by_output[id(loss)]
        for rec in reversed(self._records[: stop + 1]):
            g = value_grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads, pgrads = rec.backward(g)
            for layer, (dw, db) in pgrads.items():
                if layer in layer_grads:
                    pw, pb = layer_grads[layer]
                    layer_grads[layer] = (pw + dw, pb + db)
                else:
                    layer_grads[layer] = (dw, db)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or id(x) not in self._tracked:
                    continue
                if id(x) in value_grads:
                    value_grads[id(x)] = value_grads[id(x)] + gx
                else:
                    value_grads[id(x)] = gx
        # value_grads now holds gradients for the leaves (watched inputs)
        return Gradients(layer_grads, value_grads)


def _row_stack(xp: np.ndarray, kw: int) -> np.ndarray:
    """(n, kw*c, rows*wp) view-copy of padded rows: ``[:, dx*c + i, p]`` is channel ``i`` at ``p + dx``."""
    n, c, rows, wp = xp.shape
    flat = np.zeros((n, c, rows * wp + kw), dtype=xp.dtype)
    flat[:, :, : rows * wp] = xp.reshape(n, c, rows * wp)
    xr = np.empty((n, kw, c, rows * wp), dtype=xp.dtype)
    for dx in range(kw):
        xr[:, dx] = flat[:, :, dx : dx + rows * wp]
    return xr.reshape(n, kw * c, rows * wp)


def _pad(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    return xp


def _padded_rows(x: np.ndarray, kh: int, kw: int):
    """Zero-pad and flatten each channel so a kernel offset becomes a contiguous slice.

    Returns ``xr`` of shape (n, kw*c, Hp*Wp) where ``xr[:, dx*c + i, p]`` is the
    padded, flattened channel ``i`` at position ``p + dx``. Output row-major
    positions are computed on a grid ``Wp`` wide; columns ``>= w`` are discarded.
    """
    xp = _pad(x, kh, kw)
    return _row_stack(xp, kw), xp.shape[3]


# inference processes output rows in blocks whose im2col slab stays cache sized
_BLOCK_FLOATS = 1 << 17


def _conv_inference(x: np.ndarray, wr: np.ndarray, bias: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    co = wr.shape[1]
    xp = _pad(x, kh, kw)
    wp = xp.shape[3]
    rows = max(1, _BLOCK_FLOATS // (n * wp * (kw * c + co)))
    out = np.empty((n, co, h, w), dtype=wr.dtype)
    for r0 in range(0, h, rows):
        r1 = min(r0 + rows, h)
        xr = _row_stack(xp[:, :, r0 : r1 + kh - 1], kw)
        m = (r1 - r0) * wp
        acc = np.matmul(wr[0], xr[:, :, 0:m])
        for dy in range(1, kh):
            acc += np.matmul(wr[dy], xr[:, :, dy * wp : dy * wp + m])
        out[:, :, r0:r1] = acc.reshape(n, co, r1 - r0, wp)[:, :, :, :w]
    out += bias[None, :, None, None]
    return out


def conv2d_forward(x: np.ndarray, layer: ConvLayer, tape: GradTape | None = None) -> np.ndarray:
    """Same-padded stride-1 convolution (cross-correlation, as in every DL framework)."""
    _check_rank4(x, "conv2d input")
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input has {c} channels, layer {layer.name!r} "
            f"expects in_channels={layer.in_channels}"
        )
    if h < 1 or w < 1:
        raise ValueError(f"conv2d input spatial dims must be >= 1, got {h}x{w}")
    kh, kw = layer.kernel_size
    co = layer.out_channels
    dtype = np.result_type(x.dtype, layer.weight.dtype)
    # wr[dy] is (out, kw*in) with columns ordered (dx, in) to match the row stack
    wr = np.ascontiguousarray(layer.weight.astype(dtype, copy=False).transpose(2, 0, 3, 1)).reshape(
        kh, co, kw * c
    )
    if tape is None:
        return _conv_inference(x.astype(dtype, copy=False), wr, layer.bias.astype(dtype, copy=False), kh, kw)
    xr, wp = _padded_rows(x.astype(dtype, copy=False), kh, kw)
    m = h * wp
    acc = np.matmul(wr[0], xr[:, :, 0:m])
    for dy in range(1, kh):
        acc += np.matmul(wr[dy], xr[:, :, dy * wp : dy * wp + m])
    out = acc.reshape(n, co, h, wp)[:, :, :, :w]
    out = out + layer.bias.astype(dtype, copy=False)[None, :, None, None]

    need_dx = tape.requires_grad(x)

    def backward(g):
        gp = np.zeros((n, co, h, wp), dtype=dtype)
        gp[:, :, :, :w] = g
        gp = gp.reshape(n, co, m)
        dwr = np.empty_like(wr)
        for dy in range(kh):
            dwr[dy] = np.matmul(gp, xr[:, :, dy * wp : dy * wp + m].transpose(0, 2, 1)).sum(0)
        dweight = dwr.reshape(kh, co, kw, c).transpose(1, 3, 0, 2)
        dbias = g.sum(axis=(0, 2, 3))
        dx = None
        if need_dx:
            hp = h + 2 * (kh // 2)
            dxr = np.zeros_like(xr)
            for dy in range(kh):
                dxr[:, :, dy * wp : dy * wp + m] += np.matmul(wr[dy].T, gp)
            dxr = dxr.reshape(n, kw, c, hp * wp)
            dflat = np.zeros((n, c, hp * wp + kw), dtype=dtype)
            for dx_ in range(kw):
                dflat[:, :, dx_ : dx_ + hp * wp] += dxr[:, dx_]
            ph, pw = kh // 2, kw // 2
            dx = dflat[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, ph : ph + h, pw : pw + w].copy()
        return (dx,), {layer: (np.ascontiguousarray(dweight), dbias)}

    tape.record(out, (x,), backward)
    return out


def conv2d_backward(tape: GradTape, output: np.ndarray, grad_output: np.ndarray | None = None) -> Gradients:
    """Backpropagate from a recorded convolution output.

    ``grad_output`` defaults to ones, i.e. the gradient of ``sum(output)``.
    """
    if grad_output is None:
        grad_output = np.ones_like(output)
    return tape.backward(output, grad_output)


def maxpool2x2(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    _check_rank4(x, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}; crop input to a multiple of 8")
    # window members in row-major order: (0,0) (0,1) (1,0) (1,1)
    quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    if tape is not None:
        def backward(g):
            gx = np.zeros_like(x)
            taken = np.zeros(out.shape, dtype=bool)
            for q, (r, s) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
                # first maximal element wins ties
                hit = (q == out) & ~taken
                taken |= hit
                gx[:, :, r::2, s::2] = np.where(hit, g, 0)
            return (gx,), {}

        tape.record(out, (x,), backward)
    return out


def relu(x: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    out = np.maximum(x, 0)
    if tape is not None:
        # out > 0 exactly where x > 0, so the subgradient at 0 is 0
        tape.record(out, (x,), lambda g: ((np.where(out > 0, g, 0).astype(x.dtype, copy=False),), {}))
    return out


def concat_channels(inputs: Sequence[np.ndarray], tape: GradTape | None = None) -> np.ndarray:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        _check_rank4(t, "concat input")
    first = inputs[0].shape
    if any(t.shape[0] != first[0] or t.shape[2:] != first[2:] for t in inputs):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise ValueError(f"concat_channels needs matching (n, h, w); got shapes {shapes}")
    out = np.concatenate(inputs, axis=1)
    if tape is not None:
        bounds = np.cumsum([t.shape[1] for t in inputs])[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=1)), {}

        tape.record(out, tuple(inputs), backward)
    return out


def euclidean_loss(pred: np.ndarray, gt: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Batch mean of per-sample L2 norms (not squared) of ``pred - gt``."""
    if pred.shape != gt.shape:
        raise ValueError(f"euclidean_loss shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim < 1 or pred.shape[0] < 1:
        raise ValueError("euclidean_loss needs a batch of at least one sample")
    n = pred.shape[0]
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    norms = np.sqrt((diff.reshape(n, -1) ** 2).sum(axis=1))
    out = np.asarray(norms.mean(), dtype=pred.dtype)

    if tape is not None:
        def backward(g):
            safe = np.where(norms > 0, norms, 1.0)
            scale = np.where(norms > 0, 1.0 / (safe * n), 0.0)
            gp = diff * scale.reshape((n,) + (1,) * (pred.ndim - 1)) * float(g)
            return (gp.astype(pred.dtype), None), {}

        tape.record(out, (pred, gt), backward)
    return out


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: np.ndarray, lr: float = 1e-5, **kwargs) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), lr=lr, **kwargs)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update on a flat parameter vector.

    Returns new arrays; ``params`` and the moments of ``state`` are not mutated.
    """
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ValueError(
            f"adam_step length mismatch: params {params.shape}, grads {grads.shape}, "
            f"m {state.first_moment.shape}, v {state.second_moment.shape}"
        )
    t = state.step_count + 1
    g = grads.astype(np.float64)
    m = state.beta1 * state.first_moment + (1 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        m.astype(state.first_moment.dtype),
        v.astype(state.second_moment.dtype),
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        step_count=t,
    )
    return new.astype(params.dtype), new_state
