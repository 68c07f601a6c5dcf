"""Small U-Net prefilter in plain numpy with hand-written backward passes.

Inputs and outputs are channels-first ``(C, H, W)`` maps; internally
activations are channels-last so that each 3x3 "same" convolution becomes
one tall im2col matmul, which BLAS handles far better than the wide one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAKY_SLOPE = 0.2
IN_CHANNELS = 11


@numba.njit(cache=True)
def _im2col_kernel(x, out):
    h, w, c = x.shape
    for i in range(h):
        for j in range(w):
            r = i * w + j
            for k in range(9):
                ii = i + k // 3 - 1
                jj = j + k % 3 - 1
                base = k * c
                if 0 <= ii < h and 0 <= jj < w:
                    for ch in range(c):
                        out[r, base + ch] = x[ii, jj, ch]
                else:
                    for ch in range(c):
                        out[r, base + ch] = 0.0


@numba.njit(cache=True)
def _col2im_kernel(cols, out):
    h, w, c = out.shape
    out[:] = 0.0
    for i in range(h):
        for j in range(w):
            r = i * w + j
            for k in range(9):
                ii = i + k // 3 - 1
                jj = j + k % 3 - 1
                if 0 <= ii < h and 0 <= jj < w:
                    base = k * c
                    for ch in range(c):
                        out[ii, jj, ch] += cols[r, base + ch]


def _im2col(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    out = np.empty((h * w, 9 * c), dtype=x.dtype)
    _im2col_kernel(np.ascontiguousarray(x), out)
    return out


def _col2im(cols: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    out = np.empty((h, w, c), dtype=cols.dtype)
    _col2im_kernel(np.ascontiguousarray(cols), out)
    return out


def conv3x3(x, weight, bias):
    """``x`` is ``(H, W, cin)``; ``weight`` has shape ``(9 * cin, cout)`` with tap-major rows."""
    h, w, _ = x.shape
    cols = _im2col(x)
    y = cols @ weight + bias
    return y.reshape(h, w, -1), cols


def conv3x3_backward(dy, cols, weight, in_shape):
    g = dy.reshape(-1, dy.shape[-1])
    d_weight = cols.T @ g
    d_bias = g.sum(axis=0)
    d_x = _col2im(g @ weight.T, *in_shape)
    return d_x, d_weight, d_bias


def leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_backward(dy, x):
    return np.where(x > 0, dy, LEAKY_SLOPE * dy)


def avgpool2(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def avgpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=0), 2, axis=1) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def upsample2_backward(dy):
    h, w, c = dy.shape
    return dy.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


@dataclass(frozen=True)
class NetConfig:
    base_width: int = 16
    depth: int = 3
    decode_only: bool = False
    out_channels: int = IN_CHANNELS

    def __post_init__(self):
        if self.depth < 0 or self.base_width < 1:
            raise ValueError("depth must be >= 0 and base_width >= 1")


class PrefilterNet:
    """U-Net with ``depth`` pooling stages, doubling width per stage.

    ``depth == 0`` degenerates to a single identity-initialised 3x3 conv.
    ``decode_only`` drops the encoder: noise enters at the bottleneck
    resolution and is upsampled through decoder blocks without skips.
    """

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        if cfg.depth == 0:
            w = np.zeros((9, IN_CHANNELS, cfg.out_channels))
            w[4] = np.eye(IN_CHANNELS, cfg.out_channels)
            self._add("single.w", w.reshape(-1, cfg.out_channels))
            self._add("single.b", np.zeros(cfg.out_channels))
            return
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.widths = widths
        if cfg.decode_only:
            self._conv(rng, "bott.0", IN_CHANNELS, widths[-1])
            self._conv(rng, "bott.1", widths[-1], widths[-1])
        else:
            cin = IN_CHANNELS
            for i, wd in enumerate(widths):
                self._conv(rng, f"enc{i}.0", cin, wd)
                self._conv(rng, f"enc{i}.1", wd, wd)
                cin = wd
        for i in reversed(range(cfg.depth)):
            cin = widths[i + 1] + (0 if cfg.decode_only else widths[i])
            self._conv(rng, f"dec{i}.0", cin, widths[i])
            self._conv(rng, f"dec{i}.1", widths[i], widths[i])
        head = rng.normal(size=(widths[0], cfg.out_channels)) * 0.1 * np.sqrt(2.0 / widths[0])
        self._add("head.w", head)
        self._add("head.b", np.zeros(cfg.out_channels))

    def _add(self, name, value):
        self.params[name] = np.asarray(value, dtype=self.dtype)

    def _conv(self, rng, name, cin, cout):
        std = np.sqrt(2.0 / ((1 + LEAKY_SLOPE**2) * 9 * cin))
        self._add(name + ".w", rng.normal(size=(9 * cin, cout)) * std)
        self._add(name + ".b", np.zeros(cout))

    def input_shape(self, resolution: int) -> tuple[int, int, int]:
        if self.cfg.decode_only and self.cfg.depth:
            if resolution % 2**self.cfg.depth:
                raise ValueError("resolution must be divisible by 2**depth")
            return (IN_CHANNELS, resolution >> self.cfg.depth, resolution >> self.cfg.depth)
        if resolution % 2**self.cfg.depth:
            raise ValueError("resolution must be divisible by 2**depth")
        return (IN_CHANNELS, resolution, resolution)

    # ------------------------------------------------------------------ forward

    def _block(self, name, x, tape):
        out = x
        for j in (0, 1):
            key = f"{name}.{j}"
            pre, cols = conv3x3(out, self.params[key + ".w"], self.params[key + ".b"])
            tape.append((key, out.shape, cols, pre))
            out = leaky(pre)
        return out

    def forward(self, noise: np.ndarray, keep_tape: bool = False):
        """Return the output map; with ``keep_tape`` also the activations for backward."""
        p = self.params
        x = np.ascontiguousarray(np.moveaxis(np.asarray(noise, dtype=self.dtype), 0, -1))
        tape: list = []
        if self.cfg.depth == 0:
            y, cols = conv3x3(x, p["single.w"], p["single.b"])
            y = np.moveaxis(y, -1, 0)
            return (y, [("single", x.shape, cols, None)]) if keep_tape else y
        skips = []
        if self.cfg.decode_only:
            h = self._block("bott", x, tape)
        else:
            h = x
            for i in range(self.cfg.depth + 1):
                if i:
                    h = avgpool2(h)
                h = self._block(f"enc{i}", h, tape)
                skips.append(h)
        for i in reversed(range(self.cfg.depth)):
            h = upsample2(h)
            if not self.cfg.decode_only:
                h = np.concatenate([h, skips[i]], axis=-1)
            h = self._block(f"dec{i}", h, tape)
        hh, ww, c = h.shape
        y = np.moveaxis((h.reshape(-1, c) @ p["head.w"] + p["head.b"]).reshape(hh, ww, -1), -1, 0)
        tape.append(("head", h.shape, h, None))
        return (y, tape) if keep_tape else y

    # ----------------------------------------------------------------- backward

    def backward(self, d_out: np.ndarray, tape) -> dict[str, np.ndarray]:
        p = self.params
        grads: dict[str, np.ndarray] = {}
        d_out = np.ascontiguousarray(np.moveaxis(np.asarray(d_out, dtype=self.dtype), 0, -1))
        tape = list(tape)
        if self.cfg.depth == 0:
            _, shape, cols, _ = tape[0]
            _, grads["single.w"], grads["single.b"] = conv3x3_backward(d_out, cols, p["single.w"], shape)
            return grads
        _, shape, h, _ = tape.pop()
        g = d_out.reshape(-1, d_out.shape[-1])
        hf = h.reshape(-1, shape[-1])
        grads["head.w"] = hf.T @ g
        grads["head.b"] = g.sum(axis=0)
        dh = (g @ p["head.w"].T).reshape(shape)

        def block_backward(name, dh):
            for j in (1, 0):
                key, in_shape, cols, pre = tape.pop()
                assert key == f"{name}.{j}"
                dpre = leaky_backward(dh, pre)
                dh, grads[key + ".w"], grads[key + ".b"] = conv3x3_backward(dpre, cols, p[key + ".w"], in_shape)
            return dh

        d_skips = {}
        for i in range(self.cfg.depth):
            dh = block_backward(f"dec{i}", dh)
            if not self.cfg.decode_only:
                up = self.widths[i + 1]
                d_skips[i] = dh[..., up:]
                dh = dh[..., :up]
            dh = upsample2_backward(dh)
        if self.cfg.decode_only:
            block_backward("bott", dh)
            return grads
        for i in reversed(range(self.cfg.depth + 1)):
            if i in d_skips:
                dh = dh + d_skips[i]
            dh = block_backward(f"enc{i}", dh)
            if i:
                dh = avgpool2_backward(dh)
        return grads

    # ------------------------------------------------------------- serialise

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"parameter mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = np.asarray(v, dtype=self.dtype)
