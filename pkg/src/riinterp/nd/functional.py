"""Spatial ops on [C, H, W] tensors: convolution, resampling, warping, cost volumes."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, record


# -- convolution ----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation with zero padding. x: [C,H,W], weight: [O,C,k,k]."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects [C,H,W] input and [O,C,k,k] weight, got {x.shape}, {weight.shape}")
    c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if stride < 1 or padding < 0 or dilation < 1:
        raise ValueError("conv2d needs stride >= 1, padding >= 0, dilation >= 1")
    k = kh
    span = dilation * (k - 1) + 1
    ho = (h + 2 * padding - span) // stride + 1
    wo = (w + 2 * padding - span) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output extent is non-positive ({ho}x{wo})")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            cols[:, i, j] = xp[:, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(c * k * k, ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                r0 = i * dilation
                for j in range(k):
                    c0 = j * dilation
                    gxp[:, r0:r0 + stride * (ho - 1) + 1:stride,
                        c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return record(out, parents, _bw)


# -- resampling -----------------------------------------------------------

def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.25 * prev + 0.75 * a
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., :1] += 0.25 * ge[..., :1]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1:] += 0.25 * go[..., -1:]
    return np.moveaxis(gx, -1, axis)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """2x bilinear upsampling of [C,H,W] with the half-pixel (align_corners=False) convention."""
    if x.data.ndim != 3:
        raise ValueError("upsample_bilinear2x expects [C,H,W]")
    out = _up_axis(_up_axis(x.data, 1), 2)
    return record(out, (x,), lambda g: (_up_axis_grad(_up_axis_grad(g, 2), 1),))


def avg_pool2x(x: Tensor) -> Tensor:
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x needs even extents, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def _bw(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2),)

    return record(out, (x,), _bw)


# -- warping --------------------------------------------------------------

def _corners(flow: np.ndarray):
    """Bilinear corner indices and weights for positions p + flow."""
    _, h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + flow[0]
    py = ys + flow[1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = (px - x0).astype(flow.dtype)
    fy = (py - y0).astype(flow.dtype)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        wx = fx if dx else 1 - fx
        wy = fy if dy else 1 - fy
        # d(weight)/d(px), d(weight)/d(py)
        dwx = (1 if dx else -1) * wy
        dwy = (1 if dy else -1) * wx
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(inside, yi * w + xi, 0)
        out.append((idx, inside, wx * wy, dwx, dwy))
    return out


def backwarp(img: Tensor, flow: Tensor) -> Tensor:
    """Pull-sample ``img`` at p + flow(p) bilinearly; outside reads are zero."""
    c, h, w = img.shape
    if flow.shape != (2, h, w):
        raise ValueError(f"backwarp flow shape {flow.shape} does not match image {img.shape}")
    flat = img.data.reshape(c, h * w)
    corners = _corners(flow.data)
    out = np.zeros((c, h, w), dtype=img.dtype)
    vals = []
    for idx, inside, wt, _, _ in corners:
        v = flat[:, idx] * inside
        vals.append(v)
        out += wt * v

    def _bw(g):
        gi = gf = None
        if img.requires_grad:
            gflat = np.zeros(c * h * w, dtype=img.dtype)
            base = (np.arange(c) * (h * w))[:, None, None]
            for idx, inside, wt, _, _ in corners:
                gflat += np.bincount((base + idx).reshape(-1), weights=(g * wt * inside).reshape(-1),
                                     minlength=c * h * w).astype(img.dtype)
            gi = gflat.reshape(c, h, w)
        if flow.requires_grad:
            gf = np.zeros((2, h, w), dtype=flow.dtype)
            for (idx, inside, wt, dwx, dwy), v in zip(corners, vals):
                s = (g * v).sum(axis=0)
                gf[0] += s * dwx
                gf[1] += s * dwy
        return gi, gf

    return record(out, (img, flow), _bw)


def sum_splat(src: Tensor, flow: Tensor) -> Tensor:
    """Push each source pixel to q + flow(q), spreading it bilinearly; returns the summed image."""
    c, h, w = src.shape
    if flow.shape != (2, h, w):
        raise ValueError(f"sum_splat flow shape {flow.shape} does not match source {src.shape}")
    n = h * w
    flat = src.data.reshape(c, n)
    corners = _corners(flow.data)
    base = (np.arange(c) * n)[:, None]
    out = np.zeros(c * n, dtype=src.dtype)
    for idx, inside, wt, _, _ in corners:
        wv = (wt * inside).reshape(1, n)
        out += np.bincount((base + idx.reshape(1, n)).reshape(-1), weights=(flat * wv).reshape(-1),
                           minlength=c * n).astype(src.dtype)
    out = out.reshape(c, h, w)

    def _bw(g):
        gflat = g.reshape(c, n)
        gs = np.zeros((c, n), dtype=src.dtype) if src.requires_grad else None
        gf = np.zeros((2, n), dtype=flow.dtype) if flow.requires_grad else None
        for idx, inside, wt, dwx, dwy in corners:
            gathered = gflat[:, idx.reshape(-1)] * inside.reshape(1, n)
            if gs is not None:
                gs += gathered * wt.reshape(1, n)
            if gf is not None:
                s = (gathered * flat).sum(axis=0)
                gf[0] += s * dwx.reshape(-1)
                gf[1] += s * dwy.reshape(-1)
        return (None if gs is None else gs.reshape(c, h, w),
                None if gf is None else gf.reshape(2, h, w))

    return record(out, (src, flow), _bw)


def safe_div(num: Tensor, den: Tensor) -> Tensor:
    """num / den where den > 0, exactly 0 elsewhere. den broadcasts over channels."""
    covered = den.data > 0
    safe = np.where(covered, den.data, 1)
    out = np.where(covered, num.data / safe, 0).astype(num.dtype)

    def _bw(g):
        gn = np.where(covered, g / safe, 0).astype(num.dtype)
        gd = np.where(covered, -g * out / safe, 0)
        if den.shape[0] == 1 and num.shape[0] != 1:
            gd = gd.sum(axis=0, keepdims=True)
        return gn, gd.astype(den.dtype)

    return record(out, (num, den), _bw)


# -- cost volume ----------------------------------------------------------

def correlation(f1: Tensor, f2: Tensor, radius: int) -> Tensor:
    """Channel (dy+r)*(2r+1)+(dx+r) at p holds <f1(p), f2(p+(dx,dy))> / C."""
    if radius < 0:
        raise ValueError("correlation radius must be >= 0")
    if f1.shape != f2.shape:
        raise ValueError(f"correlation shape mismatch {f1.shape} vs {f2.shape}")
    c, h, w = f1.shape
    r = radius
    d = 2 * r + 1
    f2p = np.pad(f2.data, ((0, 0), (r, r), (r, r)))
    out = np.empty((d * d, h, w), dtype=f1.dtype)
    for a in range(d):
        for b in range(d):
            out[a * d + b] = np.einsum("chw,chw->hw", f1.data, f2p[:, a:a + h, b:b + w]) / c

    def _bw(g):
        g1 = np.zeros_like(f1.data) if f1.requires_grad else None
        g2p = np.zeros_like(f2p) if f2.requires_grad else None
        for a in range(d):
            for b in range(d):
                gk = g[a * d + b][None] / c
                if g1 is not None:
                    g1 += gk * f2p[:, a:a + h, b:b + w]
                if g2p is not None:
                    g2p[:, a:a + h, b:b + w] += gk * f1.data
        g2 = None if g2p is None else g2p[:, r:r + h, r:r + w]
        return g1, g2

    return record(out, (f1, f2), _bw)
