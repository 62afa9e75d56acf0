"""Forward and backward kernels for every operation the network graph uses.

Layout convention is N x C x H x W throughout. Convolutions accumulate in a
fixed order (outer loop over kernel positions, inner reduction over channels
via one matmul per position), so results are bit-deterministic for fixed
inputs and do not depend on BLAS thread count. No op here mutates its inputs.

Public entry points take Tensor operands plus a Tape (None means inference,
nothing recorded); the *_forward/*_backward pairs underneath are pure
functions of arrays and are what the tape replays.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, apply_op, register_op

# ----------------------------------------------------------------------
# helpers


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _to_nhwc2d(x):
    # (N,C,H,W) -> ((N*H*W), C); one contiguous copy
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _shifted_crop(x, dy, dx):
    """Return y with y[..., i, j] = x[..., i + dy, j + dx], zero outside."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys0 >= ys1 or xs0 >= xs1:
        return out
    out[..., ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx] = x[..., ys0:ys1, xs0:xs1]
    return out


def _check_4d(name, x):
    if x.ndim != 4:
        raise ValueError(f"{name}: expected 4-D N,C,H,W array, got shape {x.shape}")


def _packed_kernels(w, transpose):
    # (A,B,kh,kw) -> (kh,kw,B,A) or (kh,kw,A,B); contiguous per-position
    # matrices keep the matmuls on the fast BLAS path
    axes = (2, 3, 1, 0) if transpose else (2, 3, 0, 1)
    return np.ascontiguousarray(w.transpose(axes))


# ----------------------------------------------------------------------
# conv2d


def conv2d_forward(params, x, w, b=None):
    _check_4d("conv2d", x)
    stride, padding = params["stride"], params["padding"]
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(
            f"conv2d: weight expects {cw} input channels, input has {c}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    xp = _pad_hw(x, padding)
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # N,Hp,Wp,C
    wk = _packed_kernels(w, transpose=True)  # (kh,kw,C,O)
    acc = np.zeros((n * ho * wo, o), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sl = xt[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
            acc += sl.reshape(n * ho * wo, c) @ wk[ky, kx]
    if b is not None:
        acc += b
    out = acc.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), None


def conv2d_backward(g, saved, params, x, w, b=None):
    stride, padding = params["stride"], params["padding"]
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad_hw(x, padding)
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wk = _packed_kernels(w, transpose=False)  # (kh,kw,O,C)
    g2d = _to_nhwc2d(g)  # (NHW, O)
    gw = np.empty_like(w)
    gxt = np.zeros_like(xt)
    for ky in range(kh):
        for kx in range(kw):
            sl = xt[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
            gw[:, :, ky, kx] = g2d.T @ sl.reshape(n * ho * wo, c)
            contrib = (g2d @ wk[ky, kx]).reshape(n, ho, wo, c)
            gxt[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += contrib
    gx = gxt.transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + wd]
    gb = g.sum(axis=(0, 2, 3)) if b is not None else None
    return np.ascontiguousarray(gx), gw, gb


# ----------------------------------------------------------------------
# deconv2d (transposed convolution); weights are (C_in, C_out, kh, kw)


def deconv2d_forward(params, x, w):
    _check_4d("deconv2d", x)
    stride, padding = params["stride"], params["padding"]
    n, c, h, wd = x.shape
    cw, o, kh, kw = w.shape
    if cw != c:
        raise ValueError(
            f"deconv2d: weight expects {cw} input channels, input has {c}"
        )
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError("deconv2d: output would be empty")
    x2d = _to_nhwc2d(x)  # (NHW, C)
    wk = _packed_kernels(w, transpose=False)  # (kh,kw,C,O)
    buf = np.zeros((n, ho + 2 * padding, wo + 2 * padding, o), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            contrib = (x2d @ wk[ky, kx]).reshape(n, h, wd, o)
            buf[:, ky : ky + stride * h : stride, kx : kx + stride * wd : stride, :] += contrib
    out = buf[:, padding : padding + ho, padding : padding + wo, :].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), None


def deconv2d_backward(g, saved, params, x, w):
    stride, padding = params["stride"], params["padding"]
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    gp = _pad_hw(g, padding)
    gt = np.ascontiguousarray(gp.transpose(0, 2, 3, 1))  # N,Hp,Wp,O
    wk = _packed_kernels(w, transpose=True)  # (kh,kw,O,C)
    x2d = _to_nhwc2d(x)
    gx2d = np.zeros((n * h * wd, c), dtype=x.dtype)
    gw = np.empty_like(w)
    for ky in range(kh):
        for kx in range(kw):
            sl = gt[:, ky : ky + stride * h : stride, kx : kx + stride * wd : stride, :]
            sl2d = sl.reshape(n * h * wd, o)
            gx2d += sl2d @ wk[ky, kx]
            gw[:, :, ky, kx] = x2d.T @ sl2d
    gx = gx2d.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gx), gw


# ----------------------------------------------------------------------
# pointwise


def leaky_relu_forward(params, x):
    slope = params["slope"]
    return np.where(x > 0, x, slope * x), None


def leaky_relu_backward(g, saved, params, x):
    slope = params["slope"]
    return (np.where(x > 0, g, slope * g),)


def sigmoid_forward(params, x):
    # split by sign so large |x| saturates cleanly instead of overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, {"y": out}


def sigmoid_backward(g, saved, params, x):
    y = saved["y"]
    return (g * y * (1.0 - y),)


# ----------------------------------------------------------------------
# correlation (cost volume between two feature maps)


def correlate_forward(params, f1, f2):
    """Patch correlation: out[j,y,x] compares the K x K patch of f1 at (y,x)
    with the equally shifted patch of f2 at displacement (dy,dx).

    out[n, j, y, x] = sum_{|oy|,|ox|<=k} sum_c
        f1[n,c,y+oy,x+ox] * f2[n,c,y+dy+oy,x+dx+ox]

    with j = (dy+d)*(2d+1) + (dx+d) (dy outer, dx inner) and zero padding for
    out-of-bounds positions. Output has (2d+1)^2 channels at the input size.
    """
    _check_4d("correlate", f1)
    if f1.shape != f2.shape:
        raise ValueError(f"correlate: shapes differ {f1.shape} vs {f2.shape}")
    k, d = params["k"], params["d"]
    n, c, h, w = f1.shape
    dd = 2 * d + 1
    f1p = _pad_hw(f1, k)  # covers patch offsets of f1
    f2p = _pad_hw(f2, k)
    out = np.empty((n, dd * dd, h, w), dtype=f1.dtype)
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            j = (dy + d) * dd + (dx + d)
            # aligned[y',x'] = f2[y' - k + dy, x' - k + dx] on the padded grid
            f2a = _shifted_crop(f2p, dy, dx)
            g = np.einsum("nchw,nchw->nhw", f1p, f2a)
            if k == 0:
                out[:, j] = g
            else:
                acc = np.zeros((n, h, w), dtype=f1.dtype)
                for oy in range(2 * k + 1):
                    for ox in range(2 * k + 1):
                        acc += g[:, oy : oy + h, ox : ox + w]
                out[:, j] = acc
    return out, None


def correlate_backward(g, saved, params, f1, f2):
    k, d = params["k"], params["d"]
    n, c, h, w = f1.shape
    dd = 2 * d + 1
    f1p = _pad_hw(f1, k)
    f2p = _pad_hw(f2, k)
    gf1p = np.zeros_like(f1p)
    gf2p = np.zeros_like(f2p)
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            j = (dy + d) * dd + (dx + d)
            gj = g[:, j]  # (n,h,w)
            # spread the box sum back over the padded grid
            dg = np.zeros((n, h + 2 * k, w + 2 * k), dtype=f1.dtype)
            for oy in range(2 * k + 1):
                for ox in range(2 * k + 1):
                    dg[:, oy : oy + h, ox : ox + w] += gj
            f2a = _shifted_crop(f2p, dy, dx)
            gf1p += dg[:, None] * f2a
            # contribution lands at f2 padded coords shifted by -(dy,dx)
            gf2p += _shifted_crop(dg[:, None] * f1p, -dy, -dx)
    if k:
        gf1 = gf1p[:, :, k : k + h, k : k + w]
        gf2 = gf2p[:, :, k : k + h, k : k + w]
    else:
        gf1, gf2 = gf1p, gf2p
    return np.ascontiguousarray(gf1), np.ascontiguousarray(gf2)


def correlate_reference(f1, f2, k, d):
    """Brute-force correlation oracle, quadruple loop, for tests only."""
    n, c, h, w = f1.shape
    dd = 2 * d + 1
    out = np.zeros((n, dd * dd, h, w), dtype=np.float64)

    def val(f, ni, ci, yi, xi):
        if 0 <= yi < h and 0 <= xi < w:
            return float(f[ni, ci, yi, xi])
        return 0.0

    for ni in range(n):
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                j = (dy + d) * dd + (dx + d)
                for y in range(h):
                    for x in range(w):
                        s = 0.0
                        for oy in range(-k, k + 1):
                            for ox in range(-k, k + 1):
                                for ci in range(c):
                                    s += val(f1, ni, ci, y + oy, x + ox) * val(
                                        f2, ni, ci, y + dy + oy, x + dx + ox
                                    )
                        out[ni, j, y, x] = s
    return out


# ----------------------------------------------------------------------
# warp (backward/inverse warping of an image by a flow field)


def warp_forward(params, img, flow):
    """Sample img at (x + u, y + v) bilinearly; outside the frame reads zero.

    img is (N,C,H,W), flow is (N,2,H,W) with channel 0 = u (x displacement)
    and channel 1 = v (y displacement), both in pixels.
    """
    _check_4d("warp", img)
    n, c, h, w = img.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"warp: flow shape {flow.shape} does not match image")
    gy, gx = np.meshgrid(
        np.arange(h, dtype=img.dtype), np.arange(w, dtype=img.dtype), indexing="ij"
    )
    xs = gx[None] + flow[:, 0]
    ys = gy[None] + flow[:, 1]
    x0i = np.floor(xs).astype(np.int64)
    y0i = np.floor(ys).astype(np.int64)
    wx = (xs - x0i).astype(img.dtype)
    wy = (ys - y0i).astype(img.dtype)

    ni = np.arange(n)[:, None, None]
    out = np.zeros((n, c, h, w), dtype=img.dtype)
    corners = []
    for cy, cx, cw in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi = y0i + cy
        xi = x0i + cx
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        # zero-padding semantics: out-of-frame corners contribute zero values
        vals = img[ni[:, None], np.arange(c)[None, :, None, None], yc[:, None], xc[:, None]]
        vals = np.where(inside[:, None], vals, 0)
        out += cw[:, None] * vals
        corners.append((yc, xc, inside, cw, vals))
    saved = {"corners": corners, "wx": wx, "wy": wy}
    return out, saved


def warp_backward(g, saved, params, img, flow):
    n, c, h, w = img.shape
    corners = saved["corners"]
    wx, wy = saved["wx"], saved["wy"]

    # image gradient: scatter-add via bincount, deterministic
    gimg = np.zeros(n * c * h * w, dtype=np.float64)
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
    for yc, xc, inside, cw, _ in corners:
        idx = ((yc * w + xc).reshape(n, 1, h * w) + base).reshape(-1)
        contrib = (g * (cw * inside)[:, None]).reshape(-1)
        gimg += np.bincount(idx, weights=contrib, minlength=n * c * h * w)
    gimg = gimg.reshape(n, c, h, w).astype(img.dtype)

    # flow gradient from the masked corner values
    v00, v01, v10, v11 = (cn[4] for cn in corners)
    dx_interp = (v01 - v00) * (1 - wy)[:, None] + (v11 - v10) * wy[:, None]
    dy_interp = (v10 - v00) * (1 - wx)[:, None] + (v11 - v01) * wx[:, None]
    gu = np.einsum("nchw,nchw->nhw", g, dx_interp)
    gv = np.einsum("nchw,nchw->nhw", g, dy_interp)
    gflow = np.stack([gu, gv], axis=1).astype(flow.dtype)
    return gimg, gflow


# ----------------------------------------------------------------------
# brightness error


def brightness_error_forward(params, ref, warped):
    """Per-pixel Euclidean norm over channels of (ref - warped), (N,1,H,W)."""
    if ref.shape != warped.shape:
        raise ValueError("brightness_error: shapes differ")
    diff = ref - warped
    e = np.sqrt(np.einsum("nchw,nchw->nhw", diff, diff))[:, None]
    return e.astype(ref.dtype), {"diff": diff, "e": e}


def brightness_error_backward(g, saved, params, ref, warped):
    diff, e = saved["diff"], saved["e"]
    denom = np.maximum(e, np.finfo(ref.dtype).tiny ** 0.5)
    scale = g / denom
    gref = scale * diff
    return gref.astype(ref.dtype), (-gref).astype(ref.dtype)


# ----------------------------------------------------------------------
# bilinear upsampling by an integer factor (align_corners=False)


def _upsample_matrix(size, factor, dtype):
    out_size = size * factor
    a = np.zeros((out_size, size), dtype=dtype)
    for o in range(out_size):
        src = (o + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        i0c = min(max(i0, 0), size - 1)
        i1c = min(max(i0 + 1, 0), size - 1)
        a[o, i0c] += 1.0 - t
        a[o, i1c] += t
    return a


def upsample_bilinear_forward(params, x):
    _check_4d("upsample_bilinear", x)
    f = params["factor"]
    if f < 1 or int(f) != f:
        raise ValueError("upsample_bilinear: factor must be a positive integer")
    n, c, h, w = x.shape
    ah = _upsample_matrix(h, f, x.dtype)
    aw = _upsample_matrix(w, f, x.dtype)
    x2 = x.reshape(n * c, h, w)
    t = np.matmul(ah[None], x2)  # (NC, fH, W)
    out = np.matmul(t, aw.T[None]).reshape(n, c, h * f, w * f)
    return out, {"ah": ah, "aw": aw}


def upsample_bilinear_backward(g, saved, params, x):
    n, c, h, w = x.shape
    f = params["factor"]
    ah, aw = saved["ah"], saved["aw"]
    g2 = g.reshape(n * c, h * f, w * f)
    t = np.matmul(ah.T[None], g2)
    gx = np.matmul(t, aw[None]).reshape(n, c, h, w)
    return (gx,)


# ----------------------------------------------------------------------
# concat along channels


def concat_forward(params, *xs):
    base = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ValueError("concat: operands disagree outside the channel axis")
    return np.concatenate(xs, axis=1), None


def concat_backward(g, saved, params, *xs):
    grads = []
    start = 0
    for x in xs:
        c = x.shape[1]
        grads.append(np.ascontiguousarray(g[:, start : start + c]))
        start += c
    return tuple(grads)


# ----------------------------------------------------------------------
# registration and Tensor-level wrappers

register_op("conv2d", conv2d_forward, conv2d_backward)
register_op("deconv2d", deconv2d_forward, deconv2d_backward)
register_op("leaky_relu", leaky_relu_forward, leaky_relu_backward)
register_op("sigmoid", sigmoid_forward, sigmoid_backward)
register_op("correlate", correlate_forward, correlate_backward)
register_op("warp", warp_forward, warp_backward)
register_op("brightness_error", brightness_error_forward, brightness_error_backward)
register_op("upsample_bilinear", upsample_bilinear_forward, upsample_bilinear_backward)
register_op("concat", concat_forward, concat_backward)


def conv2d(tape, x, w, b=None, stride=1, padding=0):
    inputs = (x, w) if b is None else (x, w, b)
    return apply_op(tape, "conv2d", inputs, stride=stride, padding=padding)


def deconv2d(tape, x, w, stride=2, padding=1):
    return apply_op(tape, "deconv2d", (x, w), stride=stride, padding=padding)


def leaky_relu(tape, x, slope=0.1):
    return apply_op(tape, "leaky_relu", (x,), slope=slope)


def sigmoid(tape, x):
    return apply_op(tape, "sigmoid", (x,))


def correlate(tape, f1, f2, k=0, d=10):
    return apply_op(tape, "correlate", (f1, f2), k=k, d=d)


def warp(tape, img, flow):
    return apply_op(tape, "warp", (img, flow))


def brightness_error(tape, ref, warped):
    return apply_op(tape, "brightness_error", (ref, warped))


def upsample_bilinear(tape, x, factor):
    return apply_op(tape, "upsample_bilinear", (x,), factor=int(factor))


def concat(tape, tensors):
    return apply_op(tape, "concat", tuple(tensors))
