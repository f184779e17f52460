"""Forward and backward numerical kernels for the CNN layer set.

Every kernel is a pure function of float64 numpy arrays. Spatial kernels work
on batches shaped ``(N, C, H, W)``; passing a single ``(C, H, W)`` sample is
also accepted and returns an unbatched result.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.99
BN_EPS = 1e-5
ELU_ALPHA = 1.0


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with a kernel's contract."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _promote(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    return x, False


def _pad_amounts(k: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        # extra padding goes on the right/bottom for even kernels
        left = (k - 1) // 2
        return left, k - 1 - left
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _pad(x: np.ndarray, kh: int, kw: int, padding: str) -> tuple[np.ndarray, tuple]:
    ph = _pad_amounts(kh, padding)
    pw = _pad_amounts(kw, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x, (ph, pw)
    return np.pad(x, ((0, 0), (0, 0), ph, pw)), (ph, pw)


def _check_extent(H: int, W: int, kh: int, kw: int, padding: str) -> None:
    if padding == "valid" and (kh > H or kw > W):
        raise ShapeError(f"kernel ({kh},{kw}) exceeds input extent ({H},{W}) with valid padding")


def _windows(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _row_taps(W: int, kw: int, padding: str):
    """Per tap ``j``: output columns ``w`` and the input columns ``p`` they read."""
    left = _pad_amounts(kw, padding)[0]
    Wo = W if padding == "same" else W - kw + 1
    w = np.arange(Wo)
    taps = []
    for j in range(kw):
        p = w + j - left
        ok = (p >= 0) & (p < W)
        taps.append((w[ok], p[ok]))
    return taps, Wo


def _row_toeplitz(kernels: np.ndarray, W: int, padding: str) -> tuple[np.ndarray, int]:
    # single-row kernels as a dense (Cin*W, Cout*W') matrix: one GEMM instead of im2col
    cout, cin, _, kw = kernels.shape
    taps, Wo = _row_taps(W, kw, padding)
    T = np.zeros((cin, W, cout, Wo))
    for j, (w, p) in enumerate(taps):
        T[:, p, :, w] = kernels[:, :, 0, j].T
    return T.reshape(cin * W, cout * Wo), Wo


def _rows(x: np.ndarray) -> np.ndarray:
    N, C, H, W = x.shape
    return x.transpose(0, 2, 1, 3).reshape(N * H, C * W)


def conv2d(x, kernels, bias=None, padding: str = "valid") -> np.ndarray:
    """Stride-1 2D cross-correlation.

    Parameters
    ----------
    x : array (N, Cin, H, W) or (Cin, H, W)
    kernels : array (Cout, Cin, kh, kw)
    bias : array (Cout,) or None
    padding : 'same' or 'valid'
    """
    x, single = _promote(x)
    kernels = as_tensor(kernels)
    if kernels.ndim != 4 or kernels.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel shape {kernels.shape} incompatible with input shape {x.shape[1:]} "
            f"(kernel Cin must equal input channels)"
        )
    _, kh, kw = kernels.shape[1:]
    _check_extent(x.shape[2], x.shape[3], kh, kw, padding)
    if kh == 1 and kw > 1:
        N, _, H, W = x.shape
        T, Wo = _row_toeplitz(kernels, W, padding)
        out = (_rows(x) @ T).reshape(N, H, -1, Wo).transpose(0, 2, 1, 3)
        if bias is not None:
            out = out + as_tensor(bias)[None, :, None, None]
        out = np.ascontiguousarray(out)
        return out[0] if single else out
    xp, _ = _pad(x, kh, kw, padding)
    if kh == 1 and kw == 1:
        out = np.einsum("nchw,oc->nohw", xp, kernels[:, :, 0, 0])
    else:
        win = _windows(xp, kh, kw)
        out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + as_tensor(bias)[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(x, kernels, grad, padding: str = "valid", need_input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    Returns ``(dx, dkernels, dbias)``; ``dx`` is None when not requested.
    """
    x, single = _promote(x)
    grad, _ = _promote(grad)
    kernels = as_tensor(kernels)
    cout, cin, kh, kw = kernels.shape
    if grad.shape[0] != x.shape[0] or grad.shape[1] != cout:
        raise ShapeError(f"upstream grad {grad.shape} does not match conv output for input {x.shape}")
    db = grad.sum(axis=(0, 2, 3))
    if kh == 1 and kw > 1:
        N, _, H, W = x.shape
        taps, Wo = _row_taps(W, kw, padding)
        G = _rows(grad)
        M = (_rows(x).T @ G).reshape(cin, W, cout, Wo)
        dk = np.empty_like(kernels)
        for j, (w, p) in enumerate(taps):
            dk[:, :, 0, j] = M[:, p, :, w].sum(axis=0).T
        dx = None
        if need_input_grad:
            T, _ = _row_toeplitz(kernels, W, padding)
            dx = np.ascontiguousarray((G @ T.T).reshape(N, H, cin, W).transpose(0, 2, 1, 3))
            if single:
                dx = dx[0]
        return dx, dk, db
    xp, (ph, pw) = _pad(x, kh, kw, padding)
    if kh == 1 and kw == 1:
        dk = np.einsum("nohw,nchw->oc", grad, xp)[:, :, None, None]
    else:
        win = _windows(xp, kh, kw)
        dk = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
    dx = None
    if need_input_grad:
        dx = conv2d_input_grad(grad, kernels, x.shape[2:], padding)
        if single:
            dx = dx[0]
    return dx, dk, db


def conv2d_input_grad(grad, kernels, in_hw, padding: str = "valid") -> np.ndarray:
    """Transpose of the conv2d linear map applied to ``grad`` (N, Cout, H', W')."""
    cout, cin, kh, kw = kernels.shape
    if kh == 1 and kw > 1:
        N, _, H, _ = grad.shape
        T, _ = _row_toeplitz(kernels, in_hw[1], padding)
        return np.ascontiguousarray((_rows(grad) @ T.T).reshape(N, H, cin, in_hw[1]).transpose(0, 2, 1, 3))
    if kh == 1 and kw == 1:
        dxp = np.einsum("nohw,oc->nchw", grad, kernels[:, :, 0, 0])
    else:
        gp = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        win = _windows(gp, kh, kw)
        flipped = kernels[:, :, ::-1, ::-1]
        dxp = np.tensordot(win, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    ph = _pad_amounts(kh, padding)
    pw = _pad_amounts(kw, padding)
    H, W = in_hw
    return np.ascontiguousarray(dxp[:, :, ph[0]:ph[0] + H, pw[0]:pw[0] + W])


def depthwise_conv2d(x, kernels, padding: str = "valid") -> np.ndarray:
    """Per-channel convolution with depth multiplier ``D = kernels.shape[1]``.

    Output channel ``c*D + d`` is input channel ``c`` correlated with
    ``kernels[c, d]``.
    """
    x, single = _promote(x)
    kernels = as_tensor(kernels)
    if kernels.ndim != 4:
        raise ShapeError(f"depthwise kernels must be (C, D, kh, kw), got {kernels.shape}")
    C, D, kh, kw = kernels.shape
    if D < 1:
        raise ValueError("depth multiplier must be >= 1")
    if C != x.shape[1]:
        raise ShapeError(f"depthwise kernels for {C} channels, input has {x.shape[1]}")
    _check_extent(x.shape[2], x.shape[3], kh, kw, padding)
    xp, _ = _pad(x, kh, kw, padding)
    N, _, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    out = np.zeros((N, C, D, Ho, Wo))
    if kw == 1:
        # column kernels: each output row is a per-channel (D, kh) @ (kh, W) matmul
        k = kernels[None, :, :, :, 0]
        for i in range(Ho):
            out[:, :, :, i, :] = np.matmul(k, xp[:, :, i:i + kh, :])
    else:
        # one broadcast multiply-add per kernel tap
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, None, i:i + Ho, j:j + Wo] * kernels[None, :, :, i, j, None, None]
    out = out.reshape(N, C * D, Ho, Wo)
    return out[0] if single else out


def depthwise_conv2d_backward(x, kernels, grad, padding: str = "valid", need_input_grad: bool = True):
    x, single = _promote(x)
    grad, _ = _promote(grad)
    C, D, kh, kw = kernels.shape
    N = x.shape[0]
    g = grad.reshape(N, C, D, grad.shape[2], grad.shape[3])
    xp, _ = _pad(x, kh, kw, padding)
    Ho, Wo = g.shape[3], g.shape[4]
    dk = np.empty((C, D, kh, kw))
    if kw == 1:
        acc = np.zeros((C, D, kh))
        for i in range(Ho):
            acc += np.matmul(g[:, :, :, i, :], xp[:, :, i:i + kh, :].transpose(0, 1, 3, 2)).sum(axis=0)
        dk[..., 0] = acc
    else:
        for i in range(kh):
            for j in range(kw):
                dk[:, :, i, j] = np.einsum("ncdhw,nchw->cd", g, xp[:, :, i:i + Ho, j:j + Wo])
    dx = None
    if need_input_grad:
        dx = depthwise_input_grad(grad, kernels, x.shape[2:], padding)
        if single:
            dx = dx[0]
    return dx, dk


def depthwise_input_grad(grad, kernels, in_hw, padding: str = "valid") -> np.ndarray:
    C, D, kh, kw = kernels.shape
    N = grad.shape[0]
    g = grad.reshape(N, C, D, grad.shape[2], grad.shape[3])
    Ho, Wo = g.shape[3], g.shape[4]
    # fold the multiplier axis first: (N, C, H', W') per tap
    dxp = np.zeros((N, C, Ho + kh - 1, Wo + kw - 1))
    if kw == 1:
        kt = kernels[None, :, :, :, 0].transpose(0, 1, 3, 2)
        for i in range(Ho):
            dxp[:, :, i:i + kh, :] += np.matmul(kt, g[:, :, :, i, :])
    else:
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + Ho, j:j + Wo] += np.einsum("ncdhw,cd->nchw", g, kernels[:, :, i, j])
    ph = _pad_amounts(kh, padding)
    pw = _pad_amounts(kw, padding)
    H, W = in_hw
    return np.ascontiguousarray(dxp[:, :, ph[0]:ph[0] + H, pw[0]:pw[0] + W])


def separable_conv2d(x, depth_kernels, point_kernels, padding: str = "same") -> np.ndarray:
    """Depthwise (multiplier 1) convolution followed by a 1x1 pointwise mix."""
    depth_kernels = as_tensor(depth_kernels)
    if depth_kernels.ndim != 4 or depth_kernels.shape[1] != 1:
        raise ShapeError(f"separable depth kernels must be (C, 1, kh, kw), got {depth_kernels.shape}")
    point_kernels = as_tensor(point_kernels)
    if point_kernels.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernels must be (Cout, C, 1, 1), got {point_kernels.shape}")
    return conv2d(depthwise_conv2d(x, depth_kernels, padding), point_kernels, None, "valid")


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def pool_output_hw(H: int, W: int, pool: tuple[int, int]) -> tuple[int, int]:
    ph, pw = pool
    if ph < 1 or pw < 1:
        raise ValueError(f"pool sizes must be positive, got {pool}")
    if ph > H or pw > W:
        raise ShapeError(f"pool {pool} exceeds input extent ({H},{W})")
    return H // ph, W // pw


def avg_pool2d(x, pool: tuple[int, int]) -> np.ndarray:
    """Average pooling; incomplete right/bottom windows are truncated."""
    x, single = _promote(x)
    N, C, H, W = x.shape
    ph, pw = pool
    Ho, Wo = pool_output_hw(H, W, pool)
    out = x[:, :, :Ho * ph, :Wo * pw].reshape(N, C, Ho, ph, Wo, pw).mean(axis=(3, 5))
    return out[0] if single else out


def avg_pool2d_backward(grad, in_shape, pool: tuple[int, int]) -> np.ndarray:
    grad, single = _promote(grad)
    ph, pw = pool
    N, C, H, W = (grad.shape[0],) + tuple(in_shape[-3:])
    Ho, Wo = grad.shape[2], grad.shape[3]
    dx = np.zeros((N, C, H, W))
    spread = np.repeat(np.repeat(grad, ph, axis=2), pw, axis=3) / (ph * pw)
    dx[:, :, :Ho * ph, :Wo * pw] = spread
    return dx[0] if single else dx


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def _bn_bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _channel_sum(x: np.ndarray) -> np.ndarray:
    # contiguous inner reduction first; much faster than sum(axis=(0, 2, 3))
    n, c = x.shape[:2]
    return x.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batch_norm_train(x, scale, shift, running_mean, running_var,
                     momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Normalize with batch statistics per channel (axis 1).

    Returns ``(y, cache, new_running_mean, new_running_var)``. Running stats
    are returned rather than updated in place.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"batch norm expects (N, C, ...), got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("batch norm in train mode needs a batch of at least 2")
    nd = x.ndim
    m = x.size // x.shape[1]
    mean = _channel_sum(x) / m
    xhat = x - _bn_bcast(mean, nd)
    var = _channel_sum(xhat * xhat) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= _bn_bcast(inv_std, nd)
    y = xhat * _bn_bcast(scale, nd)
    y += _bn_bcast(shift, nd)
    new_rm = momentum * running_mean + (1.0 - momentum) * mean
    new_rv = momentum * running_var + (1.0 - momentum) * var
    return y, (xhat, inv_std), new_rm, new_rv


def batch_norm_train_backward(grad, cache, scale):
    """Exact gradient of train-mode batch norm; returns ``(dx, dscale, dshift)``."""
    xhat, inv_std = cache
    nd = grad.ndim
    m = grad.size // grad.shape[1]
    dshift = _channel_sum(grad)
    dscale = _channel_sum(grad * xhat)
    # d/dx of scale * xhat with the batch mean and variance folded in
    dx = xhat * _bn_bcast(-dscale / m, nd)
    dx += grad
    dx -= _bn_bcast(dshift / m, nd)
    dx *= _bn_bcast(scale * inv_std, nd)
    return dx, dscale, dshift


def batch_norm_infer(x, scale, shift, running_mean, running_var, eps: float = BN_EPS):
    x = as_tensor(x)
    nd = x.ndim
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return (x - _bn_bcast(running_mean, nd)) * _bn_bcast(scale * inv_std, nd) + _bn_bcast(shift, nd)


def batch_norm_infer_backward(grad, x, scale, running_mean, running_var, eps: float = BN_EPS):
    nd = grad.ndim
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - _bn_bcast(running_mean, nd)) * _bn_bcast(inv_std, nd)
    dx = grad * _bn_bcast(scale * inv_std, nd)
    return dx, _channel_sum(grad * xhat), _channel_sum(grad)


def batch_norm(batch, scale, shift, running_mean, running_var, mode: str = "train",
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Convenience wrapper returning only the normalized output."""
    if mode == "train":
        return batch_norm_train(batch, scale, shift, running_mean, running_var, momentum, eps)[0]
    if mode == "infer":
        return batch_norm_infer(batch, scale, shift, running_mean, running_var, eps)
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# --------------------------------------------------------------------------
# pointwise and dense
# --------------------------------------------------------------------------

def elu(x) -> np.ndarray:
    x = as_tensor(x)
    # expm1(x) >= x for x <= 0, so the max picks the right branch everywhere
    y = np.expm1(np.minimum(x, 0.0))
    if ELU_ALPHA != 1.0:
        y *= ELU_ALPHA
    return np.maximum(x, y, out=y) if y.ndim else np.maximum(x, y)


def elu_grad(x, out=None) -> np.ndarray:
    """Derivative of ELU; pass the forward output ``out`` to skip the exp."""
    x = as_tensor(x)
    if out is not None and ELU_ALPHA == 1.0:
        # out + 1 is exp(x) <= 1 on the negative side and x + 1 > 1 otherwise
        g = out + 1.0
        return np.minimum(g, 1.0, out=g)
    return np.where(x > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def dense(x, weights, bias) -> np.ndarray:
    x = as_tensor(x)
    weights = as_tensor(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    bias = as_tensor(bias)
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} does not match {weights.shape[1]} outputs")
    return x @ weights + bias


def dense_backward(x, weights, grad):
    """Returns ``(dx, dweights, dbias)`` for ``y = x @ W + b``."""
    if grad.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"upstream grad {grad.shape} does not match dense output")
    return grad @ weights.T, x.T @ grad, grad.sum(axis=0)


def sigmoid(z) -> np.ndarray:
    z = as_tensor(z)
    return np.exp(-np.logaddexp(0.0, -z))


def softplus(z) -> np.ndarray:
    z = as_tensor(z)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_bce(logit, label):
    """Binary cross-entropy on a logit: returns ``(loss, dloss/dlogit)``.

    Works element-wise on arrays as well as on scalars.
    """
    logit = as_tensor(logit)
    label = as_tensor(label)
    loss = softplus(logit) - label * logit
    grad = sigmoid(logit) - label
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad
