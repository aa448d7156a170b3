"""Diagonal complex state-space kernel for irregularly timed inputs.

The recurrence is ``x_k = a_k * x_{k-1} + coef_k * (B u_k)`` with
``y_k = Re(C x_k) + D * u_k``. How ``a_k`` and ``coef_k`` depend on the
inter-event gaps is selected by :class:`DiscretizationMode`.

Complex parameters are stored as separate real and imaginary arrays, so
optimizers, checkpoints and finite-difference checks only ever see real
tensors. Gradients of a real loss are returned per real component.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

DEFAULT_CHUNK = 1024


class DiscretizationMode(str, enum.Enum):
    ASYNC = "async"
    DIRAC = "dirac"
    ZOH = "zoh"
    ZOH_UNIT_DELTA = "zoh_unit_delta"

    @classmethod
    def parse(cls, value: str | DiscretizationMode) -> DiscretizationMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown discretization mode {value!r} (choose from {names})") from None


@dataclass
class SSMParams:
    """Learnable tensors of one diagonal SSM with state size H and width N."""

    phi: np.ndarray  # (H,)  Re(Lambda) = -exp(phi)
    theta: np.ndarray  # (H,)  Im(Lambda)
    log_delta: np.ndarray  # (H,)  per-unit timescale delta = exp(log_delta)
    B_re: np.ndarray  # (H, N)
    B_im: np.ndarray  # (H, N)
    C_re: np.ndarray  # (N, H)
    C_im: np.ndarray  # (N, H)
    D: np.ndarray  # (N,)

    def __post_init__(self) -> None:
        H, N = self.B_re.shape
        expected = {
            "phi": (H,), "theta": (H,), "log_delta": (H,), "B_im": (H, N),
            "C_re": (N, H), "C_im": (N, H), "D": (N,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def state_size(self) -> int:
        return self.B_re.shape[0]

    @property
    def width(self) -> int:
        return self.B_re.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.phi.dtype

    @property
    def B(self) -> np.ndarray:
        return _complex(self.B_re, self.B_im)

    @property
    def C(self) -> np.ndarray:
        return _complex(self.C_re, self.C_im)

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    def astype(self, dtype) -> SSMParams:
        return SSMParams(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    @classmethod
    def from_complex(cls, phi, theta, log_delta, B, C, D) -> SSMParams:
        B, C = np.asarray(B), np.asarray(C)
        return cls(
            np.asarray(phi, float), np.asarray(theta, float), np.asarray(log_delta, float),
            B.real.astype(float), B.imag.astype(float), C.real.astype(float), C.imag.astype(float),
            np.asarray(D, float),
        )


@dataclass
class SSMGrads:
    phi: np.ndarray
    theta: np.ndarray
    log_delta: np.ndarray
    B_re: np.ndarray
    B_im: np.ndarray
    C_re: np.ndarray
    C_im: np.ndarray
    D: np.ndarray
    u: np.ndarray
    deltas: np.ndarray

    def params(self) -> SSMParams:
        return SSMParams(**{f.name: getattr(self, f.name) for f in fields(SSMParams)})


def _complex_dtype(dtype) -> np.dtype:
    return np.result_type(dtype, np.complex64)


def _complex(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    out = np.empty(np.broadcast_shapes(re.shape, im.shape), _complex_dtype(re.dtype))
    out.real = re
    out.imag = im
    return out


def cexpm1(z: np.ndarray) -> np.ndarray:
    """``exp(z) - 1`` without cancellation for small ``|z|``."""
    x, y = z.real, z.imag
    half = np.sin(0.5 * y)
    return _complex(np.expm1(x) * np.cos(y) - 2.0 * half * half, np.exp(x) * np.sin(y))


def eigenvalues(p: SSMParams) -> np.ndarray:
    """``Lambda = -exp(phi) + i theta``; the real part is always negative."""
    return _complex(-np.exp(p.phi), p.theta)


def cexp_scaled(lam: np.ndarray, step) -> np.ndarray:
    """``exp(lam * step)`` for real ``step``, computed from real parts
    (much faster than complex ``np.exp`` for single precision)."""
    mag = np.exp(lam.real * step)
    phase = lam.imag * step
    return _complex(mag * np.cos(phase), mag * np.sin(phase))


def _input_coef(lam: np.ndarray, step) -> np.ndarray:
    return cexpm1(lam * step) / lam


def discretize_zoh(lam: np.ndarray, B: np.ndarray, step) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold: ``exp(lam*step)`` and ``lam^-1 (exp(lam*step) - 1) B``.

    ``step`` may be a scalar or broadcast against ``lam``.
    """
    lam_bar = np.exp(lam * step)
    return lam_bar, _input_coef(lam, step)[..., :, None] * B


def discretize_dirac(lam: np.ndarray, B: np.ndarray, deltas) -> tuple[np.ndarray, np.ndarray]:
    """Impulse inputs: per-step transitions ``exp(lam * delta_k)``; B unscaled."""
    deltas = np.asarray(deltas)
    return np.exp(lam * deltas[..., None]), B


def discretize_async(lam: np.ndarray, B: np.ndarray, delta, deltas) -> tuple[np.ndarray, np.ndarray]:
    """Event-time transitions ``exp(lam * delta * delta_k)`` with a static input
    matrix ``lam^-1 (exp(lam * delta) - 1) B`` that ignores the gaps."""
    deltas = np.asarray(deltas)
    lam_bar = np.exp(lam * delta * deltas[..., None])
    return lam_bar, _input_coef(lam, delta)[:, None] * B


def mode_deltas(mode: DiscretizationMode, deltas: np.ndarray) -> np.ndarray:
    """Gaps the discretizer actually sees (unit gaps for the no-timing ablation)."""
    if DiscretizationMode.parse(mode) is DiscretizationMode.ZOH_UNIT_DELTA:
        return np.ones_like(deltas)
    return deltas


# --------------------------------------------------------------------------
# Associative scan
# --------------------------------------------------------------------------


def scan_combine(c_k, c_l):
    """``(a_k, b_k) o (a_l, b_l) = (a_k a_l, a_k b_l + b_k)``.

    ``c_k`` is the later element: it is applied after ``c_l``.
    Identity is ``(1, 0)``.
    """
    a_k, b_k = c_k
    a_l, b_l = c_l
    return a_k * a_l, a_k * b_l + b_k


def _blelloch_inclusive(a: np.ndarray, b: np.ndarray, need_a: bool = True):
    """Work-efficient up-sweep/down-sweep scan along axis 0 (time-major)."""
    n = a.shape[0]
    size = 1 << max(n - 1, 0).bit_length()
    ta = np.ones((size,) + a.shape[1:], a.dtype)
    tb = np.zeros((size,) + b.shape[1:], b.dtype)
    ta[:n] = a
    tb[:n] = b

    stride = 1
    while stride < size:
        left = slice(stride - 1, None, 2 * stride)
        right = slice(2 * stride - 1, None, 2 * stride)
        tb[right] += ta[right] * tb[left]
        ta[right] *= ta[left]
        stride *= 2

    ta[-1] = 1
    tb[-1] = 0
    stride = size // 2
    while stride >= 1:
        left = slice(stride - 1, None, 2 * stride)
        right = slice(2 * stride - 1, None, 2 * stride)
        sum_a, sum_b = ta[left].copy(), tb[left].copy()
        ta[left] = ta[right]
        tb[left] = tb[right]
        tb[right] *= sum_a
        tb[right] += sum_b
        ta[right] *= sum_a
        stride //= 2

    # exclusive -> inclusive
    out_b = tb[:n]
    out_b *= a
    out_b += b
    if not need_a:
        return None, out_b
    out_a = ta[:n]
    out_a *= a
    return out_a, out_b


def associative_scan(
    a: np.ndarray, b: np.ndarray, chunk_size: int = DEFAULT_CHUNK, reverse: bool = False
) -> np.ndarray:
    """Solve ``x_k = a_k x_{k-1} + b_k`` (``x_{-1} = 0``) along axis -2.

    With ``reverse=True`` solves ``x_k = a_k x_{k+1} + b_k`` from the end.
    Long sequences are processed in chunks; each chunk is scanned in parallel
    and the running state is carried between chunks.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    dtype = np.result_type(a, b)
    a = np.broadcast_to(a, b.shape)
    if reverse:
        a, b = a[..., ::-1, :], b[..., ::-1, :]
    # time-major, so every tree level works on contiguous blocks
    a = np.moveaxis(a, -2, 0).astype(dtype, order="C")
    b = np.moveaxis(b, -2, 0).astype(dtype, order="C")
    m = b.shape[0]
    out = np.empty(b.shape, dtype)
    carry = None
    for start in range(0, m, chunk_size):
        stop = min(start + chunk_size, m)
        last = stop >= m
        pa, pb = _blelloch_inclusive(a[start:stop], b[start:stop], need_a=carry is not None)
        if carry is not None:
            pb += pa * carry
        out[start:stop] = pb
        if not last:
            carry = pb[-1].copy()
    out = np.moveaxis(out, 0, -2)
    return out[..., ::-1, :] if reverse else out


def sequential_scan(a: np.ndarray, b: np.ndarray, reverse: bool = False) -> np.ndarray:
    if a.shape != b.shape:
        a = np.broadcast_to(a, b.shape)
    out = np.empty(b.shape, np.result_type(a, b))
    m = b.shape[-2]
    order = range(m - 1, -1, -1) if reverse else range(m)
    x = np.zeros(b.shape[:-2] + b.shape[-1:], out.dtype)
    for k in order:
        x = a[..., k, :] * x + b[..., k, :]
        out[..., k, :] = x
    return out


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------


@dataclass
class SSMCache:
    """Intermediates kept by the forward pass for :func:`ssm_backward`."""

    mode: DiscretizationMode
    lam: np.ndarray  # (H,)
    step: np.ndarray  # (..., M, H) argument of the transition exponential / lam
    a: np.ndarray  # (..., M, H) transitions
    coef_step: np.ndarray | None  # (H,) or (..., M, H); None for Dirac
    coef: np.ndarray | None
    w: np.ndarray  # (..., M, H) B u
    x: np.ndarray  # (..., M, H)
    u: np.ndarray  # (..., M, N)
    deltas: np.ndarray  # (..., M)


def _check_inputs(p: SSMParams, u: np.ndarray, deltas: np.ndarray) -> None:
    if u.ndim < 2 or u.shape[-1] != p.width:
        raise ValueError(f"u must have shape (..., M, {p.width}), got {u.shape}")
    if deltas.shape != u.shape[:-1]:
        raise ValueError(f"deltas shape {deltas.shape} does not match u shape {u.shape}")


def _elements(p: SSMParams, mode, u: np.ndarray, deltas: np.ndarray) -> SSMCache:
    mode = DiscretizationMode.parse(mode)
    u = np.asarray(u)
    deltas = np.asarray(deltas)
    _check_inputs(p, u, deltas)
    dtype = p.dtype
    u = u.astype(dtype, copy=False)
    deltas = deltas.astype(dtype, copy=False)
    lam = eigenvalues(p)
    d = mode_deltas(mode, deltas)[..., None]
    if mode is DiscretizationMode.DIRAC:
        step = np.broadcast_to(d, d.shape[:-1] + lam.shape)
    else:
        step = p.delta * d
    a = cexp_scaled(lam, step)
    w = _complex(u @ p.B_re.T, u @ p.B_im.T)
    if mode is DiscretizationMode.DIRAC:
        coef_step = coef = None
    elif mode is DiscretizationMode.ASYNC:
        coef_step = p.delta
        coef = _input_coef(lam, coef_step)
    else:
        coef_step = step
        coef = _input_coef(lam, coef_step)
    return SSMCache(mode, lam, step, a, coef_step, coef, w, None, u, deltas)


def _parts(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # contiguous copies: BLAS falls back to slow loops on strided views
    return np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag)


def _readout(p: SSMParams, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    xr, xi = _parts(x)
    return xr @ p.C_re.T - xi @ p.C_im.T + u * p.D


def _forward(p, mode, u, deltas, solver, return_cache):
    cache = _elements(p, mode, u, deltas)
    b = cache.w if cache.coef is None else cache.coef * cache.w
    cache.x = solver(cache.a, b)
    y = _readout(p, cache.x, cache.u)
    if return_cache:
        return cache.x, y, cache
    return cache.x, y


def ssm_forward_sequential(p: SSMParams, mode, u, deltas, return_cache: bool = False):
    """Reference left-to-right recurrence.

    Args:
        p: parameters; their dtype sets the compute precision.
        mode: a :class:`DiscretizationMode` or its string value.
        u: real inputs ``(..., M, N)``.
        deltas: gaps in seconds ``(..., M)``.

    Returns:
        ``(x, y)`` with complex states ``(..., M, H)`` and real outputs
        ``(..., M, N)``, plus an :class:`SSMCache` if requested.
    """
    return _forward(p, mode, u, deltas, sequential_scan, return_cache)


def ssm_forward_scan(
    p: SSMParams, mode, u, deltas, return_cache: bool = False, chunk_size: int = DEFAULT_CHUNK
):
    """Same contract as :func:`ssm_forward_sequential`, via a parallel prefix scan."""
    return _forward(
        p, mode, u, deltas, lambda a, b: associative_scan(a, b, chunk_size), return_cache
    )


def ssm_state_closed_form(lam, B, u, t, k: int) -> np.ndarray:
    """Direct sum ``x(t_k) = sum_{m<=k} exp(lam (t_k - t_m)) B u_m``.

    Quadratic-cost reference for impulse-coded inputs; test use only.
    """
    lam, B, u, t = (np.asarray(v) for v in (lam, B, u, t))
    decay = np.exp(lam[None, :] * (t[k] - t[: k + 1])[:, None])  # (k+1, H)
    return np.einsum("mh,hn,mn->h", decay, B, u[: k + 1])


# --------------------------------------------------------------------------
# Adjoint
# --------------------------------------------------------------------------


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    x = x.sum(axis=tuple(range(lead))) if lead else x
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    return x.sum(axis=keep, keepdims=True) if keep else x


def ssm_backward(
    p: SSMParams, cache: SSMCache, grad_y: np.ndarray, chunk_size: int = DEFAULT_CHUNK
) -> SSMGrads:
    """Reverse-mode gradients of ``sum(grad_y * y)``.

    The state adjoint ``g_k = conj(a_{k+1}) g_{k+1} + dL/dx_k`` is solved with
    the same associative scan run from the end of the sequence. Complex
    quantities carry gradients as ``dL/dRe + i dL/dIm``.
    """
    grad_y = np.asarray(grad_y)
    if cache.x is None or grad_y.shape != cache.u.shape:
        raise ValueError(
            f"grad_y shape {grad_y.shape} does not match cached output shape {cache.u.shape}"
        )
    if cache.lam.shape != (p.state_size,):
        raise ValueError("cache was produced with a different state size")
    grad_y = grad_y.astype(p.dtype, copy=False)
    mode, lam, x, u = cache.mode, cache.lam, cache.x, cache.u

    flat = lambda arr: arr.reshape(-1, arr.shape[-1])
    xr, xi = _parts(x)
    g_C_re = flat(grad_y).T @ flat(xr)
    g_C_im = -(flat(grad_y).T @ flat(xi))
    g_D = (grad_y * u).reshape(-1, u.shape[-1]).sum(axis=0)
    g_u = grad_y * p.D

    direct = _complex(grad_y @ p.C_re, -(grad_y @ p.C_im))
    shifted = np.ones_like(cache.a)
    shifted[..., :-1, :] = np.conj(cache.a[..., 1:, :])
    adj = associative_scan(shifted, direct, chunk_size, reverse=True)

    x_prev = np.zeros_like(x)
    x_prev[..., 1:, :] = x[..., :-1, :]
    g_a = np.conj(x_prev) * adj

    if cache.coef is None:
        g_w = adj
    else:
        g_coef = np.conj(cache.w) * adj
        g_w = np.conj(cache.coef) * adj
    gw_re, gw_im = _parts(g_w)
    g_B_re = flat(gw_re).T @ flat(u)
    g_B_im = flat(gw_im).T @ flat(u)
    g_u = g_u + gw_re @ p.B_re + gw_im @ p.B_im

    # a = exp(lam * step)
    g_z = np.conj(cache.a) * g_a
    g_lam = _sum_to(cache.step * g_z, lam.shape)
    g_step = (np.conj(lam) * g_z).real
    g_delta = np.zeros_like(p.phi)

    if cache.coef is not None:
        # coef = expm1(lam s) / lam:  d/dlam = (s e - coef) / lam,  d/ds = e
        s = cache.coef_step
        e = cexp_scaled(lam, s)
        dcoef_dlam = (s * e - cache.coef) / lam
        g_coef_sum = _sum_to(g_coef, np.shape(s)) if np.ndim(s) == 1 else g_coef
        g_lam = g_lam + _sum_to(np.conj(dcoef_dlam) * g_coef_sum, lam.shape)
        g_s = (np.conj(e) * g_coef_sum).real
        if mode is DiscretizationMode.ASYNC:
            g_delta = g_delta + g_s
        else:
            g_step = g_step + g_s

    d_used = mode_deltas(mode, cache.deltas)
    if mode is DiscretizationMode.DIRAC:
        g_deltas = g_step.sum(axis=-1)
    else:
        g_delta = g_delta + _sum_to(g_step * d_used[..., None], lam.shape)
        g_deltas = (g_step * p.delta).sum(axis=-1)
    if mode is DiscretizationMode.ZOH_UNIT_DELTA:
        g_deltas = np.zeros_like(cache.deltas)

    return SSMGrads(
        phi=g_lam.real * -np.exp(p.phi),
        theta=g_lam.imag.copy(),
        log_delta=g_delta * p.delta,
        B_re=g_B_re,
        B_im=g_B_im,
        C_re=g_C_re,
        C_im=g_C_im,
        D=g_D,
        u=g_u,
        deltas=g_deltas,
    )


def init_ssm_params(
    state_size: int,
    width: int,
    rng: np.random.Generator,
    re_range: tuple[float, float] = (0.1, 1.0),
    delta_range: tuple[float, float] = (10.0, 1e4),
    dtype=np.float64,
) -> SSMParams:
    """Random stable parameters.

    ``|Re Lambda|`` and ``delta`` are log-uniform over their ranges, the
    imaginary parts uniform on ``[0, pi)``. B and C are complex Gaussian
    with fan-in scaling; D starts at one.
    """
    lo, hi = np.log(re_range[0]), np.log(re_range[1])
    phi = rng.uniform(lo, hi, state_size)
    theta = rng.uniform(0.0, np.pi, state_size)
    log_delta = rng.uniform(np.log(delta_range[0]), np.log(delta_range[1]), state_size)
    b_scale = 1.0 / np.sqrt(2.0 * width)
    c_scale = 1.0 / np.sqrt(2.0 * state_size)
    p = SSMParams(
        phi=phi,
        theta=theta,
        log_delta=log_delta,
        B_re=rng.normal(0.0, b_scale, (state_size, width)),
        B_im=rng.normal(0.0, b_scale, (state_size, width)),
        C_re=rng.normal(0.0, c_scale, (width, state_size)),
        C_im=rng.normal(0.0, c_scale, (width, state_size)),
        D=np.ones(width),
    )
    return p.astype(dtype)


__all__ = [
    "DiscretizationMode", "SSMParams", "SSMGrads", "SSMCache", "eigenvalues", "cexpm1",
    "discretize_zoh", "discretize_dirac", "discretize_async", "mode_deltas", "scan_combine",
    "associative_scan", "sequential_scan", "ssm_forward_sequential", "ssm_forward_scan",
    "ssm_state_closed_form", "ssm_backward", "init_ssm_params",
]
