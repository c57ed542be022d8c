"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Every differentiable operation is a method on :class:`Tape`.  A tape records
the operations executed through it together with a closure that maps the
output gradient to input gradients; :meth:`Tape.backward` replays the record
exactly once, in reverse order.  A tape built with ``record=False`` runs the
same forward arithmetic without keeping anything, which is what inference
uses.

Values are float32 unless the caller hands in float64 arrays (the gradient
oracle does, so that central differences are accurate).
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedsab.errors import ConfigError, FormatError, UsageError

DTYPE = np.float32


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        if grad is not None and np.shape(grad) != arr.shape:
            raise ValueError(f"grad shape {np.shape(grad)} != data shape {arr.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ParamSet(dict):
    """Ordered mapping of parameter name to :class:`Tensor`.

    Plain ``dict`` ordering (insertion order) gives the deterministic
    iteration the serializer and the aggregator rely on.
    """

    def conformant(self, other: ParamSet) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == other[k].shape for k in self)

    def require_conformant(self, other: ParamSet, what: str = "parameter sets") -> None:
        if not self.conformant(other):
            mine = [(k, v.shape) for k, v in self.items()]
            theirs = [(k, v.shape) for k, v in other.items()]
            raise ConfigError(f"non-conformant {what}: {mine} vs {theirs}")

    def copy(self) -> ParamSet:
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> ParamSet:
        return ParamSet((k, Tensor(np.zeros_like(v.data))) for k, v in self.items())

    def astype(self, dtype) -> ParamSet:
        return ParamSet((k, Tensor(v.data.astype(dtype))) for k, v in self.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self.values()]) if self else np.zeros(0, DTYPE)

    def unflatten(self, vec: np.ndarray) -> ParamSet:
        out, i = ParamSet(), 0
        for k, v in self.items():
            out[k] = Tensor(np.asarray(vec[i : i + v.size], dtype=v.data.dtype).reshape(v.shape))
            i += v.size
        return out

    def add(self, other: ParamSet, scale: float = 1.0) -> ParamSet:
        """Return ``self + scale * other``."""
        self.require_conformant(other)
        return ParamSet(
            (k, Tensor((v.data + v.data.dtype.type(scale) * other[k].data).astype(v.data.dtype)))
            for k, v in self.items()
        )

    def sub(self, other: ParamSet) -> ParamSet:
        return self.add(other, -1.0)

    def allclose(self, other: ParamSet, atol: float = 0.0) -> bool:
        return self.conformant(other) and all(
            np.allclose(v.data, other[k].data, rtol=0.0, atol=atol) for k, v in self.items()
        )


def sgd_update(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """One plain SGD step, ``p <- p - lr * g``; returns a new set."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    params.require_conformant(grads, "params/grads")
    return params.add(grads, -lr)


class Adam:
    """Adam optimizer state over a ParamSet (used for the stego networks)."""

    def __init__(self, params: ParamSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        params.require_conformant(grads, "params/grads")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = ParamSet()
        for k, p in params.items():
            g = grads[k].data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = Tensor((p.data - upd).astype(p.data.dtype))
        return out


class Tape:
    """Ordered record of executed operations.

    Use one tape per forward pass.  ``backward`` may be called once; gradients
    of any tensor that took part (parameters or intermediate activations) are
    then available through :meth:`grad`.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._grads: dict[int, np.ndarray] | None = None
        self.consumed = False
        # filled in by models.forward_pass
        self.params: ParamSet | None = None
        self.output: Tensor | None = None
        self.taps: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._ops)

    def _emit(self, out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        t = Tensor(out)
        if self.record:
            self._ops.append((t, parents, backward))
        return t

    # -- replay -----------------------------------------------------------
    def backward(self, output: Tensor, seed=None) -> None:
        if not self.record:
            raise UsageError("tape was created with record=False")
        if self.consumed:
            raise UsageError("tape already consumed; run a new forward pass")
        self.consumed = True
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.shape:
            raise ConfigError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): seed}
        for out, parents, fn in reversed(self._ops):
            g = grads.get(id(out))
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        if self._grads is None:
            raise UsageError("backward has not been run on this tape")
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)

    def grads_for(self, params: ParamSet) -> ParamSet:
        return ParamSet((k, Tensor(self.grad(v))) for k, v in params.items())

    # -- layers -----------------------------------------------------------
    def conv2d(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        """Stride-1 convolution with symmetric zero padding (odd kernels)."""
        X, W = x.data, w.data
        B, C, H, Wd = X.shape
        O, C2, k, k2 = W.shape
        if C != C2 or k != k2 or k % 2 == 0:
            raise ConfigError(f"conv2d: input {X.shape} incompatible with kernel {W.shape}")
        cols = _im2col(X, k)
        out = _col_matmul(cols, W, B, H, Wd)
        if b is not None:
            out += b.data[None, :, None, None]

        def backward(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
            dW = (g2.T @ cols).reshape(O, k, k, C).transpose(0, 3, 1, 2)
            # input gradient = correlation of g with the spatially flipped, transposed kernel
            Wt = np.ascontiguousarray(W[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dX = _col_matmul(_im2col(g, k), Wt, B, H, Wd)
            if b is None:
                return dX, dW
            return dX, dW, g.sum(axis=(0, 2, 3))

        parents = (x, w) if b is None else (x, w, b)
        return self._emit(out, parents, backward)

    def dense(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        """``flatten(x) @ w + b`` with ``w`` laid out [in, out]."""
        X = x.data.reshape(x.shape[0], -1)
        if X.shape[1] != w.shape[0]:
            raise ConfigError(f"dense: input features {X.shape[1]} != weight rows {w.shape[0]}")
        out = X @ w.data
        if b is not None:
            out = out + b.data

        def backward(g):
            dX = (g @ w.data.T).reshape(x.shape)
            dW = X.T @ g
            return (dX, dW) if b is None else (dX, dW, g.sum(axis=0))

        parents = (x, w) if b is None else (x, w, b)
        return self._emit(out, parents, backward)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0
        return self._emit(x.data * mask, (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Tensor) -> Tensor:
        s = _sigmoid(x.data)
        return self._emit(s, (x,), lambda g: (g * s * (1 - s),))

    def maxpool2(self, x: Tensor) -> Tensor:
        """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""
        X = x.data
        B, C, H, W = X.shape
        H2, W2 = H // 2, W // 2
        if H2 == 0 or W2 == 0:
            raise ConfigError(f"maxpool2: spatial size {(H, W)} too small")
        win = X[:, :, : 2 * H2, : 2 * W2].reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(B, C, H2, W2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            d = np.zeros((B, C, H2, W2, 4), dtype=g.dtype)
            np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
            d = d.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H2, 2 * W2)
            dX = np.zeros_like(X)
            dX[:, :, : 2 * H2, : 2 * W2] = d
            return (dX,)

        return self._emit(out, (x,), backward)

    def avgpool2(self, x: Tensor) -> Tensor:
        X = x.data
        B, C, H, W = X.shape
        H2, W2 = H // 2, W // 2
        out = X[:, :, : 2 * H2, : 2 * W2].reshape(B, C, H2, 2, W2, 2).mean(axis=(3, 5))

        def backward(g):
            dX = np.zeros_like(X)
            dX[:, :, : 2 * H2, : 2 * W2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4
            return (dX,)

        return self._emit(out, (x,), backward)

    def upsample2(self, x: Tensor) -> Tensor:
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
        B, C, H, W = x.shape
        return self._emit(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))

    def upsample_to(self, x: Tensor, size: tuple[int, int]) -> Tensor:
        """2x nearest upsample followed by zero padding / cropping to ``size``."""
        up = self.upsample2(x)
        H, W = size
        h, w = up.shape[2:]
        if (h, w) == (H, W):
            return up
        out = np.zeros(up.shape[:2] + (H, W), dtype=up.data.dtype)
        hh, ww = min(h, H), min(w, W)
        out[:, :, :hh, :ww] = up.data[:, :, :hh, :ww]

        def backward(g):
            d = np.zeros_like(up.data)
            d[:, :, :hh, :ww] = g[:, :, :hh, :ww]
            return (d,)

        return self._emit(out, (up,), backward)

    def concat(self, xs: Sequence[Tensor]) -> Tensor:
        """Concatenate along the channel axis."""
        sizes = [t.shape[1] for t in xs]
        out = np.concatenate([t.data for t in xs], axis=1)
        cuts = np.cumsum(sizes)[:-1]
        return self._emit(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=1)))

    def global_avg_pool(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        out = x.data.mean(axis=(2, 3))
        return self._emit(
            out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),)
        )

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        return self._emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    # -- elementwise / reductions ----------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ConfigError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._emit(a.data + b.data, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ConfigError(f"sub: shapes {a.shape} and {b.shape} differ")
        return self._emit(a.data - b.data, (a, b), lambda g: (g, -g))

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = x.data.dtype.type(c)
        return self._emit(x.data * c, (x,), lambda g: (g * c,))

    def clamp(self, x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
        inside = (x.data >= lo) & (x.data <= hi)
        return self._emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))

    def mean(self, x: Tensor) -> Tensor:
        n = x.size
        return self._emit(
            np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype),
            (x,),
            lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),),
        )

    def weighted_sum(self, terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        """Scalar ``sum_i w_i * t_i`` over scalar tensors."""
        dt = terms[0].data.dtype
        val = sum(float(w) * float(t.data) for t, w in zip(terms, weights))
        return self._emit(
            np.asarray(val, dtype=dt),
            tuple(terms),
            lambda g: tuple(np.asarray(g * w, dtype=dt) for w in weights),
        )

    def mse(self, a: Tensor, b: Tensor) -> Tensor:
        """Mean squared difference, accumulated in float64."""
        if a.shape != b.shape:
            raise ConfigError(f"mse: shapes {a.shape} and {b.shape} differ")
        diff = a.data.astype(np.float64) - b.data
        n = diff.size
        val = np.asarray((diff * diff).sum() / n, dtype=a.data.dtype)

        def backward(g):
            d = (2.0 * float(g) / n * diff).astype(a.data.dtype)
            return d, -d

        return self._emit(val, (a, b), backward)

    def bce_with_logits(self, z: Tensor, target: np.ndarray) -> Tensor:
        """Mean over elements of ``-[s log sig(z) + (1-s) log sig(-z)]``."""
        zz = z.data.astype(np.float64)
        s = np.asarray(target, dtype=np.float64).reshape(zz.shape)
        n = zz.size
        per = np.maximum(zz, 0) - zz * s + np.log1p(np.exp(-np.abs(zz)))
        val = np.asarray(per.sum() / n, dtype=z.data.dtype)

        def backward(g):
            return (((_sigmoid(zz) - s) * float(g) / n).astype(z.data.dtype),)

        return self._emit(val, (z,), backward)


def _im2col(X: np.ndarray, k: int) -> np.ndarray:
    """[B,C,H,W] -> [B*H*W, k*k*C] patches, zero padded, (ky, kx, c) order."""
    B, C, H, W = X.shape
    p = k // 2
    Xn = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=X.dtype)
    Xn[:, p : p + H, p : p + W, :] = X.transpose(0, 2, 3, 1)
    if k == 1:
        return Xn.reshape(B * H * W, C)
    win = sliding_window_view(Xn, (k, k), axis=(1, 2))  # B,H,W,C,k,k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, k * k * C)


def _col_matmul(cols: np.ndarray, W: np.ndarray, B: int, H: int, Wd: int) -> np.ndarray:
    O = W.shape[0]
    Wm = W.transpose(0, 2, 3, 1).reshape(O, -1)
    return np.ascontiguousarray((cols @ Wm.T).reshape(B, H, Wd, O).transpose(0, 3, 1, 2))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    The loss is accumulated in float64; the gradient ``(softmax - onehot)/B``
    is returned in the logits' dtype.
    """
    from fedsab.errors import InputError

    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = z.shape
    if labels.shape != (B,):
        raise InputError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    zz = z.astype(np.float64)
    zz = zz - zz.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zz).sum(axis=1))
    loss = float(np.mean(logsum - zz[np.arange(B), labels]))
    p = np.exp(zz - logsum[:, None])
    p[np.arange(B), labels] -= 1.0
    dtype = z.dtype if z.dtype in (np.float32, np.float64) else DTYPE
    return loss, (p / B).astype(dtype)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(DTYPE))


# -- ParamSet binary format ------------------------------------------------
MAGIC = b"FSAB0001"


def save_params(params: ParamSet, path: str | Path) -> None:
    """Write ``params`` as: magic, u32 count, then per tensor u16 name length,
    UTF-8 name, u8 rank, u32 extents, little-endian f32 payload."""
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(t.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8

    def take(n: int, field: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated while reading {field}")
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n, f"payload of {name}"), dtype="<f4").astype(DTYPE)
        params[name] = Tensor(data.reshape(shape))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return params


def save_bundle(bundle: dict[str, ParamSet], path: str | Path) -> None:
    """Several named ParamSets in one file, names prefixed ``<net>/``."""
    flat = ParamSet()
    for net, ps in bundle.items():
        for k, v in ps.items():
            flat[f"{net}/{k}"] = v
    save_params(flat, path)


def load_bundle(path: str | Path) -> dict[str, ParamSet]:
    out: dict[str, ParamSet] = {}
    for k, v in load_params(path).items():
        net, _, name = k.partition("/")
        out.setdefault(net, ParamSet())[name] = v
    return out


def stack(tensors: Iterable[Tensor]) -> Tensor:
    return Tensor(np.stack([t.data for t in tensors]))
