"""Dense-tensor forward ops with reverse-mode gradient accumulation.

Everything is 64-bit: the models here are small enough that reliable
gradient checks matter more than speed.  A ``Tape`` records forward ops
in order; ``Tape.backward`` replays them in strict reverse order, so a
node's gradient is fully accumulated before it propagates to its inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParameterStore",
    "grad_check",
]


class Tensor:
    """A rank <= 4 float64 array with a gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad = np.zeros_like(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


# Cached index matrices for circular correlation, keyed by dimension.
# _corr_index(d)[k, i] = (k + i) % d; _conv_index(d)[m, k] = (m - k) % d.
_CORR_IDX: dict[int, np.ndarray] = {}
_CONV_IDX: dict[int, np.ndarray] = {}


def _corr_index(d: int) -> np.ndarray:
    idx = _CORR_IDX.get(d)
    if idx is None:
        k = np.arange(d)
        idx = (k[:, None] + k[None, :]) % d
        _CORR_IDX[d] = idx
    return idx


def _conv_index(d: int) -> np.ndarray:
    idx = _CONV_IDX.get(d)
    if idx is None:
        k = np.arange(d)
        idx = (k[:, None] - k[None, :]) % d
        _CONV_IDX[d] = idx
    return idx


def _scatter_add_rows(target: np.ndarray, index: np.ndarray, rows: np.ndarray) -> None:
    """target[index[i]] += rows[i] with repeated indices accumulated.

    bincount per column beats np.add.at by a wide margin at the sizes
    seen here (hundreds of rows, dim <= a few hundred).
    """
    n = target.shape[0]
    if rows.ndim == 1:
        target += np.bincount(index, weights=rows, minlength=n)
        return
    for col in range(rows.shape[1]):
        target[:, col] += np.bincount(index, weights=rows[:, col], minlength=n)


def _as_index(indices, n: int, what: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"{what} expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{what} index out of range [0, {n})")
    return idx


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Append-only record of forward ops, replayed in reverse for gradients.

    One training step owns one tape; ops are methods so every forward
    result is recorded.  Backward closures read ``out.grad`` and add into
    the input tensors' ``grad`` buffers.
    """

    def __init__(self) -> None:
        self._records: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._records)

    # -- embedding / linear algebra -------------------------------------

    def lookup(self, table: Tensor, index: int) -> Tensor:
        """Fetch row ``index`` of a 2-D table; backward scatters into that row."""
        if table.data.ndim != 2:
            raise ValueError("lookup expects a 2-D table")
        n = table.data.shape[0]
        if not 0 <= index < n:
            raise IndexError(f"lookup index {index} out of range [0, {n})")
        out = Tensor(table.data[index])

        def backward() -> None:
            table.grad[index] += out.grad

        self._records.append(backward)
        return out

    def affine(self, w: Tensor, x: Tensor) -> Tensor:
        """Matrix-vector product ``w @ x`` (w: m x n, x: n)."""
        if w.data.ndim != 2 or x.data.ndim != 1 or w.data.shape[1] != x.data.shape[0]:
            raise ValueError(f"affine shape mismatch: {w.shape} @ {x.shape}")
        out = Tensor(w.data @ x.data)

        def backward() -> None:
            w.grad += np.outer(out.grad, x.data)
            x.grad += w.data.T @ out.grad

        self._records.append(backward)
        return out

    def concat(self, *xs: Tensor) -> Tensor:
        if not xs:
            raise ValueError("concat of zero tensors")
        if any(x.data.ndim != 1 for x in xs):
            raise ValueError("concat expects 1-D tensors")
        out = Tensor(np.concatenate([x.data for x in xs]))
        offsets = np.cumsum([0] + [x.data.shape[0] for x in xs])

        def backward() -> None:
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                x.grad += out.grad[lo:hi]

        self._records.append(backward)
        return out

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = Tensor(a.data + b.data)

        def backward() -> None:
            a.grad += out.grad
            b.grad += out.grad

        self._records.append(backward)
        return out

    def scale(self, x: Tensor, factor: float) -> Tensor:
        out = Tensor(x.data * factor)

        def backward() -> None:
            x.grad += factor * out.grad

        self._records.append(backward)
        return out

    def stack_rows(self, xs: list[Tensor]) -> Tensor:
        if not xs:
            raise ValueError("stack_rows of zero tensors")
        if any(x.data.ndim != 1 for x in xs):
            raise ValueError("stack_rows expects 1-D tensors")
        out = Tensor(np.stack([x.data for x in xs]))

        def backward() -> None:
            for i, x in enumerate(xs):
                x.grad += out.grad[i]

        self._records.append(backward)
        return out

    def mean_rows(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise ValueError("mean_rows expects a 2-D tensor")
        n = x.data.shape[0]
        out = Tensor(x.data.mean(axis=0))

        def backward() -> None:
            x.grad += out.grad / n

        self._records.append(backward)
        return out

    def weighted_sum(self, weights: Tensor, rows: Tensor) -> Tensor:
        """``sum_i weights[i] * rows[i]`` over the rows of a 2-D tensor."""
        if weights.data.ndim != 1 or rows.data.ndim != 2:
            raise ValueError("weighted_sum expects weights (k,) and rows (k, d)")
        if weights.data.shape[0] != rows.data.shape[0]:
            raise ValueError("weighted_sum length mismatch")
        out = Tensor(weights.data @ rows.data)

        def backward() -> None:
            weights.grad += rows.data @ out.grad
            rows.grad += np.outer(weights.data, out.grad)

        self._records.append(backward)
        return out

    def add_n(self, xs: list[Tensor]) -> Tensor:
        """Sum of same-shape tensors in one record (left-to-right order)."""
        if not xs:
            raise ValueError("add_n of zero tensors")
        if any(x.data.shape != xs[0].data.shape for x in xs):
            raise ValueError("add_n shape mismatch")
        acc = xs[0].data.copy()
        for x in xs[1:]:
            acc += x.data
        out = Tensor(acc)

        def backward() -> None:
            for x in xs:
                x.grad += out.grad

        self._records.append(backward)
        return out

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape or a.data.ndim != 1:
            raise ValueError(f"dot shape mismatch: {a.shape} vs {b.shape}")
        out = Tensor(np.dot(a.data, b.data))

        def backward() -> None:
            a.grad += out.grad * b.data
            b.grad += out.grad * a.data

        self._records.append(backward)
        return out

    def tensor_sum(self, x: Tensor) -> Tensor:
        out = Tensor(x.data.sum())

        def backward() -> None:
            x.grad += out.grad

        self._records.append(backward)
        return out

    # -- nonlinearities -------------------------------------------------

    def relu(self, x: Tensor) -> Tensor:
        out = Tensor(np.maximum(x.data, 0.0))
        # subgradient at 0 fixed to the positive side (1)
        mask = x.data >= 0.0

        def backward() -> None:
            x.grad += np.where(mask, out.grad, 0.0)

        self._records.append(backward)
        return out

    def leaky_relu(self, x: Tensor, slope: float) -> Tensor:
        out = Tensor(np.where(x.data >= 0.0, x.data, slope * x.data))
        mask = x.data >= 0.0

        def backward() -> None:
            x.grad += np.where(mask, 1.0, slope) * out.grad

        self._records.append(backward)
        return out

    def sigmoid(self, x: Tensor) -> Tensor:
        out = Tensor(_stable_sigmoid(x.data))

        def backward() -> None:
            s = out.data
            x.grad += s * (1.0 - s) * out.grad

        self._records.append(backward)
        return out

    def masked_softmax(self, logits: Tensor) -> Tensor:
        """Softmax over a 1-D logit vector, max-subtracted for stability."""
        if logits.data.ndim != 1:
            raise ValueError("masked_softmax expects a 1-D tensor")
        if logits.data.shape[0] == 0:
            raise ValueError("masked_softmax over an empty set")
        shifted = np.exp(logits.data - logits.data.max())
        out = Tensor(shifted / shifted.sum())

        def backward() -> None:
            s = out.data
            logits.grad += s * (out.grad - np.dot(out.grad, s))

        self._records.append(backward)
        return out

    # -- circular correlation -------------------------------------------

    def circ_corr(self, a: Tensor, b: Tensor) -> Tensor:
        """Circular correlation: out[k] = sum_i a[i] * b[(k + i) mod d]."""
        if a.data.shape != b.data.shape or a.data.ndim != 1:
            raise ValueError(f"circ_corr shape mismatch: {a.shape} vs {b.shape}")
        d = a.data.shape[0]
        b_shifted = b.data[_corr_index(d)]
        out = Tensor(b_shifted @ a.data)

        def backward() -> None:
            a.grad += b_shifted.T @ out.grad
            b.grad += a.data[_conv_index(d)] @ out.grad

        self._records.append(backward)
        return out

    # -- batched row ops -------------------------------------------------
    #
    # These keep whole node populations in single (m, d) tensors so a
    # full aggregation layer costs a fixed handful of records instead of
    # one per node.  Semantics match the per-vector ops above; summation
    # within a segment follows flattened index order.

    def gather_rows(self, table: Tensor, indices) -> Tensor:
        """out[i] = table[indices[i]]; backward scatter-adds into rows."""
        if table.data.ndim != 2:
            raise ValueError("gather_rows expects a 2-D table")
        idx = _as_index(indices, table.data.shape[0], "gather_rows")
        out = Tensor(table.data[idx])

        def backward() -> None:
            _scatter_add_rows(table.grad, idx, out.grad)

        self._records.append(backward)
        return out

    def rows_affine(self, x: Tensor, w: Tensor) -> Tensor:
        """Apply ``w`` (b, a) to every row of ``x`` (m, a): out = x @ w.T."""
        if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
            raise ValueError(f"rows_affine shape mismatch: {x.shape} with {w.shape}")
        out = Tensor(x.data @ w.data.T)

        def backward() -> None:
            x.grad += out.grad @ w.data
            w.grad += out.grad.T @ x.data

        self._records.append(backward)
        return out

    def concat_cols(self, *xs: Tensor) -> Tensor:
        if not xs:
            raise ValueError("concat_cols of zero tensors")
        if any(x.data.ndim != 2 or x.data.shape[0] != xs[0].data.shape[0] for x in xs):
            raise ValueError("concat_cols expects 2-D tensors with equal row counts")
        out = Tensor(np.concatenate([x.data for x in xs], axis=1))
        offsets = np.cumsum([0] + [x.data.shape[1] for x in xs])

        def backward() -> None:
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                x.grad += out.grad[:, lo:hi]

        self._records.append(backward)
        return out

    def scale_rows(self, x: Tensor, weights: Tensor) -> Tensor:
        """out[i] = weights[i] * x[i] for a (m, d) tensor and (m,) weights."""
        if x.data.ndim != 2 or weights.data.shape != (x.data.shape[0],):
            raise ValueError(f"scale_rows shape mismatch: {x.shape} with {weights.shape}")
        out = Tensor(x.data * weights.data[:, None])

        def backward() -> None:
            x.grad += out.grad * weights.data[:, None]
            weights.grad += (out.grad * x.data).sum(axis=1)

        self._records.append(backward)
        return out

    def segment_sum(self, x: Tensor, segments, n: int) -> Tensor:
        """Row sums by segment id; segments with no members come out zero."""
        if x.data.ndim != 2:
            raise ValueError("segment_sum expects a 2-D tensor")
        seg = _as_index(segments, n, "segment_sum")
        if seg.shape[0] != x.data.shape[0]:
            raise ValueError("segment_sum needs one segment id per row")
        acc = np.zeros((n, x.data.shape[1]))
        _scatter_add_rows(acc, seg, x.data)
        out = Tensor(acc)

        def backward() -> None:
            x.grad += out.grad[seg]

        self._records.append(backward)
        return out

    def segment_mean(self, x: Tensor, segments, n: int) -> Tensor:
        """Row means by segment id; every segment must have a member."""
        if x.data.ndim != 2:
            raise ValueError("segment_mean expects a 2-D tensor")
        seg = _as_index(segments, n, "segment_mean")
        if seg.shape[0] != x.data.shape[0]:
            raise ValueError("segment_mean needs one segment id per row")
        counts = np.bincount(seg, minlength=n).astype(np.float64)
        if not counts.all():
            raise ValueError("segment_mean over an empty segment")
        acc = np.zeros((n, x.data.shape[1]))
        _scatter_add_rows(acc, seg, x.data)
        out = Tensor(acc / counts[:, None])

        def backward() -> None:
            x.grad += out.grad[seg] / counts[seg, None]

        self._records.append(backward)
        return out

    def segment_softmax(self, logits: Tensor, segments, n: int) -> Tensor:
        """Independent softmax over each segment of a 1-D logit vector."""
        if logits.data.ndim != 1:
            raise ValueError("segment_softmax expects a 1-D tensor")
        seg = _as_index(segments, n, "segment_softmax")
        if seg.shape[0] != logits.data.shape[0]:
            raise ValueError("segment_softmax needs one segment id per logit")
        if not np.bincount(seg, minlength=n).all():
            raise ValueError("segment_softmax over an empty segment")
        maxes = np.full(n, -np.inf)
        np.maximum.at(maxes, seg, logits.data)
        shifted = np.exp(logits.data - maxes[seg])
        denom = np.bincount(seg, weights=shifted, minlength=n)
        out = Tensor(shifted / denom[seg])

        def backward() -> None:
            s = out.data
            dots = np.bincount(seg, weights=out.grad * s, minlength=n)
            logits.grad += s * (out.grad - dots[seg])

        self._records.append(backward)
        return out

    def replace_rows(self, base: Tensor, indices, rows: Tensor) -> Tensor:
        """Copy of ``base`` with ``rows`` written at distinct ``indices``.

        Untouched rows keep their exact bit patterns, which is what makes
        skip-this-node-entirely identities hold without special cases.
        """
        if base.data.ndim != 2 or rows.data.ndim != 2:
            raise ValueError("replace_rows expects 2-D tensors")
        idx = _as_index(indices, base.data.shape[0], "replace_rows")
        if np.unique(idx).size != idx.size:
            raise ValueError("replace_rows indices must be distinct")
        if rows.data.shape != (idx.size, base.data.shape[1]):
            raise ValueError(
                f"replace_rows got {rows.shape} rows for {idx.size} slots of width {base.data.shape[1]}"
            )
        merged = base.data.copy()
        merged[idx] = rows.data
        out = Tensor(merged)

        def backward() -> None:
            g = out.grad.copy()
            g[idx] = 0.0
            base.grad += g
            rows.grad += out.grad[idx]

        self._records.append(backward)
        return out

    def circ_corr_rows(self, a: Tensor, b: Tensor) -> Tensor:
        """Row-wise circular correlation of two (m, d) tensors."""
        if a.data.shape != b.data.shape or a.data.ndim != 2:
            raise ValueError(f"circ_corr_rows shape mismatch: {a.shape} vs {b.shape}")
        m, d = a.data.shape
        # windows over a doubled copy give b[i, (k + j) % d] without the
        # d x d gather blowup
        b_ext = np.concatenate([b.data, b.data[:, : d - 1]], axis=1)
        b_win = np.lib.stride_tricks.sliding_window_view(b_ext, d, axis=1)
        out = Tensor(np.einsum("mkj,mj->mk", b_win, a.data))

        def backward() -> None:
            g = out.grad
            a.grad += np.einsum("mkj,mk->mj", b_win, g)
            a_ext = np.concatenate([a.data[:, 1:], a.data], axis=1)
            a_win = np.lib.stride_tricks.sliding_window_view(a_ext, d, axis=1)
            b.grad += np.einsum("mtk,mk->mt", a_win, g[:, ::-1])

        self._records.append(backward)
        return out

    # -- reshaping and convolution --------------------------------------

    def reshape2d(self, x: Tensor, rows: int, cols: int) -> Tensor:
        if x.data.ndim != 1 or x.data.shape[0] != rows * cols:
            raise ValueError(f"cannot reshape {x.shape} to {rows}x{cols}")
        out = Tensor(x.data.reshape(rows, cols))

        def backward() -> None:
            x.grad += out.grad.reshape(-1)

        self._records.append(backward)
        return out

    def flatten(self, x: Tensor) -> Tensor:
        shape = x.data.shape
        out = Tensor(x.data.reshape(-1))

        def backward() -> None:
            x.grad += out.grad.reshape(shape)

        self._records.append(backward)
        return out

    def conv2d(self, image: Tensor, filters: Tensor) -> Tensor:
        """Valid cross-correlation, stride 1: image (H, W), filters (F, k, k)."""
        if image.data.ndim != 2 or filters.data.ndim != 3:
            raise ValueError("conv2d expects image (H, W) and filters (F, k, k)")
        h, w = image.data.shape
        f, kh, kw = filters.data.shape
        if kh != kw:
            raise ValueError("conv2d kernels must be square")
        if kh > h or kw > w:
            raise ValueError(f"kernel {kh}x{kw} does not fit image {h}x{w}")
        patches = np.lib.stride_tricks.sliding_window_view(image.data, (kh, kw))
        out = Tensor(np.tensordot(filters.data, patches, axes=([1, 2], [2, 3])))
        oh, ow = h - kh + 1, w - kw + 1

        def backward() -> None:
            g = out.grad
            filters.grad += np.tensordot(g, patches, axes=([1, 2], [0, 1]))
            for i in range(kh):
                for j in range(kw):
                    image.grad[i : i + oh, j : j + ow] += np.tensordot(
                        filters.data[:, i, j], g, axes=(0, 0)
                    )

        self._records.append(backward)
        return out

    # -- losses ----------------------------------------------------------

    def bce_with_logits(self, scores: Tensor, labels: np.ndarray) -> Tensor:
        """Summed binary cross-entropy; probabilities clamped to [1e-12, 1-1e-12]."""
        if scores.data.ndim != 1 or labels.shape != scores.data.shape:
            raise ValueError("bce_with_logits expects matching 1-D scores and labels")
        lo, hi = 1e-12, 1.0 - 1e-12
        p = _stable_sigmoid(scores.data)
        pc = np.clip(p, lo, hi)
        out = Tensor(-(labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc)).sum())

        def backward() -> None:
            # clamped terms are locally constant in the loss
            active = (p > lo) & (p < hi)
            scores.grad += np.where(active, p - labels, 0.0) * out.grad

        self._records.append(backward)
        return out

    def cross_entropy(self, logits: Tensor, label: int) -> Tensor:
        if logits.data.ndim != 1:
            raise ValueError("cross_entropy expects 1-D logits")
        k = logits.data.shape[0]
        if not 0 <= label < k:
            raise IndexError(f"label {label} out of range [0, {k})")
        m = logits.data.max()
        lse = m + np.log(np.exp(logits.data - m).sum())
        out = Tensor(lse - logits.data[label])

        def backward() -> None:
            soft = np.exp(logits.data - lse)
            soft[label] -= 1.0
            logits.grad += soft * out.grad

        self._records.append(backward)
        return out

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and run all records in reverse order."""
        if loss.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for record in reversed(self._records):
            record()


class ParameterStore:
    """Named trainable tensors plus their Adam moment slots."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._slots: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor = Tensor(value)
        self._params[name] = tensor
        self._slots[name] = {
            "m": np.zeros_like(tensor.data),
            "v": np.zeros_like(tensor.data),
        }
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def slots(self, name: str) -> dict[str, np.ndarray]:
        return self._slots[name]

    def zero_grads(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays (values and optimizer slots) by stable name."""
        arrays: dict[str, np.ndarray] = {}
        for name, tensor in self._params.items():
            arrays[f"param/{name}"] = tensor.data
            arrays[f"adam_m/{name}"] = self._slots[name]["m"]
            arrays[f"adam_v/{name}"] = self._slots[name]["v"]
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Restore values and slots; refuses unknown names or mismatched shapes."""
        for name, tensor in self._params.items():
            for key, target in (
                (f"param/{name}", tensor.data),
                (f"adam_m/{name}", self._slots[name]["m"]),
                (f"adam_v/{name}", self._slots[name]["v"]),
            ):
                if key not in arrays:
                    raise ValueError(f"checkpoint missing tensor {key}")
                src = arrays[key]
                if src.shape != target.shape:
                    raise ValueError(
                        f"shape mismatch for {key}: checkpoint {src.shape} vs model {target.shape}"
                    )
                target[...] = src
        known = set()
        for name in self._params:
            known.update({f"param/{name}", f"adam_m/{name}", f"adam_v/{name}"})
        extra = sorted(set(arrays) - known)
        if extra:
            raise ValueError(f"checkpoint has unknown tensors: {extra[:5]}")


def grad_check(
    build: Callable[[], tuple[Tape, Tensor]],
    params: Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error of analytic gradients vs central finite differences.

    ``build`` must construct a fresh tape and return ``(tape, loss)`` using
    the current parameter values; it is re-run for every perturbation.
    Relative error uses a ``max(|analytic|, |numeric|, 1e-8)`` denominator.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    tape, loss = build()
    if loss.data.shape != ():
        raise ValueError("grad_check requires a scalar loss")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat_value = p.data.reshape(-1)
        flat_ana = ana.reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + step
            f_plus = float(build()[1].data)
            flat_value[i] = orig - step
            f_minus = float(build()[1].data)
            flat_value[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(flat_ana[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_ana[i] - numeric) / denom)
    return worst
