# ===========================================
# nn_core.py
# ===========================================

## \file nn_core.py
## \brief Minimal dense-network engine: fully-connected layers, ReLU, backprop, Adam, Polyak.
##
## \details
## \par Description
##     Everything the Surrogate-Q and DeepSet-Q networks need and nothing more.
##     Parameters are held in `MlpParams` (one weight matrix `out x in` and one
##     bias vector per layer), always in float64. Forward passes accept either a
##     single input vector or a batch of row vectors; backward passes return
##     gradients summed over the batch.
##
## \par Conventions
##     - Parameter containers are treated as immutable values: `adam_step` and
##       `polyak_update` return new containers.
##     - A forward cache is bound to the exact `MlpParams` object that produced it.
##     - Initialization: uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
##     - Adam constants: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
##
## \par Binary layout (little endian)
##     magic "MLP1" | u16 layer count | per layer: u32 in, u32 out, u8 activation
##     (0 relu, 1 identity) | per layer: weights f64 row-major (out x in), bias f64 (out)


from dataclasses import dataclass, replace
from typing import Sequence
import numpy as np

from model.errors import ContractError, FormatError, NumericError, ShapeError


ACTIVATIONS = ("relu", "identity")
ACT_CODES = {"relu": 0, "identity": 1}

MLP_MAGIC = b"MLP1"
_HEADER = np.dtype([("magic", "S4"), ("layers", "<u2")])
_LAYER = np.dtype([("input_width", "<u4"), ("output_width", "<u4"), ("activation", "u1")])

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError(f"Layer widths must be >= 1, got {self.input_width}x{self.output_width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unsupported activation '{self.activation}'")


@dataclass
class MlpParams:
    """!Weights and biases of a fully-connected network.

    @param weights One `(out, in)` float64 matrix per layer.
    @param biases One `(out,)` float64 vector per layer.
    @param activations One of `relu` / `identity` per layer.

    @throws ShapeError If adjacent layer widths do not match.
    """
    weights: list
    biases: list
    activations: tuple

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.activations = tuple(self.activations)

        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ShapeError("MlpParams needs the same non-zero number of weights, biases and activations")

        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"Layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if act not in ACTIVATIONS:
                raise ValueError(f"Layer {i}: unsupported activation '{act}'")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"Layer {i} expects width {w.shape[1]} but layer {i - 1} outputs {self.weights[i - 1].shape[0]}"
                )

    @property
    def specs(self) -> tuple:
        return tuple(LayerSpec(w.shape[1], w.shape[0], act) for w, act in zip(self.weights, self.activations))

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list:
        """!All parameter arrays in a fixed order: weights first, then biases."""
        return [*self.weights, *self.biases]

    def with_arrays(self, arrays: Sequence) -> "MlpParams":
        n = len(self.weights)
        return MlpParams(list(arrays[:n]), list(arrays[n:]), self.activations)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self.arrays())

    def __add__(self, other: "MlpParams") -> "MlpParams":
        _check_same_shape(self, other)
        return self.with_arrays([a + b for a, b in zip(self.arrays(), other.arrays())])

    def __sub__(self, other: "MlpParams") -> "MlpParams":
        _check_same_shape(self, other)
        return self.with_arrays([a - b for a, b in zip(self.arrays(), other.arrays())])


@dataclass
class MlpCache:
    """!Per-layer activations from one forward call, consumed by `mlp_backward`."""
    params: MlpParams
    inputs: list
    preactivations: list
    single: bool


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, params: MlpParams, **constants) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, 0, **constants)


def _check_same_shape(a: MlpParams, b: MlpParams):
    if len(a.weights) != len(b.weights) or any(x.shape != y.shape for x, y in zip(a.arrays(), b.arrays())):
        raise ShapeError("Parameter containers have different shapes")


def init_mlp(widths: Sequence[int], rng: np.random.Generator,
             hidden_activation: str = "relu", output_activation: str = "identity") -> MlpParams:
    """!Creates a network with Glorot-uniform weights and zero biases.

    @param widths Layer widths including the input, e.g. `[6, 20, 80]`.
    @param rng Seeded numpy generator.
    @param hidden_activation Activation of every layer but the last.
    @param output_activation Activation of the last layer.

    @return Freshly initialized MlpParams.
    """
    if len(widths) < 2:
        raise ValueError("An MLP needs at least an input and an output width")
    specs = [
        LayerSpec(widths[i], widths[i + 1], output_activation if i == len(widths) - 2 else hidden_activation)
        for i in range(len(widths) - 1)
    ]
    weights, biases = [], []
    for spec in specs:
        limit = np.sqrt(6.0 / (spec.input_width + spec.output_width))
        weights.append(rng.uniform(-limit, limit, size=(spec.output_width, spec.input_width)))
        biases.append(np.zeros(spec.output_width))
    return MlpParams(weights, biases, tuple(s.activation for s in specs))


def mlp_forward(params: MlpParams, x) -> tuple:
    """!Evaluates the network on one input vector or a batch of row vectors.

    @param params Network parameters.
    @param x Input of shape `(in,)` or `(n, in)`.

    @return `(output, cache)`; output has shape `(out,)` or `(n, out)`.

    @throws ShapeError If the input width does not match the first layer.
    @throws NumericError If the input contains NaN or infinity.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x

    if a.ndim != 2 or a.shape[1] != params.input_width:
        raise ShapeError(f"Input shape {x.shape} does not match input width {params.input_width}")
    if not np.all(np.isfinite(a)):
        raise NumericError("Non-finite value in network input")

    inputs, preactivations = [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(a)
        z = a @ w.T + b
        preactivations.append(z)
        a = np.maximum(z, 0.0) if act == "relu" else z

    return (a[0] if single else a), MlpCache(params, inputs, preactivations, single)


def mlp_backward(params: MlpParams, cache: MlpCache, grad_output) -> tuple:
    """!Reverse-mode gradients of `sum(output * grad_output)`.

    @param params The parameters the cache was produced with.
    @param cache Cache returned by `mlp_forward(params, ...)`.
    @param grad_output Upstream gradient shaped like the forward output.

    @return `(param_grads, grad_input)`; parameter gradients are summed over the batch.

    @throws ContractError If the cache belongs to other parameters or the gradient shape differs.
    """
    if cache.params is not params:
        raise ContractError("Forward cache was produced by different parameters")

    g = np.asarray(grad_output, dtype=np.float64)
    g = g[None, :] if cache.single else g
    if g.shape != cache.preactivations[-1].shape:
        raise ContractError(f"Gradient shape {np.shape(grad_output)} does not match the cached output")

    n = len(params.weights)
    grad_w, grad_b = [None] * n, [None] * n
    for i in reversed(range(n)):
        if params.activations[i] == "relu":
            g = g * (cache.preactivations[i] > 0.0)
        grad_w[i] = g.T @ cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ params.weights[i]

    grads = MlpParams(grad_w, grad_b, params.activations)
    return grads, (g[0] if cache.single else g)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams, learning_rate: float) -> tuple:
    """!One bias-corrected Adam update.

    Moments decay on every call, including all-zero gradients, so a
    parameter with momentum keeps moving after its gradient vanishes.

    @return `(new_params, new_state)`.

    @throws ShapeError If the gradient or state shapes differ from the parameters.
    @throws NumericError If any gradient entry is non-finite.
    """
    _check_same_shape(params, grads)
    if len(state.first_moment) != len(params.arrays()):
        raise ShapeError("Adam state does not match the parameter layout")

    g_arrays = grads.arrays()
    if not all(np.all(np.isfinite(g)) for g in g_arrays):
        raise NumericError("Non-finite gradient passed to adam_step")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * m_i + (1.0 - b1) * g for m_i, g in zip(state.first_moment, g_arrays)]
    v = [b2 * v_i + (1.0 - b2) * g * g for v_i, g in zip(state.second_moment, g_arrays)]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    updated = [
        p - learning_rate * (m_i / c1) / (np.sqrt(v_i / c2) + state.eps)
        for p, m_i, v_i in zip(params.arrays(), m, v)
    ]
    return params.with_arrays(updated), replace(state, first_moment=m, second_moment=v, step=t)


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """!Soft target update `target <- tau * online + (1 - tau) * target`.

    Results are clipped into the interval spanned by the two inputs so the
    update stays a convex combination under rounding.

    @throws ValueError If tau is outside [0, 1].
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    _check_same_shape(target, online)

    mixed = []
    for t_arr, o_arr in zip(target.arrays(), online.arrays()):
        blend = tau * o_arr + (1.0 - tau) * t_arr
        mixed.append(np.clip(blend, np.minimum(t_arr, o_arr), np.maximum(t_arr, o_arr)))
    return target.with_arrays(mixed)


def mlp_to_bytes(params: MlpParams) -> bytes:
    header = np.array([(MLP_MAGIC, len(params.weights))], dtype=_HEADER).tobytes()
    layers = np.array(
        [(s.input_width, s.output_width, ACT_CODES[s.activation]) for s in params.specs], dtype=_LAYER
    ).tobytes()
    body = b"".join(
        np.ascontiguousarray(w, dtype="<f8").tobytes() + np.ascontiguousarray(b, dtype="<f8").tobytes()
        for w, b in zip(params.weights, params.biases)
    )
    return header + layers + body


def mlp_from_bytes(buf: bytes, offset: int = 0) -> tuple:
    """!Reads one MLP block written by `mlp_to_bytes`.

    @return `(params, offset_after_block)`.

    @throws FormatError On a bad magic tag, unknown activation code or truncated data.
    """
    try:
        header = np.frombuffer(buf, dtype=_HEADER, count=1, offset=offset)[0]
        if header["magic"] != MLP_MAGIC:
            raise FormatError(f"Bad MLP block magic {header['magic']!r}")
        offset += _HEADER.itemsize
        n = int(header["layers"])
        layers = np.frombuffer(buf, dtype=_LAYER, count=n, offset=offset)
        offset += _LAYER.itemsize * n

        codes = {v: k for k, v in ACT_CODES.items()}
        weights, biases, acts = [], [], []
        for layer in layers:
            rows, cols = int(layer["output_width"]), int(layer["input_width"])
            if int(layer["activation"]) not in codes:
                raise FormatError(f"Unknown activation code {int(layer['activation'])}")
            w = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
            offset += 8 * rows * cols
            b = np.frombuffer(buf, dtype="<f8", count=rows, offset=offset)
            offset += 8 * rows
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
            acts.append(codes[int(layer["activation"])])
    except (ValueError, IndexError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"Truncated MLP block: {e}") from e

    return MlpParams(weights, biases, tuple(acts)), offset
