"""Spiking Q-network: layer stack, T-step simulation and membrane-voltage decoding.

A network is a chain of synaptic layers (conv2d / dense, no biases) each
followed by a neuronal layer. Every hidden neuronal layer is LIF; the last one
is LI and its voltage history is decoded into one Q-value per action. The
static observation is fed as a constant input current at every time step and
all weights are shared across time steps.

Arrays inside a trace are laid out time-major: ``(T, B, *features)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ContractViolation
from .neuron import NeuronConfig, charge
from .surrogate import surrogate

DECODERS = ("last_mem", "max_mem", "mean_mem")


@dataclass(frozen=True)
class LayerSpec:
    """One synaptic layer plus its neuron type, or a parameter-free flatten.

    ``n_out``/``n_in`` are features for dense layers and channels for conv2d.
    """

    kind: str
    n_out: int = 0
    n_in: int = 0
    kernel: int = 1
    stride: int = 1
    neuron: str | None = None
    cfg: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        if self.kind not in ("conv2d", "dense", "flatten"):
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.kind == "flatten":
            if self.neuron is not None:
                raise ContractViolation("flatten layers carry no neurons")
            return
        if self.neuron not in ("lif", "li"):
            raise ContractViolation(f"{self.kind} layer needs neuron 'lif' or 'li', got {self.neuron!r}")
        if self.n_out < 1 or self.n_in < 1 or self.kernel < 1 or self.stride < 1:
            raise ContractViolation(f"non-positive layer dimension in {self}")

    @property
    def has_params(self) -> bool:
        return self.kind != "flatten"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.n_out, self.n_in, self.kernel, self.kernel)
        if self.kind == "dense":
            return (self.n_out, self.n_in)
        return ()

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:])) if self.has_params else 0

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if self.kind == "dense":
            if in_shape != (self.n_in,):
                raise ContractViolation(f"dense layer expects input ({self.n_in},), got {in_shape}")
            return (self.n_out,)
        if len(in_shape) != 3 or in_shape[0] != self.n_in:
            raise ContractViolation(f"conv2d layer expects ({self.n_in}, H, W) input, got {in_shape}")
        _, h, w = in_shape
        if h < self.kernel or w < self.kernel:
            raise ContractViolation(f"input {in_shape} smaller than kernel {self.kernel}")
        return (self.n_out, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)


def Conv2d(out_channels, in_channels, kernel, stride=1, neuron="lif", cfg=None) -> LayerSpec:
    return LayerSpec("conv2d", out_channels, in_channels, kernel, stride, neuron, cfg or NeuronConfig())


def Dense(out_features, in_features, neuron="lif", cfg=None) -> LayerSpec:
    return LayerSpec("dense", out_features, in_features, neuron=neuron, cfg=cfg or NeuronConfig())


def Flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass
class QNetwork:
    """Layer stack with its weights, simulation length and decoder.

    ``params`` holds one weight array per parameterized layer, in order.
    """

    layers: tuple[LayerSpec, ...]
    params: list[np.ndarray]
    input_shape: tuple[int, ...]
    sim_steps: int = 8
    decoder: str = "max_mem"

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.decoder not in DECODERS:
            raise ContractViolation(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        if int(self.sim_steps) < 1:
            raise ContractViolation("sim_steps must be a positive integer")
        self.sim_steps = int(self.sim_steps)
        param_layers = [sp for sp in self.layers if sp.has_params]
        if not param_layers:
            raise ContractViolation("network has no parameterized layer")
        if self.layers[-1] is not param_layers[-1]:
            raise ContractViolation("the last layer must be a parameterized LI layer")
        for sp in param_layers[:-1]:
            if sp.neuron != "lif":
                raise ContractViolation("every neuronal layer before the output must be LIF")
        if param_layers[-1].neuron != "li":
            raise ContractViolation("the output layer must use LI neurons")
        if len(self.params) != len(param_layers):
            raise ContractViolation(f"expected {len(param_layers)} weight arrays, got {len(self.params)}")
        shape = self.input_shape
        self.shapes = []
        for sp in self.layers:
            shape = sp.output_shape(shape)
            self.shapes.append(shape)
        for sp, w in zip(param_layers, self.params):
            if tuple(w.shape) != sp.weight_shape:
                raise ContractViolation(f"weight shape {w.shape} != declared {sp.weight_shape}")

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [sp for sp in self.layers if sp.has_params]

    @property
    def n_actions(self) -> int:
        return self.shapes[-1][0]

    @property
    def dtype(self):
        return self.params[0].dtype

    def spec_dict(self) -> dict:
        """JSON-friendly description of everything except the weights."""
        return {
            "input_shape": list(self.input_shape),
            "sim_steps": self.sim_steps,
            "decoder": self.decoder,
            "layers": [
                {"kind": sp.kind, "n_out": sp.n_out, "n_in": sp.n_in, "kernel": sp.kernel,
                 "stride": sp.stride, "neuron": sp.neuron,
                 "cfg": [sp.cfg.tau, sp.cfg.v_threshold, sp.cfg.v_reset]}
                for sp in self.layers
            ],
        }

    @classmethod
    def from_spec_dict(cls, d: dict, params) -> "QNetwork":
        layers = tuple(
            LayerSpec(L["kind"], L["n_out"], L["n_in"], L["kernel"], L["stride"], L["neuron"], NeuronConfig(*L["cfg"]))
            for L in d["layers"]
        )
        return cls(layers, list(params), tuple(d["input_shape"]), d["sim_steps"], d["decoder"])

    def copy(self) -> "QNetwork":
        return replace(self, params=[w.copy() for w in self.params])

    def with_params(self, params) -> "QNetwork":
        return replace(self, params=list(params))


def init_params(layers, rng: np.random.Generator, dtype=np.float32, gain: float = 1.0) -> list[np.ndarray]:
    """Uniform init in +-gain/sqrt(fan_in) per parameterized layer.

    With gain 1 and sparse binary inputs the hidden LIF layers often start
    silent. The surrogate still passes gradient below threshold, so they
    learn to fire; ``build_network`` exposes the gain for denser starts.
    """
    out = []
    for sp in layers:
        if sp.has_params:
            bound = gain / np.sqrt(sp.fan_in)
            out.append(rng.uniform(-bound, bound, size=sp.weight_shape).astype(dtype))
    return out


_TOKEN = re.compile(r"^(\d+)C(\d+)S(\d+)$")


def parse_architecture(arch: str, input_shape, n_actions: int, cfg: NeuronConfig | None = None):
    """Parse notation such as ``Input-32C8S4-LIF-Flatten-512-LIF-N_A-LI`` into layer specs.

    ``N_A`` (or ``NA``) stands for the number of actions. Every synaptic token
    must be followed by ``LIF`` or ``LI``.
    """
    cfg = cfg or NeuronConfig()
    tokens = [t.strip() for t in arch.split("-") if t.strip()]
    if tokens and tokens[0].lower() == "input":
        tokens = tokens[1:]
    layers = []
    shape = tuple(input_shape)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok.lower() == "flatten":
            sp = Flatten()
            i += 1
        else:
            if i + 1 >= len(tokens) or tokens[i + 1].upper() not in ("LIF", "LI"):
                raise ContractViolation(f"layer {tok!r} must be followed by LIF or LI")
            neuron = tokens[i + 1].lower()
            m = _TOKEN.match(tok)
            if m:
                out_c, k, s = (int(g) for g in m.groups())
                sp = Conv2d(out_c, shape[0], k, s, neuron, cfg)
            else:
                n = n_actions if tok.upper() in ("N_A", "NA") else int(tok)
                sp = Dense(n, shape[0], neuron, cfg)
            i += 2
        shape = sp.output_shape(shape)
        layers.append(sp)
    return tuple(layers)


TOY_ARCHITECTURE = "16C3S1-LIF-Flatten-128-LIF-N_A-LI"
ATARI_ARCHITECTURE = "32C8S4-LIF-64C4S2-LIF-64C3S1-LIF-Flatten-512-LIF-N_A-LI"


def build_network(
    input_shape,
    n_actions,
    arch=TOY_ARCHITECTURE,
    sim_steps=8,
    decoder="max_mem",
    cfg=None,
    rng=None,
    dtype=np.float32,
    init_gain: float = 1.0,
) -> QNetwork:
    layers = parse_architecture(arch, input_shape, n_actions, cfg)
    rng = rng if rng is not None else np.random.default_rng(0)
    return QNetwork(layers, init_params(layers, rng, dtype, init_gain), input_shape, sim_steps, decoder)


# --- synaptic operators ---------------------------------------------------


def dense_apply(w, x):
    """``x @ w.T`` over any leading dimensions; ``w`` has shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ContractViolation(f"dense input has {x.shape[-1]} features, weight expects {w.shape[1]}")
    return x @ w.T


def _patches(x, kernel, stride):
    # (N, C, OH, OW, k, k) view, no copy
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_apply(w, x, stride=1):
    """Strided cross-correlation without bias. ``x``: (N, C, H, W); ``w``: (O, C, k, k)."""
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[2]
    if x.shape[2] < k or x.shape[3] < k:
        raise ContractViolation(f"conv2d input {x.shape} smaller than kernel {k}")
    p = _patches(x, k, stride)
    out = np.tensordot(p, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_weight(grad_out, x, kernel, stride=1):
    """Gradient of ``sum(grad_out * conv2d_apply(w, x))`` with respect to ``w``."""
    p = _patches(x, kernel, stride)
    return np.tensordot(grad_out, p, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_grad_input(grad_out, w, in_hw, stride=1):
    """Gradient of ``sum(grad_out * conv2d_apply(w, x))`` with respect to ``x``."""
    n, _, oh, ow = grad_out.shape
    c, k = w.shape[1], w.shape[2]
    gx = np.zeros((n, c) + tuple(in_hw), dtype=np.result_type(grad_out, w))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(grad_out, w[:, :, i, j], axes=([1], [0]))  # (N, OH, OW, C)
            gx[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    return gx


def synapse_apply(spec: LayerSpec, w, x):
    """Apply a layer's synapse to ``x`` of shape (N, *in_features)."""
    if spec.kind == "conv2d":
        return conv2d_apply(w, x, spec.stride)
    return dense_apply(w, x)


# --- forward simulation ---------------------------------------------------


@dataclass
class LayerRecord:
    """Per-time-step tensors of one parameterized layer.

    ``inp`` is the synaptic input: (B, *in) when ``static`` (the observation,
    identical at every step), otherwise (T, B, *in). ``x`` follows the same
    convention. ``h``, ``v``, ``s`` are (T, B, *out); for LI layers ``h is v``
    and ``s`` is all zeros.
    """

    spec: LayerSpec
    inp: np.ndarray
    static: bool
    x: np.ndarray
    h: np.ndarray
    v: np.ndarray
    s: np.ndarray


@dataclass
class VoltageTrace:
    """Everything one forward pass recorded, as consumed by decoders and backward passes.

    ``t_max`` holds the 0-based argmax time per output neuron (max_mem only;
    earliest step on ties). ``batched`` is False when the caller passed a
    single observation; arrays are stored with a batch axis regardless.
    """

    obs: np.ndarray
    records: list[LayerRecord]
    history: np.ndarray
    q: np.ndarray
    decoder: str
    t_max: np.ndarray | None
    batched: bool
    relaxed: bool = False

    @property
    def sim_steps(self) -> int:
        return self.history.shape[0]


def decode(history, kind: str):
    """Reduce an LI voltage history of shape (T, ...) to per-neuron values.

    Returns ``(values, t_max)``; ``t_max`` is None unless ``kind == 'max_mem'``.
    """
    history = np.asarray(history)
    if history.ndim == 0 or history.shape[0] < 1:
        raise ContractViolation("decoding needs a voltage history with at least one step")
    if kind == "last_mem":
        return history[-1].copy(), None
    if kind == "max_mem":
        t_max = np.argmax(history, axis=0)
        return np.take_along_axis(history, t_max[None], axis=0)[0], t_max
    if kind == "mean_mem":
        return history.mean(axis=0), None
    raise ContractViolation(f"unknown decoder {kind!r}")


def _simulate_relaxed(x_seq, static, spec: LayerSpec, T):
    # reference numpy loop; only the gradient checker runs relaxed, so speed is irrelevant
    cfg = spec.cfg
    shape = x_seq.shape if static else x_seq.shape[1:]
    v = np.full(shape, cfg.v_reset, dtype=x_seq.dtype)
    hs = np.empty((T,) + shape, dtype=x_seq.dtype)
    vs, ss = np.empty_like(hs), np.zeros_like(hs)
    for t in range(T):
        h = charge(v, x_seq if static else x_seq[t], cfg)
        hs[t] = h
        if spec.neuron == "lif":
            s = surrogate(h - cfg.v_threshold)
            ss[t] = s
            v = h * (1 - s) + cfg.v_reset * s
        else:
            v = h
        vs[t] = v
    return hs, (vs if spec.neuron == "lif" else hs), ss


def _simulate_neurons(x_seq, static, spec: LayerSpec, T, relaxed):
    """Run one neuronal layer for T steps. Returns (h, v, s), each (T, B, *features)."""
    if relaxed:
        return _simulate_relaxed(x_seq, static, spec, T)
    cfg = spec.cfg
    dt = x_seq.dtype.type
    shape = x_seq.shape if static else x_seq.shape[1:]
    x2 = np.ascontiguousarray(x_seq).reshape(1 if static else T, -1)
    hs = np.empty((T,) + shape, dtype=x_seq.dtype)
    if spec.neuron == "lif":
        vs, ss = np.empty_like(hs), np.empty_like(hs)
        _kernels.lif_forward(x2, T, dt(cfg.inv_tau), dt(cfg.v_threshold), dt(cfg.v_reset),
                             hs.reshape(T, -1), vs.reshape(T, -1), ss.reshape(T, -1))
        return hs, vs, ss
    _kernels.li_forward(x2, T, dt(cfg.inv_tau), dt(cfg.v_reset), hs.reshape(T, -1))
    return hs, hs, np.zeros_like(hs)


def forward(net: QNetwork, obs, relaxed: bool = False):
    """Simulate ``net`` for ``net.sim_steps`` steps on a static observation.

    ``obs`` is either one observation of shape ``net.input_shape`` or a batch
    ``(B, *input_shape)``. Returns ``(q, trace)``. With ``relaxed=True`` spikes
    are replaced by the smooth surrogate (used only for gradient checking).
    """
    obs = np.asarray(obs, dtype=net.dtype)
    if obs.shape == net.input_shape:
        batched = False
        obs = obs[None]
    elif obs.shape[1:] == net.input_shape:
        batched = True
    else:
        raise ContractViolation(f"observation shape {obs.shape} does not match network input {net.input_shape}")
    T = net.sim_steps
    B = obs.shape[0]
    cur, static = obs, True
    records = []
    params = iter(net.params)
    for sp in net.layers:
        if sp.kind == "flatten":
            lead = cur.shape[:1] if static else cur.shape[:2]
            cur = cur.reshape(lead + (-1,))
            continue
        w = next(params)
        if static:
            x = synapse_apply(sp, w, cur)
        else:
            flat = cur.reshape((T * B,) + cur.shape[2:])
            x = synapse_apply(sp, w, flat)
            x = x.reshape((T, B) + x.shape[1:])
        h, v, s = _simulate_neurons(x, static, sp, T, relaxed)
        records.append(LayerRecord(sp, cur, static, x, h, v, s))
        cur, static = s, False
    history = records[-1].v
    q, t_max = decode(history, net.decoder)
    trace = VoltageTrace(obs, records, history, q, net.decoder, t_max, batched, relaxed)
    return (q if batched else q[0]), trace
