"""Weight initialization for masked networks and the signal-propagation probe.

Three families:

* per_neuron: every active weight is drawn from N(0, gain/u) where u is that
  weight's own connection count — fan-in of its output unit (forward),
  fan-out of its input unit (backward), or their mean (average). Fan counts
  are taken under the mask, so heterogeneous connectivity gets per-neuron
  variances.
* layer_scaled: one variance per layer, gain divided by the layer's mean
  active fan count (the special case where every unit is assumed to have the
  same number of active connections).
* masked_dense: the dense-network variance (gain over the dense fan count),
  ignoring the mask entirely; at high sparsity this makes the forward signal
  vanish, which is what the probe demonstrates.

gain=2 is the ReLU (He) setting, gain=1 the Glorot/tanh setting. With a full
mask all three families coincide exactly. Units with no active connections
are left at zero and counted in the log.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .network import (
    ActivationLayer,
    ConvLayer,
    DenseLayer,
    MaxPoolLayer,
    SparsityDistribution,
    allocate_sparsity,
    build_network,
    fan_counts,
)

_log = logging.getLogger(__name__)

FAMILIES = ("per_neuron", "layer_scaled", "masked_dense")
DIRECTIONS = ("forward", "backward", "average")


@dataclass(frozen=True)
class InitScheme:
    family: str = "per_neuron"
    gain: float = 2.0
    direction: str = "forward"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")


def _dense_fans(layer):
    """Fan counts of the corresponding fully-connected pattern."""
    if isinstance(layer, DenseLayer):
        n_out, n_in = layer.w.shape
    else:
        c_out, c_in, kh, kw = layer.w.shape
        n_in, n_out = c_in * kh * kw, c_out * kh * kw
    return n_in, n_out


def _per_weight_u(layer, direction):
    """Connection count u per weight position, under the mask."""
    fan_in, fan_out = fan_counts(layer.mask)
    if isinstance(layer, DenseLayer):
        fi = fan_in[:, None]
        fo = fan_out[None, :]
    else:
        fi = fan_in[:, None, None, None]
        fo = fan_out[None, :, None, None]
    if direction == "forward":
        return np.broadcast_to(fi, layer.w.shape)
    if direction == "backward":
        return np.broadcast_to(fo, layer.w.shape)
    return (fi + fo) / 2.0


def initialize(net, scheme, rng):
    """Sample fresh weights for every active position; masked-out stay zero.

    Biases are set to zero. Returns `net` (mutated in place).
    """
    zero_fan_units = 0
    for _, layer in net.weighted_layers():
        if scheme.family == "masked_dense":
            n_in, n_out = _dense_fans(layer)
            u = {"forward": n_in, "backward": n_out, "average": (n_in + n_out) / 2.0}[scheme.direction]
            var = np.full(layer.w.shape, scheme.gain / u)
        elif scheme.family == "layer_scaled":
            fan_in, fan_out = fan_counts(layer.mask)
            means = {
                "forward": fan_in.mean(),
                "backward": fan_out.mean(),
                "average": (fan_in.mean() + fan_out.mean()) / 2.0,
            }
            u = means[scheme.direction]
            var = np.full(layer.w.shape, scheme.gain / u if u > 0 else 0.0)
        else:
            u = _per_weight_u(layer, scheme.direction)
            var = np.where(u > 0, scheme.gain / np.where(u > 0, u, 1.0), 0.0)
        draws = rng.normal(size=layer.w.shape)
        layer.w[...] = draws * np.sqrt(var) * layer.mask
        if layer.b is not None:
            layer.b[...] = 0.0
        fan_in, _ = fan_counts(layer.mask)
        zero_fan_units += int(np.sum(fan_in == 0))
    if zero_fan_units:
        _log.debug("initialize: %d output units have no active connections", zero_fan_units)
    return net


def zero_fan_units(net):
    """Per-weighted-layer count of output units with no active incoming weights."""
    return [int(np.sum(fan_counts(l.mask)[0] == 0)) for _, l in net.weighted_layers()]


# ---------------------------------------------------------------------------
# signal propagation probe


@dataclass
class ProbeResult:
    layer_stds: list  # std of each weighted layer's pre-activation output
    n_samples: int

    @property
    def presoftmax_std(self):
        return self.layer_stds[-1]


def signal_probe(net, n_samples, rng, chunk=256):
    """Per-unit output std of each weighted layer on N(0,1) inputs.

    For every unit (a neuron; for conv outputs a (channel, y, x) position)
    the standard deviation of its pre-activation output is taken across the
    input samples, then averaged over the layer's units. This is the
    quantity the variance-scaling initializations are built to hold at 1.
    The last entry is the pre-softmax output std.
    """
    if n_samples <= 0:
        raise ValueError("signal_probe needs n_samples >= 1")
    n_weighted = len(net.weighted_layers())
    sums = [None] * n_weighted
    sumsq = [None] * n_weighted
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        a = rng.normal(size=(b, *net.input_shape))
        wi = 0
        for layer in net.layers:
            if isinstance(layer, DenseLayer):
                a = a @ (layer.w * layer.mask).T
                if layer.b is not None:
                    a = a + layer.b
            elif isinstance(layer, ConvLayer):
                a = kernels.conv2d_forward(a, layer.w * layer.mask, layer.b, layer.padding)
            elif isinstance(layer, ActivationLayer):
                a = np.maximum(a, 0.0) if layer.fn == "relu" else np.tanh(a)
                continue
            elif isinstance(layer, MaxPoolLayer):
                a, _ = kernels.maxpool2x2_forward(a)
                continue
            else:
                a = a.reshape(a.shape[0], -1)
                continue
            if sums[wi] is None:
                sums[wi] = np.zeros(a.shape[1:])
                sumsq[wi] = np.zeros(a.shape[1:])
            sums[wi] += a.sum(axis=0)
            sumsq[wi] += np.sum(a * a, axis=0)
            wi += 1
        done += b
    stds = []
    for s, sq in zip(sums, sumsq):
        mean = s / n_samples
        var = np.maximum(sq / n_samples - mean * mean, 0.0)
        stds.append(float(np.mean(np.sqrt(var))))
    return ProbeResult(layer_stds=stds, n_samples=n_samples)


@dataclass
class ProbeRecord:
    sparsity: float
    scheme: str
    seed: int
    layer_index: int
    std: float
    n_samples: int


def sweep_sparsity_probe(input_shape, layer_specs, sparsities, schemes, seeds,
                         n_samples=4096, base_seed=0, distribution_kind="erk"):
    """Signal probe over the (sparsity x scheme x seed) grid.

    Within one (sparsity, seed) cell all schemes share the same mask, the
    same underlying normal draws (so at density 1, where the variance
    parameters coincide, the schemes produce identical weights), and the same
    probe inputs: scheme comparisons are fully paired. Returns ProbeRecord
    rows, one per weighted layer per cell.
    """
    rows = []
    for si, sparsity in enumerate(sparsities):
        for seed in range(seeds):
            mask_rng = np.random.default_rng(np.random.SeedSequence((base_seed, 101, si, seed)))
            template = build_network(input_shape, layer_specs)
            if sparsity > 0:
                allocate_sparsity(template, SparsityDistribution(distribution_kind, sparsity), mask_rng)
            for scheme in schemes:
                net = template.clone()
                init_rng = np.random.default_rng(np.random.SeedSequence((base_seed, 202, si, seed)))
                initialize(net, scheme, init_rng)
                probe_rng = np.random.default_rng(np.random.SeedSequence((base_seed, 303, si, seed)))
                result = signal_probe(net, n_samples, probe_rng)
                name = scheme.family
                for li, std in enumerate(result.layer_stds):
                    rows.append(ProbeRecord(sparsity, name, seed, li, float(std), n_samples))
    return rows
