"""Connectivity evolution: SET/RigL mask updates, magnitude pruning, lottery extraction.

Mask updates drop the k lowest-magnitude active weights per layer and grow k
new connections among the previously inactive positions: uniformly at random
(SET), by largest dense-gradient magnitude (RigL), or by smallest (the
inverted RigL baseline). Grown weights start at zero. A connection dropped in
an update is never grown back in the same update (the grow pool is the
pre-update inactive set). All ties break toward the lowest flat index.

When the requested k exceeds the inactive pool, both the drop and the grow
counts are clamped to the pool size so per-layer active counts are conserved
exactly; the shortfall is reported.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .initialization import InitScheme, initialize
from .network import param_layout

METHODS = ("set", "rigl", "rigl_inverted", "none")


@dataclass
class DstConfig:
    method: str = "rigl"
    drop_fraction: float = 0.3  # initial fraction of active weights replaced
    update_every: int = 100
    t_end: int = 0  # no updates at or after this step
    schedule: str = "cosine"  # or 'lr_coupled'

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.drop_fraction < 1.0:
            raise ValueError(f"drop_fraction must be in (0, 1), got {self.drop_fraction}")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")


def is_update_step(cfg, step):
    return cfg.method != "none" and step > 0 and step < cfg.t_end and step % cfg.update_every == 0


def drop_fraction_at(cfg, step, lr_schedule=None):
    """Drop fraction alpha_t; zero past t_end."""
    if step > cfg.t_end:
        return 0.0
    if cfg.schedule == "cosine":
        return cfg.drop_fraction / 2.0 * (1.0 + math.cos(math.pi * step / cfg.t_end))
    if cfg.schedule == "lr_coupled":
        if lr_schedule is None:
            raise ValueError("lr_coupled drop schedule needs the learning-rate schedule")
        lr0 = lr_schedule(0)
        return cfg.drop_fraction * (lr_schedule(step) / lr0 if lr0 else 0.0)
    raise ValueError(f"unknown drop schedule {cfg.schedule!r}")


@dataclass
class LayerUpdate:
    layer: int  # ordinal among weighted layers
    n_dropped: int
    n_grown: int
    requested: int
    shortfall: int
    dropped: np.ndarray  # flat positions within the layer's weight tensor
    grown: np.ndarray


@dataclass
class UpdateReport:
    step: int
    method: str
    alpha: float
    layers: list = field(default_factory=list)
    grad_norm_before: float = None
    grad_norm_after: float = None

    @property
    def total_dropped(self):
        return sum(u.n_dropped for u in self.layers)

    @property
    def total_shortfall(self):
        return sum(u.shortfall for u in self.layers)


def _sample_rejection(rng, size, blocked, k):
    """k distinct positions in [0, size) avoiding `blocked`, by rejection."""
    chosen = []
    seen = set()
    while len(chosen) < k:
        i = int(rng.integers(size))
        if blocked[i] or i in seen:
            continue
        seen.add(i)
        chosen.append(i)
    return np.array(chosen, dtype=np.intp)


def dst_update(net, raw_grads, cfg, step, rng, lr_schedule=None, alpha=None):
    """Apply one mask update in place; returns an UpdateReport.

    `raw_grads` is the flat dense gradient over all coordinates (masked
    entries included) from the current batch; only RigL variants read it.
    """
    if alpha is None:
        alpha = drop_fraction_at(cfg, step, lr_schedule)
    report = UpdateReport(step=step, method=cfg.method, alpha=alpha)
    if cfg.method == "none" or alpha <= 0.0:
        return report

    for ordinal, (layer, w_sl, _) in enumerate(param_layout(net)):
        w = layer.w.ravel()
        mask = layer.mask.ravel()
        active = np.flatnonzero(mask > 0)
        inactive_count = w.size - active.size
        k_req = int(round(alpha * active.size))
        k = min(k_req, inactive_count)
        if k <= 0:
            report.layers.append(LayerUpdate(ordinal, 0, 0, k_req, k_req - k, np.empty(0, np.intp), np.empty(0, np.intp)))
            continue

        order = np.argsort(np.abs(w[active]), kind="stable")
        dropped = active[order[:k]]

        if cfg.method == "set":
            grown = _sample_rejection(rng, w.size, mask > 0, k)
        else:
            scores = np.abs(raw_grads[w_sl])
            pool = np.flatnonzero(mask == 0)
            if cfg.method == "rigl":
                pick = np.argsort(-scores[pool], kind="stable")[:k]
            else:  # rigl_inverted
                pick = np.argsort(scores[pool], kind="stable")[:k]
            grown = pool[pick]

        mask[dropped] = 0.0
        w[dropped] = 0.0
        mask[grown] = 1.0
        w[grown] = 0.0
        report.layers.append(LayerUpdate(ordinal, k, k, k_req, k_req - k, dropped, grown))
    return report


# ---------------------------------------------------------------------------
# gradual magnitude pruning


@dataclass
class PruneConfig:
    target_sparsity: float
    t_start: int
    t_end: int
    frequency: int = 100
    scope: str = "per_layer"  # or 'global'

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError("pruning needs t_start < t_end")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(f"target sparsity must be in [0, 1), got {self.target_sparsity}")


def is_prune_step(cfg, step):
    return cfg.t_start <= step <= cfg.t_end and (step - cfg.t_start) % cfg.frequency == 0


def prune_fraction_at(cfg, step):
    """Cubic sparsity ramp: 0 at t_start, target at t_end, nondecreasing."""
    if step <= cfg.t_start:
        return 0.0
    if step >= cfg.t_end:
        return cfg.target_sparsity
    progress = (step - cfg.t_start) / (cfg.t_end - cfg.t_start)
    return cfg.target_sparsity * (1.0 - (1.0 - progress) ** 3)


def _prune_layer(layer, n_remove):
    if n_remove <= 0:
        return 0
    w = layer.w.ravel()
    mask = layer.mask.ravel()
    active = np.flatnonzero(mask > 0)
    order = np.argsort(np.abs(w[active]), kind="stable")
    victims = active[order[:n_remove]]
    mask[victims] = 0.0
    w[victims] = 0.0
    return len(victims)


def prune_step(net, cfg, step):
    """Prune the smallest-magnitude active weights down to the scheduled sparsity.

    Masks only ever shrink. Returns `net`.
    """
    s_t = prune_fraction_at(cfg, step)
    weighted = [layer for layer, _, _ in param_layout(net)]
    if cfg.scope == "per_layer":
        for layer in weighted:
            target_active = layer.w.size - int(round(s_t * layer.w.size))
            current = int(layer.mask.sum())
            _prune_layer(layer, current - target_active)
    elif cfg.scope == "global":
        total = sum(l.w.size for l in weighted)
        target_active = total - int(round(s_t * total))
        mags = np.concatenate([np.abs((l.w * l.mask).ravel()) for l in weighted])
        act = np.concatenate([l.mask.ravel() > 0 for l in weighted])
        current = int(act.sum())
        n_remove = current - target_active
        if n_remove > 0:
            idx = np.flatnonzero(act)
            order = np.argsort(mags[idx], kind="stable")
            victims = set(idx[order[:n_remove]].tolist())
            pos = 0
            for layer in weighted:
                size = layer.w.size
                local = np.array(sorted(v - pos for v in victims if pos <= v < pos + size), dtype=np.intp)
                if local.size:
                    layer.mask.ravel()[local] = 0.0
                    layer.w.ravel()[local] = 0.0
                pos += size
    else:
        raise ValueError(f"unknown pruning scope {cfg.scope!r}")
    return net


# ---------------------------------------------------------------------------
# lottery tickets


@dataclass
class LotteryState:
    """Mask from a pruning run plus the rewind-step weights under that mask."""

    rewind_step: int
    lt_network: object  # theta^K * M, ready to train
    pruned_network: object  # the pruning solution the mask came from
    mask_digest: str


def extract_lottery(artifacts, rewind_step):
    """Build the lottery-ticket network from a finished pruning run.

    Takes the final pruning mask and the weights checkpointed at
    `rewind_step` (0 = original dense init); weights are elementwise-masked.
    """
    from .checkpoint import load_state
    from .network import mask_digest

    if rewind_step not in artifacts.checkpoints:
        raise CheckpointError(
            f"no checkpoint at step {rewind_step}; have {sorted(artifacts.checkpoints)}"
        )
    pruned = artifacts.final_net
    lt = pruned.clone()
    load_state(lt, artifacts.checkpoints[rewind_step])
    # rewound weights, final connectivity
    for (_, la), (_, lb) in zip(lt.weighted_layers(), pruned.weighted_layers()):
        la.mask = lb.mask.copy()
        la.w *= la.mask
    lt.step = 0
    return LotteryState(
        rewind_step=rewind_step,
        lt_network=lt,
        pruned_network=pruned,
        mask_digest=mask_digest(pruned),
    )


def make_scratch(mask_source, scheme, rng):
    """Fresh random initialization on the same connectivity as `mask_source`."""
    if isinstance(scheme, str):
        scheme = InitScheme(family=scheme)
    net = mask_source.clone()
    net.step = 0
    initialize(net, scheme, rng)
    return net
