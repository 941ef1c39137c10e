"""Adam updates, constraints, minibatch scheduling, multiscale driver and the reconstruction loop.

Concurrency: per update, ``n_workers * n_aggregate`` minibatch gradients are
computed against a read-only snapshot of the volume (on a thread pool when
``n_workers > 1``), collected in minibatch order and averaged. A single
updater then applies Adam and the constraints. Results therefore depend only
on ``(rng_seed, n_workers * n_aggregate)``, not on scheduling.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import (
    AdamParams,
    ConstraintError,
    DimensionError,
    MeasuredDataset,
    Mode,
    NumericalError,
    ObjectVolume,
    ReconConfig,
    ShrinkWrapParams,
    SupportMask,
)
from .forward import Probe
from .gradient import Batch, GradientPair, LossBreakdown, loss_and_gradient

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m_delta: np.ndarray
    v_delta: np.ndarray
    m_beta: np.ndarray
    v_beta: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(*(np.zeros(shape) for _ in range(4)), t=0)

    @property
    def shape(self):
        return self.m_delta.shape


def _adam_update(x, g, m, v, t, hyper: AdamParams):
    m = hyper.beta1 * m + (1 - hyper.beta1) * g
    v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
    m_hat = m / (1 - hyper.beta1**t)
    v_hat = v / (1 - hyper.beta2**t)
    return x - hyper.step_size * m_hat / (np.sqrt(v_hat) + hyper.epsilon), m, v


def adam_step(state: AdamState, grads: GradientPair, vol: ObjectVolume, hyper: AdamParams):
    """One bias-corrected Adam step on both ``delta`` and ``beta``. Returns ``(vol, state)``."""
    if state.shape != vol.shape or grads.shape != vol.shape:
        raise DimensionError("Adam state, gradient and volume shapes differ")
    t = state.t + 1
    d, md, vd = _adam_update(vol.delta, grads.g_delta, state.m_delta, state.v_delta, t, hyper)
    b, mb, vb = _adam_update(vol.beta, grads.g_beta, state.m_beta, state.v_beta, t, hyper)
    return ObjectVolume(d, b, vol.voxel_size_nm), AdamState(md, vd, mb, vb, t)


def apply_constraints(vol: ObjectVolume, support: SupportMask | None) -> ObjectVolume:
    """Zero outside the support and clip negative values inside it."""
    d = np.maximum(vol.delta, 0.0)
    b = np.maximum(vol.beta, 0.0)
    if support is not None:
        support.check_matches(vol)
        d[~support.mask] = 0.0
        b[~support.mask] = 0.0
    return ObjectVolume(d, b, vol.voxel_size_nm)


def satisfies_constraints(vol: ObjectVolume, support: SupportMask | None) -> bool:
    ok = bool(np.all(vol.delta >= 0) and np.all(vol.beta >= 0))
    if support is not None:
        ok = ok and not np.any(vol.delta[~support.mask]) and not np.any(vol.beta[~support.mask])
    return ok


def shrink_wrap(vol: ObjectVolume, support: SupportMask | None, params: ShrinkWrapParams) -> SupportMask:
    """Contract the support to where the blurred ``delta`` exceeds a fraction of its maximum."""
    previous = np.ones(vol.shape, dtype=bool) if support is None else support.mask
    if params.threshold_fraction <= 0:
        return SupportMask(previous.copy())
    blurred = ndimage.gaussian_filter(vol.delta, params.gaussian_sigma_px)
    peak = blurred.max()
    mask = previous & (blurred > params.threshold_fraction * peak) if peak > 0 else previous.copy()
    if not mask.any():
        raise ConstraintError(
            f"shrink-wrap at threshold {params.threshold_fraction} emptied the support; lower the threshold"
        )
    return SupportMask(mask)


@dataclass(frozen=True)
class EpochPlan:
    order: np.ndarray
    minibatches: tuple

    def __len__(self):
        return len(self.minibatches)


def plan_epoch(n_angles: int, minibatch_size: int, rng) -> EpochPlan:
    """Random permutation of angle indices split into chunks; the last may be short."""
    if minibatch_size < 1:
        raise ValueError("minibatch_size must be >= 1")
    order = rng.permutation(n_angles)
    chunks = tuple(order[i:i + minibatch_size] for i in range(0, n_angles, minibatch_size))
    return EpochPlan(order, chunks)


def aggregate_and_average(grads) -> GradientPair:
    """Elementwise mean of gradients, summed in list order."""
    grads = list(grads)
    if not grads:
        raise ValueError("cannot average an empty list of gradients")
    d = grads[0].g_delta.copy()
    b = grads[0].g_beta.copy()
    for g in grads[1:]:
        if g.shape != d.shape:
            raise DimensionError("gradient shapes differ")
        d += g.g_delta
        b += g.g_beta
    return GradientPair(d / len(grads), b / len(grads))


# --- multiscale -------------------------------------------------------------


def multiscale_levels(n: int, floor_px: int) -> int:
    """Number of halvings ``m`` so that ``n / 2**m <= floor_px``."""
    m = 0
    while n / 2**m > floor_px:
        m += 1
    if n % 2**m:
        raise DimensionError(f"grid size {n} is not divisible by 2^{m}")
    return m


def _block_mean(a, f, axes):
    shape = []
    for ax, s in enumerate(a.shape):
        if ax in axes:
            if s % f:
                raise DimensionError(f"axis of length {s} not divisible by {f}")
            shape += [s // f, f]
        else:
            shape += [s]
    red = []
    pos = 0
    for ax, s in enumerate(a.shape):
        if ax in axes:
            red.append(pos + 1)
            pos += 2
        else:
            pos += 1
    return a.reshape(shape).mean(axis=tuple(red))


def downsample_volume(vol: ObjectVolume, factor: int) -> ObjectVolume:
    if factor == 1:
        return vol
    axes = [0, 1, 2]
    return ObjectVolume(_block_mean(vol.delta, factor, axes), _block_mean(vol.beta, factor, axes),
                        vol.voxel_size_nm * factor)


def downsample_support(support: SupportMask, factor: int) -> SupportMask:
    if factor == 1:
        return support
    m = support.mask
    n = m.shape[0] // factor
    return SupportMask(m.reshape(n, factor, n, factor, n, factor).any(axis=(1, 3, 5)))


def downsample_dataset(dataset: MeasuredDataset, factor: int) -> MeasuredDataset:
    """Coarsen frames to match a volume coarsened by ``factor``.

    Full-field frames are block-averaged. Far-field frames keep their central
    ``1/factor`` of frequencies, scaled by ``1/factor**2`` to match the
    orthonormal transform of the coarser grid.
    """
    if factor == 1:
        return dataset
    geom = dataset.geometry
    data = dataset.intensities
    if geom.mode is Mode.FULLFIELD:
        frames = _block_mean(np.asarray(data, dtype=np.float64), factor, [2, 3])
    else:
        ny, nx = data.shape[2:]
        if ny % factor or nx % factor:
            raise DimensionError(f"frames {data.shape[2:]} not divisible by {factor}")
        cy, cx = ny // factor, nx // factor
        y0, x0 = ny // 2 - cy // 2, nx // 2 - cx // 2
        frames = np.asarray(data[:, :, y0:y0 + cy, x0:x0 + cx], dtype=np.float64) / factor**2
    return dataset.replace(intensities=frames, geometry=geom.downsampled(factor))


def downsample_problem(vol, dataset, factor):
    """Coarsen a volume and its dataset together by ``factor``."""
    vol_c = None if vol is None else downsample_volume(vol, factor)
    return vol_c, downsample_dataset(dataset, factor)


def upsample_volume(vol: ObjectVolume, factor: int = 2) -> ObjectVolume:
    """Trilinear upsampling with voxel edges aligned."""
    def up(g):
        return ndimage.zoom(g, factor, order=1, mode="nearest", grid_mode=True)

    return ObjectVolume(up(vol.delta), up(vol.beta), vol.voxel_size_nm / factor)


def upsample_support(support: SupportMask, factor: int = 2) -> np.ndarray:
    m = support.mask
    for ax in range(3):
        m = np.repeat(m, factor, axis=ax)
    return m


# --- reconstruction loop ------------------------------------------------------


@dataclass(frozen=True)
class HistoryEntry:
    level: int
    epoch: int
    update: int
    angles: tuple
    loss: LossBreakdown

    def as_dict(self):
        return {"level": self.level, "epoch": self.epoch, "update": self.update, **self.loss.as_dict()}


@dataclass
class ReconState:
    """Everything needed to continue a run after the last completed epoch."""

    level: int
    epoch: int
    volume: ObjectVolume
    adam: AdamState
    support: SupportMask | None
    history: list = field(default_factory=list)
    finished_level: bool = False


@dataclass
class ReconResult:
    volume: ObjectVolume
    history: list
    support: SupportMask | None
    epochs_per_level: list

    def epoch_means(self):
        """Mean total loss per ``(level, epoch)`` in run order."""
        out = {}
        for h in self.history:
            out.setdefault((h.level, h.epoch), []).append(h.loss.total)
        return {k: float(np.mean(v)) for k, v in out.items()}


def initial_volume(shape, voxel_nm, cfg: ReconConfig, rng) -> ObjectVolume:
    """Gaussian random start around the configured means, negatives clipped."""
    i = cfg.init
    d = rng.normal(i.delta_mean, i.rel_std * i.delta_mean, shape)
    b = rng.normal(i.beta_mean, i.rel_std * i.beta_mean, shape)
    return ObjectVolume(np.maximum(d, 0), np.maximum(b, 0), voxel_nm)


def _epoch_rng(seed, level, epoch):
    return np.random.default_rng([seed, level, epoch])


def _loss_is_finite(entry: LossBreakdown):
    return all(math.isfinite(v) for v in entry.as_dict().values())


def reconstruct(dataset: MeasuredDataset, cfg: ReconConfig, support0: SupportMask | None = None,
                probe: Probe | None = None, resume: ReconState | None = None,
                on_epoch=None, on_update=None) -> ReconResult:
    """Multiscale minibatch Adam reconstruction with positivity and support constraints.

    ``on_epoch(state)`` receives a :class:`ReconState` after each epoch;
    ``on_update(volume, support)`` is called after every projected update.
    Raises :class:`NumericalError` carrying the last finite state on divergence.
    """
    geom = dataset.geometry
    n = dataset.frame_shape[0]
    levels = multiscale_levels(n, cfg.multiscale_floor_px)
    full_shape = (n, n, n)
    if cfg.use_support:
        support_full = support0 if support0 is not None else SupportMask.full(full_shape)
        if support_full.shape != full_shape:
            raise DimensionError(f"support {support_full.shape} does not match grid {full_shape}")
    else:
        support_full = None

    history = list(resume.history) if resume else []
    epochs_per_level = []
    vol = None
    support = None
    start_level = resume.level if resume else levels
    group = cfg.n_workers * cfg.n_aggregate
    pool = ThreadPoolExecutor(max_workers=cfg.n_workers) if cfg.n_workers > 1 else None
    try:
        for level in range(levels, -1, -1):
            if level > start_level:
                continue
            factor = 2**level
            _, data_l = downsample_problem(None, dataset, factor)
            geom_l = data_l.geometry
            probe_l = probe.downsampled(factor) if probe is not None else None
            shape_l = tuple(s // factor for s in full_shape)
            voxel_l = geom.voxel_size_nm * factor
            base_support = None if support_full is None else downsample_support(support_full, factor)

            first_epoch = 0
            prev_mean = None
            if resume is not None and level == resume.level:
                vol, adam, support = resume.volume, resume.adam, resume.support
                first_epoch = resume.epoch
                means = [np.mean([h.loss.total for h in history if h.level == level and h.epoch == e])
                         for e in range(first_epoch)]
                prev_mean = means[-1] if means else None
                if resume.finished_level:
                    epochs_per_level.append(first_epoch)
                    continue
            else:
                if vol is None:
                    vol = initial_volume(shape_l, voxel_l, cfg, np.random.default_rng([cfg.rng_seed, 7919, level]))
                    support = base_support
                else:
                    vol = upsample_volume(vol, 2)
                    if base_support is not None:
                        support = SupportMask(base_support.mask & upsample_support(support, 2))
                vol = apply_constraints(vol, support)
                adam = AdamState.zeros(shape_l)

            ran = first_epoch
            for epoch in range(first_epoch, cfg.max_epochs):
                plan = plan_epoch(geom_l.n_angles, cfg.minibatch_size, _epoch_rng(cfg.rng_seed, level, epoch))
                totals = []
                for u, start in enumerate(range(0, len(plan), group)):
                    chunk = plan.minibatches[start:start + group]
                    batches = [Batch.from_dataset(data_l, idx) for idx in chunk]
                    snapshot = vol

                    def work(b, snapshot=snapshot):
                        return loss_and_gradient(snapshot, b, probe_l, geom_l, cfg)

                    results = list(pool.map(work, batches)) if pool else [work(b) for b in batches]
                    for idx, (lb, _) in zip(chunk, results):
                        entry = HistoryEntry(level, epoch, u, tuple(int(i) for i in idx), lb)
                        if not _loss_is_finite(lb):
                            raise NumericalError(
                                f"loss became non-finite at level {level}, epoch {epoch}",
                                state=ReconState(level, epoch, snapshot, adam, support, history),
                            )
                        history.append(entry)
                        totals.append(lb.total)
                    grads = aggregate_and_average([g for _, g in results])
                    if not (np.all(np.isfinite(grads.g_delta)) and np.all(np.isfinite(grads.g_beta))):
                        raise NumericalError(
                            f"gradient became non-finite at level {level}, epoch {epoch}",
                            state=ReconState(level, epoch, snapshot, adam, support, history),
                        )
                    vol, adam = adam_step(adam, grads, vol, cfg.adam)
                    vol = apply_constraints(vol, support)
                    if on_update is not None:
                        on_update(vol, support)

                mean = float(np.mean(totals))
                done = prev_mean is not None and (prev_mean - mean) < cfg.stop_rel_decrease * abs(prev_mean)
                if (support is not None and cfg.shrink_wrap.enabled
                        and (epoch + 1) % cfg.shrink_wrap.period_epochs == 0):
                    support = shrink_wrap(vol, support, cfg.shrink_wrap)
                    vol = apply_constraints(vol, support)
                log.info("level %d epoch %d: mean loss %.6g", level, epoch, mean)
                if on_epoch is not None:
                    on_epoch(ReconState(level, epoch + 1, vol, adam, support, list(history), finished_level=done))
                prev_mean = mean
                ran = epoch + 1
                if done:
                    break
            epochs_per_level.append(ran)
    finally:
        if pool is not None:
            pool.shutdown()
    return ReconResult(vol, history, support, epochs_per_level)
