"""HDF5 persistence for phantoms, datasets, volumes and checkpoints.

The layout is documented field by field in ``docs/format.md``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import h5py
import numpy as np

from . import __version__
from .core import (
    DataError,
    ExperimentGeometry,
    MeasuredDataset,
    Mode,
    ObjectVolume,
    SupportMask,
    Wavefield,
)
from .forward import Probe
from .gradient import LossBreakdown
from .optimizer import AdamState, HistoryEntry, ReconState

GEOMETRY_SCALARS = ("energy_keV", "voxel_size_nm", "detector_distance_nm", "n_slices", "slice_thickness_nm",
                    "klein_cook_q", "mean_ri")
HISTORY_COLUMNS = ("level", "epoch", "update", "fidelity", "l1_delta", "l1_beta", "tv")


def _stamp(f, config_text=None):
    f.attrs["code_version"] = __version__
    if config_text is not None:
        f.attrs["config"] = config_text


def _open_read(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    try:
        return h5py.File(path, "r")
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None


def _atomic_write(path, writer):
    """Write through a temporary file so readers never see a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with h5py.File(tmp, "w") as f:
        writer(f)
    os.replace(tmp, path)


def _require(f, name):
    if name not in f:
        raise DataError(f"{f.filename}: missing {name}")
    return f[name]


def write_geometry(group, geom: ExperimentGeometry):
    for name in GEOMETRY_SCALARS:
        group[name] = getattr(geom, name)
    group["angles_deg"] = geom.angles_deg
    group["probe_positions"] = geom.probe_positions
    group.attrs["mode"] = geom.mode.value


def read_geometry(group) -> ExperimentGeometry:
    kw = {name: group[name][()] for name in GEOMETRY_SCALARS}
    kw["n_slices"] = int(kw["n_slices"])
    return ExperimentGeometry(
        angles_deg=group["angles_deg"][()],
        probe_positions=group["probe_positions"][()],
        mode=Mode(group.attrs["mode"]),
        **{k: float(v) if k != "n_slices" else v for k, v in kw.items()},
    )


def write_probe(group, probe: Probe):
    group["real"] = probe.field.values.real
    group["imag"] = probe.field.values.imag
    group["positions"] = probe.positions
    group.attrs["pixel_size_nm"] = probe.field.pixel_size_nm


def read_probe(group) -> Probe:
    values = group["real"][()] + 1j * group["imag"][()]
    return Probe(Wavefield(values, float(group.attrs["pixel_size_nm"])), group["positions"][()])


def write_phantom(path, vol: ObjectVolume, labels=None, config_text=None):
    def writer(f):
        _stamp(f, config_text)
        g = f.create_group("phantom")
        g.create_dataset("delta", data=vol.delta.astype(np.float32), compression="gzip")
        g.create_dataset("beta", data=vol.beta.astype(np.float32), compression="gzip")
        if labels is not None:
            g.create_dataset("labels", data=labels.astype(np.uint8), compression="gzip")
        g.attrs["voxel_size_nm"] = vol.voxel_size_nm

    _atomic_write(path, writer)


def read_phantom(path):
    """Returns ``(ObjectVolume, labels or None)``."""
    with _open_read(path) as f:
        g = _require(f, "phantom")
        vol = ObjectVolume(g["delta"][()].astype(np.float64), g["beta"][()].astype(np.float64),
                           float(g.attrs["voxel_size_nm"]))
        labels = g["labels"][()] if "labels" in g else None
    return vol, labels


def write_dataset(path, ds: MeasuredDataset, probe: Probe | None = None, config_text=None):
    def writer(f):
        _stamp(f, config_text)
        ex = f.create_group("exchange")
        ny, nx = ds.frame_shape
        ex.create_dataset("data", data=ds.intensities.astype(np.float32), chunks=(1, 1, ny, nx),
                          compression="gzip")
        if ds.photon_budget is not None:
            ex.attrs["photon_budget"] = ds.photon_budget
        ex.attrs["metadata"] = json.dumps(ds.metadata)
        write_geometry(f.create_group("geometry"), ds.geometry)
        if probe is not None:
            write_probe(f.create_group("probe"), probe)

    _atomic_write(path, writer)


def read_dataset(path):
    """Returns ``(MeasuredDataset, Probe or None)``."""
    with _open_read(path) as f:
        ex = _require(f, "exchange")
        data = _require(f, "exchange/data")[()].astype(np.float64)
        geom = read_geometry(_require(f, "geometry"))
        budget = ex.attrs.get("photon_budget")
        meta = json.loads(ex.attrs.get("metadata", "{}"))
        probe = read_probe(f["probe"]) if "probe" in f else None
    ds = MeasuredDataset(data, geom, None if budget is None else float(budget), meta)
    return ds, probe


def write_volume(path, vol: ObjectVolume, support: SupportMask | None = None, config_text=None, extra=None):
    def writer(f):
        _stamp(f, config_text)
        g = f.create_group("volume")
        g["delta"] = vol.delta
        g["beta"] = vol.beta
        g.attrs["voxel_size_nm"] = vol.voxel_size_nm
        if support is not None:
            g.create_dataset("support", data=support.mask, compression="gzip")
        for k, v in (extra or {}).items():
            f.attrs[k] = v

    _atomic_write(path, writer)


def read_volume(path) -> ObjectVolume:
    """Reads ``/volume`` or, failing that, ``/phantom``."""
    with _open_read(path) as f:
        g = f["volume"] if "volume" in f else _require(f, "phantom")
        return ObjectVolume(g["delta"][()].astype(np.float64), g["beta"][()].astype(np.float64),
                            float(g.attrs["voxel_size_nm"]))


def history_table(history):
    """History entries as a float array with columns ``HISTORY_COLUMNS`` plus padded angle indices."""
    width = max((len(h.angles) for h in history), default=1)
    rows = np.full((len(history), len(HISTORY_COLUMNS) + width), -1.0)
    for i, h in enumerate(history):
        rows[i, :3] = (h.level, h.epoch, h.update)
        rows[i, 3:7] = (h.loss.fidelity, h.loss.l1_delta, h.loss.l1_beta, h.loss.tv)
        rows[i, 7:7 + len(h.angles)] = h.angles
    return rows


def history_from_table(rows):
    out = []
    for r in np.asarray(rows):
        angles = tuple(int(a) for a in r[7:] if a >= 0)
        out.append(HistoryEntry(int(r[0]), int(r[1]), int(r[2]), angles, LossBreakdown(*map(float, r[3:7]))))
    return out


def write_checkpoint(path, state: ReconState, config_text=None):
    def writer(f):
        _stamp(f, config_text)
        g = f.create_group("volume")
        g["delta"] = state.volume.delta
        g["beta"] = state.volume.beta
        g.attrs["voxel_size_nm"] = state.volume.voxel_size_nm
        if state.support is not None:
            g.create_dataset("support", data=state.support.mask, compression="gzip")
        a = f.create_group("adam")
        for name in ("m_delta", "v_delta", "m_beta", "v_beta"):
            a[name] = getattr(state.adam, name)
        a.attrs["t"] = state.adam.t
        f.attrs["level"] = state.level
        f.attrs["epoch"] = state.epoch
        f.attrs["finished_level"] = state.finished_level
        f["history"] = history_table(state.history)

    _atomic_write(path, writer)


def read_checkpoint(path) -> ReconState:
    with _open_read(path) as f:
        g = _require(f, "volume")
        vol = ObjectVolume(g["delta"][()], g["beta"][()], float(g.attrs["voxel_size_nm"]))
        support = SupportMask(g["support"][()]) if "support" in g else None
        a = _require(f, "adam")
        adam = AdamState(a["m_delta"][()], a["v_delta"][()], a["m_beta"][()], a["v_beta"][()], int(a.attrs["t"]))
        history = history_from_table(f["history"][()])
        return ReconState(int(f.attrs["level"]), int(f.attrs["epoch"]), vol, adam, support, history,
                          bool(f.attrs["finished_level"]))


def read_config_text(path):
    with _open_read(path) as f:
        return f.attrs.get("config")

