"""Run configuration: YAML file, validated with pydantic and mapped onto the library types.

The schema is documented in ``docs/config.md``; ``configs/`` holds examples.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .core import (
    AdamParams,
    ConfigError,
    ExperimentGeometry,
    InitParams,
    Mode,
    ReconConfig,
    ShrinkWrapParams,
)
from .forward import Probe, make_gaussian_probe, make_scan_grid
from .phantom import MaterialRI


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MaterialSpec(_Strict):
    name: str
    delta: float = Field(ge=0)
    beta: float = Field(ge=0)

    def to_material(self, energy_keV):
        return MaterialRI(self.name, self.delta, self.beta, energy_keV)


class MaterialsSpec(_Strict):
    body: MaterialSpec
    spheres: MaterialSpec


class PhantomSpec(_Strict):
    kind: Literal["cone", "sphere"] = "cone"
    n: int = Field(64, ge=8)
    voxel_nm: float = Field(1.0, gt=0)
    wall_thickness_px: Optional[float] = Field(None, gt=0)
    sphere_radius_px: float = Field(10.0, gt=0)
    n_outer: int = Field(50, ge=0)
    n_inner: int = Field(10, ge=0)
    n_grains: int = Field(40, ge=0)


class ScanSpec(_Strict):
    n_side: int = Field(7, ge=1)
    probe_sigma_px: float = Field(1.5, gt=0)
    max_phase_rad: float = 0.5
    patch_px: int = Field(8, ge=1)


class GeometrySpec(_Strict):
    energy_keV: float = Field(5.0, gt=0)
    detector_distance_nm: float = Field(1000.0, ge=0)
    mode: Mode = Mode.FULLFIELD
    n_angles: int = 120
    angle_range_deg: float = Field(360.0, gt=0)
    slice_thickness_nm: Optional[float] = Field(None, gt=0)
    klein_cook_q: float = Field(1.0, gt=0)
    mean_ri: float = Field(1.0, gt=0)
    scan: ScanSpec = ScanSpec()

    @field_validator("n_angles")
    @classmethod
    def _angles(cls, v):
        if v < 1:
            raise ValueError("n_angles must be at least 1")
        return v


class NoiseSpec(_Strict):
    n_ph: Optional[float] = Field(None, gt=0)
    sigma_aor: Optional[float] = Field(None, gt=0, le=1)
    seed: int = 0


class AdamSpec(_Strict):
    step_size: float = Field(AdamParams.step_size, gt=0)
    beta1: float = Field(AdamParams.beta1, gt=0, lt=1)
    beta2: float = Field(AdamParams.beta2, gt=0, lt=1)
    epsilon: float = Field(AdamParams.epsilon, gt=0)


class InitSpec(_Strict):
    delta_mean: float = Field(InitParams.delta_mean, ge=0)
    beta_mean: float = Field(InitParams.beta_mean, ge=0)
    rel_std: float = Field(InitParams.rel_std, ge=0)


class ShrinkWrapSpec(_Strict):
    enabled: Optional[bool] = None
    gaussian_sigma_px: float = Field(ShrinkWrapParams.gaussian_sigma_px, ge=0)
    threshold_fraction: float = Field(ShrinkWrapParams.threshold_fraction, ge=0, lt=1)
    period_epochs: int = Field(ShrinkWrapParams.period_epochs, ge=1)


class SupportSpec(_Strict):
    source: Literal["paganin", "none"] = "paganin"
    sigma_px: float = Field(2.0, ge=0)
    threshold_fraction: float = Field(0.05, ge=0, lt=1)


class ReconSpec(_Strict):
    alpha_delta: Optional[float] = Field(None, ge=0)
    alpha_beta: Optional[float] = Field(None, ge=0)
    gamma: Optional[float] = Field(None, ge=0)
    adam: AdamSpec = AdamSpec()
    minibatch_size: Optional[int] = Field(None, ge=1)
    n_aggregate: int = Field(1, ge=1)
    n_workers: int = Field(1, ge=1)
    multiscale_floor_px: int = Field(64, ge=1)
    stop_rel_decrease: float = Field(0.03, gt=0, lt=1)
    max_epochs: int = Field(10, ge=0)
    init: InitSpec = InitSpec()
    shrink_wrap: ShrinkWrapSpec = ShrinkWrapSpec()
    support: SupportSpec = SupportSpec()
    checkpoint_stride: int = Field(0, ge=0)


class ReferenceSpec(_Strict):
    n_iter: int = Field(200, ge=1)
    delta_over_beta: Optional[float] = Field(None, gt=0)


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "run"
    phantom: PhantomSpec = PhantomSpec()
    materials: MaterialsSpec
    geometry: GeometrySpec = GeometrySpec()
    noise: NoiseSpec = NoiseSpec()
    reconstruction: ReconSpec = ReconSpec()
    reference: ReferenceSpec = ReferenceSpec()

    # --- mapping onto library types -------------------------------------------------

    def materials_dict(self):
        e = self.geometry.energy_keV
        return {"body": self.materials.body.to_material(e), "spheres": self.materials.spheres.to_material(e)}

    def delta_over_beta(self):
        if self.reference.delta_over_beta is not None:
            return self.reference.delta_over_beta
        body = self.materials.body
        if body.beta == 0:
            raise ConfigError("materials.body.beta is 0; set reference.delta_over_beta explicitly")
        return body.delta / body.beta

    def angles_deg(self):
        g = self.geometry
        return np.linspace(0.0, g.angle_range_deg, g.n_angles, endpoint=False)

    def probe(self) -> Probe | None:
        g = self.geometry
        if g.mode is Mode.FULLFIELD:
            return None
        s = g.scan
        probe = make_gaussian_probe(s.probe_sigma_px, s.max_phase_rad, s.patch_px, self.phantom.voxel_nm)
        return probe.with_positions(make_scan_grid(s.n_side, self.phantom.n, s.patch_px))

    def experiment_geometry(self) -> ExperimentGeometry:
        g = self.geometry
        p = self.phantom
        dz = p.voxel_nm if g.slice_thickness_nm is None else g.slice_thickness_nm
        probe = self.probe()
        return ExperimentGeometry(
            energy_keV=g.energy_keV,
            voxel_size_nm=p.voxel_nm,
            detector_distance_nm=g.detector_distance_nm,
            angles_deg=self.angles_deg(),
            n_slices=max(1, int(round(p.n * p.voxel_nm / dz))),
            mode=g.mode,
            slice_thickness_nm=dz,
            probe_positions=probe.positions if probe is not None else np.zeros((0, 2), dtype=np.int64),
            klein_cook_q=g.klein_cook_q,
            mean_ri=g.mean_ri,
        )

    def recon_config(self, mode: Mode, n_workers=None, seed=None) -> ReconConfig:
        r = self.reconstruction
        overrides = {k: getattr(r, k) for k in ("alpha_delta", "alpha_beta", "gamma", "minibatch_size")
                     if getattr(r, k) is not None}
        sw = r.shrink_wrap
        sw_enabled = sw.enabled if sw.enabled is not None else Mode(mode) is Mode.FULLFIELD
        overrides.update(
            adam=AdamParams(**r.adam.model_dump()),
            n_aggregate=r.n_aggregate,
            n_workers=n_workers or r.n_workers,
            multiscale_floor_px=r.multiscale_floor_px,
            stop_rel_decrease=r.stop_rel_decrease,
            max_epochs=r.max_epochs,
            init=InitParams(**r.init.model_dump()),
            rng_seed=self.seed if seed is None else seed,
            shrink_wrap=ShrinkWrapParams(sw_enabled, sw.gaussian_sigma_px, sw.threshold_fraction, sw.period_epochs),
            # the Paganin support needs full-field data; ptychography runs without one
            use_support=r.support.source != "none" and Mode(mode) is Mode.FULLFIELD,
            checkpoint_stride=r.checkpoint_stride,
        )
        return ReconConfig.for_mode(mode, **overrides)

    def dump(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{where}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict, overrides: dict | None = None) -> RunConfig:
    data = dict(data or {})
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"invalid config: {_format_validation(err)}") from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, overrides)
