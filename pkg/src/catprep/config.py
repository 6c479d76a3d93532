"""Experiment configuration: defaults, JSON round-trip, validation.

Times are in microseconds, rates in 1/us, frequencies in MHz.

The default coherence numbers are calibration assumptions, not measured
hardware values: a long-lived 3D cavity (20 ms single-photon lifetime,
negligible intrinsic dephasing) and a millisecond-class three-level
ancilla.  Every output manifest echoes them so runs are reproducible and
the assumption is visible.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

from .noise import AncillaRates, ModeRates, NoiseModel

ASSUMPTION_NOTE = (
    "Noise rates and chi are calibration assumptions (cavity T1 = 20 ms, "
    "cavity Tphi = 25 s, ancilla T1(f->e) = 1.5 ms, ancilla Tphi = 8 ms with "
    "eps_e:eps_f = 1:2, chi_f/2pi = 2 MHz, Omega_S = chi_f/10), not published "
    "device values."
)


@dataclass
class NoiseConfig:
    kappa_loss_per_us: float = 5e-5          # cavity T1 = 20 ms
    kappa_dephasing_per_us: float = 4e-8     # cavity Tphi = 25 s
    gamma_fe_per_us: float = 1.0 / 1500.0    # ancilla f->e T1 = 1.5 ms
    gamma_phi_per_us: float = 1.25e-4        # ancilla Tphi = 8 ms
    eps_e: float = 1.0
    eps_f: float = 2.0
    two_level_ancilla: bool = False


@dataclass
class ExperimentConfig:
    experiment: str = "bell"                 # bell | psi | baseline
    alpha: float = 2.6
    s: float = 1.0
    theta: float = math.pi / 6
    phi: float = 0.0
    chi_f_mhz: float = 2.0
    chi_e_ratio: float = 1.0                 # chi_e / chi_f (error transparency)
    omega_ratio: float = 0.1                 # selective Rabi rate / chi_f
    parity_rounds: int = 2
    truncation: Optional[int] = None         # None: per-mode automatic
    trajectories: int = 1200
    seed: int = 2026
    workers: Optional[int] = None            # None: cpu count
    bootstrap: int = 1000
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    output_dir: str = "runs"

    # ------------------------------------------------------------ validation

    def validate(self):
        errors = []
        if self.experiment not in ("bell", "psi", "baseline"):
            errors.append(f"experiment: unknown value {self.experiment!r}")
        if self.alpha <= 0:
            errors.append("alpha: must be > 0")
        if self.s < 0:
            errors.append("s: must be >= 0")
        if not 0 <= self.theta <= math.pi / 2:
            errors.append("theta: must lie in [0, pi/2]")
        if self.chi_f_mhz <= 0:
            errors.append("chi_f_mhz: must be > 0")
        if not 0 < self.omega_ratio <= 0.5:
            errors.append("omega_ratio: must lie in (0, 0.5]")
        if self.parity_rounds < 1:
            errors.append("parity_rounds: must be >= 1")
        if self.truncation is not None and self.truncation < 2:
            errors.append("truncation: must be >= 2")
        if self.trajectories < 1:
            errors.append("trajectories: must be >= 1")
        n = self.noise
        for name in ("kappa_loss_per_us", "kappa_dephasing_per_us",
                     "gamma_fe_per_us", "gamma_phi_per_us"):
            if getattr(n, name) < 0:
                errors.append(f"noise.{name}: must be >= 0")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    # ------------------------------------------------------------ derived

    @property
    def chi_f(self) -> float:
        """Angular cross-Kerr rate in rad/us."""
        return 2.0 * math.pi * self.chi_f_mhz

    def resolved_workers(self) -> int:
        return self.workers if self.workers else (os.cpu_count() or 1)

    def resolved_seed(self) -> int:
        env = os.environ.get("CATPREP_SEED")
        return int(env) if env else self.seed

    def noise_model(self, mode_labels) -> NoiseModel:
        n = self.noise
        rates = ModeRates(kappa_loss=n.kappa_loss_per_us,
                          kappa_dephasing=n.kappa_dephasing_per_us)
        return NoiseModel(
            modes={m: rates for m in mode_labels},
            ancilla=AncillaRates(gamma_fe=n.gamma_fe_per_us,
                                 gamma_phi=n.gamma_phi_per_us,
                                 eps_e=n.eps_e, eps_f=n.eps_f,
                                 two_level=n.two_level_ancilla),
            s=self.s,
        )

    # ------------------------------------------------------------ (de)serialization

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "noise" in data and data["noise"] is not None:
            nd = dict(data["noise"])
            nknown = {f.name for f in dataclasses.fields(NoiseConfig)}
            nunknown = set(nd) - nknown
            if nunknown:
                raise ConfigError(f"unknown noise fields: {sorted(nunknown)}")
            data["noise"] = NoiseConfig(**nd)
        cfg = cls(**data)
        return cfg.validate()

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration fields."""
