"""
Configuration for the hybrid IAS EIT reconstruction toolkit
"""
import os
import logging
from dataclasses import dataclass, asdict, fields
from typing import Dict, Optional

from dotenv import load_dotenv, dotenv_values

from errors import ConfigurationError

load_dotenv()

# Debug mode - verbose per-iteration logging (noticeable slowdown on big meshes)
DEBUG_MODE = os.getenv('EIT_DEBUG', '0') == '1'
LOG_LEVEL = os.getenv('EIT_LOG_LEVEL', 'DEBUG' if DEBUG_MODE else 'INFO')

# Water tank (phantom #1 protocol)
SIGMA0 = float(os.getenv('EIT_SIGMA0', '0.79'))                    # S/m
CONTACT_IMPEDANCE = float(os.getenv('EIT_CONTACT_IMPEDANCE', '1e-6'))
NOISE_SCALE = float(os.getenv('EIT_NOISE_SCALE', '0.004'))          # omega
CURRENT_AMPLITUDE = float(os.getenv('EIT_CURRENT_AMPLITUDE', '1.0'))

# Electrode ring
N_ELECTRODES = 32
ELECTRODE_ANGLE_DEG = 5.625   # arc width and gap between adjacent electrodes
DOMAIN_RADIUS = 1.0

# Reconstruction mesh comparable to the provided 1602-node KTC mesh
RECON_TARGET_H = float(os.getenv('EIT_RECON_TARGET_H', '0.046'))

# Hybrid IAS
ETA1 = float(os.getenv('EIT_ETA1', '3e-4'))
VARTHETA_STAR = float(os.getenv('EIT_VARTHETA_STAR', '0.03'))
R2 = float(os.getenv('EIT_R2', '0.5'))
K_MAX = int(os.getenv('EIT_K_MAX', '5'))               # per phase
TOL = float(os.getenv('EIT_TOL', '0.0'))
INNER_LINEARIZATIONS = int(os.getenv('EIT_INNER_LINEARIZATIONS', '2'))

# Post-processing
GRID_SIZE = int(os.getenv('EIT_GRID_SIZE', '256'))

# Difficulty levels: active electrodes -> number of injections
LEVEL_INJECTIONS = {32: 76, 30: 56, 28: 52, 26: 48, 24: 44, 22: 30, 20: 27}

# Published SSIM scores per level on measured tank data (phantoms 1-3); not reproducible here
REFERENCE_SCORES = {
    32: (0.6915, 0.8978, 0.7628),
    30: (0.7031, 0.8987, 0.7908),
    28: (0.6981, 0.8939, 0.7912),
    26: (0.6308, 0.8774, 0.7651),
    24: (0.5582, 0.8987, 0.8093),
    22: (0.5781, 0.6978, 0.7206),
    20: (0.6361, 0.6341, 0.6317),
}


def setup_logging(level: Optional[str] = None):
    """Configure the root logger once for CLI runs."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(message)s',
    )


# ─── Run configuration ────────────────────────────────────────────────────────

@dataclass
class RunConfig:
    """Everything that determines one run; archived next to its outputs."""
    mesh_source: str = 'generate'          # 'generate' or a mesh file path
    target_h: float = RECON_TARGET_H
    level: int = 32
    phantom: str = 'two-inclusions'
    eta1: float = ETA1
    vartheta_star: float = VARTHETA_STAR
    r2: float = R2
    k_max1: int = K_MAX
    k_max2: int = K_MAX
    tol: float = TOL
    inner_linearizations: int = INNER_LINEARIZATIONS
    auto_level_params: bool = False
    omega: float = NOISE_SCALE
    sigma0: float = SIGMA0
    z0: float = CONTACT_IMPEDANCE
    current_amplitude: float = CURRENT_AMPLITUDE
    grid_size: int = GRID_SIZE
    seed: int = 0
    output_dir: str = 'output'

    def validate(self) -> 'RunConfig':
        """Raise ConfigurationError on any out-of-range value."""
        checks = [
            (self.target_h > 0, 'target_h must be positive'),
            (self.level in LEVEL_INJECTIONS, f'level must be one of {sorted(LEVEL_INJECTIONS)}'),
            (self.eta1 > 0, 'eta1 must be positive'),
            (self.vartheta_star > 0, 'vartheta_star must be positive'),
            ((0 < self.r2 <= 1) or self.r2 == -1, 'r2 must lie in (0, 1] or equal -1'),
            (self.k_max1 >= 0 and self.k_max2 >= 0, 'k_max must be non-negative'),
            (self.tol >= 0, 'tol must be non-negative'),
            (self.inner_linearizations >= 1, 'inner_linearizations must be >= 1'),
            (self.omega >= 0, 'omega must be non-negative'),
            (self.sigma0 > 0, 'sigma0 must be positive'),
            (self.z0 > 0, 'z0 must be positive'),
            (self.current_amplitude > 0, 'current_amplitude must be positive'),
            (self.grid_size >= 8, 'grid_size must be at least 8'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)
        return self

    def to_env_text(self) -> str:
        """Flat KEY=value text, readable back with load_run_config."""
        lines = ['# Effective run configuration']
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = int(value)
            lines.append(f"{key.upper()}={value}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw, target_type):
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ('1', 'true', 'yes', 'on')
    try:
        if target_type is int:
            return int(float(raw))
        return target_type(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid value for {name}: {raw!r}")


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict] = None) -> RunConfig:
    """Build a RunConfig from an optional KEY=value file plus flag overrides.

    Keys are case-insensitive; unknown keys are rejected so a typo never
    silently falls back to a default.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}

    if path:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        for key, raw in dotenv_values(path).items():
            name = key.strip().lower()
            if name not in types:
                raise ConfigurationError(f"unknown config key {key!r} in {path}")
            if raw is None:
                continue
            values[name] = _coerce(name, raw, types[name])

    for name, raw in (overrides or {}).items():
        if raw is None:
            continue
        if name not in types:
            raise ConfigurationError(f"unknown config key {name!r}")
        values[name] = _coerce(name, raw, types[name])

    return RunConfig(**values).validate()
