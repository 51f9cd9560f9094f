"""
Synthetic phantoms and measurement synthesis

Data are generated on a mesh finer than the reconstruction mesh so the
reconstruction never sees its own discretization.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from skimage.measure import points_in_poly

from cem_forward import CemModel, Conductivity, CurrentFrame, MeasurementPattern
from config import LEVEL_INJECTIONS, N_ELECTRODES
from errors import ConfigurationError, ParseError, ValidationError
from mesh import ElectrodeLayout, Mesh, generate_disk_mesh
from postproc import CONDUCTIVE, RESISTIVE, PixelImage

logger = logging.getLogger(__name__)

CONDUCTIVE_VALUE = 2.5    # S/m
RESISTIVE_VALUE = 0.15    # S/m
DATASET_VERSION = 1


# ==================== PHANTOMS ====================

@dataclass
class Disk:
    center: Tuple[float, float]
    radius: float
    value: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.hypot(points[:, 0] - self.center[0], points[:, 1] - self.center[1]) < self.radius

    def reach(self) -> float:
        """Largest distance from the origin."""
        return float(np.hypot(*self.center) + self.radius)

    def to_dict(self) -> Dict:
        return {'kind': 'disk', 'center': list(self.center), 'radius': self.radius, 'value': self.value}


@dataclass
class Polygon:
    vertices: List[Tuple[float, float]]
    value: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        return points_in_poly(points, np.asarray(self.vertices, dtype=float))

    def reach(self) -> float:
        return float(np.linalg.norm(np.asarray(self.vertices, dtype=float), axis=1).max())

    def to_dict(self) -> Dict:
        return {'kind': 'polygon', 'vertices': [list(v) for v in self.vertices], 'value': self.value}


Inclusion = Union[Disk, Polygon]


@dataclass
class Phantom:
    inclusions: List[Inclusion]
    background: float
    name: str = 'custom'

    def validate(self, radius: float = 1.0) -> 'Phantom':
        if not self.background > 0:
            raise ValidationError("background conductivity must be positive")
        for k, inclusion in enumerate(self.inclusions):
            if not inclusion.value > 0:
                raise ValidationError(f"inclusion {k} has nonpositive conductivity {inclusion.value}")
            if isinstance(inclusion, Polygon) and len(inclusion.vertices) < 3:
                raise ValidationError(f"polygon inclusion {k} needs at least 3 vertices")
            if inclusion.reach() >= radius:
                raise ValidationError(f"inclusion {k} touches the boundary (reach {inclusion.reach():.3f})")
        return self

    def to_dict(self) -> Dict:
        return {'name': self.name, 'background': self.background,
                'inclusions': [inc.to_dict() for inc in self.inclusions]}

    @classmethod
    def from_dict(cls, data: Dict) -> 'Phantom':
        inclusions = []
        for item in data.get('inclusions', []):
            if item.get('kind') == 'disk':
                inclusions.append(Disk(tuple(item['center']), float(item['radius']), float(item['value'])))
            elif item.get('kind') == 'polygon':
                inclusions.append(Polygon([tuple(v) for v in item['vertices']], float(item['value'])))
            else:
                raise ValidationError(f"unknown inclusion kind {item.get('kind')!r}")
        return cls(inclusions=inclusions, background=float(data['background']), name=data.get('name', 'custom'))


@dataclass
class PhantomPreset:
    """Geometry plus the hyperparameters tuned for it: full data, then the
    range swept from 30 down to 20 active electrodes"""
    inclusions: List[Inclusion]
    eta1: float
    vartheta_star: float
    eta_range: Tuple[float, float]
    vartheta_range: Tuple[float, float]


PHANTOM_PRESETS = {
    # a conductive polygon and a resistive disk
    'two-inclusions': PhantomPreset(
        inclusions=[
            Polygon([(-0.05, 0.22), (-0.14, 0.41), (-0.35, 0.48), (-0.56, 0.41),
                     (-0.65, 0.22), (-0.56, 0.03), (-0.35, -0.04), (-0.14, 0.03)], CONDUCTIVE_VALUE),
            Disk((0.35, -0.30), 0.22, RESISTIVE_VALUE),
        ],
        eta1=3e-4, vartheta_star=0.03, eta_range=(1e-4, 1e-5), vartheta_range=(0.03, 0.5)),
    # one elongated resistive object
    'single-object': PhantomPreset(
        inclusions=[Polygon([(-0.55, -0.05), (0.35, 0.42), (0.47, 0.22), (-0.43, -0.27)], RESISTIVE_VALUE)],
        eta1=5e-6, vartheta_star=0.4, eta_range=(1e-6, 1e-7), vartheta_range=(0.4, 0.6)),
    # a concave conductive object near the centre
    'concave-center': PhantomPreset(
        inclusions=[Polygon([(-0.30, -0.30), (0.30, -0.30), (0.30, -0.12), (-0.10, -0.12),
                             (-0.10, 0.12), (0.30, 0.12), (0.30, 0.30), (-0.30, 0.30)], CONDUCTIVE_VALUE)],
        eta1=5e-4, vartheta_star=0.05, eta_range=(1e-4, 1e-5), vartheta_range=(0.05, 0.15)),
}


def make_phantom(name: str, sigma0: float) -> Phantom:
    if name not in PHANTOM_PRESETS:
        raise ConfigurationError(f"unknown phantom {name!r}; choose from {sorted(PHANTOM_PRESETS)}")
    return Phantom(inclusions=list(PHANTOM_PRESETS[name].inclusions), background=sigma0, name=name)


def level_parameters(phantom: str, level: int) -> Tuple[float, float]:
    """(eta1, vartheta_star) for a difficulty level.

    Full data uses the preset values; fewer electrodes move log-linearly
    through the preset ranges (smaller eta1, larger vartheta_star).
    """
    if phantom not in PHANTOM_PRESETS:
        raise ConfigurationError(f"unknown phantom {phantom!r}")
    if level not in LEVEL_INJECTIONS:
        raise ConfigurationError(f"unsupported level {level}; choose from {sorted(LEVEL_INJECTIONS)}")
    preset = PHANTOM_PRESETS[phantom]
    if level == N_ELECTRODES:
        return preset.eta1, preset.vartheta_star
    reduced = sorted((lvl for lvl in LEVEL_INJECTIONS if lvl < N_ELECTRODES), reverse=True)
    t = reduced.index(level) / (len(reduced) - 1)
    eta = np.exp((1 - t) * np.log(preset.eta_range[0]) + t * np.log(preset.eta_range[1]))
    vartheta = np.exp((1 - t) * np.log(preset.vartheta_range[0]) + t * np.log(preset.vartheta_range[1]))
    return float(eta), float(vartheta)


def rasterize_phantom(phantom: Phantom, mesh: Mesh) -> Conductivity:
    """Nodal perturbation: inclusion contrast inside inclusions, 0 elsewhere and on the boundary."""
    radius = float(np.linalg.norm(mesh.points[mesh.is_boundary], axis=1).max())
    phantom.validate(radius)
    sigma = np.full(mesh.n_nodes, phantom.background)
    for inclusion in phantom.inclusions:
        sigma[inclusion.contains(mesh.points)] = inclusion.value
    sigma[mesh.is_boundary] = phantom.background
    return Conductivity(sigma0=phantom.background, xi=sigma[mesh.interior_nodes] - phantom.background)


def rasterize_truth_labels(phantom: Phantom, width: int, height: int,
                           radius: float = 1.0) -> PixelImage:
    """Class map of the phantom: 2 above background, 1 below, 0 elsewhere."""
    extent = (-radius, radius, -radius, radius)
    X, Y = PixelImage.grid(width, height, extent)
    points = np.column_stack([X.ravel(), Y.ravel()])
    labels = np.zeros(X.size, dtype=np.uint8)
    for inclusion in phantom.inclusions:
        if inclusion.value == phantom.background:
            continue
        labels[inclusion.contains(points)] = CONDUCTIVE if inclusion.value > phantom.background else RESISTIVE
    return PixelImage(values=labels.reshape(X.shape), extent=extent, mask=X ** 2 + Y ** 2 <= radius ** 2)


# ==================== SCHEDULES ====================

def injection_pairs(level: int) -> List[Tuple[int, int]]:
    """Pairs of even-indexed active electrodes by increasing cyclic separation."""
    if level not in LEVEL_INJECTIONS:
        raise ConfigurationError(f"unsupported number of active electrodes {level}; "
                                 f"choose from {sorted(LEVEL_INJECTIONS)}")
    injectors = list(range(0, level, 2))
    q = len(injectors)
    pairs = []
    for separation in range(1, q // 2 + 1):
        count = q // 2 if 2 * separation == q else q
        pairs += [(injectors[i], injectors[(i + separation) % q]) for i in range(count)]
    return pairs[:LEVEL_INJECTIONS[level]]


def ktc_injection_schedule(level: int, n_electrodes: int = N_ELECTRODES,
                           amplitude: float = 1.0) -> Tuple[CurrentFrame, MeasurementPattern]:
    """Currents and adjacent-pair measurements on electrodes 0..level-1."""
    pairs = injection_pairs(level)
    currents = CurrentFrame.from_pairs(pairs, n_electrodes, amplitude)
    meas = MeasurementPattern.adjacent(len(pairs), n_electrodes, electrodes=range(level))
    return currents, meas


# ==================== SYNTHESIS ====================

@dataclass
class SyntheticDataset:
    data: np.ndarray
    currents: CurrentFrame
    meas: MeasurementPattern
    noise_scale: float
    phantom: Phantom
    mesh_info: Dict = field(default_factory=dict)
    seed: int = 0
    level: Optional[int] = None
    clean: Optional[np.ndarray] = None


def generation_mesh(target_h: float, layout: ElectrodeLayout, radius: float = 1.0) -> Mesh:
    """Disk mesh at half the reconstruction mesh size."""
    return generate_disk_mesh(radius, target_h / 2.0, layout)


def synthesize(phantom: Phantom, gen_mesh: Mesh, currents: CurrentFrame, meas: MeasurementPattern,
               omega: float, seed: int, z=1e-6, recon_mesh: Optional[Mesh] = None,
               level: Optional[int] = None) -> SyntheticDataset:
    """b = F_gen(xi_true) + omega * g with g ~ N(0, I) drawn from `seed`."""
    if omega < 0:
        raise ConfigurationError("noise scale must be non-negative")
    if recon_mesh is not None and gen_mesh.n_nodes < 2 * recon_mesh.n_nodes:
        raise ValidationError(
            f"generation mesh ({gen_mesh.n_nodes} nodes) must have at least twice the nodes of the "
            f"reconstruction mesh ({recon_mesh.n_nodes})")
    cond = rasterize_phantom(phantom, gen_mesh)
    clean = CemModel(gen_mesh, z).forward(cond, currents, meas, jacobian=None).voltages
    rng = np.random.default_rng(seed)
    data = clean + omega * rng.standard_normal(clean.shape)
    logger.info(f"[Sim] {len(data)} measurements on a {gen_mesh.n_nodes}-node mesh (omega={omega:g}, seed={seed})")
    info = gen_mesh.summary()
    return SyntheticDataset(data=data, currents=currents, meas=meas, noise_scale=omega, phantom=phantom,
                            mesh_info=info, seed=seed, level=level, clean=clean)


# ==================== DATASET FILES ====================

def _measurement_rows(meas: MeasurementPattern) -> List[List]:
    rows = []
    for i, block in enumerate(meas.blocks):
        for row in block:
            minus = np.flatnonzero(row == -1)
            rows.append([i, int(np.flatnonzero(row == 1)[0]), int(minus[0]) if len(minus) else None])
    return rows


def save_dataset(dataset: SyntheticDataset, path: str):
    payload = {
        'version': DATASET_VERSION,
        'level': dataset.level,
        'seed': dataset.seed,
        'noise_scale': dataset.noise_scale,
        'phantom': dataset.phantom.to_dict(),
        'generation_mesh': dataset.mesh_info,
        'currents': dataset.currents.patterns.T.tolist(),
        'measurements': _measurement_rows(dataset.meas),
        'data': dataset.data.tolist(),
        'clean': None if dataset.clean is None else dataset.clean.tolist(),
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=1)


def load_dataset(path: str) -> SyntheticDataset:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", path, e.lineno)
    if payload.get('version') != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {payload.get('version')!r}", path)
    try:
        currents = CurrentFrame(np.asarray(payload['currents'], dtype=float).T)
        n_electrodes = currents.n_electrodes
        blocks = [np.zeros((0, n_electrodes)) for _ in range(currents.n_injections)]
        for inj, plus, minus in payload['measurements']:
            row = np.zeros((1, n_electrodes))
            row[0, plus] = 1.0
            if minus is not None:
                row[0, minus] = -1.0
            blocks[inj] = np.vstack([blocks[inj], row])
        meas = MeasurementPattern(blocks)
        data = np.asarray(payload['data'], dtype=float)
        if data.shape != (meas.n_rows,):
            raise ParseError(f"data has {data.size} entries, measurement pattern has {meas.n_rows}", path)
        clean = payload.get('clean')
        return SyntheticDataset(
            data=data, currents=currents, meas=meas, noise_scale=float(payload['noise_scale']),
            phantom=Phantom.from_dict(payload['phantom']), mesh_info=payload.get('generation_mesh', {}),
            seed=int(payload.get('seed', 0)), level=payload.get('level'),
            clean=None if clean is None else np.asarray(clean, dtype=float))
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ParseError(f"malformed dataset: {e}", path)
    except ConfigurationError as e:
        raise ParseError(e.message, path)
