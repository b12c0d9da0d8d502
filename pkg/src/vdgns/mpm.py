"""2D material point method (MLS-MPM) ground-truth generator.

Simulates the four system classes (water, sand, snow, elastic) on the unit
square with quadratic B-spline transfers and explicit time stepping.  The
per-substep kernel lives in vdgns.kernels (compiled or numpy); this module
owns scene setup, material constants, trajectory recording, and the
dataset/manifest file formats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
import struct

import numpy as np

from . import kernels

CLASS_NAMES = ("water", "sand", "snow", "elastic")

# ---------------------------------------------------------------------------
# material constants
#
# Young's modulus / Poisson ratio shared by all stiffness-bearing classes;
# the remaining numbers are the usual reference values for this family of
# solvers.  Water uses only the volumetric (lambda) term.  Sand strength
# comes from a Drucker-Prager return map on the Hencky strain, with the
# friction angle as the one per-trajectory material parameter.

YOUNG_MODULUS = 1e4
POISSON_RATIO = 0.2
MU_0 = YOUNG_MODULUS / (2.0 * (1.0 + POISSON_RATIO))
LAMBDA_0 = (YOUNG_MODULUS * POISSON_RATIO
            / ((1.0 + POISSON_RATIO) * (1.0 - 2.0 * POISSON_RATIO)))
SNOW_CLAMP_LO = 1.0 - 2.5e-2
SNOW_CLAMP_HI = 1.0 + 4.5e-3
SNOW_HARDENING = 10.0
PARTICLE_DENSITY = 1.0

# output frames [0, 100) are discarded for learning: the initial drop is
# both violent and uninformative about steady material behaviour
USABLE_RANGE = (100, 500)
NUM_OUTPUT_STEPS = 500


def sand_yield_alpha(friction_angle_deg: float) -> float:
    phi = np.deg2rad(friction_angle_deg)
    s = np.sin(phi)
    return float(np.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s))


@dataclass(frozen=True)
class MaterialSpec:
    """One of the four system classes; friction angle applies to sand only."""

    kind: str
    friction_angle_deg: float = 45.0

    def __post_init__(self):
        if self.kind not in CLASS_NAMES:
            raise ValueError(f"unknown material kind {self.kind!r}")
        if not 0.0 <= self.friction_angle_deg <= 45.0:
            raise ValueError("friction_angle_deg must be in [0, 45]")

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.kind)


@dataclass(frozen=True)
class SimConfig:
    grid_resolution: int = 64
    dt_sim: float = 2e-4
    output_dt: float = 0.01
    gravity: tuple[float, float] = (0.0, -9.8)
    seed: int = 0

    def __post_init__(self):
        if self.grid_resolution < 16:
            raise ValueError("grid_resolution must be >= 16")
        ratio = self.output_dt / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("output_dt must be an integer multiple of dt_sim")

    @property
    def substeps_per_output(self) -> int:
        return int(round(self.output_dt / self.dt_sim))

    @property
    def particle_spacing(self) -> float:
        return 0.5 / self.grid_resolution


@dataclass
class ParticleSystem:
    positions: np.ndarray            # (N, 2)
    velocities: np.ndarray           # (N, 2)
    deformation_gradients: np.ndarray  # (N, 2, 2)
    affine_momenta: np.ndarray       # (N, 2, 2)
    plastic_J: np.ndarray            # (N,)
    mass: float

    @property
    def num_particles(self) -> int:
        return self.positions.shape[0]


@dataclass
class Trajectory:
    material: MaterialSpec
    positions: np.ndarray            # (steps, N, 2)
    output_dt: float = 0.01
    seed: int | None = None
    initial_circle: tuple[tuple[float, float], float] | None = None

    @property
    def num_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def num_particles(self) -> int:
        return self.positions.shape[1]


class SimulationDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"simulation produced non-finite state at substep {step}")
        self.step = step


def init_scene(config: SimConfig, material: MaterialSpec, rng) -> ParticleSystem:
    """Jittered-grid sample a disk of particles at rest, fully inside the box."""
    radius = rng.uniform(0.08, 0.2)
    margin = 0.05
    center = rng.uniform(radius + margin, 1.0 - radius - margin, size=2)
    s = config.particle_spacing
    k = int(np.floor(radius / s))
    ii, jj = np.meshgrid(np.arange(-k, k + 1), np.arange(-k, k + 1), indexing="ij")
    keep = (ii ** 2 + jj ** 2) * s ** 2 <= radius ** 2
    lattice = np.stack([ii[keep], jj[keep]], axis=1) * s + center
    jitter = rng.uniform(-0.25 * s, 0.25 * s, size=lattice.shape)
    positions = lattice + jitter
    n = positions.shape[0]
    p_vol = (0.5 / config.grid_resolution) ** 2
    return ParticleSystem(
        positions=np.ascontiguousarray(positions),
        velocities=np.zeros((n, 2)),
        deformation_gradients=np.tile(np.eye(2), (n, 1, 1)),
        affine_momenta=np.zeros((n, 2, 2)),
        plastic_J=np.ones(n),
        mass=p_vol * PARTICLE_DENSITY,
    )


def _kernel_args(config: SimConfig, material: MaterialSpec):
    p_vol = (0.5 / config.grid_resolution) ** 2
    return dict(
        res=config.grid_resolution,
        dt=config.dt_sim,
        gx=config.gravity[0],
        gy=config.gravity[1],
        material=material.class_id,
        mu0=0.0 if material.kind == "water" else MU_0,
        lam0=LAMBDA_0,
        p_vol=p_vol,
        p_mass=p_vol * PARTICLE_DENSITY,
        sand_alpha=sand_yield_alpha(material.friction_angle_deg),
        clamp_lo=SNOW_CLAMP_LO,
        clamp_hi=SNOW_CLAMP_HI,
        hardening=SNOW_HARDENING,
    )


def mpm_substep(sys: ParticleSystem, config: SimConfig, material: MaterialSpec,
                grid_v: np.ndarray | None = None, grid_m: np.ndarray | None = None,
                step_index: int = 0, substep_fn=None) -> None:
    """One particle-grid-particle transfer cycle, in place."""
    res = config.grid_resolution
    if grid_v is None:
        grid_v = np.zeros((res, res, 2))
    if grid_m is None:
        grid_m = np.zeros((res, res))
    fn = substep_fn or kernels.substep
    bad = fn(sys.positions, sys.velocities, sys.deformation_gradients,
             sys.affine_momenta, sys.plastic_J, grid_v, grid_m,
             **_kernel_args(config, material))
    if bad:
        raise SimulationDiverged(step_index)


def generate_trajectory(config: SimConfig, material: MaterialSpec,
                        rng=None, substep_fn=None) -> Trajectory:
    """Run 5 simulated seconds, recording positions every output_dt."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    sys = init_scene(config, material, rng)
    res = config.grid_resolution
    grid_v = np.zeros((res, res, 2))
    grid_m = np.zeros((res, res))
    per_output = config.substeps_per_output
    frames = np.empty((NUM_OUTPUT_STEPS, sys.num_particles, 2))
    substep_idx = 0
    for out in range(NUM_OUTPUT_STEPS):
        for _ in range(per_output):
            mpm_substep(sys, config, material, grid_v, grid_m,
                        step_index=substep_idx, substep_fn=substep_fn)
            substep_idx += 1
        frames[out] = sys.positions
    return Trajectory(material=material, positions=frames,
                      output_dt=config.output_dt, seed=config.seed)


# ---------------------------------------------------------------------------
# trajectory file format: "VDTR"

_TRAJ_MAGIC = b"VDTR"
_TRAJ_VERSION = 1


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<IIdII", _TRAJ_VERSION, traj.material.class_id,
                             traj.material.friction_angle_deg,
                             traj.num_particles, traj.num_steps))
        fh.write(traj.positions.astype("<f8", copy=False).tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TRAJ_MAGIC:
            raise ValueError(f"{path}: not a trajectory file (bad magic)")
        version, class_id, friction, n, steps = struct.unpack("<IIdII", fh.read(24))
        if version != _TRAJ_VERSION:
            raise ValueError(f"{path}: unsupported trajectory version {version}")
        raw = fh.read(steps * n * 2 * 8)
        if len(raw) != steps * n * 2 * 8:
            raise ValueError(f"{path}: truncated trajectory file")
        positions = np.frombuffer(raw, dtype="<f8").reshape(steps, n, 2).copy()
    material = MaterialSpec(kind=CLASS_NAMES[class_id], friction_angle_deg=friction)
    return Trajectory(material=material, positions=positions)


# ---------------------------------------------------------------------------
# datasets and manifests

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    path: str
    class_name: str
    friction_deg: float
    seed: int
    usable_range: tuple[int, int] = USABLE_RANGE

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "class": self.class_name,
            "friction_deg": self.friction_deg,
            "seed": self.seed,
            "usable_range": list(self.usable_range),
        }


@dataclass
class ClipEntry:
    path: str
    class_name: str
    trajectory_index: int
    style_seed: int

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "class": self.class_name,
            "trajectory_index": self.trajectory_index,
            "style_seed": self.style_seed,
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    clips: list[ClipEntry] = field(default_factory=list)
    root: Path = Path(".")

    def entries_by_class(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, e in enumerate(self.entries):
            out.setdefault(e.class_name, []).append(i)
        return out

    def clips_by_class(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, c in enumerate(self.clips):
            out.setdefault(c.class_name, []).append(i)
        return out

    def entry_path(self, index: int) -> Path:
        return self.root / self.entries[index].path

    def clip_path(self, index: int) -> Path:
        return self.root / self.clips[index].path


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "entries": [e.to_json() for e in manifest.entries],
    }
    if manifest.clips:
        doc["clips"] = [c.to_json() for c in manifest.clips]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
    entries = [
        ManifestEntry(path=e["path"], class_name=e["class"],
                      friction_deg=e["friction_deg"], seed=e["seed"],
                      usable_range=tuple(e["usable_range"]))
        for e in doc["entries"]
    ]
    clips = [
        ClipEntry(path=c["path"], class_name=c["class"],
                  trajectory_index=c["trajectory_index"],
                  style_seed=c["style_seed"])
        for c in doc.get("clips", [])
    ]
    return DatasetManifest(entries=entries, clips=clips, root=path.parent)


def _derived_seed(base_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([base_seed, *key]).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(config: SimConfig, out_dir, trajectories_per_class: int = 30,
                     classes: tuple[str, ...] = CLASS_NAMES,
                     progress=None) -> DatasetManifest:
    """Simulate and write trajectories_per_class runs for every class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=out_dir)
    for class_name in classes:
        material = MaterialSpec(kind=class_name)
        for idx in range(trajectories_per_class):
            seed = _derived_seed(config.seed, CLASS_NAMES.index(class_name), idx)
            traj = generate_trajectory(replace(config, seed=seed), material)
            name = f"{class_name}_{idx:03d}.vdtr"
            try:
                save_trajectory(traj, out_dir / name)
            except OSError as exc:
                raise OSError(f"failed writing {out_dir / name}: {exc}") from exc
            manifest.entries.append(ManifestEntry(
                path=name, class_name=class_name,
                friction_deg=material.friction_angle_deg, seed=seed))
            if progress:
                progress(class_name, idx)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def friction_sweep_angles(num_angles: int = 15) -> np.ndarray:
    return np.linspace(0.0, 45.0, num_angles)


def friction_sweep_dataset(config: SimConfig, out_dir,
                           trajectories_per_angle: int = 4,
                           progress=None) -> DatasetManifest:
    """Sand variants with friction angles evenly spaced over [0, 45]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=out_dir)
    for a_idx, angle in enumerate(friction_sweep_angles()):
        material = MaterialSpec(kind="sand", friction_angle_deg=float(angle))
        for idx in range(trajectories_per_angle):
            seed = _derived_seed(config.seed, 1000 + a_idx, idx)
            traj = generate_trajectory(replace(config, seed=seed), material)
            name = f"sand_sweep_{a_idx:02d}_{idx:02d}.vdtr"
            try:
                save_trajectory(traj, out_dir / name)
            except OSError as exc:
                raise OSError(f"failed writing {out_dir / name}: {exc}") from exc
            manifest.entries.append(ManifestEntry(
                path=name, class_name="sand",
                friction_deg=float(angle), seed=seed))
            if progress:
                progress(f"sand@{angle:.1f}", idx)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
