"""
Run configuration: presets -> defaults -> explicit flags.

Presets and defaults ship as package data in data/presets.yaml. Every
subcommand that needs numerical settings builds a RunConfig through
resolve_run_config(); explicit flags always win over the preset, which wins
over the defaults block.
"""

import argparse
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from surfel_core.fit import FitConfig, LearningRates
from surfel_core.meshing import TsdfConfig
from surfel_core.models import DepthStatistic, LossWeights, SamplingConfig


PACKAGE_ROOT = Path(__file__).parent
PRESETS_PATH = PACKAGE_ROOT / "data" / "presets.yaml"

# flag name -> RunConfig field
_PRESET_KEYS = {"near": "near", "far": "far", "voxel": "voxel_size", "trunc": "truncation"}


@dataclass(frozen=True)
class RunConfig:
    preset: str
    near: float
    far: float
    voxel_size: float
    truncation: float
    depth_bins: int = 128
    steps: int = 500
    lr: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    beta: float = 0.7
    sample_frac: float = 0.4
    tau: float = 0.05
    samples: int = 100_000
    n_interp: int = 6
    depth_statistic: DepthStatistic = DepthStatistic.EXPECTED
    normal_noise: float = 0.0
    seed: int = 0
    out: Optional[str] = None
    # names of the settings given explicitly on the command line
    overrides: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "depth_statistic", DepthStatistic(self.depth_statistic))
        if not 0 < self.near < self.far:
            raise ValueError(f"invalid range: near={self.near}, far={self.far}")
        if self.depth_bins < 2:
            raise ValueError(f"depth_bins must be >= 2, got {self.depth_bins}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.normal_noise < 0:
            raise ValueError(f"normal_noise must be >= 0, got {self.normal_noise}")
        # validated by the numerical configs themselves
        self.sampling_config()
        self.tsdf_config()

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(beta=self.beta, fraction=self.sample_frac)

    def learning_rates(self) -> LearningRates:
        base = LearningRates()
        return LearningRates(**{k: v * self.lr for k, v in asdict(base).items()})

    def fit_config(self, verbose: bool = False, **changes) -> FitConfig:
        params = dict(
            steps=self.steps,
            lr=self.learning_rates(),
            weights=self.weights,
            sampling=self.sampling_config(),
            seed=self.seed,
            depth_bins=self.depth_bins,
            verbose=verbose,
        )
        params.update(changes)
        return FitConfig(**params)

    def tsdf_config(self) -> TsdfConfig:
        return TsdfConfig(voxel_size=self.voxel_size, truncation=self.truncation,
                          n_interp=self.n_interp, depth_statistic=self.depth_statistic)

    def overrides_range(self) -> bool:
        return "near" in self.overrides or "far" in self.overrides

    def as_dict(self) -> Dict[str, Any]:
        """Plain YAML-safe view of the resolved settings."""
        record = asdict(self)
        record["depth_statistic"] = self.depth_statistic.value
        record["overrides"] = list(self.overrides)
        return record


def load_presets(path: Optional[Path] = None) -> Dict[str, Any]:
    """Load the presets file (defaults, presets, default_preset)."""
    path = Path(path) if path is not None else PRESETS_PATH
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    for key in ("defaults", "presets"):
        if not isinstance(data.get(key), dict):
            raise ValueError(f"{path}: missing '{key}' block")
    return data


def resolve_run_config(preset: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                       presets_path: Optional[Path] = None) -> RunConfig:
    """
    Build a RunConfig from a named preset plus explicit overrides.

    Args:
        preset: preset name; the file's default_preset when None
        overrides: flag-style keys (near, far, voxel, trunc, depth_bins, w1,
            ..., out); None values are ignored

    Raises:
        ValueError: unknown preset, unknown key or invalid value
    """
    data = load_presets(presets_path)
    name = preset or data.get("default_preset")
    if name not in data["presets"]:
        available = ", ".join(sorted(data["presets"]))
        raise ValueError(f"preset: unknown preset {name!r} (available: {available})")

    merged: Dict[str, Any] = dict(data["defaults"])
    merged.update(data["presets"][name])
    explicit = {k: v for k, v in (overrides or {}).items() if v is not None}
    merged.update(explicit)

    weights = LossWeights(**{k: float(merged.pop(k)) for k in ("w1", "w2", "w3", "w11", "w12")})
    params: Dict[str, Any] = {}
    for key, value in merged.items():
        params[_PRESET_KEYS.get(key, key)] = value
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(params) - known)
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    params.update(preset=name, weights=weights, overrides=tuple(sorted(explicit)))
    return RunConfig(**params)


# ============================================================================
# COMMAND-LINE FLAGS
# ============================================================================

def add_run_arguments(parser: argparse.ArgumentParser):
    """Flags shared by every subcommand that runs the pipeline."""
    parser.add_argument('--preset', type=str, default=None, help='re10k, scannet or replica (default: scannet)')
    parser.add_argument('--near', type=float, default=None, help='Near plane (overrides cameras and preset)')
    parser.add_argument('--far', type=float, default=None, help='Far plane (overrides cameras and preset)')
    parser.add_argument('--depth-bins', type=int, default=None, help='Depth candidates D')
    parser.add_argument('--steps', type=int, default=None, help='Optimisation steps (0 = forward pass only)')
    parser.add_argument('--lr', type=float, default=None, help='Multiplier on every learning rate')
    for name in ("w1", "w2", "w3", "w11", "w12"):
        parser.add_argument(f'--{name}', type=float, default=None, help=f'Loss weight {name}')
    parser.add_argument('--beta', type=float, default=None, help='Share of lowest-kappa pixels in the sample')
    parser.add_argument('--sample-frac', type=float, default=None, help='Sampled fraction of pixels')
    parser.add_argument('--tau', type=float, default=None, help='F1 distance threshold')
    parser.add_argument('--samples', type=int, default=None, help='Points sampled per mesh for metrics')
    parser.add_argument('--voxel', type=float, default=None, help='TSDF voxel size')
    parser.add_argument('--trunc', type=float, default=None, help='TSDF truncation distance')
    parser.add_argument('--interp-poses', type=int, default=None, help='Interpolated fusion poses')
    parser.add_argument('--depth-statistic', choices=[s.value for s in DepthStatistic], default=None,
                        help='Rendered depth used for fusion')
    parser.add_argument('--normal-noise', type=float, default=None, help='Pseudo-GT normal noise (degrees)')
    parser.add_argument('--seed', type=int, default=None, help='Random seed')
    parser.add_argument('--out', type=str, default=None, help='Output directory')


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "near": args.near,
        "far": args.far,
        "depth_bins": args.depth_bins,
        "steps": args.steps,
        "lr": args.lr,
        "w1": args.w1,
        "w2": args.w2,
        "w3": args.w3,
        "w11": args.w11,
        "w12": args.w12,
        "beta": args.beta,
        "sample_frac": args.sample_frac,
        "tau": args.tau,
        "samples": args.samples,
        "voxel": args.voxel,
        "trunc": args.trunc,
        "n_interp": args.interp_poses,
        "depth_statistic": args.depth_statistic,
        "normal_noise": args.normal_noise,
        "seed": args.seed,
        "out": args.out,
    }
    return resolve_run_config(args.preset, overrides)


def save_run_config(cfg: RunConfig, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(cfg.as_dict(), f, default_flow_style=False, sort_keys=False)
