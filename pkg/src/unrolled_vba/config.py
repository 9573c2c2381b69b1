"""Run configuration: dataclass sections with a YAML round-trip."""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .datagen import Recipe
from .errors import ConfigError
from .unrolled.train import TrainRun

DEFAULT_XI_GRID = (1e-2, 1e-1, 1.0, 10.0, 100.0)


@dataclass
class VbaSection:
    """Plain-algorithm settings; ``xi_grid`` drives ``deblur --xi-grid``."""

    side: int = 9
    kappa: float = 0.5
    alpha: float = 0.0
    eta: float = 0.0
    xi: float = 1.0
    xi_grid: tuple = DEFAULT_XI_GRID
    cz_init_scale: float = 1e-4
    cg_iterations: int = 10
    cg_tolerance: float = 1e-6
    max_iterations: int = 300
    convergence_tol: float = 1e-5
    init_kernel_width: int = 5
    lambda_floor: float = 1e-10
    precision_route: str = "lag"
    init_lambda_cov: bool = False

    def vba_config(self, sigma=0.01, xi=None):
        from .vba import make_config

        return make_config(
            self.side, xi=self.xi if xi is None else xi, sigma=sigma, kappa=self.kappa,
            alpha=self.alpha, eta=self.eta, cz_init_scale=self.cz_init_scale,
            cg_iterations=self.cg_iterations, cg_tolerance=self.cg_tolerance,
            max_iterations=self.max_iterations, convergence_tol=self.convergence_tol,
            init_kernel_width=self.init_kernel_width, lambda_floor=self.lambda_floor,
            precision_route=self.precision_route, init_lambda_cov=self.init_lambda_cov)


@dataclass
class NetSection:
    K: int = 4
    beta_mode: str = "learned"
    xi_scale: float = 1e4
    xi_features: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    vba: VbaSection = field(default_factory=VbaSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainRun = field(default_factory=TrainRun)
    end_to_end: TrainRun = field(
        default_factory=lambda: TrainRun(mode="end-to-end", lr=0.01, epochs=3))
    recipe: Recipe = field(default_factory=Recipe)

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        _check_keys(cls, d, "top level")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            sub = _SECTIONS.get(f.name)
            if sub is None:
                kw[f.name] = v
                continue
            if not isinstance(v, dict):
                raise ConfigError(f"section {f.name!r} must be a mapping")
            _check_keys(sub, v, f.name)
            try:
                kw[f.name] = sub(**{k: _tuples(x) for k, x in v.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {f.name!r} section: {exc}") from exc
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = dict(vba=VbaSection, net=NetSection, train=TrainRun, end_to_end=TrainRun,
                 recipe=Recipe)


def _check_keys(cls, d, where):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    if isinstance(v, dict):
        return {k: _tuples(x) for k, x in v.items()}
    return v


def _plain(v):
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def load_config(path=None):
    """Read a YAML run config; ``None`` returns the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg, path=None):
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
