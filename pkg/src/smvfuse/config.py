"""Run configuration: one flat key=value namespace for every stage.

A config file is plain text, one ``key = value`` per line, ``#``
comments allowed.  The same keys can be overridden on the command line
with ``--set key=value``.  Every run echoes the full effective
configuration to a file so a result can always be traced back to its
parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import FusionParams
from .multiview import InverseDepthHypothesisGrid


@dataclass
class RunConfig:
    """Every tunable of the batch pipeline, with the tuned defaults.

    Path fields stay None until a stage that needs them validates; the
    numeric defaults are the working values (weight shapes 15 / 0.1 /
    1e-3, top 25% selection, gradient threshold 0.35).
    """

    # input/output locations
    manifest: Path | None = None
    intrinsics: Path | None = None
    poses: Path | None = None
    single_view_dir: Path | None = None
    output_dir: Path = field(default_factory=lambda: Path("out"))

    # fusion weight shapes
    sigma1: float = 15.0
    sigma2: float = 0.1
    sigma3: float = 1e-3

    # inverse-depth hypothesis grid
    rho_min: float = 0.1
    rho_max: float = 2.0
    n_samples: int = 64

    # anchor selection
    fraction: float = 0.25
    ransac_iters: int = 200
    inlier_tol: float = 0.10
    seed: int = 0

    # masking and keyframe scheduling
    gradient_threshold: float = 0.35
    keyframe_every: int = 10
    n_overlap: int = 4
    min_views: int = 1
    metric: str = "l1"

    def fusion_params(self) -> FusionParams:
        return FusionParams(self.sigma1, self.sigma2, self.sigma3)

    def hypothesis_grid(self) -> InverseDepthHypothesisGrid:
        return InverseDepthHypothesisGrid(self.rho_min, self.rho_max, self.n_samples)

    def echo_text(self) -> str:
        """All effective parameters as sorted key=value lines."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def require_paths(self, *names: str) -> None:
        """Check that the named path fields are set and exist.

        Raises FileNotFoundError naming the first offender; the CLI
        maps that to exit code 2.
        """
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise FileNotFoundError(f"config key '{name}' is not set")
            path = Path(value)
            if name in ("single_view_dir", "output_dir"):
                if name == "single_view_dir" and not path.is_dir():
                    raise FileNotFoundError(f"{name} directory not found: {path}")
            elif not path.is_file():
                raise FileNotFoundError(f"{name} file not found: {path}")


_PATH_KEYS = ("manifest", "intrinsics", "poses", "single_view_dir", "output_dir")
_VALID_KEYS = tuple(sorted(f.name for f in dataclasses.fields(RunConfig)))


def _coerce(key: str, text: str):
    if key in _PATH_KEYS:
        return Path(text)
    hints = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    hint = hints[key]
    if hint == "int":
        return int(text)
    if hint == "float":
        return float(text)
    return text


def parse_assignment(text: str) -> tuple[str, str]:
    """Split one ``key=value`` string, rejecting unknown keys."""
    if "=" not in text:
        raise ValueError(f"expected key=value, got {text!r}")
    key, _, value = text.partition("=")
    key = key.strip()
    value = value.strip()
    if key not in _VALID_KEYS:
        raise ValueError(
            f"unknown config key {key!r}; valid keys: {', '.join(_VALID_KEYS)}"
        )
    return key, value


def read_config_file(path: str | Path) -> list[tuple[str, str]]:
    """Parse a key=value config file, errors naming line numbers."""
    path = Path(path)
    pairs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            pairs.append(parse_assignment(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return pairs


def build_config(
    config_file: str | Path | None = None, overrides: list[str] | None = None
) -> RunConfig:
    """Defaults, then the config file, then --set overrides, in order.

    Relative paths in the file resolve against the file's directory so
    a sequence directory with its own config is runnable from anywhere;
    paths given via --set stay relative to the working directory.
    """
    config = RunConfig()
    pairs: list[tuple[str, str, Path | None]] = []
    if config_file is not None:
        base = Path(config_file).resolve().parent
        pairs.extend((k, v, base) for k, v in read_config_file(config_file))
    for text in overrides or []:
        pairs.append((*parse_assignment(text), None))
    for key, value, base in pairs:
        try:
            coerced = _coerce(key, value)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from exc
        if base is not None and key in _PATH_KEYS and not Path(coerced).is_absolute():
            coerced = base / coerced
        setattr(config, key, coerced)
    return config
