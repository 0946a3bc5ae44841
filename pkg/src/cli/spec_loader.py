"""
Experiment spec files.

Spec files are TOML with dotted keys (``sim.phi = "gaussian"``) or sections
(``[sim]``). Explicit grids may be a TOML array or a comma-separated string.
"""

from pathlib import Path
from typing import Any, Dict, Optional
import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import ValidationError

from src.core.exceptions import ParseError
from src.models.schemas import ExperimentSpec

logger = logging.getLogger(__name__)


def read_spec_file(path: Path) -> Dict[str, Any]:
    """Parse a spec file into a nested dict"""
    try:
        with Path(path).open("rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError as e:
        raise ParseError(f"spec file not found: {path}") from e
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ParseError(f"{path}: {e}") from e


def apply_overrides(
    data: Dict[str, Any],
    seed: Optional[int] = None,
    replicas: Optional[int] = None,
    output_dir: Optional[Path] = None,
) -> Dict[str, Any]:
    """Command-line values win over the file for both sim and analysis"""
    data = {key: dict(value) if isinstance(value, dict) else value for key, value in data.items()}
    for key, value in (("seed", seed), ("replicas", replicas)):
        if value is None:
            continue
        data.setdefault("analysis", {})[key] = value
        if isinstance(data.get("sim"), dict):
            data["sim"][key] = value
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    return data


def load_spec(
    path: Path,
    seed: Optional[int] = None,
    replicas: Optional[int] = None,
    output_dir: Optional[Path] = None,
) -> ExperimentSpec:
    """
    Read, override and validate an experiment spec.

    Args:
        path: Spec file
        seed: Optional seed override
        replicas: Optional replica-count override
        output_dir: Optional output directory override

    Returns:
        Validated ExperimentSpec

    Raises:
        ParseError: The file is unreadable, not TOML, or fails validation
    """
    data = apply_overrides(read_spec_file(path), seed, replicas, output_dir)
    try:
        spec = ExperimentSpec.model_validate(data)
    except ValidationError as e:
        raise ParseError(f"{path}: {e}") from e
    logger.info(f"Loaded {spec.kind.value} experiment '{spec.name}' from {path}")
    return spec
