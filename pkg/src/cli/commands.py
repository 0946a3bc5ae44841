"""
Command implementations behind the CLI.

Exit codes: 0 when every verdict passes, 1 when any verdict fails, 2 on
errors (unreadable or invalid spec, simulation failures).
"""

from pathlib import Path
from typing import Any, Dict, Optional
import json
import logging

from src.cli.experiments import ExperimentRunner, Services
from src.cli.spec_loader import load_spec
from src.core.config import settings
from src.core.exceptions import HarrisError
from src.models.schemas import ExperimentSpec
from src.services.analysis_service import AnalysisService
from src.services.comparison_service import ComparisonService
from src.services.covariance_service import CovarianceService
from src.services.flow_service import FlowService
from src.services.gaussian_service import GaussianService
from src.services.plot_service import PlotService

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_ERROR = 2

# Initialize services
_services: Optional[Services] = None


def get_services(threads: Optional[int] = None) -> Services:
    """Build the service graph on first use, rebuilding if the thread count changes"""
    global _services

    threads = threads or settings.threads
    if _services is None or _services.flow.threads != max(1, threads):
        covariance = CovarianceService()
        gaussian = GaussianService()
        flow = FlowService(covariance, gaussian, threads=threads)
        _services = Services(
            covariance=covariance,
            flow=flow,
            analysis=AnalysisService(flow),
            comparison=ComparisonService(gaussian),
            plot=PlotService(),
        )
    return _services


def resolved_config(spec: ExperimentSpec) -> Dict[str, Any]:
    """The spec with every default expanded, plus the derived quantities"""
    resolved: Dict[str, Any] = spec.model_dump(mode="json", by_alias=True)
    derived: Dict[str, Any] = {"seed": spec.seed, "replicas": spec.replicas}
    if spec.sim is not None:
        derived.update({
            "dt": spec.sim.dt,
            "n_steps": spec.sim.n_steps,
            "grid_points": AnalysisService.grid_size(spec.sim),
        })
    resolved["derived"] = derived
    return resolved


def validate_command(
    spec_file: Path,
    seed: Optional[int] = None,
    replicas: Optional[int] = None,
    output_dir: Optional[Path] = None,
) -> int:
    """
    Parse and check a spec without running it, printing the resolved config.

    Returns:
        Exit code
    """
    try:
        spec = load_spec(spec_file, seed=seed, replicas=replicas, output_dir=output_dir)
        echo = resolved_config(spec)
    except HarrisError as e:
        logger.error(f"Invalid spec: {e}")
        return EXIT_ERROR
    print(json.dumps(echo, indent=2))
    return EXIT_PASS


def run_command(
    spec_file: Path,
    seed: Optional[int] = None,
    replicas: Optional[int] = None,
    output_dir: Optional[Path] = None,
    threads: Optional[int] = None,
) -> int:
    """
    Run an experiment and write its outputs.

    Returns:
        Exit code
    """
    try:
        spec = load_spec(spec_file, seed=seed, replicas=replicas, output_dir=output_dir)
        report = ExperimentRunner(get_services(threads)).run(spec)
    except HarrisError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_ERROR

    failed = [v.name for v in report.verdicts if not v.passed]
    if failed:
        logger.warning(f"{len(failed)} verdict(s) failed: {', '.join(failed)}")
        return EXIT_FAIL
    logger.info(f"All {len(report.verdicts)} verdicts pass")
    return EXIT_PASS
