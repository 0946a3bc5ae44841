"""Shared fixtures: services wired the way the CLI wires them."""

import pytest

from src.models.schemas import CovarianceModel
from src.services.analysis_service import AnalysisService
from src.services.comparison_service import ComparisonService
from src.services.covariance_service import CovarianceService
from src.services.flow_service import FlowService
from src.services.gaussian_service import GaussianService


@pytest.fixture
def covariance_service():
    return CovarianceService()


@pytest.fixture
def gaussian_service():
    return GaussianService()


@pytest.fixture
def flow_service(covariance_service, gaussian_service):
    return FlowService(covariance_service, gaussian_service, threads=1)


@pytest.fixture
def analysis_service(flow_service):
    return AnalysisService(flow_service)


@pytest.fixture
def comparison_service(gaussian_service):
    return ComparisonService(gaussian_service)


@pytest.fixture
def arratia():
    return CovarianceModel(family="arratia")


@pytest.fixture
def gaussian_phi():
    return CovarianceModel(family="gaussian")


@pytest.fixture
def exp_alpha_one():
    return CovarianceModel(family="exp_alpha", alpha=1.0)
