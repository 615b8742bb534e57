import logging

from pocketflow import Flow, AsyncFlow
from nodes import (
    PhantomNode,
    MaskNode,
    ModelRouteNode,
    SensitivityNode,
    CalibrationNode,
    BoundNode,
    ModelSetupNode,
    StepSizeNode,
    ReconstructionNode,
    SweepNode,
    SweepSummaryNode,
    StepRuleComparisonNode,
    ArtifactWriterNode,
)

logger = logging.getLogger(__name__)


def _model_branch(route, setup):
    """Wire route -"sense"-> maps and route -"spirit"-> calibration -> bound, both into setup"""
    sensitivity_node = SensitivityNode()
    calibration_node = CalibrationNode()
    route - "sense" >> sensitivity_node
    route - "spirit" >> calibration_node
    bound_node = BoundNode()
    sensitivity_node >> setup
    calibration_node >> bound_node >> setup


def create_phantom_flow():
    """Create flow that generates a phantom and writes it out"""
    phantom_node = PhantomNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> writer_node

    flow = Flow(start=phantom_node)
    logger.info("Created phantom flow")
    return flow


def create_mask_flow():
    """Create flow that builds a sampling mask and the undersampled k-space"""
    phantom_node = PhantomNode()
    mask_node = MaskNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> mask_node >> writer_node

    flow = Flow(start=phantom_node)
    logger.info("Created mask flow")
    return flow


def create_calibration_flow():
    """Create flow that calibrates SPIRiT kernels from the ACS band"""
    phantom_node = PhantomNode()
    mask_node = MaskNode()
    calibration_node = CalibrationNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> mask_node >> calibration_node >> writer_node

    flow = Flow(start=phantom_node)
    logger.info("Created calibration flow")
    return flow


def create_bound_flow():
    """Create flow that calibrates kernels and reports the SPIRiT step-size bound"""
    phantom_node = PhantomNode()
    mask_node = MaskNode()
    calibration_node = CalibrationNode()
    bound_node = BoundNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> mask_node >> calibration_node >> bound_node >> writer_node

    flow = Flow(start=phantom_node)
    logger.info("Created bound flow")
    return flow


def create_recon_flow():
    """Create flow for a single pFISTA reconstruction (SENSE or SPIRiT branch)"""
    phantom_node = PhantomNode()
    mask_node = MaskNode()
    route_node = ModelRouteNode()
    setup_node = ModelSetupNode()
    stepsize_node = StepSizeNode()
    recon_node = ReconstructionNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> mask_node >> route_node
    _model_branch(route_node, setup_node)
    setup_node >> stepsize_node >> recon_node >> writer_node

    flow = Flow(start=phantom_node)
    logger.info("Created reconstruction flow")
    return flow


def create_sweep_flow():
    """Create async flow running one reconstruction per gamma multiplier in parallel"""
    phantom_node = PhantomNode()
    mask_node = MaskNode()
    route_node = ModelRouteNode()
    setup_node = ModelSetupNode()
    sweep_node = SweepNode()
    summary_node = SweepSummaryNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> mask_node >> route_node
    _model_branch(route_node, setup_node)
    setup_node >> sweep_node >> summary_node >> writer_node

    # Async flow required for the parallel sweep node
    flow = AsyncFlow(start=phantom_node)
    logger.info("Created sweep flow")
    return flow


def create_compare_flow():
    """Create flow comparing recommended, power-iteration and backtracking step sizes"""
    phantom_node = PhantomNode()
    mask_node = MaskNode()
    route_node = ModelRouteNode()
    setup_node = ModelSetupNode()
    compare_node = StepRuleComparisonNode()
    writer_node = ArtifactWriterNode()

    phantom_node >> mask_node >> route_node
    _model_branch(route_node, setup_node)
    setup_node >> compare_node >> writer_node

    flow = Flow(start=phantom_node)
    logger.info("Created step-rule comparison flow")
    return flow
