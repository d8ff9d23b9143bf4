"""Audio-driven talking-head synthesis with a feature radiance field and ray deformation."""

from .pipeline import PipelineConfig, parse_config, run_pipeline

__all__ = ["PipelineConfig", "parse_config", "run_pipeline"]
__version__ = "0.1.0"
