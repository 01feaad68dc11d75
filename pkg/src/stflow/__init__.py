"""Flow matching with a physics-informed random-walk prior for geometric trajectories."""

from .core import (
    DatasetBundle,
    EdgeSet,
    SystemMeta,
    TrajectoryBatch,
    from_increments,
    load_dataset,
    save_dataset,
    to_increments,
)
from .datasets import GeneratorConfig, gen_charged, gen_gravity, gen_springs, load_ethucy, load_md17
from .evaluate import MetricsReport, ade, density_report, fde, min_k_metrics
from .features import ConnectivitySpec, build_edges, build_node_features
from .flowmatch import FlowSample, FlowSpace, cfm_loss, make_flow_sample, sample_tau
from .net import ModelConfig, STFlowNet, sinusoidal_embed
from .pipeline import TrainConfig, augment_rotate, train
from .prior import PriorKind, WalkParams, fit_walk_params, prior_baseline_predict, sample_prior
from .sampler import SolverConfig, integrate

__version__ = "0.1.0"
