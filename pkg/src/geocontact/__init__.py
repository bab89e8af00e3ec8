"""Geometry-conditioned identification of varying-parameter contact models.

A point-cloud VAE encodes part geometry, a Gaussian local-model head maps the
latent code to a position-dependent parameter profile, and a second-order
contact model driven by the insertion trajectory predicts the assembly force.
"""
from .autodiff import Tape, Tensor
from .config import TrainConfig
from .data import AssemblyTask, DatasetManifest, SyntheticFamily, synthesize_task
from .dynamics import LpvSecondOrder, Trajectory, simulate
from .geometry import PointCloud, TriangleMesh, chamfer
from .local_models import LocalModelHead, LocalModelSet, eval_profile
from .vae import PointCloudVAE

__version__ = "0.1.0"
