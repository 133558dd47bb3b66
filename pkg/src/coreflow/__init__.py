"""Low-rank matrix generation: shared Stiefel subspaces plus a flow on core matrices."""
__version__ = "0.1.0"

from .data import CoreBatch, MatrixBatch, StiefelPair, mat, vec
from .errors import *  # noqa: F401,F403
from .flow import FlowConfig, VelocityNet, decode, extract_cores, sample_cores, train_flow
from .metrics import MetricsReport, evaluate, mmd_rbf, sv_rel_l2
from .patch import PatchSpec, patchify, plan, unpatchify
from .stage1 import Stage1Config, masked_loss, rec_loss, train_stage1
from .stiefel import principal_angles, stiefel_step, tucker_init
from .synth import SynthConfig, desk_config, generate
