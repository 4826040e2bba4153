"""epsim: a desk-scale simulation of an expert-parallel MoE communication
library — unified dispatch/combine API, low-latency and high-throughput
engines, and a one-sided put/signal fabric with randomized delivery delays.
"""

from .api import (
    AllocationHooks,
    EpGroup,
    EpHandle,
    HandleState,
    combine,
    complete,
    create_group,
    create_handle,
    destroy_group,
    destroy_handle,
    dispatch,
    get_num_recv_tokens,
)
from .core import (
    Algorithm,
    Dtype,
    EpConfig,
    EpError,
    ErrorCode,
    NDTensor,
    TensorTag,
    dequantize_block,
    quantize_block,
    tensor_create,
    tensor_from_f32,
)
from .fabric import Fabric, NodeTopology

__all__ = [
    "Algorithm",
    "AllocationHooks",
    "Dtype",
    "EpConfig",
    "EpError",
    "EpGroup",
    "EpHandle",
    "ErrorCode",
    "Fabric",
    "HandleState",
    "NDTensor",
    "NodeTopology",
    "TensorTag",
    "combine",
    "complete",
    "create_group",
    "create_handle",
    "dequantize_block",
    "destroy_group",
    "destroy_handle",
    "dispatch",
    "get_num_recv_tokens",
    "quantize_block",
    "tensor_create",
    "tensor_from_f32",
]

__version__ = "0.1.0"
