"""Cube-reordered block-sparse attention for two-stream video diffusion at desk scale."""
from .attention import (
    FullyMaskedRowError,
    JointBlockMask,
    MacCounter,
    MaskTooLargeError,
    attention_backward,
    block_sparse_attention,
    block_sparse_attention_backward,
    build_joint_mask,
    dense_masked_attention,
    materialize_mask,
)
from .latent_grid import (
    Cube,
    CubeDims,
    CubePartition,
    GridDims,
    Permutation,
    apply_permutation,
    build_partition,
    cube_of_token,
    cubes_adjacent,
    linear_index,
)
from .rope3d import RopeParams, apply_rope, proxy_scale_factors, rope_angles

__version__ = "0.1.0"

__all__ = [
    "Cube",
    "CubeDims",
    "CubePartition",
    "FullyMaskedRowError",
    "GridDims",
    "JointBlockMask",
    "MacCounter",
    "MaskTooLargeError",
    "Permutation",
    "RopeParams",
    "apply_permutation",
    "apply_rope",
    "attention_backward",
    "block_sparse_attention",
    "block_sparse_attention_backward",
    "build_joint_mask",
    "build_partition",
    "cube_of_token",
    "cubes_adjacent",
    "dense_masked_attention",
    "linear_index",
    "materialize_mask",
    "proxy_scale_factors",
    "rope_angles",
]
