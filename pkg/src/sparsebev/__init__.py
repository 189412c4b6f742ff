"""Sparse camera-LiDAR BEV perception pipeline with a deterministic simulator."""

from .geometry import (CameraModel, DepthBins, GridSpec2D, RigidTransform, Vec3, VoxelSpec3D, bev_cell_of,
                       compose, invert, project, unproject, voxel_of)
from .grid import DenseGrid2D, SparseGrid2D, SparseGrid3D, concat_fuse, from_dense, sparsity, to_dense
from .view_transformer import (Box2D, DepthDistribution, ImageFeatures, build_pooling_index, lift_dense,
                               lift_sparse, softmax_depth, topk_depth_mask)
from .lidar import PointCloud, VoxelFeatureConfig, flatten_to_bev, voxelize
from .encoder import ConvKernel2D, ConvLayer, EncoderConfig, encode, sparse_conv, submanifold_conv
from .head import Box3D, Detection, HeadWeights, decode_boxes, evaluate, score_heatmap, select_peaks
from .temporal import FramePose, TemporalBuffer, align_history, merge_temporal
from .sim import OracleFeatureConfig, SceneConfig, generate_scene, render_camera_gt, render_lidar

__version__ = "0.1.0"
