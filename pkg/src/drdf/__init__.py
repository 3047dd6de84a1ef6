"""Few-image full-scene 3D reconstruction via directed ray distance fields.

The pipeline: procedural scenes (`datagen`) are rendered into geometry
channels, a multi-view attention model (`model`, trained by `train`)
predicts the transformed directed ray distance along query rays
(`field`), frustum grids decode to point clouds, and `metrics` scores
them against the mesh.  `cli` drives everything from one JSON config.
"""

from .camera import (
    Camera,
    Projection,
    Ray,
    camera_at,
    in_frustum,
    look_at_rotation,
    ndc,
    pixel_ray_directions,
    project,
    ray_for_pixel,
    rigid_transform_camera,
    unproject,
)
from .config import RunConfig, load_config, save_config
from .datagen import (
    RenderedView,
    SceneSpec,
    generate_scene,
    render_view,
    sample_view_set,
    view_overlap,
)
from .errors import (
    ConfigError,
    DegenerateSceneError,
    DrdfError,
    NoEvidenceError,
    NoOverlapError,
    NoSurfaceError,
    NumericFailureError,
    SamplingFailureError,
    UndefinedOverlapError,
)
from .field import (
    PointCloud,
    RayField,
    TransformParams,
    concat_clouds,
    decode_frustum,
    decode_ray,
    decode_zero_crossings,
    drdf_gt,
    drdf_values,
    empty_cloud,
    mesh_drdf_evaluator,
    ray_field,
    transform_log_trunc,
    uniform_depths,
)
from .mesh import (
    RayHits,
    TriangleMesh,
    cast_rays,
    cast_rays_brute,
    first_hits,
    intersect_ray,
    merge_meshes,
    transform_mesh,
)
from .metrics import (
    MetricReport,
    ReconSet,
    classify_visibility,
    consistency,
    evaluate_run,
    fscore,
    perturb_pose,
    sample_mesh_cloud,
    so3_exp,
    within_rho,
    within_rho_brute,
)
from .model import (
    FeatureGrid,
    FusionModel,
    ModelConfig,
    QueryEncoding,
    frustum_evaluator,
    fuse_and_predict,
    gradient_check,
    loss_l1,
    pixel_aligned_feature,
    query_encode,
)
from .sampling import (
    SamplingConfig,
    TrainBatch,
    build_training_batch,
    sample_points_gaussian,
    sample_points_uniform,
    sample_rays,
)
from .train import SgdMomentum, TrainConfig, TrainExample, TrainResult, train, train_step

__version__ = "0.1.0"
