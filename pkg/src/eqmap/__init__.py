"""Dense surface-coordinate prediction on a rendered puppet benchmark.

The package renders an articulated stick figure with exact ground
truth (per-pixel chart + coordinates, inter-frame correspondence
fields, a geodesic surface mesh), trains a small convolutional
predictor with hand-rolled gradients, and compares supervision
strategies: sparse clicks, label transport through flow, and a Siamese
feature-consistency loss.
"""

from .annotations import (AnnotationSet, Click, FrameAnnotation, SCHEMES,
                          TrainingTriplet, annotate_sequence, build_triplets,
                          propagate_clicks, propagate_dataset, propagate_gt,
                          subsample_annotations)
from .container import read_container, write_container
from .datasetio import (Dataset, GenConfig, build_dataset, dataset_digest,
                        load_dataset, save_dataset)
from .errors import (DataFormatError, DegenerateWarpError, NotFoundError,
                     NumericFailure, UsageError)
from .fields import (ConsistencyMask, CorrespondenceField, WarpPolicy,
                     WarpSpec, compose, downscale_field, downscale_mask,
                     forward_backward_mask, identity_field, integrate_flow,
                     invert_field, realize_warp, sample_warp, warp_image,
                     warp_points)
from .gradcheck import grad_check
from .harness import (ExperimentSpec, ResultRow, ResultTable, ablation_grid,
                      emit_report, ensure_dataset, grid_specs, run_experiment)
from .losses import (LossWeights, keypoint_terms, loss_equivariance,
                     loss_keypoints, loss_supervised, supervised_terms)
from .model import (LevelSelector, Model, ModelConfig, Prediction, layout,
                    load_model, param_count, save_model)
from .puppet import PuppetConfig, PuppetPose, build_parts, canonical_pose
from .runconfig import (RunConfig, emit_config, load_config, parse_config,
                        save_config)
from .sequences import (Frame, RenderConfig, Sequence, corrupt_flow,
                        field_between, locate_points, render_sequence)
from .surface import (GeodesicIndex, SurfaceMesh, UVMap, build_puppet_surface,
                      geodesic, geodesic_many, ratio_within, uv_to_point)
from .training import (MetricsRow, STRATEGIES, TrainConfig, evaluate,
                       metrics_to_csv, parse_metrics_csv, train)

__version__ = "0.1.0"
