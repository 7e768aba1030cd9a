"""evfield: neural radiance fields trained directly from event-camera
streams, with a contrast-threshold event simulator, differentiable volume
renderer, and evaluation harness."""

from .geometry import (CameraIntrinsics, Pose, Ray, interpolate_pose,
                       orbit_trajectory, ray_for_pixel, rays_for_pixels)
from .scenes import AnalyticScene, GtFrame, builtin_scene, gt_render, scene_preset
from .events import (Event, EventCountGrid, EventStream, NoiseConfig,
                     count_events, inject_noise, make_stream, simulate_events)
from .field import (EncodingConfig, FieldConfig, FieldParams, encode,
                    field_backward, field_forward, init_field,
                    load_checkpoint, save_checkpoint)
from .rendering import (RaySamples, RenderResult, RenderSettings, composite,
                        composite_backward, render_image, render_rays,
                        sample_importance, sample_stratified)
from .losses import (LossBreakdown, ThresholdSet, dead_zone,
                     delta_log_intensity, event_render_loss, event_sum,
                     threshold_bound_loss)
from .training import (Adam, TrainConfig, Trainer, TrainingSet,
                       build_training_set, desk_config, fit, sample_batch)
from .metrics import (EvalReport, align_log_affine, apply_log_affine,
                      depth_metrics, evaluate_frame, mean_report, noise_sweep,
                      pearson, ssim)
from .errors import DataError, EvaluationError

__version__ = "0.1.0"
