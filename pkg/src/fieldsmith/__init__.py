"""fieldsmith: prompt/mask-driven object insertion and removal for voxel
radiance fields via pose-ordered dataset updates."""

__version__ = "0.1.0"

from .errors import (ConfigError, DatasetError, FieldsmithError, SynthesisError,
                     TrainingDiverged)
from .geometry import (BoundingBox3D, EditMask, composite,
                       pose_translation_distance_sq, project_bbox)
from .scene_io import (CameraIntrinsics, CameraPose, CameraView, SceneDataset,
                       load_box_config, load_dataset, load_image, save_dataset,
                       save_image)
from .field import (Adam, RadianceField, Ray, TrainConfig, fit_background,
                    load_field, loss_and_gradients, render_ray, render_view,
                    save_field, train_step)
from .synthetic import (BoxPrim, GroundTruthRenderer, SceneSpec, SpherePrim,
                        make_synthetic_scene, write_scene_dir)
from .synthesizer import (FineTuneRequest, IdentityBackend, InpaintOracle,
                          ObjectOracle, Prompt, RemoteBackend, SynthesisRequest,
                          request_finetune, synthesize)
from .scheduler import (EditSession, ScheduleEvent, ScheduleParams, init_session,
                        run_insertion, run_removal, select_initial_view,
                        select_next_view, synthesize_initial, synthesize_refined)
from .metrics import (MetricsReport, clip_dc, clip_score, cos_plus,
                      evaluate_scene, psnr, toy_embedder)
