"""patchsim: perceptual image-patch similarity toolkit.

Layered deep-feature distances with calibrated channel weights, classic
SSIM/PSNR baselines, a parameterized distortion generator, 2AFC/JND dataset
tooling with an HTTP collection service, projected-gradient calibration
training, and the matching evaluation protocols.
"""

from .backbone import (BackboneSpec, WeightStore, backward, conv2d_forward, forward,
                       init_scratch, load_weights, save_weights, tinyconv)
from .dataset import (DatasetStore, JndPair, JudgmentTriplet, aggregate_votes,
                      build_2afc_dataset, build_jnd_dataset, collate_votes,
                      labeled_jnd_pairs, labeled_triplets, load_corpus,
                      make_2afc_session, make_jnd_session, make_sentinels_2afc)
from .distort import (ComposedDistortion, DistortionSpec, apply, make_jnd_pair,
                      make_triplet, sample_distortion_bank)
from .errors import (ConfigurationError, ConflictError, DecodeError, GenerationError,
                     MissingLabelError, NotFoundError, PatchSimError, RangeError,
                     UndefinedResultError)
from .evalkit import (PrCurve, TwoAfcResult, cross_task_correlation, evaluate_report,
                      human_ceiling, jnd_map, oracle_max, spearman, spearman_vs_mos,
                      two_afc_score)
from .imagecore import (ImageBuffer, Rng, decode_image, encode_image, extract_patch,
                        from_tensor, hsl_to_rgb, load_image, rgb_to_hsl, save_image,
                        synthesize_corpus, synthesize_image, to_tensor)
from .metric import (ChannelWeights, DistanceReport, l2_distance, linear_parameter_count,
                     lpips, lpips_backward, lpips_distance, load_calibration,
                     normalize_channels, psnr, save_calibration, ssim)
from .service import CollectService
from .trainer import (GNet, TrainConfig, TrainState, g_forward, loss_2afc, loss_margin,
                      lr_at, project_nonneg, train)

__version__ = "0.1.0"
