"""Multi-scale quantized fusion for VQ-VAE style intermediate representations."""
from .errors import (ArgumentError, BoundsError, ConfigError, DimensionError, FormatError,
                     MsfError, ShapeError)
from .fusion import (MsfConfig, MsfOutput, MultiScaleFusion, ProjectionPair, compute_cost_ratio,
                     count_codebook_params, fit_codebooks, inter_scale_fuse, intra_scale_fuse,
                     msf_forward, project_up)
from .io import read_tensor, write_tensor
from .metrics import (LabelMap, SeededKMeans, ari, ari_fg, cluster_separability, evaluate,
                      kmeans_cluster, mbo, miou)
from .pyramid import Pyramid, PyramidBuilder, build_pyramid, corresponding_region, pooled_vector
from .quantizer import Codebook, VectorQuantizer, fit_codebook_ema, match, quantize, select
from .synth import ComfortModel, ObjectSpec, PrototypeBank, SceneSpec, gen_feature_pyramid, gen_scene

__version__ = "0.1.0"
