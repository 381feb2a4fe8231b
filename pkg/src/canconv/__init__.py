"""Content-adaptive non-local convolution (CANConv) and the CANNet pansharpening network."""

from .metrics import MetricReport, ergas, q_avg, sam
from .network import CanNet, CanNetConfig, bicubic_upsample
from .pwac import CanConvParams, build_partition, canconv_backward, canconv_forward
from .srp import KMeansConfig, kmeans_run, srp_partition

__all__ = [
    "CanConvParams", "CanNet", "CanNetConfig", "KMeansConfig", "MetricReport",
    "bicubic_upsample", "build_partition", "canconv_backward", "canconv_forward",
    "ergas", "kmeans_run", "q_avg", "sam", "srp_partition",
]
__version__ = "0.1.0"
