"""Small-object detection building blocks in numpy.

Residual Haar wavelet downsampling, global relation modelling, cross-scale
hybrid attention, the centre-assisted regression loss, and IoU/SAFit
COCO-style evaluation, plus a synthetic tiny-object training harness.
"""

from .boxes import Box, RegLossConfig, center_assisted_loss, iou, regression_loss
from .core import ConfigError, GeometryError, GradCheckReport, grad_check
from .csha import CshaConfig, csha_forward
from .detector import Detector, DetectorConfig, table3_configs
from .grm import grm_forward
from .metrics import Detection, EvalReport, GroundTruth, evaluate, nwd, safit
from .rhwd import haar_forward, haar_inverse, rhwd_forward
from .scenes import SceneConfig, gen_scene, make_dataset

__version__ = "0.1.0"
