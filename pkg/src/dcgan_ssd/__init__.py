"""DCGAN enhancement in front of a single-shot detector, for degraded footage."""

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import classification_corpus, degraded_benchmark, detection_corpus, enhancement_pairs
from .data import Annotation, AnnotatedObject, DegradationParams, degrade, load_annotations
from .enhancer import EnhanceSpec, enhance_frame
from .errors import DataValidationError, NumericalError, ShapeError
from .evaluate import EvalReport, compare_pipelines, mean_average_precision, psnr
from .gan import ConditionalGenerator, Discriminator, GanTrainConfig, Generator, train_gan
from .probe import extract_features, train_linear_probe
from .ssd import Detection, DetectorConfig, DetectorTrainConfig, SSDDetector, detect, detect_cascade, train_detector

__version__ = "0.1.0"
