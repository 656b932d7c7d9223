"""
Constants and configuration values for the glaucoma self-training pipeline.
Centralizes all magic numbers and hardcoded values for easier maintenance.
"""

# ============================================================================
# IMAGE CONSTANTS
# ============================================================================

# Canonical B-scan geometry (rows x cols)
BSCAN_HEIGHT = 248
BSCAN_WIDTH = 384
BSCAN_SHAPE = (BSCAN_HEIGHT, BSCAN_WIDTH)

# 8-bit grayscale export
PIXEL_SCALE = 255.0
SUPPORTED_BIT_DEPTH = 8

# Backbones consume RGB input; grayscale is replicated
BACKBONE_INPUT_CHANNELS = 3

# ============================================================================
# CLASS CONSTANTS
# ============================================================================

N_CLASSES = 3
CLASS_NAMES = ("healthy", "early", "advanced")

# ============================================================================
# ARCHITECTURE CONSTANTS
# ============================================================================

# Embedding volume channels (a multiple of the number of classes)
EMBEDDING_CHANNELS = 60

# Number of leading VGG blocks kept frozen during fine-tuning
FROZEN_BLOCKS = 3

# Attention autoencoder bottleneck = channels // ATTENTION_REDUCTION
ATTENTION_REDUCTION = 4

# Residual branch kernel (vertical 3x1)
RESIDUAL_KERNEL = (3, 1)

# VGG tables: convolution widths per block
VGG_BLOCKS = {
    "vgg16": ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)),
    "vgg19": ((64, 64), (128, 128), (256, 256, 256, 256), (512, 512, 512, 512), (512, 512, 512, 512)),
}
SUPPORTED_BACKBONES = tuple(VGG_BLOCKS)

# ============================================================================
# TRAINING CONSTANTS
# ============================================================================

DEFAULT_EPOCHS = 100
DEFAULT_BATCH_SIZE = 16
DEFAULT_EVAL_BATCH_SIZE = 32

# Categorical cross-entropy clamp floor
LOSS_FLOOR = 1e-7

# Adadelta defaults
ADADELTA_RHO = 0.95
ADADELTA_EPSILON = 1e-6
ADADELTA_LEARNING_RATE = 1.0

# ============================================================================
# SPLIT CONSTANTS
# ============================================================================

DEFAULT_CV_FOLDS = 5
TARGET_POOL_FRACTION = 2.0 / 3.0

# ============================================================================
# MANIFEST CONSTANTS
# ============================================================================

MANIFEST_HEADER = ("image_path", "patient_id", "grade", "domain")
MANIFEST_FILENAME = "manifest.csv"
SYNTH_META_FILENAME = "synth_meta.json"
PSEUDO_LABEL_HEADER = ("image_id", "pseudo_grade", "confidence", "p_healthy", "p_early", "p_advanced")

# ============================================================================
# SYNTHETIC GENERATOR CONSTANTS
# ============================================================================

# Bright RNFL-like band thickness ranges in rows, per grade (disjoint)
SYNTH_BAND_THICKNESS = {
    0: (36.0, 44.0),  # healthy
    1: (24.0, 32.0),  # early
    2: (12.0, 20.0),  # advanced
}

# Layer intensities
SYNTH_BACKGROUND = 0.08
SYNTH_BAND_INTENSITY = 0.85
SYNTH_LOWER_LAYERS = (
    (12, 0.35),
    (10, 0.55),
    (10, 0.30),
    (8, 0.50),
    (30, 0.25),
    (8, 0.60),
)
SYNTH_SURFACE_ROW = (50.0, 70.0)
SYNTH_BASE_NOISE_STD = 0.03

# Threshold used to measure the bright band back out of an image
SYNTH_BAND_THRESHOLD = 0.72

# ============================================================================
# INTERPRETABILITY CONSTANTS
# ============================================================================

CAM_COLORMAP = "jet"
CAM_OVERLAY_ALPHA = 0.5

# ============================================================================
# CLI CONSTANTS
# ============================================================================

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2

RUN_MANIFEST_FILENAME = "run_manifest.json"
