"""
Fixed values shared by the pipeline stages.

Label values follow the annotation masks:

- :code:`0` background (no tissue)
- :code:`1` normal/benign tissue
- :code:`2` ductal carcinoma in situ (DCIS)
- :code:`3` invasive ductal carcinoma (IDC)

Network outputs use the zero-based class index, i.e., mask label minus one.
"""

__all__ = [
    "BACKGROUND",
    "BACKGROUND_COLOR",
    "BN_EPS",
    "BN_MOMENTUM",
    "BENIGN",
    "CLASS_COLORS",
    "CLASS_NAMES",
    "DCIS",
    "DEFAULT_STRIDE",
    "DOWNSAMPLING",
    "IDC",
    "IDC_MIN_AREA_UM2",
    "NEIGHBOR_THRESHOLD_UM",
    "NESTEROV_MOMENTUM",
    "NUM_CLASSES",
    "WINDOW_SIZES",
]

BACKGROUND = 0
BENIGN = 1
DCIS = 2
IDC = 3

NUM_CLASSES = 3
CLASS_NAMES = ("benign", "dcis", "idc")

# RGB per class index, background cells render white
CLASS_COLORS = ((0, 170, 0), (0, 0, 255), (255, 0, 0))
BACKGROUND_COLOR = (255, 255, 255)

DEFAULT_STRIDE = 224
WINDOW_SIZES = (512, 768, 1024)
DOWNSAMPLING = 16

IDC_MIN_AREA_UM2 = 1500.0
NEIGHBOR_THRESHOLD_UM = 1500.0

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
NESTEROV_MOMENTUM = 0.9
