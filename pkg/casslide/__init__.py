from .utils import get_precision, set_precision
from .nn import *
from .wrn import *
from .stacked import *
from .geometry import *
from .metrics import *

from . import data, forest, synth, training  # isort:skip
