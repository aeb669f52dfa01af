"""greenseg: energy-aware training of small medical segmentation networks in numpy."""
from .graph import Graph, GraphError, backward, forward
from .gradcheck import grad_check
from .models import ArchSpec, Family, Model, build_model, param_count
from .ops import ShapeError
from .tensor import Precision, Tensor, cast_precision

__version__ = "0.1.0"
