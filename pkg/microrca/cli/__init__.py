from .params import *
from .parse import *
from .utils import *
