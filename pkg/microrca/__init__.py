__version__ = '0.1.0'

from .enums import *
from .error import *
from .config import PipelineConfig, load_config
from .pipeline import cmd_ablate, cmd_run, cmd_synth, cmd_train_drain, cmd_train_trace
