from pathlib import Path

CONFIG_NAME = "config.yml"
CONFIG_DIR = Path().home() / ".mrca"
CONFIG = CONFIG_DIR / CONFIG_NAME
LOGS_DIR = CONFIG_DIR / "logs"

PACKAGE_DIR = Path(__file__).parent
PROMPTS_DIR = PACKAGE_DIR / "prompts"

# Artifact file names
DRAIN_MODEL_FILE = "drain_model.json"
TRACE_DETECTORS_FILE = "trace_detectors.json"
ANSWER_FILE = "answer.jsonl"
LLM_CALL_LOG = "llm_calls.jsonl"
INPUT_FILE = "input.json"
GROUND_TRUTH_FILE = "ground_truth.json"
TOPOLOGY_FILE = "topology.json"

WILDCARD = "<*>"

NS_PER_US = 1_000
NS_PER_SECOND = 1_000_000_000
NS_PER_MINUTE = 60 * NS_PER_SECOND
NS_PER_HOUR = 60 * NS_PER_MINUTE
NS_MAX = 2 ** 63 - 1

# Reports show times on the fixed UTC+8 display clock
DISPLAY_UTC_OFFSET_HOURS = 8
