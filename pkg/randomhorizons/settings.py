from pathlib import Path
from decouple import config

BASE_DIR = Path(__file__).resolve().parent.parent

# Prefix applied to every `output.dir`; unset means paths are used as written.
OUTPUT_ROOT = config("HORIZON_OUTPUT_ROOT", default="")

LOG_LEVEL = config("HORIZON_LOG_LEVEL", default="INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Rollout cap used when a config does not set `env.max_steps`.
DEFAULT_MAX_STEPS = config("HORIZON_MAX_STEPS", default=1_000_000, cast=int)

CHECKPOINT_EVERY = config("HORIZON_CHECKPOINT_EVERY", default=500, cast=int)
LOG_EVERY = config("HORIZON_LOG_EVERY", default=100, cast=int)

# Window of the moving average shown above raw curves.
SMOOTHING_WINDOW = 100

CONFIGS_DIR = BASE_DIR / "configs"


def resolve_output_dir(output_dir: str) -> Path:
    """Apply the HORIZON_OUTPUT_ROOT override to a configured output directory."""
    path = Path(output_dir)
    if OUTPUT_ROOT and not path.is_absolute():
        return Path(OUTPUT_ROOT) / path
    return path
