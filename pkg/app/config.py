import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()

# Numerics
CERTSIM_DTYPE = os.getenv("CERTSIM_DTYPE", "f64")
CERTSIM_THREADS = int(os.getenv("CERTSIM_THREADS", "1"))
SLL_EPSILON = float(os.getenv("SLL_EPSILON", "1e-9"))
POWER_ITERATIONS = int(os.getenv("POWER_ITERATIONS", "50"))

# Default architecture (desk scale)
IMAGE_SIZE = int(os.getenv("IMAGE_SIZE", "16"))
EMBED_DIM = int(os.getenv("EMBED_DIM", "32"))

# Model / index used by the HTTP service
MODEL_PATH = os.getenv("MODEL_PATH", "certsim_model.ckpt")
INDEX_PATH = os.getenv("INDEX_PATH", "")

# Logging
CERTSIM_LOG_LEVEL = os.getenv("CERTSIM_LOG_LEVEL", "INFO")
CERTSIM_PROGRESS = os.getenv("CERTSIM_PROGRESS", "1") not in ("0", "false", "False", "")

# Server
HOST = os.getenv("HOST", "0.0.0.0")
PORT = int(os.getenv("PORT", "8000"))


def configure_logging(level: str | None = None) -> None:
    """Send all diagnostics to standard error; data goes to stdout or files."""
    logging.basicConfig(
        stream=sys.stderr,
        level=(level or CERTSIM_LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
