"""Environment-driven settings.

Values are read once at import time after loading a local `.env` file.
Command-line flags override everything here.
"""
from __future__ import annotations

import os

import dotenv

dotenv.load_dotenv()

TRUTHY = {"1", "true", "yes"}

SEED_ENV_VAR = "SPARSEDERF_SEED"
THREADS_ENV_VAR = "SPARSEDERF_THREADS"

LOG_LEVEL = os.getenv("SPARSEDERF_LOG_LEVEL", "INFO").upper()
ENABLE_PROGRESS = os.getenv("SPARSEDERF_PROGRESS", "true").lower() in TRUTHY
CHUNK_RAYS = max(1, int(os.getenv("SPARSEDERF_CHUNK_RAYS", "256")))
RUN_SLOW_TESTS = os.getenv("SPARSEDERF_RUN_SLOW", "false").lower() in TRUTHY
