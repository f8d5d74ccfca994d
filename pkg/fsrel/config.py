# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Process-level settings for fsrel.

Experiment settings live in the JSON experiment config (see fsrel.models);
this module only holds what the environment controls.
"""

import os

from dotenv import load_dotenv

load_dotenv()

###############################################################################
# Evaluation
###############################################################################

NUM_WORKERS: int = max(1, int(os.getenv("FSREL_NUM_WORKERS", "1")))

###############################################################################
# Logging
###############################################################################

LOG_LEVEL: str = os.getenv("FSREL_LOG_LEVEL", "INFO").upper()
LOG_JSON: bool = os.getenv("FSREL_LOG_JSON", "false").lower() == "true"

###############################################################################
# Outputs
###############################################################################

OUT_DIR: str = os.getenv("FSREL_OUT_DIR", "runs")
