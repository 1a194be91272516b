# settings.py
# Defaults shared across modules. Plans and configs override these per run.

import os
from pathlib import Path

# ------------------------
# Data generation
# ------------------------
DT = 0.01
SUBSAMPLE = 10  # Δs = 10·dt
TRANSIENT_STEPS = 50_000
DIVERGENCE_BOUND = 1e6
INIT_ATTEMPTS = 20  # x0 redraws before generate gives up
DESK_DATA_LENGTH = 50_000
FULL_DATA_LENGTH = 1_500_000

# ------------------------
# Evaluation
# ------------------------
MSE_THRESHOLD = 0.01
CELL_SIZE = 0.05
SHORT_HORIZON = 150
LONG_HORIZON = 10_000
STOCHASTIC_KERNEL_SIGMA = 12.0

# ------------------------
# Reservoir
# ------------------------
WASHOUT = 100
OUTPUT_CLIP = 10.0

# ------------------------
# Paths
# ------------------------
OUTPUT_ROOT = Path(os.getenv("CHRONOWEFT_OUTPUT", "runs"))
LEDGER_FILE = Path(os.getenv("CHRONOWEFT_LEDGER", "chronoweft_runs.db"))

TOOL_VERSION = "0.3.0"
