# conic_nmf/config.py
import os
from dotenv import load_dotenv

load_dotenv()  # pick up overrides from a local .env

# --- 1. Parallelism ---
# default for the CLI --jobs flag
CONIC_NMF_JOBS = int(os.getenv("CONIC_NMF_JOBS", "1"))

# --- 2. Logging ---
LOG_DIR = os.getenv("CONIC_NMF_LOG_DIR", "logs")
LOG_FILE_ENABLED = os.getenv("CONIC_NMF_LOG_FILE", "1") not in ("0", "false", "False", "")
LOG_LEVEL = os.getenv("CONIC_NMF_LOG_LEVEL", "INFO").upper()

# --- 3. Outputs ---
OUT_DIR = os.getenv("CONIC_NMF_OUT_DIR", "out")

# --- 4. Tolerances ---
SUCCESS_TOL = 1e-6
FEAS_TOL = 1e-9
OPT_TOL = 1e-9
FW_GAP_VIOLATION = 1e-6

# --- 5. Formulations ---
# W/H entries are kept inside [0, FACTOR_BOUND] (SOC) or [1/FACTOR_BOUND^2, FACTOR_BOUND^2] (exp)
FACTOR_BOUND = float(os.getenv("CONIC_NMF_FACTOR_BOUND", "1e4"))
INTERIOR_DELTA = 1e-6
EXP_ZERO_SHIFT = 1e-8  # relative to max(V)
SPI_THRESHOLD = 1e-3

# --- 6. Experiment protocol ---
MAXITER_DEFAULT = 750
MAXITER_RIGID = 3000
DESK_N_INITS = 20
FULL_N_INITS = 100
PERTURBATION_D = 0.03
