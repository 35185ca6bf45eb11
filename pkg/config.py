import os
import psutil
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Logging settings
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
# Number of control cycles between progress lines during a closed-loop run
PROGRESS_LOG_INTERVAL = int(os.getenv("PROGRESS_LOG_INTERVAL", "50"))

# Parallel solve settings
# 0 means one worker per physical core
SOLVER_THREADS = int(os.getenv("SOLVER_THREADS", "0"))


def solver_threads() -> int:
    """
    Resolve the number of worker threads used for the parallel candidate solves

    Returns:
        Positive thread count
    """
    if SOLVER_THREADS > 0:
        return SOLVER_THREADS
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


# SQP settings
SQP_MAX_ITER = int(os.getenv("SQP_MAX_ITER", "50"))
RTI_ITERATIONS = int(os.getenv("RTI_ITERATIONS", "3"))
KKT_TOLERANCE = float(os.getenv("KKT_TOLERANCE", "1e-4"))
STEP_TOLERANCE = float(os.getenv("STEP_TOLERANCE", "1e-6"))
DEFECT_TOLERANCE = float(os.getenv("DEFECT_TOLERANCE", "1e-6"))
# Initial l1 merit function weight on the continuity defects; raised during a
# solve whenever a step would not be a descent direction of the merit
MERIT_MU = float(os.getenv("MERIT_MU", "1e4"))
# Fraction of the infeasibility term kept as guaranteed merit decrease
MERIT_RHO = float(os.getenv("MERIT_RHO", "0.5"))
# A failed line search whose predicted decrease is below this fraction of the
# merit is treated as stationary, not degraded
MERIT_STALL_TOLERANCE = float(os.getenv("MERIT_STALL_TOLERANCE", "1e-10"))
# Armijo backtracking line search
LINE_SEARCH_FACTOR = float(os.getenv("LINE_SEARCH_FACTOR", "0.5"))
LINE_SEARCH_C1 = float(os.getenv("LINE_SEARCH_C1", "1e-4"))
LINE_SEARCH_MAX_BACKTRACKS = int(os.getenv("LINE_SEARCH_MAX_BACKTRACKS", "12"))
# Quadratic penalty on state box violations
STATE_PENALTY = float(os.getenv("STATE_PENALTY", "1e6"))
# Tikhonov term added to the control Hessian blocks of the Riccati sweep
RICCATI_REGULARIZATION = float(os.getenv("RICCATI_REGULARIZATION", "1e-9"))
# Constant decelerations tried by a cold start whose coasting rollout enters an SV ellipse
COLD_START_BRAKE_LEVELS = int(os.getenv("COLD_START_BRAKE_LEVELS", "6"))

# Safety measurement settings
# Lower clamp on eta + h in the safety measurement function
SAFETY_DENOMINATOR_FLOOR = float(os.getenv("SAFETY_DENOMINATOR_FLOOR", "1e-3"))

# Logging of the reconstructed steering angle uses this speed floor (m/s)
STEERING_SPEED_FLOOR = float(os.getenv("STEERING_SPEED_FLOOR", "0.1"))

# Nominal surrounding vehicle length used for bumper-to-bumper gaps (m)
SV_LENGTH = float(os.getenv("SV_LENGTH", "5.0"))

# Window used to count target-lane reversals in the consistency metric (s)
REVERSAL_WINDOW = float(os.getenv("REVERSAL_WINDOW", "1.0"))

# Harness settings
SCENARIO_DIR = os.getenv("SCENARIO_DIR", os.path.join(os.path.dirname(os.path.abspath(__file__)), "scenarios"))
DEFAULT_SCENARIO = os.getenv("DEFAULT_SCENARIO", "paper_s4")
DEFAULT_OUTPUT_DIR = os.getenv("DEFAULT_OUTPUT_DIR", "runs")
# EV states beyond this magnitude abort the run
STATE_ABORT_LIMIT = float(os.getenv("STATE_ABORT_LIMIT", "1e6"))
