import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # App Settings
    APP_NAME = os.getenv("APP_NAME", "BRWP Sampling Lab")
    DEBUG = os.getenv("DEBUG", "False").lower() == "true"
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "outputs")

    # Run Defaults
    DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", 0))

    # Grid Settings
    GRID_LO = float(os.getenv("GRID_LO", -12.0))
    GRID_HI = float(os.getenv("GRID_HI", 12.0))
    GRID_POINTS = int(os.getenv("GRID_POINTS", 2401))
    LOG_FLOOR = float(os.getenv("LOG_FLOOR", 1e-300))

    # Numerical Tolerances
    FD_REL_STEP = 1e-4
    NONSMOOTH_EPS = 1e-6
    LAPLACE_GUARD = 0.1
    LAPLACE_WARN = 0.5
    MASS_TOLERANCE = float(os.getenv("MASS_TOLERANCE", 5e-3))
    TRUNCATION_TOLERANCE = 1e-8
    DENOMINATOR_TAIL = 1e-10
    CLAMP_ABORT_FRACTION = 0.01

    # Plot Settings
    PLOT_BINS = 40
    PLOT_RANGE = (-6.0, 6.0)
