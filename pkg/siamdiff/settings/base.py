import os
from pathlib import Path

import environ

BASE_DIR = Path(__file__).resolve().parent.parent.parent

env = environ.Env()
environ.Env.read_env(BASE_DIR / ".env", overwrite=False)

SECRET_KEY = env("DJANGO_SECRET_KEY", default="dev-secret-key")
DEBUG = env.bool("DJANGO_DEBUG", default=True)
ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "diffusion",
]

# Experiments keep their state on disk (checkpoints, PNGs, CSV/JSON reports).
DATABASES = {}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"
USE_TZ = True
TIME_ZONE = "UTC"

SIAMDIFF_LOG_LEVEL = env("SIAMDIFF_LOG_LEVEL", default="INFO").upper()
SIAMDIFF_DATA_ROOT = Path(env("SIAMDIFF_DATA_ROOT", default=str(BASE_DIR / "data")))
SIAMDIFF_RUNS_ROOT = Path(env("SIAMDIFF_RUNS_ROOT", default=str(BASE_DIR / "runs")))
SDK_NUM_THREADS = max(1, env.int("SDK_NUM_THREADS", default=1))
# Native BLAS pools stay single-threaded; SDK_NUM_THREADS is the only parallelism setting.
# numpy reads these on first import, which happens after settings load.
BLAS_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)
for _name in BLAS_THREAD_VARS:
    os.environ[_name] = "1"
SIAMDIFF_DEBUG = env.bool("SIAMDIFF_DEBUG", default=False)

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s [%(levelname)s] %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "diffusion": {"handlers": ["console"], "level": SIAMDIFF_LOG_LEVEL, "propagate": False},
    },
}

# Named profiles. Keys use the config-file spelling (upper-case field names).
SIAMDIFF_PROFILES = {
    "desk": {
        "T": 200,
        "BETA_START": 1e-4,
        "BETA_END": 0.02,
        "IMAGE_SIZE": 32,
        "CHANNELS": 3,
        "BASE_WIDTH": 16,
        "DEPTH": 2,
        "TIME_EMBED_DIM": 32,
        "STAGE_CHANNELS": [8, 16, 32],
        "BLOCKS_PER_STAGE": 2,
        "N_ITER": 3000,
        "BATCH_SIZE": 4,
        "LR": 1e-3,
        "WEIGHT_DECAY": 1e-2,
        "W_M": 1.0,
        "W_C": 1.0,
        "T_TAU": 40,
        "P_DROP": 0.05,
        "STEPS": 50,
        "LAMBDA": 9.0,
    },
    "paper-faithful": {
        "T": 1000,
        "BETA_START": 1e-4,
        "BETA_END": 0.02,
        "IMAGE_SIZE": 32,
        "CHANNELS": 3,
        "BASE_WIDTH": 16,
        "DEPTH": 2,
        "TIME_EMBED_DIM": 32,
        "STAGE_CHANNELS": [8, 16, 32],
        "BLOCKS_PER_STAGE": 2,
        "N_ITER": 3000,
        "BATCH_SIZE": 6,
        "LR": 1e-5,
        "WEIGHT_DECAY": 1e-2,
        "W_M": 1.0,
        "W_C": 1.0,
        "T_TAU": 200,
        "P_DROP": 0.05,
        "STEPS": 50,
        "LAMBDA": 9.0,
    },
}
SIAMDIFF_DEFAULT_PROFILE = env("SIAMDIFF_PROFILE", default="desk")
