from .base import *

SIAMDIFF_DEBUG = env.bool("SIAMDIFF_DEBUG", default=True)
