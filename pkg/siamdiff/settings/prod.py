from .base import *

DEBUG = False
SIAMDIFF_DEBUG = env.bool("SIAMDIFF_DEBUG", default=False)
