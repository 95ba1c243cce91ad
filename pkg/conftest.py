import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "siamdiff.settings")
django.setup()
