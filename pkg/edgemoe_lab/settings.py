"""
Django settings for the edgemoe_lab project.

The project has no web surface; Django supplies configuration, forms-based
validation, the cache framework and the management commands that make up the CLI.
Every knob can be overridden through the environment.
For more details, refer to the Django documentation: https://docs.djangoproject.com/en/5.2/topics/settings/
"""

import os
from pathlib import Path

# Define the base directory of the project
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('SECRET_KEY', 'edgemoe-lab-offline-key')

DEBUG = os.environ.get('DEBUG', 'False').lower() == 'true'

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'expertsim',  # Planning, buffering and pipeline simulation
]

USE_TZ = True
TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Cache used for measured plan accuracies (see expertsim.utils)
CACHES = {
    'default': {
        'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
        'LOCATION': 'edgemoe-lab',
        'TIMEOUT': None,
        'OPTIONS': {'MAX_ENTRIES': 100000},
    }
}

# Logging
LOG_LEVEL = os.environ.get('EDGEMOE_LOG_LEVEL', 'INFO')
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {'format': '%(asctime)s %(levelname)s %(name)s: %(message)s'},
    },
    'handlers': {
        'console': {'class': 'logging.StreamHandler', 'formatter': 'plain'},
    },
    'loggers': {
        'expertsim': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
    },
}

# Celery: eager by default so profiling runs in-process unless a broker is configured
CELERY_BROKER_URL = os.environ.get('CELERY_BROKER_URL', 'memory://')
CELERY_RESULT_BACKEND = os.environ.get('CELERY_RESULT_BACKEND', 'cache+memory://')
CELERY_TASK_ALWAYS_EAGER = os.environ.get('CELERY_TASK_ALWAYS_EAGER', 'True').lower() == 'true'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'

# Offline planning
EDGEMOE_PROBES = int(os.environ.get('EDGEMOE_PROBES', 512))
EDGEMOE_PROBE_SEED = int(os.environ.get('EDGEMOE_PROBE_SEED', 1))
EDGEMOE_TOLERABLE_LOSS = float(os.environ.get('EDGEMOE_TOLERABLE_LOSS', 0.02))
# 'local' evaluates heatmap probes in-process, 'celery' fans them out as tasks
EDGEMOE_PLANNER_DISPATCH = os.environ.get('EDGEMOE_PLANNER_DISPATCH', 'local')

# Activation predictor
EDGEMOE_PREDICTOR_HISTORY = int(os.environ.get('EDGEMOE_PREDICTOR_HISTORY', 2))
EDGEMOE_PREDICTOR_ALPHA = float(os.environ.get('EDGEMOE_PREDICTOR_ALPHA', 0.5))
EDGEMOE_PREDICTOR_MIN_COUNT = int(os.environ.get('EDGEMOE_PREDICTOR_MIN_COUNT', 1))

# Expert buffer
EDGEMOE_BUFFER_SLOTS = int(os.environ.get('EDGEMOE_BUFFER_SLOTS', 10))
# 'printed' = (S - i + I) mod S, 'forward' = (i - I) mod S
EDGEMOE_EVICTION_DISTANCE = os.environ.get('EDGEMOE_EVICTION_DISTANCE', 'printed')

# Pipeline simulator
EDGEMOE_DEQUANT_FACTOR = float(os.environ.get('EDGEMOE_DEQUANT_FACTOR', 0.027))
EDGEMOE_DEFAULT_COST = os.environ.get('EDGEMOE_DEFAULT_COST', 'tx2-ssd-like')
EDGEMOE_PRELOAD_M = int(os.environ.get('EDGEMOE_PRELOAD_M', 1))
