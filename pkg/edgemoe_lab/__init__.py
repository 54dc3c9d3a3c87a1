# Load the Celery app so that @shared_task binds to the project configuration.
from .celery import app as celery_app

__all__ = ('celery_app',)
