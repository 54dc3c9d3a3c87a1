# App configuration for `expertsim`, the planner/buffer/simulator app.

from django.apps import AppConfig


class ExpertsimConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'expertsim'
    verbose_name = 'Expert offloading simulator'
