from django.apps import AppConfig


class MotionConfig(AppConfig):
    name = 'motion'
    verbose_name = 'Motion artifact simulation and paired datasets'
