"""
NSN lab - app configuration
"""
from django.apps import AppConfig


class NsnConfig(AppConfig):
    name = 'nsn'
    verbose_name = 'Nested Subspace Networks'
