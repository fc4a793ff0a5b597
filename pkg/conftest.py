import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nsnlab.settings')
django.setup()
