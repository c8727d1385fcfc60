import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'flowrestore.settings')
django.setup()


def pytest_collection_modifyitems(config, items):
    # mirror main.runner.FlowRestoreTestRunner: tests tagged 'slow' are skipped by default
    import pytest
    skip_slow = pytest.mark.skip(reason="tagged 'slow'; run with `python manage.py test --tag slow`")
    for item in items:
        tags = set(getattr(getattr(item, 'function', None), 'tags', ())) | set(getattr(getattr(item, 'cls', None), 'tags', ()))
        if 'slow' in tags:
            item.add_marker(skip_slow)
