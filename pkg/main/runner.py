from django.test.runner import DiscoverRunner


class FlowRestoreTestRunner(DiscoverRunner):
    """ skips the desk-scale experiments unless they are asked for with --tag slow """

    def __init__(self, *args, tags=None, exclude_tags=None, **kwargs):
        exclude_tags = set(exclude_tags or ())
        if not tags or 'slow' not in tags:
            exclude_tags.add('slow')
        super().__init__(*args, tags=tags, exclude_tags=exclude_tags, **kwargs)
