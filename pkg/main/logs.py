import logging
from django.conf import settings

handler = logging.FileHandler(settings.LOG_FILE, encoding='utf-8', delay=True)
handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(module)s: %(message)s'))

flowrestore_logger = logging.getLogger('flowrestore_logger')
flowrestore_logger.addHandler(handler)
flowrestore_logger.setLevel(logging.INFO)
