import logging
import sys
from logging.handlers import RotatingFileHandler

from asgi_correlation_id import CorrelationIdFilter

from .config import common_settings

LOG_FORMAT = "%(asctime)s [%(processName)s: %(process)d] [%(levelname)s] [%(correlation_id)s] %(name)s: %(message)s"


def init_logger() -> None:
    """
    Initialize and configure the application logger.

    Every record is tagged with the current run id through the correlation id filter.
    A rotating file handler is added when `SRF_LOG_FILE` is set.
    """
    logger = logging.getLogger("app")
    if logger.handlers:
        return

    formatter = logging.Formatter(LOG_FORMAT)
    cid_filter = CorrelationIdFilter(uuid_length=32)

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    console.addFilter(cid_filter)
    logger.addHandler(console)

    if common_settings.log_file:
        file_handler = RotatingFileHandler(common_settings.log_file, maxBytes=1024 * 1024, backupCount=3)
        file_handler.setFormatter(formatter)
        file_handler.addFilter(cid_filter)
        logger.addHandler(file_handler)

    if common_settings.debug:
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(logging.INFO)
