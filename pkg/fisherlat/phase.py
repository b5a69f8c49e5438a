import logging
import sys
import time
from contextlib import contextmanager

# Pipeline stage names, in execution order. `--stage` accepts any of the keys.
STAGES = {
    'sample': 'Sample',
    'posterior': 'Posterior',
    'train': 'Train',
    'metric': 'Metric',
    'geodesic': 'Geodesic',
    'phase': 'Phase Map',
    'evaluate': 'Evaluate',
}

CURRENT_PHASE = 'Startup'

LOG_FORMAT = '%(asctime)s [%(name)s] %(levelname)s [%(phase)s]: %(message)s'
LOG_DATEFMT = '%Y-%m-%dT%H:%M:%SZ'


class PhaseFilter(logging.Filter):
    def filter(self, record):
        try:
            record.phase = CURRENT_PHASE
        except Exception:
            record.phase = 'unknown'
        return True


@contextmanager
def temp_phase(name: str):
    """Set the phase shown in every log line for the duration of the block."""
    global CURRENT_PHASE
    prev = CURRENT_PHASE
    CURRENT_PHASE = name
    logging.getLogger('fisherlat').info(f"=== PHASE: {name} ===")
    try:
        yield
    finally:
        CURRENT_PHASE = prev
        logging.getLogger('fisherlat').info(f"=== PHASE: {prev} ===")


def attach_phase_filter(handler: logging.Handler):
    handler.addFilter(PhaseFilter())


def configure_logging(level: str = 'INFO') -> logging.Logger:
    """Attach a stdout handler with phase-tagged UTC timestamps to the package logger."""
    logger = logging.getLogger('fisherlat')
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    if not logger.handlers:
        fmt = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
        fmt.converter = time.gmtime
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(fmt)
        attach_phase_filter(handler)
        logger.addHandler(handler)
    logger.propagate = False
    return logger
