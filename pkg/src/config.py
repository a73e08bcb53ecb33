"""
Depth-aware CNN toolkit - configuration
Environment-driven defaults shared by every module. CLI flags override these.
"""

import os
import logging
import platform
from datetime import datetime
from typing import Dict, Any, List

# Environment variables - defaults for the whole toolkit
LOG_LEVEL = os.environ.get('DCNN_LOG_LEVEL', 'INFO')
DEFAULT_ALPHA = os.environ.get('DCNN_ALPHA', '8.3')  # 1/meter, exponential similarity
DEFAULT_CLIP_THRESHOLD = os.environ.get('DCNN_CLIP_THRESHOLD', '1.0')  # meters
IGNORE_LABEL = os.environ.get('DCNN_IGNORE_LABEL', '255')
BENCH_DTYPE = os.environ.get('DCNN_BENCH_DTYPE', 'float64')  # float32 is bench-only
DEFAULT_SEED = os.environ.get('DCNN_SEED', '42')
GRADCHECK_EPS = os.environ.get('DCNN_GRADCHECK_EPS', '1e-5')

ENV_VARS = [
    'DCNN_LOG_LEVEL', 'DCNN_ALPHA', 'DCNN_CLIP_THRESHOLD', 'DCNN_IGNORE_LABEL',
    'DCNN_BENCH_DTYPE', 'DCNN_SEED', 'DCNN_GRADCHECK_EPS',
]

_LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def _as_float(raw: str, name: str, fallback: float, warnings: List[str]) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        warnings.append(f"{name}={raw!r} is not a number, using {fallback}")
        return fallback


def _as_int(raw: str, name: str, fallback: int, warnings: List[str]) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        warnings.append(f"{name}={raw!r} is not an integer, using {fallback}")
        return fallback


def resolve_settings() -> Dict[str, Any]:
    """Resolve environment defaults into typed settings plus any warnings"""
    warnings: List[str] = []
    settings = {
        'log_level': LOG_LEVEL.upper(),
        'alpha': _as_float(DEFAULT_ALPHA, 'DCNN_ALPHA', 8.3, warnings),
        'clip_threshold': _as_float(DEFAULT_CLIP_THRESHOLD, 'DCNN_CLIP_THRESHOLD', 1.0, warnings),
        'ignore_label': _as_int(IGNORE_LABEL, 'DCNN_IGNORE_LABEL', 255, warnings),
        'bench_dtype': BENCH_DTYPE,
        'seed': _as_int(DEFAULT_SEED, 'DCNN_SEED', 42, warnings),
        'gradcheck_eps': _as_float(GRADCHECK_EPS, 'DCNN_GRADCHECK_EPS', 1e-5, warnings),
    }
    if settings['bench_dtype'] not in ('float64', 'float32'):
        warnings.append(f"DCNN_BENCH_DTYPE={BENCH_DTYPE!r} not supported, using float64")
        settings['bench_dtype'] = 'float64'
    if settings['alpha'] <= 0:
        warnings.append(f"DCNN_ALPHA must be positive, using 8.3")
        settings['alpha'] = 8.3
    if settings['clip_threshold'] <= 0:
        warnings.append(f"DCNN_CLIP_THRESHOLD must be positive, using 1.0")
        settings['clip_threshold'] = 1.0
    settings['warnings'] = warnings
    return settings


SETTINGS = resolve_settings()


def configure_logging(level: str = None) -> None:
    """Configure the root logger once; later calls only adjust the level"""
    level_name = (level or SETTINGS['log_level']).upper()
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level_name, format=_LOG_FORMAT)
    root.setLevel(level_name)
    for warning in SETTINGS['warnings']:
        logging.getLogger(__name__).warning(f"⚠️ {warning}")


def dump_config(resolved: Dict[str, Any]) -> Dict[str, Any]:
    """Provenance report: resolved command settings plus the environment they came from"""
    env_seen = {name: os.environ.get(name) for name in ENV_VARS if os.environ.get(name) is not None}
    return {
        'timestamp': datetime.utcnow().isoformat(),
        'python': platform.python_version(),
        'platform': platform.platform(),
        'defaults': {k: v for k, v in SETTINGS.items() if k != 'warnings'},
        'environment': env_seen,
        'resolved': resolved,
        'warnings': list(SETTINGS['warnings']),
    }
