# Shared helpers: cache access with an in-process fallback, report writing
# and the step log used in JSON reports.

import datetime
import json
import logging
import threading
import time as _time

from django.core.cache import cache

logger = logging.getLogger(__name__)

# Small in-process cache fallback for environments where Django settings
# (and CACHES) are not configured (e.g., running snippets outside Django).
_local_cache = {}
_local_cache_lock = threading.Lock()

DEFAULT_TTL = 24 * 60 * 60


def cache_get(key):
    """Try Django cache first, fall back to local in-memory cache."""
    try:
        return cache.get(key)
    except Exception:
        with _local_cache_lock:
            entry = _local_cache.get(key)
            if not entry:
                return None
            value, expires_at = entry
            if _time.time() >= expires_at:
                del _local_cache[key]
                return None
            return value


def cache_set(key, value, ttl=DEFAULT_TTL):
    """Set value in Django cache if available, otherwise local cache."""
    try:
        cache.set(key, value, ttl)
    except Exception:
        with _local_cache_lock:
            _local_cache[key] = (value, _time.time() + ttl)


class StepLog(list):
    """Human-readable progress lines kept alongside a report."""

    def info(self, message, *args):
        text = message % args if args else message
        self.append(f'> [*] {text}')
        logger.info(text)

    def warn(self, message, *args):
        text = message % args if args else message
        self.append(f'> [!] {text}')
        logger.warning(text)


def dump_json(payload, path, timestamp=True):
    """Write a report as sorted, indented JSON; identical payloads give identical bytes."""
    if timestamp:
        payload = dict(payload, generated_at=datetime.datetime.now(datetime.timezone.utc).isoformat())
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')


def load_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def mb_to_bytes(mb) -> int:
    return int(round(float(mb) * 1024 * 1024))
