import os
import logging

import numpy as np

logger = logging.getLogger(__name__)


class PalError(Exception):
    """Base of every error the package raises on purpose."""


class ConfigError(PalError):
    pass


class ContractError(PalError):
    pass


class InputError(PalError):
    pass


class InputTooShortError(InputError):
    pass


class TrainingError(PalError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def make_rng(seed, *keys):
    # Philox is counter-based; spawn keys give independent, replayable streams.
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed, *keys):
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def as_rng(seed_or_rng, *keys):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(seed_or_rng, *keys)


def env_int(name, default=None):
    value = os.environ.get(name)
    if value is None or value == '':
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {value!r}")


def limit_threads():
    """Apply PAL_THREADS to the BLAS pools; returns the limiter (or None)."""
    n_threads = env_int('PAL_THREADS')
    if n_threads is None:
        return None
    from threadpoolctl import threadpool_limits
    logger.info("Capping kernel threads at %d", n_threads)
    return threadpool_limits(limits=n_threads)
