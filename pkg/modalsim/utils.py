import json
import logging

import numpy as np
from scipy.stats import unitary_group

from modalsim.exceptions import ConfigurationError
from modalsim.linalg import Projector


def trajectory_rng(seed, trajectory_id) -> np.random.Generator:
    """Counter-based stream keyed by (seed, trajectory id), schedule independent"""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(trajectory_id),))
    return np.random.Generator(np.random.Philox(ss))


def spawn_rngs(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(count)]


def random_state(dim, rng) -> np.ndarray:
    vec = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return vec / np.linalg.norm(vec)


def random_unitary(dim, rng) -> np.ndarray:
    return unitary_group.rvs(dim, random_state=rng)


def random_hermitian(dim, rng) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return (a + a.conj().T) / 2


def random_projector(dim, rank, rng) -> Projector:
    if rank == 0:
        return Projector.zero(dim)
    return Projector.from_vectors(list(random_unitary(dim, rng)[:, :rank].T), dim=dim)


def random_probabilities(size, rng) -> np.ndarray:
    return rng.dirichlet(np.ones(size))


def parse_complex(value) -> complex:
    """Accepts 0.6, [0.6, 0.0] or {"re": 0.6, "im": 0.0}"""
    try:
        if isinstance(value, dict):
            return complex(float(value.get("re", 0)), float(value.get("im", 0)))
        if isinstance(value, (list, tuple)):
            if len(value) != 2:
                raise ValueError(f"expected [re, im], got {value}")
            return complex(float(value[0]), float(value[1]))
        if isinstance(value, bool):
            raise ValueError("booleans are not amplitudes")
        return complex(float(value))
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"malformed amplitude {value!r}: {e}")


def parse_amplitudes(values) -> np.ndarray:
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigurationError(f"amplitude list expected, got {values!r}")
    amps = np.array([parse_complex(v) for v in values], dtype=complex)
    if not np.all(np.isfinite(amps)):
        raise ConfigurationError("amplitudes must be finite")
    return amps


def complex_to_json(z):
    z = complex(z)
    return [float(z.real), float(z.imag)]


def dumps(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(data))
    logging.debug(f"wrote {path}")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
