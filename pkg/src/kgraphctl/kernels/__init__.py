"""Inner-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and importable; setting
``KGRAPHCTL_PURE_PYTHON=1`` forces the numpy implementations. Callers go
through the wrappers below, which normalize dtypes and layouts so both
backends see identical inputs.
"""
import os

import numpy as np

from . import _pykernels

GAUSSIAN, LAPLACE, VMF = _pykernels.GAUSSIAN, _pykernels.LAPLACE, _pykernels.VMF

_compiled = None
if os.environ.get("KGRAPHCTL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name=None):
    """Module implementing the kernels; ``None`` selects the default."""
    name = name or BACKEND
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def _f64(a, ndim):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {a.shape}")
    return a


def _csr(indptr, indices):
    return (np.ascontiguousarray(indptr, dtype=np.int64),
            np.ascontiguousarray(indices, dtype=np.int64))


def gibbs_weights(features, indptr, indices, kind, param, backend=None):
    ip, ix = _csr(indptr, indices)
    return get_backend(backend).gibbs_weights(_f64(features, 3), ip, ix, int(kind), float(param))


def edge_potentials(features, indptr, indices, kind, param, backend=None):
    ip, ix = _csr(indptr, indices)
    return get_backend(backend).edge_potentials(_f64(features, 3), ip, ix, int(kind), float(param))


def aggregate(features, indptr, indices, weights, backend=None):
    ip, ix = _csr(indptr, indices)
    return get_backend(backend).aggregate(_f64(features, 3), ip, ix, _f64(weights, 2))


def block_matvec(blocks, indptr, indices, x, backend=None):
    ip, ix = _csr(indptr, indices)
    return get_backend(backend).block_matvec(_f64(blocks, 3), ip, ix, _f64(x, 3))


def block_rmatvec(blocks, indptr, indices, y, n_sources, backend=None):
    ip, ix = _csr(indptr, indices)
    return get_backend(backend).block_rmatvec(_f64(blocks, 3), ip, ix, _f64(y, 3), int(n_sources))


def rope_rollout(pos0, vel0, forces, mass, stiffness, rest_length, damping, gravity, dt,
                 backend=None):
    return get_backend(backend).rope_rollout(
        _f64(pos0, 2), _f64(vel0, 2), _f64(forces, 1), float(mass), float(stiffness),
        float(rest_length), float(damping), float(gravity), float(dt))


def grid_rollout(v0, vdot0, indptr, indices, controls, disturbance, generator, damping,
                 coupling, restoring, v_ref, dt, backend=None):
    ip, ix = _csr(indptr, indices)
    return get_backend(backend).grid_rollout(
        _f64(v0, 1), _f64(vdot0, 1), ip, ix, _f64(controls, 2), _f64(disturbance, 2),
        np.ascontiguousarray(generator, dtype=np.uint8), float(damping), float(coupling),
        float(restoring), float(v_ref), float(dt))
