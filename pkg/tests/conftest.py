import pytest
from hypothesis import settings

from aphidkit import _pykernels

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


def _backends():
    params = [pytest.param(_pykernels, id="python")]
    try:
        from aphidkit import _ckernels
    except ImportError:
        params.append(pytest.param(None, id="cython", marks=pytest.mark.skip("extension not built")))
    else:
        params.append(pytest.param(_ckernels, id="cython"))
    return params


@pytest.fixture(params=_backends())
def backend(request):
    return request.param


@pytest.fixture
def force_backend(monkeypatch, backend):
    """Route the library's kernel calls through one backend."""
    from aphidkit import kernels
    for name in ("gap_components", "iou_matrix", "nms_keep", "greedy_match", "union_coverage"):
        monkeypatch.setattr(kernels, name, getattr(backend, name))
    return backend
