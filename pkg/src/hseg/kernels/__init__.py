"""Hot numeric kernels, dispatched to numba or numpy per ``hseg._backend``.

Both implementations share one contract:

``depthwise_forward(xp, w, stride, ho, wo)``
    xp is the zero-padded input (N, C, Hp, Wp), w is (C, k, k).
``depthwise_backward(xp, w, g, stride)``
    returns (grad wrt padded input, grad wrt w).
``deform_im2col(x, offset, mask, k, stride, pad)``
    modulated bilinear samples, shape (N, C, k*k, Ho, Wo). offset holds
    (dy, dx) pairs per tap along axis 1.
``deform_col2im(x, offset, mask, gcols, k, stride, pad)``
    returns grads wrt (x, offset, mask).
"""
from .. import _backend
from . import _numpy_impl

if _backend.HAVE_NUMBA:
    from . import _numba_impl as _impl

    _backend.configure_threads()
else:
    _impl = _numpy_impl

BACKEND = _backend.BACKEND

depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
deform_im2col = _impl.deform_im2col
deform_col2im = _impl.deform_col2im

__all__ = [
    "BACKEND",
    "depthwise_forward",
    "depthwise_backward",
    "deform_im2col",
    "deform_col2im",
]
