"""Hot loops, each in a numba and a numpy flavour; the active pair follows ``DASH_NUMBA``."""

from .._accel import USE_NUMBA
from . import hashgrid as _hg
from . import optim as _op
from . import raster as _rs

NUMBA = {
    "encode_forward": _hg.encode_forward_numba,
    "encode_backward": _hg.encode_backward_numba,
    "hash_slots": _hg.hash_slots_numba,
    "rasterize_forward": _rs.rasterize_forward_numba,
    "rasterize_backward": _rs.rasterize_backward_numba,
    "adam_update": _op.adam_update_numba,
}
NUMPY = {
    "encode_forward": _hg.encode_forward_numpy,
    "encode_backward": _hg.encode_backward_numpy,
    "hash_slots": _hg.hash_slots_numpy,
    "rasterize_forward": _rs.rasterize_forward_numpy,
    "rasterize_backward": _rs.rasterize_backward_numpy,
    "adam_update": _op.adam_update_numpy,
}
ACTIVE = NUMBA if USE_NUMBA else NUMPY

encode_forward = ACTIVE["encode_forward"]
encode_backward = ACTIVE["encode_backward"]
hash_slots = ACTIVE["hash_slots"]
rasterize_forward = ACTIVE["rasterize_forward"]
rasterize_backward = ACTIVE["rasterize_backward"]
adam_update = ACTIVE["adam_update"]
