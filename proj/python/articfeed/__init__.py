"""Python bindings for the articfeed EMA processing core."""

from ._core import (
    PROTOCOL_VERSION,
    Error,
    MultilinearModel,
    PcaModel,
    Tracker,
    bite_plane_frame,
    closest_point,
    decode_packet,
    encode_frame,
    fit_palate,
    generate_synthetic_model,
    generate_synthetic_palate,
    load_model,
    read_obj,
    read_sweep,
    rigid_align,
    synthetic_correspondences,
    validate_session,
    write_obj,
    write_sweep,
)

__all__ = [
    "PROTOCOL_VERSION",
    "Error",
    "MultilinearModel",
    "PcaModel",
    "Tracker",
    "bite_plane_frame",
    "closest_point",
    "decode_packet",
    "encode_frame",
    "fit_palate",
    "generate_synthetic_model",
    "generate_synthetic_palate",
    "load_model",
    "read_obj",
    "read_sweep",
    "rigid_align",
    "synthetic_correspondences",
    "validate_session",
    "write_obj",
    "write_sweep",
]
