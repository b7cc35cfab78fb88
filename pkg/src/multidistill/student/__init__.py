"""Any-resolution transformer student with hand-written gradients."""

from .model import (
    DivisibilityError,
    LayerScope,
    StudentConfig,
    attention_flops,
    backward,
    damp_perturb,
    damp_restore,
    ema_init,
    ema_update,
    forward,
    global_attention,
    init_params,
    interp_pos_embed,
    parse_schedule,
    patchify,
    resolve_schedule,
    windowed_attention,
)

__all__ = [
    "DivisibilityError",
    "LayerScope",
    "StudentConfig",
    "attention_flops",
    "backward",
    "damp_perturb",
    "damp_restore",
    "ema_init",
    "ema_update",
    "forward",
    "global_attention",
    "init_params",
    "interp_pos_embed",
    "parse_schedule",
    "patchify",
    "resolve_schedule",
    "windowed_attention",
]
