from .blocks import (
    attention_coefficients,
    attention_gate,
    bottleneck,
    cbam_forward,
    conv,
    conv_norm_act,
    dense,
    gate_channels,
    init_attention_gate,
    init_bottleneck,
    init_cbam,
    init_conv,
    init_conv_norm_act,
    init_linear,
    init_mhsa,
    init_resnext,
    init_se,
    init_transformer_block,
    mhsa,
    resnext_block,
    scaled_dot_product_attention,
    se_forward,
    transformer_block,
)

__all__ = [
    "attention_coefficients", "attention_gate", "bottleneck", "cbam_forward", "conv", "conv_norm_act", "dense",
    "gate_channels", "init_attention_gate", "init_bottleneck", "init_cbam", "init_conv",
    "init_conv_norm_act", "init_linear", "init_mhsa", "init_resnext", "init_se", "init_transformer_block", "mhsa",
    "resnext_block", "scaled_dot_product_attention", "se_forward", "transformer_block",
]
