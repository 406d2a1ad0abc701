"""Pose encoders and their convolutional streams.

The spatial encoder maps each frame's joints through a shared conv stack;
the temporal encoder runs convolutions along the joint-trajectory axis with
the time samples as channels and then transposes, so its filter count
becomes the sequence's new leading (learned-temporal) axis. Both feed a
three-layer post stack with a residual connection and layer normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .errors import ContractError, DimensionError

_ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "linear": lambda t: t,
}


@dataclass
class ConvParams:
    kernel: "ad.Tensor"  # [K_w, C_in, C_out]
    bias: "ad.Tensor"    # [C_out]

    def named(self):
        yield "kernel", self.kernel
        yield "bias", self.bias


@dataclass
class StreamConfig:
    seu_filters: tuple = (32, 48, 64)
    teu_filters: tuple = (32, 48, 64)
    post_filters: tuple = (96, 112, 120)
    seu_kernels: tuple = (1, 1, 1)
    teu_kernels: tuple = (3, 3, 3)
    post_kernels: tuple = (3, 3, 3)
    channel_dim: int = 120
    activations: tuple = ("relu", "relu", "linear")

    def __post_init__(self):
        for name in ("seu_filters", "teu_filters", "post_filters",
                     "seu_kernels", "teu_kernels", "post_kernels", "activations"):
            value = tuple(getattr(self, name))
            setattr(self, name, value)
            if len(value) != 3:
                raise ContractError(f"StreamConfig.{name} must list exactly 3 layers, got {len(value)}")
        for name in ("seu_kernels", "teu_kernels", "post_kernels"):
            if any(k < 1 for k in getattr(self, name)):
                raise ContractError(f"StreamConfig.{name} entries must be positive")
        if self.post_filters[-1] != self.channel_dim:
            raise ContractError(
                f"final post filter count {self.post_filters[-1]} must equal channel_dim {self.channel_dim}"
            )
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ContractError(f"unknown activation {act!r}")


@dataclass
class StreamParams:
    post: list
    proj: ConvParams | None
    ln_gain: "ad.Tensor"
    ln_shift: "ad.Tensor"
    activations: tuple = ("relu", "relu", "linear")

    def named(self):
        for idx, conv in enumerate(self.post, start=1):
            for leaf, tensor in conv.named():
                yield f"post{idx}.{leaf}", tensor
        if self.proj is not None:
            for leaf, tensor in self.proj.named():
                yield f"proj.{leaf}", tensor
        yield "ln.gain", self.ln_gain
        yield "ln.shift", self.ln_shift


def init_conv_params(rng, kernel_width, c_in, c_out):
    kernel = ad.glorot_uniform(
        rng, (kernel_width, c_in, c_out), kernel_width * c_in, kernel_width * c_out
    )
    return ConvParams(kernel, ad.zeros(c_out))


def init_conv_stack(rng, c_in, filters, kernels):
    layers = []
    for c_out, k in zip(filters, kernels):
        layers.append(init_conv_params(rng, k, c_in, c_out))
        c_in = c_out
    return layers


def init_stream_params(rng, in_channels, config):
    post = init_conv_stack(rng, in_channels, config.post_filters, config.post_kernels)
    proj = None
    if in_channels != config.channel_dim:
        proj = init_conv_params(rng, 1, in_channels, config.channel_dim)
    return StreamParams(
        post,
        proj,
        ad.ones(config.channel_dim),
        ad.zeros(config.channel_dim),
        activations=config.activations,
    )


def apply_conv_stack(x, layers, activations, padding="same"):
    if len(layers) != len(activations):
        raise ContractError(
            f"{len(layers)} conv layers but {len(activations)} activations"
        )
    for conv, act in zip(layers, activations):
        x = _ACTIVATIONS[act](ad.conv1d(x, conv.kernel, conv.bias, padding=padding))
    return x


def _check_pose(pose):
    if pose.data.ndim != 3:
        raise DimensionError(f"pose tensor must be 3-d [T, J, D], got {pose.data.ndim}-d")


def seu_encode(pose, layers, activations=("relu", "relu", "linear")):
    """Per-frame conv over the joint axis; frames stacked back as rows [T, J*F]."""
    _check_pose(pose)
    t_len, joints, coords = pose.data.shape
    if all(conv.kernel.data.shape[0] == 1 for conv in layers):
        # width-1 kernels act on each joint row independently, so every frame
        # can run through one fused pass without changing any value
        flat = ad.reshape(pose, (t_len * joints, coords))
        encoded = apply_conv_stack(flat, layers, activations)
        return ad.reshape(encoded, (t_len, joints * encoded.data.shape[1]))
    rows = []
    as_rows = ad.reshape(pose, (t_len, joints * coords))
    for t in range(t_len):
        frame = ad.reshape(ad.slice_rows(as_rows, t, t + 1), (joints, coords))
        encoded = apply_conv_stack(frame, layers, activations)
        rows.append(ad.reshape(encoded, (1, joints * encoded.data.shape[1])))
    return ad.concat(rows, axis=0)


def teu_encode(pose, layers, activations=("relu", "relu", "linear"), padding="same"):
    """Conv along the trajectory axis with time samples as channels, then transpose.

    [T, J, D] -> trajectories [J*D, T] -> conv stack -> [J*D, F] -> [F, J*D],
    so the learned filter axis replaces time as the leading axis.
    """
    _check_pose(pose)
    t_len, joints, coords = pose.data.shape
    trajectories = ad.transpose(ad.reshape(pose, (t_len, joints * coords)))
    encoded = apply_conv_stack(trajectories, layers, activations, padding=padding)
    return ad.transpose(encoded)


def plain_encode(pose, layers, activations=("relu", "relu", "linear")):
    """Baseline stream input: convs straight over time on raw flattened coordinates."""
    _check_pose(pose)
    t_len, joints, coords = pose.data.shape
    return apply_conv_stack(ad.reshape(pose, (t_len, joints * coords)), layers, activations)


def stream_forward(encoded, params):
    """Three post conv layers, residual from the encoder output, then layer norm."""
    post_out = apply_conv_stack(encoded, params.post, params.activations)
    if params.proj is not None:
        residual = ad.conv1d(encoded, params.proj.kernel, params.proj.bias, padding="same")
    else:
        residual = encoded
    if residual.data.shape[1] != post_out.data.shape[1]:
        raise DimensionError(
            f"residual channels {residual.data.shape[1]} do not match "
            f"post-stack channels {post_out.data.shape[1]} (axis 1)"
        )
    return ad.layer_norm(ad.add(post_out, residual), params.ln_gain, params.ln_shift)


def fuse_pose_streams(spatial_out, temporal_out):
    """Concatenate the two stream outputs along the time axis, spatial rows first."""
    if spatial_out.data.ndim != 2 or temporal_out.data.ndim != 2:
        raise DimensionError("fuse_pose_streams expects 2-d stream outputs")
    if spatial_out.data.shape[1] != temporal_out.data.shape[1]:
        raise DimensionError(
            f"stream channel widths differ on axis 1 "
            f"({spatial_out.data.shape[1]} vs {temporal_out.data.shape[1]})"
        )
    return ad.concat([spatial_out, temporal_out], axis=0)
