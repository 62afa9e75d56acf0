"""The three-network cascade that turns an image pair into an edge map.

Network 1 estimates optical flow from the raw pair using a correlation
(cost volume) layer. Network 2 refines the flow from a 12-channel stack
of the pair, the current flow, the flow-warped deformed image, and the
brightness error. Network 3 consumes the same kind of stack built from
the refined flow and emits a crack edge probability map at 1/8 of the
input resolution through multi-scale side outputs fused by a 1x1 conv.

Channel widths follow the classic optical-flow encoder/decoder layout
(conv1..conv6_1 contracting, deconv5..deconv2 expanding with per-scale
flow predictions) scaled by channel_scale, which makes desk-scale CPU
training practical while keeping the wiring identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tape, Tensor

# network output before thresholding: (h, w) float map of edge
# probabilities in (0, 1)
EdgeProbabilityMap = np.ndarray


@dataclass
class NetworkConfig:
    """Shape and scale parameters for the cascade."""

    input_size: int = 1024
    channel_scale: float = 0.25
    corr_k: int = 0
    corr_d: int = 10
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.input_size % 64 != 0:
            raise ValueError("input_size must be divisible by 64")
        if not (0 < self.channel_scale <= 1):
            raise ValueError("channel_scale must be in (0, 1]")
        if self.corr_k < 0 or self.corr_d < 1:
            raise ValueError("correlation sizes invalid")

    @property
    def edge_map_size(self) -> int:
        # output stride is exactly 8
        return self.input_size // 8

    def scaled(self, width: int) -> int:
        return max(1, int(round(width * self.channel_scale)))


@dataclass
class CascadeOutput:
    """Forward results: edge probabilities plus both intermediate flows."""

    prob: Tensor  # (N,1,H/8,W/8), sigmoid output
    logits: Tensor  # same shape, pre-sigmoid
    flow1: Tensor  # (N,2,H,W) from the correlation network
    flow2: Tensor  # (N,2,H,W) refined


def _channel_table(cfg: NetworkConfig) -> dict:
    s = cfg.scaled
    ch = {
        "c1": s(64), "c2": s(128), "c3": s(256), "redir": s(32),
        "c4": s(512), "c5": s(512), "c6": s(1024),
        "d5": s(512), "d4": s(256), "d3": s(128), "d2": s(64),
        "corr": (2 * cfg.corr_d + 1) ** 2,
    }
    ch["cat5"] = ch["c5"] + ch["d5"] + 2
    ch["cat4"] = ch["c4"] + ch["d4"] + 2
    ch["cat3"] = ch["c3"] + ch["d3"] + 2
    ch["cat2"] = ch["c2"] + ch["d2"] + 2
    return ch


def _conv_entries(name, out_c, in_c, k):
    return [(f"{name}.w", ("conv", (out_c, in_c, k, k))), (f"{name}.b", ("bias", (out_c,)))]


def _deconv_entry(name, in_c, out_c):
    # transposed conv weights are (C_in, C_out, kh, kw); no bias by contract
    return [(f"{name}.w", ("deconv", (in_c, out_c, 4, 4)))]


def _net_entries(net: str, cfg: NetworkConfig):
    ch = _channel_table(cfg)
    e = []
    in0 = 3 if net == "netc" else 12
    e += _conv_entries(f"{net}.conv1", ch["c1"], in0, 7)
    e += _conv_entries(f"{net}.conv2", ch["c2"], ch["c1"], 5)
    e += _conv_entries(f"{net}.conv3", ch["c3"], ch["c2"], 5)
    if net == "netc":
        e += _conv_entries(f"{net}.conv_redir", ch["redir"], ch["c3"], 1)
        c31_in = ch["corr"] + ch["redir"]
    else:
        c31_in = ch["c3"]
    e += _conv_entries(f"{net}.conv3_1", ch["c3"], c31_in, 3)
    e += _conv_entries(f"{net}.conv4", ch["c4"], ch["c3"], 3)
    e += _conv_entries(f"{net}.conv4_1", ch["c4"], ch["c4"], 3)
    e += _conv_entries(f"{net}.conv5", ch["c5"], ch["c4"], 3)
    e += _conv_entries(f"{net}.conv5_1", ch["c5"], ch["c5"], 3)
    e += _conv_entries(f"{net}.conv6", ch["c6"], ch["c5"], 3)
    e += _conv_entries(f"{net}.conv6_1", ch["c6"], ch["c6"], 3)
    e += _conv_entries(f"{net}.predict_flow6", 2, ch["c6"], 3)
    e += _deconv_entry(f"{net}.deconv5", ch["c6"], ch["d5"])
    e += _deconv_entry(f"{net}.upflow6", 2, 2)
    e += _conv_entries(f"{net}.predict_flow5", 2, ch["cat5"], 3)
    e += _deconv_entry(f"{net}.deconv4", ch["cat5"], ch["d4"])
    e += _deconv_entry(f"{net}.upflow5", 2, 2)
    e += _conv_entries(f"{net}.predict_flow4", 2, ch["cat4"], 3)
    e += _deconv_entry(f"{net}.deconv3", ch["cat4"], ch["d3"])
    e += _deconv_entry(f"{net}.upflow4", 2, 2)
    if net == "edge":
        # expanding stops at stride 8; side outputs + fusion instead of a
        # final flow predictor (the last 3x3 predictor of the flow nets)
        e += [("edge.score_s32.w", ("conv", (1, ch["cat5"], 1, 1))),
              ("edge.score_s32.b", ("bias", (1,))),
              ("edge.score_s16.w", ("conv", (1, ch["cat4"], 1, 1))),
              ("edge.score_s16.b", ("bias", (1,))),
              ("edge.score_s8.w", ("conv", (1, ch["cat3"], 1, 1))),
              ("edge.score_s8.b", ("bias", (1,))),
              ("edge.fuse.w", ("conv", (1, 3, 1, 1))),
              ("edge.fuse.b", ("bias", (1,)))]
    else:
        e += _conv_entries(f"{net}.predict_flow3", 2, ch["cat3"], 3)
        e += _deconv_entry(f"{net}.deconv2", ch["cat3"], ch["d2"])
        e += _deconv_entry(f"{net}.upflow3", 2, 2)
        e += _conv_entries(f"{net}.predict_flow2", 2, ch["cat2"], 3)
    return e


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Ordered name -> (kind, shape) inventory for the whole cascade."""
    entries = []
    for net in ("netc", "nets", "edge"):
        entries += _net_entries(net, cfg)
    return dict(entries)


def count_parameters(cfg: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_shapes(cfg).values())


def init_weights(cfg: NetworkConfig, rng: np.random.Generator,
                 edge_prior: float | None = None) -> dict[str, Tensor]:
    """He-uniform initialization; biases zero.

    edge_prior, if given, presets the fusion bias to logit(prior) so the
    untrained edge map starts near the expected positive rate instead of
    0.5. Useful when positives are rare.
    """
    weights = {}
    gain = np.sqrt(2.0 / (1.0 + cfg.leaky_slope ** 2))
    for name, (kind, shape) in param_shapes(cfg).items():
        if kind == "bias":
            data = np.zeros(shape, dtype=np.float32)
        else:
            if kind == "conv":
                fan_in = shape[1] * shape[2] * shape[3]
            else:  # deconv: (C_in, C_out, kh, kw)
                fan_in = shape[0] * shape[2] * shape[3]
            bound = gain * np.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            if ".score_" in name or name.startswith("edge.fuse"):
                data *= 0.01  # start the head close to neutral
        weights[name] = Tensor(data, requires_grad=True, name=name)
    if edge_prior is not None:
        if not (0 < edge_prior < 1):
            raise ValueError("edge_prior must be in (0, 1)")
        weights["edge.fuse.b"].data[:] = np.log(edge_prior / (1 - edge_prior))
    return weights


def zero_weights(cfg: NetworkConfig) -> dict[str, Tensor]:
    return {
        name: Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)
        for name, (kind, shape) in param_shapes(cfg).items()
    }


# ----------------------------------------------------------------------
# forward passes


def _conv(tape, weights, cfg, name, x, stride, padding, act=True):
    out = ops.conv2d(tape, x, weights[f"{name}.w"], weights[f"{name}.b"],
                     stride=stride, padding=padding)
    if act:
        out = ops.leaky_relu(tape, out, slope=cfg.leaky_slope)
    return out


def _deconv(tape, weights, cfg, name, x, act=True):
    out = ops.deconv2d(tape, x, weights[f"{name}.w"], stride=2, padding=1)
    if act:
        out = ops.leaky_relu(tape, out, slope=cfg.leaky_slope)
    return out


def _contract_tail(tape, w, cfg, net, x31):
    """conv3_1 input through conv6_1; returns per-scale feature maps."""
    c3_1 = _conv(tape, w, cfg, f"{net}.conv3_1", x31, 1, 1)
    c4 = _conv(tape, w, cfg, f"{net}.conv4", c3_1, 2, 1)
    c4_1 = _conv(tape, w, cfg, f"{net}.conv4_1", c4, 1, 1)
    c5 = _conv(tape, w, cfg, f"{net}.conv5", c4_1, 2, 1)
    c5_1 = _conv(tape, w, cfg, f"{net}.conv5_1", c5, 1, 1)
    c6 = _conv(tape, w, cfg, f"{net}.conv6", c5_1, 2, 1)
    c6_1 = _conv(tape, w, cfg, f"{net}.conv6_1", c6, 1, 1)
    return c3_1, c4_1, c5_1, c6_1


def _expand_to_s8(tape, w, cfg, net, c3_1, c4_1, c5_1, c6_1):
    """Shared expanding path down to stride 8; returns the three concats."""
    flow6 = _conv(tape, w, cfg, f"{net}.predict_flow6", c6_1, 1, 1, act=False)
    up6 = _deconv(tape, w, cfg, f"{net}.upflow6", flow6, act=False)
    d5 = _deconv(tape, w, cfg, f"{net}.deconv5", c6_1)
    cat5 = ops.concat(tape, [c5_1, d5, up6])

    flow5 = _conv(tape, w, cfg, f"{net}.predict_flow5", cat5, 1, 1, act=False)
    up5 = _deconv(tape, w, cfg, f"{net}.upflow5", flow5, act=False)
    d4 = _deconv(tape, w, cfg, f"{net}.deconv4", cat5)
    cat4 = ops.concat(tape, [c4_1, d4, up5])

    flow4 = _conv(tape, w, cfg, f"{net}.predict_flow4", cat4, 1, 1, act=False)
    up4 = _deconv(tape, w, cfg, f"{net}.upflow4", flow4, act=False)
    d3 = _deconv(tape, w, cfg, f"{net}.deconv3", cat4)
    cat3 = ops.concat(tape, [c3_1, d3, up4])
    return cat5, cat4, cat3


def _flow_tail(tape, w, cfg, net, conv2_out, cat3):
    """Final expanding step to stride 4 plus the 4x bilinear lift."""
    flow3 = _conv(tape, w, cfg, f"{net}.predict_flow3", cat3, 1, 1, act=False)
    up3 = _deconv(tape, w, cfg, f"{net}.upflow3", flow3, act=False)
    d2 = _deconv(tape, w, cfg, f"{net}.deconv2", cat3)
    cat2 = ops.concat(tape, [conv2_out, d2, up3])
    flow2 = _conv(tape, w, cfg, f"{net}.predict_flow2", cat2, 1, 1, act=False)
    return ops.upsample_bilinear(tape, flow2, 4)


def flownet_c(tape, weights, cfg, img1, img2):
    """Correlation flow network: two shared-weight streams to stride 8."""
    net = "netc"
    a1 = _conv(tape, weights, cfg, f"{net}.conv1", img1, 2, 3)
    a2 = _conv(tape, weights, cfg, f"{net}.conv2", a1, 2, 2)
    a3 = _conv(tape, weights, cfg, f"{net}.conv3", a2, 2, 2)
    b1 = _conv(tape, weights, cfg, f"{net}.conv1", img2, 2, 3)
    b2 = _conv(tape, weights, cfg, f"{net}.conv2", b1, 2, 2)
    b3 = _conv(tape, weights, cfg, f"{net}.conv3", b2, 2, 2)
    corr = ops.correlate(tape, a3, b3, k=cfg.corr_k, d=cfg.corr_d)
    corr = ops.leaky_relu(tape, corr, slope=cfg.leaky_slope)
    redir = _conv(tape, weights, cfg, f"{net}.conv_redir", a3, 1, 0)
    x31 = ops.concat(tape, [corr, redir])
    c3_1, c4_1, c5_1, c6_1 = _contract_tail(tape, weights, cfg, net, x31)
    cat5, cat4, cat3 = _expand_to_s8(tape, weights, cfg, net, c3_1, c4_1, c5_1, c6_1)
    return _flow_tail(tape, weights, cfg, net, a2, cat3)


def flownet_s(tape, weights, cfg, stack):
    """Plain flow network over a 12-channel stacked input."""
    net = "nets"
    a1 = _conv(tape, weights, cfg, f"{net}.conv1", stack, 2, 3)
    a2 = _conv(tape, weights, cfg, f"{net}.conv2", a1, 2, 2)
    a3 = _conv(tape, weights, cfg, f"{net}.conv3", a2, 2, 2)
    c3_1, c4_1, c5_1, c6_1 = _contract_tail(tape, weights, cfg, net, a3)
    cat5, cat4, cat3 = _expand_to_s8(tape, weights, cfg, net, c3_1, c4_1, c5_1, c6_1)
    return _flow_tail(tape, weights, cfg, net, a2, cat3)


def edge_net(tape, weights, cfg, stack):
    """Edge network: flow-net body, side outputs at strides 32/16/8, fusion."""
    net = "edge"
    a1 = _conv(tape, weights, cfg, f"{net}.conv1", stack, 2, 3)
    a2 = _conv(tape, weights, cfg, f"{net}.conv2", a1, 2, 2)
    a3 = _conv(tape, weights, cfg, f"{net}.conv3", a2, 2, 2)
    c3_1, c4_1, c5_1, c6_1 = _contract_tail(tape, weights, cfg, net, a3)
    cat5, cat4, cat3 = _expand_to_s8(tape, weights, cfg, net, c3_1, c4_1, c5_1, c6_1)
    s32 = _conv(tape, weights, cfg, "edge.score_s32", cat5, 1, 0, act=False)
    s16 = _conv(tape, weights, cfg, "edge.score_s16", cat4, 1, 0, act=False)
    s8 = _conv(tape, weights, cfg, "edge.score_s8", cat3, 1, 0, act=False)
    s32 = ops.upsample_bilinear(tape, s32, 4)
    s16 = ops.upsample_bilinear(tape, s16, 2)
    sides = ops.concat(tape, [s32, s16, s8])
    logits = _conv(tape, weights, cfg, "edge.fuse", sides, 1, 0, act=False)
    prob = ops.sigmoid(tape, logits)
    return logits, prob


def cascade_forward(tape, weights, cfg, ref, deform) -> CascadeOutput:
    """Full pass: flow estimate, refinement, edge probabilities.

    ref and deform are (N,3,H,W) tensors normalized to [-0.5, 0.5] with H
    and W divisible by 64.
    """
    flow1 = flownet_c(tape, weights, cfg, ref, deform)
    warped1 = ops.warp(tape, deform, flow1)
    err1 = ops.brightness_error(tape, ref, warped1)
    stack2 = ops.concat(tape, [ref, deform, flow1, warped1, err1])
    flow2 = flownet_s(tape, weights, cfg, stack2)
    warped2 = ops.warp(tape, deform, flow2)
    err2 = ops.brightness_error(tape, ref, warped2)
    stack3 = ops.concat(tape, [ref, deform, flow2, warped2, err2])
    logits, prob = edge_net(tape, weights, cfg, stack3)
    return CascadeOutput(prob=prob, logits=logits, flow1=flow1, flow2=flow2)


def normalize_image(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """8-bit grayscale (H,W) -> (1,3,H,W) in [-0.5, 0.5], channel-replicated."""
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale H x W image, got shape {img.shape}")
    x = (img.astype(dtype) / 255.0) - 0.5
    return np.repeat(x[None, None], 3, axis=1)


def infer_pair(weights, cfg: NetworkConfig, ref_img: np.ndarray,
               def_img: np.ndarray) -> np.ndarray:
    """Inference convenience: uint8 pair in, (H/8, W/8) float probabilities out."""
    ref = Tensor(normalize_image(ref_img))
    deform = Tensor(normalize_image(def_img))
    out = cascade_forward(None, weights, cfg, ref, deform)
    return out.prob.data[0, 0].copy()
