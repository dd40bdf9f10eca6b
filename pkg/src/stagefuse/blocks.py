"""Equation-level neural building blocks

Tensors are channel-first (``..., C, H, W``) as everywhere in torch.
Functions accept any floating dtype so they can be gradient-checked in
double precision.
"""
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfig, InvalidInput

__all__ = [
    "ChannelLayerNorm",
    "MultiHeadSelfAttention",
    "SqueezeExcite",
    "attention_weights",
    "excite",
    "gelu",
    "hard_distill_loss",
    "layer_norm_channels",
    "scaled_dot_attention",
    "squeeze",
    "swish",
]


def squeeze(featmap):
    """Global average pool: z_c = mean over the H×W plane of channel c"""
    if featmap.dim() < 3:
        raise InvalidInput(
            f"expected (..., C, H, W), got {tuple(featmap.shape)}")
    if featmap.shape[-1] == 0 or featmap.shape[-2] == 0:
        raise InvalidInput("feature map has zero spatial extent")
    return featmap.mean(dim=(-2, -1))


def excite(z, w1, w2, b1=None, b2=None):
    """Bottleneck gates sigmoid(W2 · relu(W1 · z)), one per channel"""
    channels = z.shape[-1]
    if w1.dim() != 2 or w1.shape[1] != channels:
        raise InvalidInput(
            f"W1 must be (r, {channels}), got {tuple(w1.shape)}")
    if w2.dim() != 2 or w2.shape != (channels, w1.shape[0]):
        raise InvalidInput(
            f"W2 must be ({channels}, {w1.shape[0]}), got {tuple(w2.shape)}")
    return torch.sigmoid(F.linear(F.relu(F.linear(z, w1, b1)), w2, b2))


def swish(x):
    return F.silu(x)


def gelu(x):
    return F.gelu(x, approximate="none")


def layer_norm_channels(x, gamma, beta, eps=1e-6):
    """Normalize the trailing channel vector of each site"""
    if eps <= 0:
        raise InvalidConfig(f"eps must be positive: {eps}")
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def attention_weights(Q, K, d):
    if d <= 0:
        raise InvalidConfig(f"head dimension must be positive: {d}")
    if Q.shape[-1] != K.shape[-1]:
        raise InvalidInput(
            f"query/key widths differ: {Q.shape[-1]} != {K.shape[-1]}")
    return torch.softmax(Q @ K.transpose(-2, -1) / math.sqrt(d), dim=-1)


def scaled_dot_attention(Q, K, V, d):
    """softmax(Q Kᵀ / √d) V"""
    if K.shape[-2] != V.shape[-2]:
        raise InvalidInput(
            f"keys and values differ in count: {K.shape[-2]} != {V.shape[-2]}")
    return attention_weights(Q, K, d) @ V


def hard_distill_loss(student_logits, teacher_logits, label):
    """½·CE(student, label) + ½·CE(student, argmax(teacher))"""
    if student_logits.shape != teacher_logits.shape:
        raise InvalidInput(
            f"student and teacher logits differ: "
            f"{tuple(student_logits.shape)} != {tuple(teacher_logits.shape)}")
    single = student_logits.dim() == 1
    if single:
        student_logits = student_logits[None]
        teacher_logits = teacher_logits[None]
    label = torch.as_tensor(label, device=student_logits.device).reshape(-1)
    classes = student_logits.shape[-1]
    if ((label < 0) | (label >= classes)).any():
        raise InvalidInput(f"label out of range for {classes} classes")
    teacher_label = teacher_logits.argmax(dim=-1)
    return (0.5 * F.cross_entropy(student_logits, label.long())
            + 0.5 * F.cross_entropy(student_logits, teacher_label))


class SqueezeExcite(nn.Module):

    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels % reduction:
            raise InvalidConfig(
                f"reduction {reduction} does not divide {channels} channels")
        self.reduce = nn.Linear(channels, channels // reduction)
        self.expand = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        gates = excite(squeeze(x), self.reduce.weight, self.expand.weight,
                       self.reduce.bias, self.expand.bias)
        return x * gates[..., None, None]


class ChannelLayerNorm(nn.Module):
    """LayerNorm over C at every spatial site of an (N, C, H, W) map"""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = layer_norm_channels(x, self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class MultiHeadSelfAttention(nn.Module):

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise InvalidConfig(f"{heads} heads do not divide width {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, tokens):
        batch, count, dim = tokens.shape
        qkv = self.qkv(tokens).reshape(batch, count, 3, self.heads,
                                       self.head_dim)
        Q, K, V = qkv.permute(2, 0, 3, 1, 4)
        mixed = scaled_dot_attention(Q, K, V, self.head_dim)
        return self.proj(mixed.transpose(1, 2).reshape(batch, count, dim))
