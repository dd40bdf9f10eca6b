"""Binary-classifier backbones behind one interface

Every backbone is an ``nn.Module`` whose ``forward`` returns raw logits:
one sigmoid logit or two softmax logits per sample. ``proba`` maps
logits to the probability of the fake class (label 1) and ``loss`` is
binary cross-entropy in the matching form, so heads of either arity are
trained and evaluated the same way.

Three desk-scale stand-ins exercise the local-convolutional, attention
and wavelet-fed pathways; `LogisticBackbone` is a linear model over flat
feature vectors.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ._rng import torch_seeded
from .blocks import (
    ChannelLayerNorm,
    MultiHeadSelfAttention,
    SqueezeExcite,
    gelu,
    hard_distill_loss,
    swish,
)
from .errors import InvalidConfig, InvalidInput, UnsupportedBackbone

__all__ = [
    "AttentionBackbone",
    "BACKBONES",
    "Backbone",
    "ConvBackbone",
    "EpochStats",
    "LogisticBackbone",
    "WaveletBackbone",
    "as_two_class_logits",
    "create_backbone",
    "evaluate_loss",
    "make_optimizer",
    "predict_proba",
    "train_epoch",
]

logger = logging.getLogger(__name__)


class Backbone(nn.Module):
    name = None
    preprocessor = "plain"
    head_arity = 1
    default_input_size = 224

    def __init__(self, input_size=None, seed=0, **options):
        super().__init__()
        self.input_size = input_size or self.default_input_size
        self.seed = seed
        # parameter initialisation is a pure function of the seed
        with torch_seeded(seed):
            self.build(**options)

    def build(self, **options):
        raise NotImplementedError

    @property
    def input_shape(self):
        return (3, self.input_size, self.input_size)

    def embed(self, x):
        raise NotImplementedError

    def forward(self, x):
        return self.head(self.embed(x))

    def proba(self, logits):
        if self.head_arity == 1:
            return torch.sigmoid(logits.reshape(-1))
        return torch.softmax(logits, dim=-1)[:, 1]

    def decide(self, logits, threshold=0.5):
        return (self.proba(logits) >= threshold).long()

    def loss(self, logits, labels):
        labels = torch.as_tensor(labels).reshape(-1)
        if self.head_arity == 1:
            return F.binary_cross_entropy_with_logits(
                logits.reshape(-1), labels.to(logits.dtype))
        return F.cross_entropy(logits, labels.long())

    def get_parameters(self):
        return OrderedDict((key, value.detach().clone())
                           for key, value in self.state_dict().items())

    def set_parameters(self, state):
        self.load_state_dict(state, strict=True)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def __repr__(self):
        return (f"<{type(self).__name__} input={self.input_shape} "
                f"params={self.parameter_count()} seed={self.seed}>")


class LogisticBackbone(Backbone):
    name = "logistic"

    def __init__(self, n_features, seed=0):
        super().__init__(input_size=n_features, seed=seed)

    def build(self):
        self.head = nn.Linear(self.input_size, 1)

    @property
    def input_shape(self):
        return (self.input_size,)

    def embed(self, x):
        return x


class MBConv(nn.Module):
    """Expand → depthwise 3×3 → squeeze-excite → project, swish gated"""

    def __init__(self, cin, cout, stride, expand=4):
        super().__init__()
        hidden = cin * expand
        self.expand = nn.Sequential(
            nn.Conv2d(cin, hidden, 1, bias=False), nn.BatchNorm2d(hidden))
        self.depthwise = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden))
        self.se = SqueezeExcite(hidden, reduction=4 * expand)
        self.project = nn.Sequential(
            nn.Conv2d(hidden, cout, 1, bias=False), nn.BatchNorm2d(cout))
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        h = swish(self.expand(x))
        h = swish(self.depthwise(h))
        h = self.project(self.se(h))
        return x + h if self.residual else h


class ConvBackbone(Backbone):
    """Squeeze-excitation convolutional net with swish activations"""
    name = "conv"

    def build(self, widths=(16, 24, 32, 48)):
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, 2, 1, bias=False),
            nn.BatchNorm2d(widths[0]))
        blocks = [MBConv(cin, cout, 2)
                  for cin, cout in zip(widths, widths[1:])]
        blocks.append(MBConv(widths[-1], widths[-1], 1))
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(widths[-1], 1)

    def embed(self, x):
        x = self.blocks(swish(self.stem(x)))
        return x.mean(dim=(-2, -1))


class TransformerBlock(nn.Module):

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class AttentionBackbone(Backbone):
    """Class-token transformer over 16×16 patches with a 2-logit head"""
    name = "attention"
    head_arity = 2

    def build(self, patch=16, dim=64, depth=4, heads=4, mlp_ratio=4):
        if self.input_size % patch:
            raise InvalidConfig(
                f"input size {self.input_size} is not a multiple of the "
                f"{patch} px patch")
        tokens = (self.input_size // patch) ** 2
        self.patchify = nn.Conv2d(3, dim, patch, patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.position = nn.Parameter(torch.zeros(1, tokens + 1, dim))
        nn.init.trunc_normal_(self.position, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.Sequential(*(TransformerBlock(dim, heads, mlp_ratio)
                                      for _ in range(depth)))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 2)

    def embed(self, x):
        tokens = self.patchify(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.position
        return self.norm(self.blocks(tokens))[:, 0]


class InvertedBottleneck(nn.Module):
    """Depthwise 7×7 → channel LayerNorm → 4× pointwise → gelu → residual"""

    def __init__(self, dim):
        super().__init__()
        self.depthwise = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = ChannelLayerNorm(dim)
        self.expand = nn.Linear(dim, 4 * dim)
        self.reduce = nn.Linear(4 * dim, dim)

    def forward(self, x):
        h = self.norm(self.depthwise(x)).permute(0, 2, 3, 1)
        h = self.reduce(gelu(self.expand(h)))
        return x + h.permute(0, 3, 1, 2)


class WaveletBackbone(Backbone):
    """Patchify-stem residual net fed by wavelet feature images"""
    name = "wavelet"
    preprocessor = "wavelet"
    default_input_size = 296

    def build(self, dims=(32, 64), depths=(2, 2)):
        self.stem = nn.Sequential(
            nn.Conv2d(3, dims[0], 4, 4), ChannelLayerNorm(dims[0]))
        stages = []
        for i, (dim, depth) in enumerate(zip(dims, depths)):
            if i:
                stages += [ChannelLayerNorm(dims[i - 1]),
                           nn.Conv2d(dims[i - 1], dim, 2, 2)]
            stages += [InvertedBottleneck(dim) for _ in range(depth)]
        self.stages = nn.Sequential(*stages)
        self.norm = nn.LayerNorm(dims[-1])
        self.head = nn.Linear(dims[-1], 1)

    def embed(self, x):
        x = self.stages(self.stem(x))
        return self.norm(x.mean(dim=(-2, -1)))


BACKBONES = {
    cls.name: cls for cls in (ConvBackbone, AttentionBackbone, WaveletBackbone)
}


def create_backbone(name, input_size=None, seed=0, **options):
    try:
        cls = BACKBONES[name]
    except KeyError:
        raise InvalidConfig(
            f"unknown backbone {name!r}; expected one of {sorted(BACKBONES)}"
        ) from None
    return cls(input_size=input_size, seed=seed, **options)


def as_two_class_logits(logits):
    """Express a 1-logit output as two-class logits [0, z]"""
    if logits.shape[-1] == 2:
        return logits
    logits = logits.reshape(-1, 1)
    return torch.cat([torch.zeros_like(logits), logits], dim=-1)


def make_optimizer(backbone, lr):
    return torch.optim.Adam(backbone.parameters(), lr=lr)


def _param_dtype(backbone):
    return next(backbone.parameters()).dtype


def _check_batch(backbone, batch):
    batch = torch.as_tensor(batch)
    if tuple(batch.shape[1:]) != tuple(backbone.input_shape):
        raise InvalidInput(
            f"{backbone.name} expects samples of shape "
            f"{tuple(backbone.input_shape)}, got {tuple(batch.shape[1:])}")
    return batch.to(_param_dtype(backbone))


def predict_proba(backbone, batch, chunk_size=256):
    """Fake-class probability per sample, in input order

    Runs in inference mode; the backbone's training flag is restored.
    """
    batch = _check_batch(backbone, batch)
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.inference_mode():
            probs = [backbone.proba(backbone(chunk))
                     for chunk in batch.split(chunk_size)]
    finally:
        backbone.train(was_training)
    if not probs:
        return torch.empty(0, dtype=torch.float64).numpy()
    return torch.cat(probs).double().numpy()


@dataclass(frozen=True)
class EpochStats:
    loss: float
    accuracy: float
    samples: int


def _teacher_logits(teacher, inputs):
    teacher.eval()
    with torch.no_grad():
        return as_two_class_logits(teacher(inputs))


def train_epoch(backbone, batches, optimizer, teacher=None):
    """One optimisation pass over ``batches`` of (inputs, labels)

    With a ``teacher`` the loss is hard distillation, which needs a
    2-logit student.
    """
    if teacher is not None and backbone.head_arity != 2:
        raise UnsupportedBackbone(
            f"hard distillation needs a 2-logit student, {backbone.name} "
            f"has {backbone.head_arity}")
    backbone.train()
    total_loss = 0.0
    correct = 0
    seen = 0
    for inputs, labels in batches:
        inputs = inputs.to(_param_dtype(backbone))
        labels = torch.as_tensor(labels).reshape(-1)
        optimizer.zero_grad(set_to_none=True)
        logits = backbone(inputs)
        if teacher is None:
            loss = backbone.loss(logits, labels)
        else:
            loss = hard_distill_loss(
                logits, _teacher_logits(teacher, inputs), labels)
        loss.backward()
        optimizer.step()
        count = labels.numel()
        total_loss += loss.item() * count
        correct += (backbone.decide(logits.detach()) == labels).sum().item()
        seen += count
        logger.debug("batch loss %.6f", loss.item())
    if not seen:
        raise InvalidInput("cannot train on an empty dataset")
    return EpochStats(total_loss / seen, correct / seen, seen)


def evaluate_loss(backbone, batches):
    """Mean loss and accuracy without updating parameters"""
    was_training = backbone.training
    backbone.eval()
    total_loss = 0.0
    correct = 0
    seen = 0
    try:
        with torch.inference_mode():
            for inputs, labels in batches:
                inputs = inputs.to(_param_dtype(backbone))
                labels = torch.as_tensor(labels).reshape(-1)
                logits = backbone(inputs)
                count = labels.numel()
                total_loss += backbone.loss(logits, labels).item() * count
                correct += (backbone.decide(logits) == labels).sum().item()
                seen += count
    finally:
        backbone.train(was_training)
    if not seen:
        raise InvalidInput("cannot evaluate an empty dataset")
    return EpochStats(total_loss / seen, correct / seen, seen)
