"""
Organoid U-Net
Residual (ResNet50-style) or plain-CNN encoder, upsampling decoder with skip connections,
plus encoder freezing and weight transfer between pretext and main tasks
"""

import logging
from typing import TYPE_CHECKING, List, Literal, Tuple

import torch
import torch.nn as nn
from pydantic import Field, model_validator

from organoid_errors import InvalidSpec, MissingTensor, ShapeMismatch, ValidatedModel

if TYPE_CHECKING:
    from organoid_checkpoint import CheckpointBundle

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."
DECODER_PREFIX = "decoder."
HEAD_PREFIX = "head."
TRANSFER_SCOPES = {
    "encoder_only": (ENCODER_PREFIX,),
    "encoder_and_decoder": (ENCODER_PREFIX, DECODER_PREFIX),
}


class ArchitectureSpec(ValidatedModel):
    """Shape of the U-Net used for both pretext and main task"""
    encoder: Literal["resnet50", "simple_cnn"] = Field(default="resnet50", description="Encoder family")
    input_size: int = Field(default=320, description="Edge of the square input crop")
    encoder_blocks: int = Field(default=4, description="Encoder blocks, each tapped for a skip connection")
    decoder_blocks: int = Field(default=4, description="Decoder blocks, one per encoder tap")
    base_channels: int = Field(default=64, ge=1, description="Width of the first block, doubled per block")
    freeze_encoder: bool = Field(default=False, description="Exclude encoder tensors from training")
    head: Literal["restoration", "segmentation"] = Field(default="segmentation", description="Output head")

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.encoder_blocks != self.decoder_blocks:
            raise InvalidSpec(f"encoder_blocks ({self.encoder_blocks}) must equal decoder_blocks ({self.decoder_blocks})")
        if self.encoder_blocks < 1:
            raise InvalidSpec("at least one encoder block is required")
        if self.input_size % (2 ** self.encoder_blocks):
            raise InvalidSpec(
                f"input_size {self.input_size} must be divisible by {2 ** self.encoder_blocks} "
                f"for {self.encoder_blocks} halvings plus the bottleneck"
            )
        return self

    @property
    def channels(self) -> List[int]:
        return [self.base_channels * 2 ** level for level in range(self.encoder_blocks)]

    @property
    def spatial_schedule(self) -> List[int]:
        """Feature-map edge at each encoder tap, e.g. 320, 160, 80, 40"""
        return [self.input_size // 2 ** level for level in range(self.encoder_blocks)]


class PreActResidualBlock(nn.Module):
    """(BN -> ReLU -> 3x3 conv) twice, added to the (projected) input"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = self.conv1(self.relu(self.bn1(x)))
        out = self.conv2(self.relu(self.bn2(out)))
        return out + self.shortcut(x)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, 1, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(),
        )


class ResidualEncoder(nn.Module):
    """Stem conv, residual blocks halving the resolution after the first, residual bottleneck"""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        channels = spec.channels
        self.stem = nn.Conv2d(1, channels[0], 3, 1, 1, bias=False)
        self.blocks = nn.ModuleList()
        in_channels = channels[0]
        for level, out_channels in enumerate(channels):
            self.blocks.append(PreActResidualBlock(in_channels, out_channels, stride=1 if level == 0 else 2))
            in_channels = out_channels
        self.bridge = PreActResidualBlock(in_channels, in_channels, stride=2)

    def forward(self, x) -> Tuple[List[torch.Tensor], torch.Tensor]:
        x = self.stem(x)
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps, self.bridge(x)


class SimpleCnnEncoder(nn.Module):
    """Plain conv -> BN -> ReLU blocks, tapped before each 2x max-pool; no residual paths"""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.blocks = nn.ModuleList()
        in_channels = 1
        for out_channels in spec.channels:
            self.blocks.append(ConvBNReLU(in_channels, out_channels))
            in_channels = out_channels
        self.pool = nn.MaxPool2d(2)
        self.bridge = ConvBNReLU(in_channels, in_channels)

    def forward(self, x) -> Tuple[List[torch.Tensor], torch.Tensor]:
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
            x = self.pool(x)
        return taps, self.bridge(x)


class DecoderBlock(nn.Module):
    """2x nearest upsample, concat the encoder tap, 3x3 merge conv, residual block"""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.merge = nn.Conv2d(in_channels + skip_channels, out_channels, 3, 1, 1, bias=False)
        self.block = PreActResidualBlock(out_channels, out_channels)

    def forward(self, x, skip):
        x = torch.cat([self.up(x), skip], dim=1)
        return self.block(self.merge(x))


class Decoder(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        channels = spec.channels
        self.blocks = nn.ModuleList()
        in_channels = channels[-1]
        for skip_channels in reversed(channels):
            self.blocks.append(DecoderBlock(in_channels, skip_channels, skip_channels))
            in_channels = skip_channels

    def forward(self, taps: List[torch.Tensor], bottom: torch.Tensor) -> torch.Tensor:
        x = bottom
        for block, skip in zip(self.blocks, reversed(taps)):
            x = block(x, skip)
        return x


class OutputHead(nn.Module):
    def __init__(self, in_channels: int, kind: str):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1)
        # restoration stays linear inside [0,1]; segmentation is a probability
        self.activation = nn.Sigmoid() if kind == "segmentation" else nn.Hardtanh(0.0, 1.0)

    def forward(self, x):
        return self.activation(self.conv(x))


class UNet(nn.Module):
    """Encoder, decoder and a one-channel head; output shape equals input shape"""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.encoder = _make_encoder(spec)
        self.decoder = Decoder(spec)
        self.head = OutputHead(spec.channels[0], spec.head)
        self.frozen_names: List[str] = []

    @property
    def encoder_frozen(self) -> bool:
        return bool(self.frozen_names)

    def encode(self, x) -> Tuple[List[torch.Tensor], torch.Tensor]:
        return self.encoder(x)

    def forward(self, x):
        taps, bottom = self.encoder(x)
        return self.head(self.decoder(taps, bottom))

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen BatchNorm statistics must not drift either
        if self.encoder_frozen:
            self.encoder.eval()
        return self


def _seeded(seed: int, factory):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def _make_encoder(spec: ArchitectureSpec) -> nn.Module:
    return ResidualEncoder(spec) if spec.encoder == "resnet50" else SimpleCnnEncoder(spec)


def build_unet(spec: ArchitectureSpec, seed: int = 26) -> UNet:
    """Deterministically initialised U-Net; the encoder is drawn first from the seeded stream"""
    model = _seeded(seed, lambda: UNet(spec))
    if spec.freeze_encoder:
        freeze_encoder(model)
    logger.debug(
        "Built %s U-Net (%s head, base %d): %d parameters",
        spec.encoder, spec.head, spec.base_channels, count_parameters(model),
    )
    return model


def build_simple_cnn_encoder(spec: ArchitectureSpec, seed: int = 26) -> SimpleCnnEncoder:
    if spec.encoder != "simple_cnn":
        raise InvalidSpec(f"expected a simple_cnn spec, got encoder '{spec.encoder}'")
    return _seeded(seed, lambda: SimpleCnnEncoder(spec))


def build_residual_encoder(spec: ArchitectureSpec, seed: int = 26) -> ResidualEncoder:
    if spec.encoder != "resnet50":
        raise InvalidSpec(f"expected a resnet50 spec, got encoder '{spec.encoder}'")
    return _seeded(seed, lambda: ResidualEncoder(spec))


def count_parameters(module: nn.Module, prefix: str = "") -> int:
    return sum(p.numel() for name, p in module.named_parameters() if name.startswith(prefix))


def encoder_tensor_names(model: UNet) -> List[str]:
    """Every encoder parameter and buffer, as named in the state dict"""
    return [name for name in model.state_dict() if name.startswith(ENCODER_PREFIX)]


def freeze_encoder(model: UNet) -> UNet:
    for parameter in model.encoder.parameters():
        parameter.requires_grad_(False)
    model.frozen_names = encoder_tensor_names(model)
    model.encoder.eval()
    return model


def trainable_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def _reset_parameters(module: nn.Module, seed: int) -> None:
    def reset():
        for child in module.modules():
            if hasattr(child, "reset_parameters"):
                child.reset_parameters()
    _seeded(seed, reset)


def reinitialize_head(model: UNet, seed: int) -> UNet:
    _reset_parameters(model.head, seed)
    return model


def reinitialize_decoder(model: UNet, seed: int) -> UNet:
    _reset_parameters(model.decoder, seed)
    return model


def transfer_weights(
    bundle: "CheckpointBundle",
    model: UNet,
    scope: Literal["encoder_only", "encoder_and_decoder"] = "encoder_and_decoder",
    seed: int = 26,
) -> UNet:
    """Copy in-scope tensors bit-exactly from a checkpoint; the head is re-drawn from seed"""
    if scope not in TRANSFER_SCOPES:
        raise InvalidSpec(f"unknown transfer scope '{scope}'")
    prefixes = TRANSFER_SCOPES[scope]
    state = model.state_dict()
    copied = 0
    with torch.no_grad():
        for name, target in state.items():
            if not name.startswith(prefixes):
                continue
            if name not in bundle.tensors:
                raise MissingTensor(f"checkpoint has no tensor '{name}'")
            source = bundle.tensors[name]
            if tuple(source.shape) != tuple(target.shape):
                raise ShapeMismatch(f"'{name}': checkpoint {tuple(source.shape)} vs model {tuple(target.shape)}")
            target.copy_(source)
            copied += 1
    reinitialize_head(model, seed)
    logger.info("Transferred %d tensors (%s) from %s checkpoint", copied, scope, bundle.meta.task)
    return model
