"""Named toy architectures. All prunable shapes are divisible by 1x2 and 2x2 blocks."""

from .netcore import LayerSpec, ToyNetwork


def tiny_conv(in_hw=8, in_channels=1, n_classes=3):
    """conv 3x3/8 (dense) -> conv 3x3/16 stride 2 (prunable) -> FC (prunable)."""
    c1 = LayerSpec.conv(in_channels, 8, 3, in_hw, stride=1, padding=1, name="conv1")
    c2 = LayerSpec.conv(8, 16, 3, c1.out_hw, stride=2, padding=1, prunable=True, name="conv2")
    oh, ow = c2.out_hw
    return [c1, LayerSpec.relu(), c2, LayerSpec.relu(),
            LayerSpec.fc(oh * ow * 16, n_classes, prunable=True, name="fc"),
            LayerSpec.softmax_ce()]


def mlp(in_features=2, hidden=(32,), n_classes=2):
    """FC stack with a dense first layer and prunable later layers."""
    layers, width = [], in_features
    for i, h in enumerate(hidden):
        layers += [LayerSpec.fc(width, h, prunable=i > 0, name=f"fc{i + 1}"), LayerSpec.relu()]
        width = h
    layers += [LayerSpec.fc(width, n_classes, prunable=bool(hidden), name=f"fc{len(hidden) + 1}"),
               LayerSpec.softmax_ce()]
    return layers


def parse_architecture(name, feature_shape, n_classes):
    """'tiny-conv' or 'mlp' / 'mlp:64,32' for a dataset of the given feature shape."""
    if name == "tiny-conv":
        if len(feature_shape) != 3:
            raise ValueError("tiny-conv needs image data with shape (H, W, C)")
        h, w, c = feature_shape
        if h != w:
            raise ValueError("tiny-conv expects square images")
        return tiny_conv(h, c, n_classes)
    if name == "mlp" or name.startswith("mlp:"):
        hidden = (32,) if name == "mlp" else tuple(int(v) for v in name[4:].split(",") if v)
        size = 1
        for d in feature_shape:
            size *= d
        return mlp(size, hidden, n_classes)
    raise ValueError(f"unknown architecture {name!r}")


def build(name, feature_shape, n_classes, seed=0):
    return ToyNetwork(parse_architecture(name, feature_shape, n_classes), seed=seed)
