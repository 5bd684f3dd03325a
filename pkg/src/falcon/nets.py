"""Benchmark network definitions (MNIST-scale trained; larger ones definable)."""

from .netspec import LayerSpec, NetworkSpec


def network_a() -> NetworkSpec:
    """3-layer fully-connected net, ReLU after each layer (~118K parameters)."""
    return NetworkSpec(
        name="network-a",
        input_shape=(784,),
        classes=10,
        layers=[
            LayerSpec("fc", in_dim=784, out_dim=128),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=128, out_dim=128),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=128, out_dim=10),
        ],
    )


def network_b() -> NetworkSpec:
    """One strided convolution plus two FC layers (~100K parameters)."""
    return NetworkSpec(
        name="network-b",
        input_shape=(1, 28, 28),
        classes=10,
        layers=[
            LayerSpec("conv", in_ch=1, out_ch=5, kernel=5, stride=2, pad=2),  # 5x14x14
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=980, out_dim=100),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=100, out_dim=10),
        ],
    )


def network_c() -> NetworkSpec:
    """Two conv/pool blocks plus two FC layers, max pooling throughout."""
    return NetworkSpec(
        name="network-c",
        input_shape=(1, 28, 28),
        classes=10,
        layers=[
            LayerSpec("conv", in_ch=1, out_ch=16, kernel=5, stride=1, pad=0),  # 16x24x24
            LayerSpec("relu"),
            LayerSpec("maxpool", window=2, stride=2),  # 16x12x12
            LayerSpec("conv", in_ch=16, out_ch=16, kernel=5, stride=1, pad=0),  # 16x8x8
            LayerSpec("relu"),
            LayerSpec("maxpool", window=2, stride=2),  # 16x4x4
            LayerSpec("fc", in_dim=256, out_dim=100),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=100, out_dim=10),
        ],
    )


def lenet() -> NetworkSpec:
    """LeNet-style digit net with wide FC layers (~431K parameters)."""
    return NetworkSpec(
        name="lenet",
        input_shape=(1, 28, 28),
        classes=10,
        layers=[
            LayerSpec("conv", in_ch=1, out_ch=20, kernel=5, stride=1, pad=0),  # 20x24x24
            LayerSpec("maxpool", window=2, stride=2),  # 20x12x12
            LayerSpec("relu"),
            LayerSpec("conv", in_ch=20, out_ch=50, kernel=5, stride=1, pad=0),  # 50x8x8
            LayerSpec("maxpool", window=2, stride=2),  # 50x4x4
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=800, out_dim=500),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=500, out_dim=10),
        ],
    )


def alexnet_cifar10() -> NetworkSpec:
    """AlexNet adaptation for 32x32 inputs, with batch-norm layers.

    Definable and shape-checked; training it is out of desk scope.
    """
    return NetworkSpec(
        name="alexnet-cifar10",
        input_shape=(3, 32, 32),
        classes=10,
        layers=[
            LayerSpec("conv", in_ch=3, out_ch=96, kernel=11, stride=4, pad=9),  # 96x10x10
            LayerSpec("maxpool", window=3, stride=2),  # 96x4x4
            LayerSpec("relu"),
            LayerSpec("bn"),
            LayerSpec("conv", in_ch=96, out_ch=256, kernel=5, stride=1, pad=1),  # 256x2x2
            LayerSpec("relu"),
            LayerSpec("bn"),
            LayerSpec("conv", in_ch=256, out_ch=384, kernel=3, stride=1, pad=1),  # 384x2x2
            LayerSpec("relu"),
            LayerSpec("conv", in_ch=384, out_ch=384, kernel=3, stride=1, pad=1),
            LayerSpec("relu"),
            LayerSpec("conv", in_ch=384, out_ch=256, kernel=3, stride=1, pad=1),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=1024, out_dim=256),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=256, out_dim=256),
            LayerSpec("relu"),
            LayerSpec("fc", in_dim=256, out_dim=10),
        ],
    )


def vgg16_cifar10() -> NetworkSpec:
    """VGG16 for 32x32 inputs; definable, not trained at desk scale."""
    layers = []
    ch = 3
    for block, (reps, out) in enumerate([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]):
        for _ in range(reps):
            layers.append(LayerSpec("conv", in_ch=ch, out_ch=out, kernel=3, stride=1, pad=1))
            layers.append(LayerSpec("relu"))
            ch = out
        layers.append(LayerSpec("maxpool", window=2, stride=2))
    layers += [
        LayerSpec("fc", in_dim=512, out_dim=4096),
        LayerSpec("relu"),
        LayerSpec("fc", in_dim=4096, out_dim=4096),
        LayerSpec("relu"),
        LayerSpec("fc", in_dim=4096, out_dim=10),
    ]
    return NetworkSpec("vgg16-cifar10", (3, 32, 32), 10, layers)


BUILTIN = {
    "network-a": network_a,
    "network-b": network_b,
    "network-c": network_c,
    "lenet": lenet,
    "alexnet-cifar10": alexnet_cifar10,
    "vgg16-cifar10": vgg16_cifar10,
}
