"""Trainable parameter counts of the built-in architectures, from layer shapes."""


def conv(cin, cout, k, bias):
    return cin * cout * k * k + (cout if bias else 0)


def bn(c):
    return 2 * c


def linear(din, dout):
    return din * dout + dout


def resnet18(classes=10):
    total = conv(3, 64, 3, False) + bn(64)
    cin = 64
    for cout, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
        for block in range(2):
            s = stride if block == 0 else 1
            total += conv(cin, cout, 3, False) + bn(cout) + conv(cout, cout, 3, False) + bn(cout)
            if s != 1 or cin != cout:
                total += conv(cin, cout, 1, False) + bn(cout)
            cin = cout
    return total + linear(512, classes)


def alexnet(classes=10):
    widths = [3, 64, 192, 384, 256, 256]
    total = sum(conv(a, b, 3, True) for a, b in zip(widths, widths[1:]))
    return total + linear(256 * 4 * 4, 512) + linear(512, classes)


def tinycnn(classes=10):
    return conv(3, 8, 3, False) + bn(8) + conv(8, 16, 3, False) + bn(16) + linear(16 * 8 * 8, classes)


if __name__ == "__main__":
    for name, f in [("resnet18", resnet18), ("alexnet", alexnet), ("tinycnn", tinycnn)]:
        print(name, f())
