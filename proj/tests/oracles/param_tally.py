#!/usr/bin/env python3
"""Per-layer parameter tallies for the U-Net and ConvLSTM models.

Counts trainable scalars only (conv weights and biases, batch-norm gamma and
beta, recurrent kernels, peepholes, gate biases, heads). The printed totals
are frozen into tests/test_unet.cpp and tests/test_convlstm.cpp.
"""


def conv(cin, cout, k):
    return cout * cin * k * k + cout


def bn(c):
    return 2 * c


def unet(in_ch, base, depth, classes, decoder_convs=1):
    layers = []
    c = in_ch
    for i in range(depth):
        f = base * 2 ** i
        layers += [("enc%d.conv0" % i, conv(c, f, 3)), ("enc%d.bn0" % i, bn(f)),
                   ("enc%d.conv1" % i, conv(f, f, 3)), ("enc%d.bn1" % i, bn(f))]
        c = f
    fb = base * 2 ** depth
    layers += [("bottleneck.conv0", conv(c, fb, 3)), ("bottleneck.bn0", bn(fb)),
               ("bottleneck.conv1", conv(fb, fb, 3)), ("bottleneck.bn1", bn(fb))]
    for i in reversed(range(depth)):
        f = base * 2 ** i
        layers.append(("dec%d.up" % i, 2 * f * f * 2 * 2 + f))
        cin = 2 * f
        for j in range(decoder_convs):
            layers += [("dec%d.conv%d" % (i, j), conv(cin, f, 3)), ("dec%d.bn%d" % (i, j), bn(f))]
            cin = f
    layers.append(("head", conv(base, classes, 1)))
    return sum(n for _, n in layers)


def convlstm(d, r, k, nlayers, classes):
    total = 0
    for layer in range(nlayers):
        cin = d if layer == 0 else r
        total += 4 * r * cin * k * k  # input kernels
        total += 4 * r * r * k * k    # hidden kernels
        total += 3 * r                # per-channel peepholes
        total += 4 * r                # gate biases
    total += conv(r, classes, 1)
    return total


if __name__ == "__main__":
    print("unet paper (3,32,4,2):", unet(3, 32, 4, 2))
    print("unet paper two decoder convs:", unet(3, 32, 4, 2, 2))
    print("unet tiny (3,4,2,2):", unet(3, 4, 2, 2))
    print("convlstm paper (2,32,3,2,2):", convlstm(2, 32, 3, 2, 2))
    print("convlstm tiny (2,4,3,2,2):", convlstm(2, 4, 3, 2, 2))
