#!/usr/bin/env python3
"""Generate the LPIPS test fixtures under crates/core/tests/fixtures/lpips.

Three small feature networks with the layer structure of AlexNet,
SqueezeNet 1.1 and VGG16 (channel counts divided by 8, seeded random
weights) are exported to ONNX with one graph output per LPIPS tap. Seeded
non-negative calibration weights, a 512x512 image pair and golden distances
computed here in float64 with torch are written next to them.

    python3 tools/make_lpips_fixtures.py [--out DIR]

Needs torch. The `onnx` Python package is optional: torch's TorchScript
exporter only uses it for a post-processing step these graphs do not need.
"""

import argparse
import hashlib
import json
import pathlib
import struct
import zlib

import torch
from torch import nn

SEED = 20240917
SHIFT = torch.tensor([-0.030, -0.088, -0.188], dtype=torch.float64).view(1, 3, 1, 1)
SCALE = torch.tensor([0.458, 0.448, 0.450], dtype=torch.float64).view(1, 3, 1, 1)


class Fire(nn.Module):
    def __init__(self, cin, squeeze, e1, e3):
        super().__init__()
        self.squeeze = nn.Sequential(nn.Conv2d(cin, squeeze, 1), nn.ReLU())
        self.e1 = nn.Sequential(nn.Conv2d(squeeze, e1, 1), nn.ReLU())
        self.e3 = nn.Sequential(nn.Conv2d(squeeze, e3, 3, padding=1), nn.ReLU())

    def forward(self, x):
        s = self.squeeze(x)
        return torch.cat([self.e1(s), self.e3(s)], 1)


class Tapped(nn.Module):
    """Runs `slices` in order and returns the output of each."""

    def __init__(self, slices):
        super().__init__()
        self.slices = nn.ModuleList(nn.Sequential(*s) for s in slices)

    def forward(self, x):
        taps = []
        for s in self.slices:
            x = s(x)
            taps.append(x)
        return tuple(taps)


def alex():
    c = [8, 24, 48, 32, 32]
    return Tapped([
        [nn.Conv2d(3, c[0], 11, stride=4, padding=2), nn.ReLU()],
        [nn.MaxPool2d(3, 2), nn.Conv2d(c[0], c[1], 5, padding=2), nn.ReLU()],
        [nn.MaxPool2d(3, 2), nn.Conv2d(c[1], c[2], 3, padding=1), nn.ReLU()],
        [nn.Conv2d(c[2], c[3], 3, padding=1), nn.ReLU()],
        [nn.Conv2d(c[3], c[4], 3, padding=1), nn.ReLU()],
    ])


def squeeze():
    pool = lambda: nn.MaxPool2d(3, 2, ceil_mode=True)
    return Tapped([
        [nn.Conv2d(3, 8, 3, stride=2), nn.ReLU()],
        [pool(), Fire(8, 2, 8, 8), Fire(16, 2, 8, 8)],
        [pool(), Fire(16, 4, 16, 16), Fire(32, 4, 16, 16)],
        [pool(), Fire(32, 6, 24, 24)],
        [Fire(48, 6, 24, 24)],
        [Fire(48, 8, 32, 32)],
        [Fire(64, 8, 32, 32)],
    ])


def vgg():
    def block(cin, cout, n, pool):
        layers = [nn.MaxPool2d(2, 2)] if pool else []
        for i in range(n):
            layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.ReLU()]
        return layers

    return Tapped([
        block(3, 8, 2, False),
        block(8, 16, 2, True),
        block(16, 32, 3, True),
        block(32, 64, 3, True),
        block(64, 64, 3, True),
    ])


NETS = {"alex": alex, "squeeze": squeeze, "vgg": vgg}


def init_(net, gen):
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                m.bias.copy_(torch.randn(m.bias.shape, generator=gen) * 0.05)


def export(net, path, taps):
    try:
        import onnx  # noqa: F401
    except ImportError:
        from torch.onnx._internal.torchscript_exporter import onnx_proto_utils

        onnx_proto_utils._add_onnxscript_fn = lambda model_bytes, custom_opsets: model_bytes
    torch.onnx.export(
        net, torch.zeros(1, 3, 64, 64), str(path), dynamo=False, opset_version=13,
        input_names=["input"], output_names=taps,
        dynamic_axes={"input": {2: "h", 3: "w"}},
    )


def png_rgb(path, arr):
    """Minimal 8-bit RGB PNG writer (no external imaging dependency)."""
    h, w, _ = arr.shape
    raw = b"".join(b"\x00" + bytes(arr[y].flatten().tolist()) for y in range(h))

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def image_pair(gen):
    y, x = torch.meshgrid(torch.arange(512.0), torch.arange(512.0), indexing="ij")
    r = 128 + 100 * torch.sin(x / 37.0) * torch.cos(y / 53.0)
    g = 255 * (x + y) / 1022
    b = 128 + 90 * torch.sin((x - 256) * (y - 256) / 9000.0)
    a = torch.stack([r, g, b], -1) + torch.randn(512, 512, 3, generator=gen) * 6
    a = a.round().clamp(0, 255)
    bimg = a.clone()
    bimg[100:228, 300:428] = 128
    bimg = (bimg + torch.randn(512, 512, 3, generator=gen) * 10).round().clamp(0, 255)
    return a.to(torch.uint8), bimg.to(torch.uint8)


def lpips_oracle(net, weights, a, b):
    """Reference distance in float64: scale, run, unit-normalize, weight, average, sum."""
    net = net.double()

    def prep(img):
        x = img.permute(2, 0, 1).unsqueeze(0).double() / 127.5 - 1.0
        return (x - SHIFT) / SCALE

    with torch.no_grad():
        fa, fb = net(prep(a)), net(prep(b))
    total = 0.0
    for ta, tb, w in zip(fa, fb, weights):
        na = ta / (ta.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
        nb = tb / (tb.pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
        d = (na - nb).pow(2) * torch.tensor(w, dtype=torch.float64).view(1, -1, 1, 1)
        total += d.sum(1).mean().item()
    return total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    root = pathlib.Path(__file__).resolve().parent.parent
    ap.add_argument("--out", type=pathlib.Path, default=root / "crates/core/tests/fixtures/lpips")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    gen = torch.Generator().manual_seed(SEED)
    a, b = image_pair(gen)
    png_rgb(args.out / "pair_a.png", a.numpy())
    png_rgb(args.out / "pair_b.png", b.numpy())

    golden = {"seed": SEED, "images": ["pair_a.png", "pair_b.png"], "nets": {}}
    for name, build in NETS.items():
        net = build().eval()
        init_(net, gen)
        taps = [f"{name}_tap{i + 1}" for i in range(len(net.slices))]
        with torch.no_grad():
            shapes = [t.shape[1] for t in net(torch.zeros(1, 3, 64, 64))]
        weights = [torch.rand(c, generator=gen).tolist() for c in shapes]
        model_path = args.out / f"{name}.onnx"
        export(net, model_path, taps)
        cal = {"version": f"fixture-{SEED}", "layers": [{"name": t, "weights": w} for t, w in zip(taps, weights)]}
        cal_path = args.out / f"{name}.calibration.json"
        cal_path.write_text(json.dumps(cal, indent=1) + "\n")
        digest = hashlib.sha256(model_path.read_bytes()).hexdigest()
        spec = {
            "name": name,
            "modelPath": model_path.name,
            "sha256": digest,
            "layers": taps,
            "calibrationPath": cal_path.name,
        }
        (args.out / f"{name}.spec.json").write_text(json.dumps(spec, indent=1) + "\n")
        golden["nets"][name] = {
            "distance": lpips_oracle(net, weights, a, b),
            "identity": lpips_oracle(net, weights, a, a),
        }
        print(name, golden["nets"][name])
    (args.out / "golden.json").write_text(json.dumps(golden, indent=1) + "\n")


if __name__ == "__main__":
    main()
