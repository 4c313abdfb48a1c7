#!/usr/bin/env python3
"""Export the LPIPS v0.1 networks (alex, squeeze, vgg) for the Rust runtime.

For each network this writes, into --out:

    <net>.onnx               backbone truncated at the LPIPS taps, one graph output per tap
    <net>.calibration.json   the learned per-channel weights of the linear heads
    <net>.spec.json          FeatureNetSpec for experiment configs (includes the ONNX SHA-256)
    golden.json              distances on the pinned image pair from the `lpips` package itself
    PROVENANCE.json          package versions and checksums

    pip install lpips
    python3 tools/export_lpips_models.py --out models/lpips

The backbones are torchvision's ImageNet weights, which torchvision downloads
on first use. --random-backbone skips that download and uses seeded random
backbones with the real linear heads; such an export checks the runtime
against the reference implementation but is not a set of LPIPS models and is
marked as such in PROVENANCE.json.
"""

import argparse
import hashlib
import json
import pathlib

import numpy as np
import torch
from PIL import Image

import lpips

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates/core/tests/fixtures/lpips"
NETS = ["alex", "squeeze", "vgg"]


class Tapped(torch.nn.Module):
    def __init__(self, slices):
        super().__init__()
        self.slices = torch.nn.ModuleList(slices)

    def forward(self, x):
        taps = []
        for s in self.slices:
            x = s(x)
            taps.append(x)
        return tuple(taps)


def load_rgb(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0) / 127.5 - 1.0


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


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=pathlib.Path, default=ROOT / "models/lpips")
    ap.add_argument("--pair", type=pathlib.Path, nargs=2, default=[FIXTURES / "pair_a.png", FIXTURES / "pair_b.png"])
    ap.add_argument("--random-backbone", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    a, b = (load_rgb(p) for p in args.pair)
    golden = {"images": [str(p.name) for p in args.pair], "nets": {}}
    provenance = {
        "lpipsPackage": getattr(lpips, "__version__", "unknown"),
        "torch": torch.__version__,
        "lpipsVersion": "0.1",
        "randomBackbone": args.random_backbone,
        "pairSha256": [sha256(p) for p in args.pair],
        "nets": {},
    }
    for name in NETS:
        torch.manual_seed(args.seed)
        model = lpips.LPIPS(net=name, version="0.1", pretrained=True, pnet_rand=args.random_backbone, verbose=False).eval()
        n = model.net.N_slices
        tapped = Tapped([getattr(model.net, f"slice{i + 1}") for i in range(n)]).eval()
        taps = [f"{name}_tap{i + 1}" for i in range(n)]
        model_path = args.out / f"{name}.onnx"
        export(tapped, model_path, taps)

        weights = [lin.model[-1].weight.detach().flatten().double().tolist() for lin in model.lins]
        cal = {"version": f"lpips-v0.1-{name}", "layers": [{"name": t, "weights": w} for t, w in zip(taps, weights)]}
        cal_path = args.out / f"{name}.calibration.json"
        cal_path.write_text(json.dumps(cal) + "\n")
        spec = {
            "name": name,
            "modelPath": model_path.name,
            "sha256": sha256(model_path),
            "layers": taps,
            "calibrationPath": cal_path.name,
        }
        (args.out / f"{name}.spec.json").write_text(json.dumps(spec, indent=1) + "\n")

        model = model.double()
        with torch.no_grad():
            golden["nets"][name] = {
                "distance": model(a, b).item(),
                "identity": model(a, a).item(),
            }
        provenance["nets"][name] = {"onnxSha256": spec["sha256"], "calibrationSha256": sha256(cal_path)}
        print(name, golden["nets"][name])
    (args.out / "golden.json").write_text(json.dumps(golden, indent=1) + "\n")
    (args.out / "PROVENANCE.json").write_text(json.dumps(provenance, indent=1) + "\n")


if __name__ == "__main__":
    main()
