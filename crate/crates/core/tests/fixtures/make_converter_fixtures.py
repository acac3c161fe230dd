"""Regenerates the converter parity fixtures from small PyTorch models.

For each model this writes `<name>.fnet` (network), `<name>.fdst` (an input batch with
labels) and `<name>.logits` (the PyTorch eval-mode logits for that batch). The Rust test
suite only reads the committed files; run this script to refresh them:

    python3 make_converter_fixtures.py
"""

import json
import struct
from pathlib import Path

import torch
from torch import nn

HERE = Path(__file__).resolve().parent


class Residual(nn.Module):
    def __init__(self, main, shortcut=None):
        super().__init__()
        self.main = main
        self.shortcut = shortcut if shortcut is not None else nn.Sequential()

    def forward(self, x):
        return self.main(x) + self.shortcut(x)


def tensors(module, names):
    return [(n, getattr(module, n).detach().to(torch.float32).contiguous()) for n in names]


def block_entries(modules, blob):
    out = []
    for m in modules:
        if isinstance(m, nn.Linear):
            entry = {"kind": "dense", "tensors": tensors(m, ["weight", "bias"])}
        elif isinstance(m, nn.Conv2d):
            entry = {
                "kind": "conv2d",
                "stride": m.stride[0],
                "padding": m.padding[0],
                "tensors": tensors(m, ["weight", "bias"]),
            }
        elif isinstance(m, nn.BatchNorm2d) or isinstance(m, nn.BatchNorm1d):
            named = [
                ("gamma", m.weight),
                ("beta", m.bias),
                ("running_mean", m.running_mean),
                ("running_var", m.running_var),
            ]
            entry = {
                "kind": "batch_norm",
                "eps": m.eps,
                "tensors": [(n, t.detach().to(torch.float32).contiguous()) for n, t in named],
            }
        elif isinstance(m, nn.ReLU):
            entry = {"kind": "relu"}
        elif isinstance(m, nn.AvgPool2d):
            entry = {"kind": "avg_pool", "kernel": m.kernel_size}
        elif isinstance(m, nn.Flatten):
            entry = {"kind": "flatten"}
        elif isinstance(m, Residual):
            entry = {
                "kind": "residual",
                "main": block_entries(m.main, blob),
                "shortcut": block_entries(m.shortcut, blob),
            }
        else:
            raise TypeError(f"unsupported module {type(m).__name__}")
        if "tensors" in entry:
            placed = []
            for name, t in entry["tensors"]:
                data = t.numpy().astype("<f4").tobytes()
                placed.append({"name": name, "shape": list(t.shape), "offset": len(blob), "length": len(data)})
                blob.extend(data)
            entry["tensors"] = placed
        out.append(entry)
    return out


def encode_model(model, input_shape, classes):
    blob = bytearray()
    blocks = block_entries(model, blob)
    manifest = {
        "magic": "FNETv1",
        "input_shape": list(input_shape),
        "class_count": classes,
        "blob_length": len(blob),
        "blocks": blocks,
    }
    return json.dumps(manifest, separators=(",", ":")).encode() + b"\n" + bytes(blob)


def encode_dataset(x, labels, classes):
    out = bytearray(b"FDSTv1")
    out += struct.pack("<I", x.shape[0])
    out += struct.pack("<I", x.dim() - 1)
    for d in x.shape[1:]:
        out += struct.pack("<I", d)
    out += struct.pack("<I", classes)
    out += x.to(torch.float32).numpy().astype("<f4").tobytes()
    for label in labels:
        out += struct.pack("<H", label)
    return bytes(out)


def encode_logits(logits):
    out = bytearray(struct.pack("<II", *logits.shape))
    out += logits.to(torch.float32).numpy().astype("<f4").tobytes()
    return bytes(out)


def randomize_batch_norm(model, gen):
    for m in model.modules():
        if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            c = m.num_features
            with torch.no_grad():
                m.weight.copy_(0.5 + torch.rand(c, generator=gen))
                m.bias.copy_(0.2 * torch.randn(c, generator=gen))
                m.running_mean.copy_(0.2 * torch.randn(c, generator=gen))
                m.running_var.copy_(0.5 + 1.5 * torch.rand(c, generator=gen))


def models():
    yield "mlp_bn", [6], nn.Sequential(
        nn.Linear(6, 8),
        nn.BatchNorm1d(8),
        nn.ReLU(),
        nn.Linear(8, 8),
        nn.BatchNorm1d(8),
        nn.ReLU(),
        nn.Linear(8, 4),
    ), 4
    yield "conv_residual", [1, 4, 4], nn.Sequential(
        nn.Conv2d(1, 4, 3, padding=1),
        nn.BatchNorm2d(4),
        nn.ReLU(),
        Residual(
            nn.Sequential(
                nn.Conv2d(4, 3, 3, padding=1),
                nn.BatchNorm2d(3),
                nn.ReLU(),
                nn.Conv2d(3, 4, 3, padding=1),
                nn.BatchNorm2d(4),
            )
        ),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Flatten(),
        nn.Linear(16, 3),
    ), 3


def main():
    gen = torch.Generator().manual_seed(0)
    torch.manual_seed(0)
    for name, input_shape, model, classes in models():
        randomize_batch_norm(model, gen)
        model.eval()
        x = torch.randn([8, *input_shape], generator=gen)
        labels = torch.randint(0, classes, (8,), generator=gen).tolist()
        # Evaluate in double precision on the f32-rounded weights the FNET file stores.
        reference = model.to(torch.float32).double()
        with torch.no_grad():
            logits = reference(x.to(torch.float32).double())
        model.float()
        (HERE / f"{name}.fnet").write_bytes(encode_model(model, input_shape, classes))
        (HERE / f"{name}.fdst").write_bytes(encode_dataset(x, labels, classes))
        (HERE / f"{name}.logits").write_bytes(encode_logits(logits))


if __name__ == "__main__":
    main()
