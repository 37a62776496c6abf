"""Build the MNIST test fixture: IDX files plus a small trained CNN.

The 5000 MNIST digits shipped inside the mlxtend wheel are split into 4000
training and 1000 evaluation images. A five-layer CNN is trained with weight
fake-quantization at a randomly drawn width per layer and step (2, 4, 8 bits or
float), so that post-training quantization at low widths stays usable.

Usage:
    python scripts/build_fixture.py [--wheel PATH] [--out tests/fixtures] [--epochs 40]

Requires torch (``pip install .[train]``).
"""
from __future__ import annotations

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from rvmix.io import save_idx, save_model
from rvmix.model import FloatLayer, FloatModel, float_accuracy

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
SEED = 1234
# per-step width draws (0 = float); 2-bit is drawn most often
WIDTH_DRAWS = [0, 8, 4, 2, 2, 2]


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps",
                    "-d", str(dest)], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def load_digits(wheel: Path) -> tuple[np.ndarray, np.ndarray]:
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1]


def split(images, labels, n_eval=1000, seed=SEED):
    """Stratified shuffle: n_eval/10 evaluation digits per class."""
    rng = np.random.default_rng(seed)
    eval_idx, train_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        eval_idx.extend(idx[:n_eval // 10])
        train_idx.extend(idx[n_eval // 10:])
    eval_idx, train_idx = rng.permutation(eval_idx), rng.permutation(train_idx)
    return (images[train_idx], labels[train_idx]), (images[eval_idx], labels[eval_idx])


def fake_quant(w: torch.Tensor, bits: int) -> torch.Tensor:
    """Min/max affine weight quantization with a straight-through gradient."""
    if bits == 0:
        return w
    lo = torch.clamp(w.min(), max=0.0)
    hi = torch.clamp(w.max(), min=0.0)
    qmax = 2 ** bits - 1
    scale = (hi - lo).clamp(min=1e-8) / qmax
    zp = torch.round(-lo / scale)
    q = torch.clamp(torch.round(w / scale) + zp, 0, qmax)
    return w + ((q - zp) * scale - w).detach()


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(1, 4, 2, stride=2)
        self.c2 = nn.Conv2d(4, 16, 3, stride=2, padding=1)
        self.d1 = nn.Linear(784, 128)
        self.d2 = nn.Linear(128, 32)
        self.d3 = nn.Linear(32, 10)
        self.widths = [0] * 5

    def forward(self, x):
        b = self.widths
        x = F.relu(F.conv2d(x, fake_quant(self.c1.weight, b[0]), self.c1.bias, stride=2))
        x = F.relu(F.conv2d(x, fake_quant(self.c2.weight, b[1]), self.c2.bias, stride=2, padding=1))
        x = x.permute(0, 2, 3, 1).reshape(x.shape[0], -1)  # HWC flattening
        x = F.relu(F.linear(x, fake_quant(self.d1.weight, b[2]), self.d1.bias))
        x = F.relu(F.linear(x, fake_quant(self.d2.weight, b[3]), self.d2.bias))
        return F.linear(x, fake_quant(self.d3.weight, b[4]), self.d3.bias)


def train(x, y, epochs: int, seed=SEED) -> Net:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    xt = torch.tensor(x[:, None] / 255.0, dtype=torch.float32)
    yt = torch.tensor(y)
    for ep in range(epochs):
        perm = torch.randperm(len(xt))
        total = 0.0
        for i in range(0, len(xt), 64):
            idx = perm[i:i + 64]
            # first epochs in float; afterwards a random width per layer and step
            net.widths = [0] * 5 if ep < 3 else [int(rng.choice(WIDTH_DRAWS)) for _ in range(5)]
            loss = F.cross_entropy(net(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        print(f"epoch {ep + 1}/{epochs} loss {total / len(xt):.4f}", file=sys.stderr)
    net.widths = [0] * 5
    return net


def to_float_model(net: Net) -> FloatModel:
    def t(p):
        return p.detach().numpy().astype(np.float64)
    layers = [
        FloatLayer("conv2d", t(net.c1.weight).transpose(0, 2, 3, 1), t(net.c1.bias), 2, 0, 2, True, name="conv1"),
        FloatLayer("conv2d", t(net.c2.weight).transpose(0, 2, 3, 1), t(net.c2.bias), 2, 1, 3, True, name="conv2"),
        FloatLayer("dense", t(net.d1.weight), t(net.d1.bias), relu=True, name="fc1"),
        FloatLayer("dense", t(net.d2.weight), t(net.d2.bias), relu=True, name="fc2"),
        FloatLayer("dense", t(net.d3.weight), t(net.d3.bias), name="fc3"),
    ]
    return FloatModel(layers, (28, 28, 1))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=Path, help="local mlxtend wheel (downloaded if omitted)")
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests" / "fixtures")
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(Path(tmp))
        images, labels = load_digits(wheel)
    (xtr, ytr), (xev, yev) = split(images, labels)
    args.out.mkdir(parents=True, exist_ok=True)
    save_idx(args.out / "train-images-idx3-ubyte.gz", xtr)
    save_idx(args.out / "train-labels-idx1-ubyte.gz", ytr)
    save_idx(args.out / "eval-images-idx3-ubyte.gz", xev)
    save_idx(args.out / "eval-labels-idx1-ubyte.gz", yev)

    net = train(xtr, ytr, args.epochs)
    model = to_float_model(net)
    # round-trip through float32 so the stored accuracy matches what loaders see
    for layer in model.layers:
        layer.weights = layer.weights.astype(np.float32).astype(np.float64)
        layer.bias = layer.bias.astype(np.float32).astype(np.float64)
    model.float_accuracy = float_accuracy(model, xev[..., None], yev)
    save_model(model, args.out / "mnist_cnn.json", num_classes=10)
    print(f"float accuracy on {len(yev)} eval images: {model.float_accuracy:.4f}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
