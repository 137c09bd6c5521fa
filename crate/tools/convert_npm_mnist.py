"""Convert the digit JSON files shipped in the npm `mnist` package into
gzipped IDX files (train: first 80% of each digit, test: the rest).

usage: python3 convert_npm_mnist.py <package/src/digits> <out_dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path

src, out = Path(sys.argv[1]), Path(sys.argv[2])
out.mkdir(parents=True, exist_ok=True)
train, test = [], []
for digit in range(10):
    data = json.loads((src / f"{digit}.json").read_text())["data"]
    n = len(data) // 784
    imgs = [bytes(round(v * 255) for v in data[i * 784:(i + 1) * 784]) for i in range(n)]
    cut = (n * 8) // 10
    train += [(img, digit) for img in imgs[:cut]]
    test += [(img, digit) for img in imgs[cut:]]



def write(prefix, rows):
    with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
        for img, _ in rows:
            f.write(img)
    with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(rows)))
        f.write(bytes(d for _, d in rows))


write("train", train)
write("t10k", test)
print(len(train), len(test))
