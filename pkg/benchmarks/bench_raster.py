"""Compiled vs numpy rasterizer kernels.

Times the hard rasterizer, the soft silhouette (forward and backward) and
the textured render on a posed toy-model sample, for every available
backend, and checks that the backends agree.

    python benchmarks/bench_raster.py [--repeats N] [--size 256]
"""

import argparse
import timeit

import numpy as np

from smalcap.body_model import pose_model
from smalcap.camera import View
from smalcap.render import available_backends, rasterize_hard, rasterize_silhouette, render_textured
from smalcap.synthgen import GenConfig, Generator
from smalcap.toy import make_toy_model


def cases(model, rec, size):
    posed = pose_model(model, rec.scene.theta, rec.scene.shape, rec.scene.gamma)
    v, F = posed.vertices, model.faces
    view = View(rec.scene.focal * size / 640, (size / 2, size / 2), size, size)
    g = np.random.default_rng(0).standard_normal((size, size))

    def hard(b):
        return rasterize_hard(v, F, view, backend=b).mask

    def soft(b):
        return rasterize_silhouette(v, F, view, 0.25, backend=b).silhouette

    def soft_backward(b):
        sil = rasterize_silhouette(v, F, view, 0.25, backend=b)
        return sil.backward(g)[0]

    def textured(b):
        return render_textured(v, F, model.face_uvs, view, rec.atlas, background=np.full(3, 0.5), sigma=0.25,
                               backend=b).color

    return {"hard": hard, "soft": soft, "soft+backward": soft_backward, "textured": textured}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args()
    model = make_toy_model()
    rec = Generator(model, GenConfig()).sample(0)
    backends = available_backends()
    print(f"{model.n_vertices} vertices, {len(model.faces)} faces, {args.size}x{args.size} pixels")
    print(f"{'kernel':<16}" + "".join(f"{b + ' [ms]':>16}" for b in backends) + f"{'speed-up':>10}{'max diff':>10}")
    for name, fn in cases(model, rec, args.size).items():
        times, outs = {}, {}
        for b in backends:
            outs[b] = fn(b)                                  # warm-up, and the value compared
            times[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeats)) * 1e3
        row = f"{name:<16}" + "".join(f"{times[b]:>16.2f}" for b in backends)
        if len(backends) > 1:
            diff = max(np.abs(np.asarray(outs[b], dtype=float) - np.asarray(outs["python"], dtype=float)).max()
                       for b in backends)
            row += f"{times['python'] / times['compiled']:>9.1f}x{diff:>10.1e}"
        print(row)


if __name__ == "__main__":
    main()
