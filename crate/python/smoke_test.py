"""Builds the extension, trains a tiny link predictor and checks a few outputs."""

import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build() -> Path:
    subprocess.run(["cargo", "build", "-p", "rgat-python"], cwd=ROOT, check=True)
    lib = ROOT / "target" / "debug" / "librgat_py.so"
    if not lib.exists():
        sys.exit(f"missing {lib}")
    return lib


def main() -> None:
    lib = build()
    work = Path(tempfile.mkdtemp(prefix="rgat-smoke-"))
    try:
        shutil.copy(lib, work / "rgat_py.so")
        sys.path.insert(0, str(work))
        import rgat_py

        data = work / "data"
        sizes = rgat_py.generate_synthetic(str(data), aspects=2, relations_per_aspect=2,
                                           entities=40, groups=4, density=0.1, seed=3)
        assert sizes[0] > 0, sizes

        cfg = work / "run.cfg"
        cfg.write_text(
            "[run]\nseed = 7\n"
            "[data]\ntrain = data/train.txt\nvalid = data/valid.txt\ntest = data/test.txt\n"
            "[model]\nchannels = 2\nentity_dim = 8\nrelation_dim = 8\nhidden_dim = 8\n"
            "[optim]\nlr = 0.01\nepochs = 5\n"
            "[eval]\nevery = 5\npatience = 0\n"
        )
        model = rgat_py.LinkPredictor.train(str(cfg))
        metrics = model.evaluate("test")
        assert 0.0 < metrics["mrr"] <= 1.0, metrics
        assert "\ttrain_loss\t" in model.metrics_log

        subject = model.entity_names[0]
        relation = model.relation_names[0]
        beta = model.beta(subject, relation)
        assert len(beta) == 2 and abs(sum(beta) - 1.0) < 1e-9, beta
        assert len(model.score(subject, relation)) == len(model.entity_names)
        assert "Channel" in model.top_facts(subject, relation, 2, 2)

        ckpt = work / "model.ckpt"
        model.save(str(ckpt))
        again = rgat_py.LinkPredictor.load(str(cfg), str(ckpt))
        assert again.evaluate("test") == metrics

        assert rgat_py.filtered_rank([0.1, 0.9, 0.5], 2, [1]) == 1
        print("OK", metrics)
    finally:
        shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    os.environ.setdefault("RUST_LOG", "warn")
    main()
