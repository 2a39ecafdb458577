"""A few epochs of the staged trainer on a small subset, followed by an SNR
sweep of the result. Takes a couple of minutes on one CPU core."""

import sys
import tempfile
from pathlib import Path

import numpy as np

from adaptive_semcom import sweep, toy_config, train
from adaptive_semcom.data import Dataset, ensure_dataset
from adaptive_semcom.train import Stage

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 4
cfg = toy_config(alpha=2e-4, seed=0, subset=512, epoch_scale=1.0, policy_warmup=1,
                 stages=(Stage(epochs, 1e-3),))
out = Path(tempfile.mkdtemp(prefix="semcom-demo-"))
res = train(cfg, out)
for row in res.history:
    print(f"epoch {row['epoch']}  loss {row['loss']:.5f}  psnr {row['mean_psnr']:.2f}  "
          f"cpp {row['mean_cpp']:.3f}  maps {row['mean_c_hat']:.2f}")

ds = Dataset(ensure_dataset(), "test", 64)
images = ds.batch(np.arange(len(ds))).pixels
report = sweep(res.system.eval(), images, snr_grid=(0, 10, 25), frames_per_batch=32)
print(report.to_csv())
print("artifacts in", out)
