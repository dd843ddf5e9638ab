"""Medium-scale probe: does the trained DPF beat BPF/EKF on tracking?"""
import time
import numpy as np

from dvsmc import ssm
from dvsmc.models import DpfModel
from dvsmc.evaluation import build_attractor_prior, tracking_error
from dvsmc.training import TrainConfig, train
from dvsmc.smc import FilterConfig, run_filter
from dvsmc.baselines import ImageEkf, run_bpf

t0 = time.time()
prior = build_attractor_prior()
train_ds = ssm.generate_dataset(256, 8, (0.1, 0.6), 1.0, seed=100)
val_ds = ssm.generate_dataset(8, 64, 0.1, 1.0, seed=200)
print(f"setup {time.time()-t0:.0f}s", flush=True)

model = DpfModel(np.random.default_rng(0), prior=prior)
cfg = TrainConfig(epochs=12, batch_size=32, seed=0,
                  curriculum=[(0, 2), (4, 4), (8, 8)])
t0 = time.time()
report = train(train_ds, model, cfg, val_dataset=val_ds, progress=True)
print(f"train {time.time()-t0:.0f}s objectives={['%.1f' % o for o in report.objectives]}",
      flush=True)

for sv in (0.1, 0.5):
    ds = val_ds.regenerate_observations(seed=300, sigma_v=sv)
    errs = {"dpf": [], "bpf280": [], "ekf": []}
    for i in range(ds.count):
        obs = ds.observations(i)
        truth = ds.states[i, 1:]
        rng = np.random.default_rng([400, i])
        fc = FilterConfig(n_particles=28, resampler="systematic")
        tr = run_filter(obs, model, fc, rng, model.initial_particles(28, rng))
        errs["dpf"].append(tracking_error(tr, truth).mean())
        tr = run_bpf(obs, ds.states[i, 0], 280, np.random.default_rng([401, i]))
        errs["bpf280"].append(tracking_error(tr, truth).mean())
        _, tr = ImageEkf().run(obs, ds.states[i, 0])
        errs["ekf"].append(tracking_error(tr, truth).mean())
    print(f"sigma_v={sv}: " + "  ".join(
        f"{k}={np.mean(v):.2f}" for k, v in errs.items()), flush=True)
print("done", flush=True)
