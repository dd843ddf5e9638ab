import numpy as np

from dvsmc import ssm
from dvsmc.autodiff import values
from dvsmc.evaluation import build_attractor_prior, tracking_error
from dvsmc.models import DpfModel
from dvsmc.smc import FilterConfig, run_filter
from dvsmc.baselines import ImageEkf, run_bpf
from dvsmc.training import TrainConfig, train

prior = build_attractor_prior()
ds = ssm.generate_dataset(128, 8, (0.1, 0.6), 1.0, seed=1)
val = ssm.generate_dataset(8, 64, 0.1, 1.0, seed=2)

def drift_err(model):
    pts = prior.sample(200, np.random.default_rng(5))
    true_next = np.array([ssm.rk4_step(p) for p in pts])
    params = model.transition.transition_params(pts)
    w = np.exp(values(params.logits)); w /= w.sum(1, keepdims=True)
    pred = np.einsum("nk,nkd->nd", w, values(params.means))
    return np.linalg.norm(pred - true_next, axis=1).mean()

def val_errors(model):
    per_axis = np.zeros(3)
    tot = []
    for i in range(val.count):
        obs = val.observations(i)
        truth = val.states[i, 1:]
        rng = np.random.default_rng([40, i])
        fc = FilterConfig(n_particles=28, resampler="systematic")
        tr = run_filter(obs, model, fc, rng, model.initial_particles(28, rng))
        est = np.einsum("tn,tnd->td", tr.weights, tr.particles)
        per_axis += np.abs(est - truth).mean(axis=0) / val.count
        tot.append(tracking_error(tr, truth).mean())
    return np.mean(tot), per_axis

model = DpfModel(np.random.default_rng(0), prior=prior)
print(f"init: drift={drift_err(model):.2f}", flush=True)
cfg = TrainConfig(epochs=60, batch_size=32, seed=0, curriculum=[(0, 8)],
                  learning_rate=3e-4, max_grad_norm=50.0)
report = train(ds, model, cfg, progress=False)
o = report.objectives
print("objectives:", [f"{v:.0f}" for v in o[::6]], flush=True)
tot, ax = val_errors(model)
print(f"after: drift={drift_err(model):.2f} val_total={tot:.2f} "
      f"per-axis |err|: x={ax[0]:.2f} y={ax[1]:.2f} z={ax[2]:.2f}", flush=True)

errs_b, errs_e = [], []
for i in range(val.count):
    obs = val.observations(i)
    truth = val.states[i, 1:]
    tr = run_bpf(obs, val.states[i, 0], 280, np.random.default_rng([41, i]))
    errs_b.append(tracking_error(tr, truth).mean())
    _, tr = ImageEkf().run(obs, val.states[i, 0])
    errs_e.append(tracking_error(tr, truth).mean())
print(f"bpf280={np.mean(errs_b):.2f} ekf={np.mean(errs_e):.2f}", flush=True)
