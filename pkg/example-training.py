""" This is a sample script for using actbench

It chains the tasks of the library on the bundled corpus:

0. It writes the curves of xIELU and xIPReLU for a few values of alpha_n
1. It checks every gradient (input, parameters, continuity, whole model)
2. It trains the toy language model with xIELU, xIPReLU, ReLU² and SwiGLU
3. It prints the final smoothed losses and the learned alphas of each layer

Runs go in `runs/`, use smaller `steps` in `configs/desk.cfg` for a quick look.
"""
import dataclasses
import os

from actbench.activations import ActivationKind
from actbench.task import CurveJob, CurveTask, GradCheckTask
from actbench import trainer


# Curves
print("[Task] Write curves")
jobs = [
    CurveJob(kind, os.path.join("runs", "curves", f"{kind.value}-alpha_n-{alpha_n:g}.csv"), alpha_n=alpha_n)
    for kind in (ActivationKind.XIelu, ActivationKind.XIPRelu)
    for alpha_n in (0.6, 0.8, 2.0)
]
curves = CurveTask(jobs, multiprocess=4, skip_existing=True)
curves.process()

# Checks
print("[Task] Check gradients")
checks = GradCheckTask(list(ActivationKind), seed=0, samples=1000, target=os.path.join("runs", "gradcheck.csv"),
                       multiprocess=4)
if not checks.process():
    for report in checks.failures:
        print(f"FAILED {report.describe()}")
    raise SystemExit(1)

# Training
desk = trainer.load_config(os.path.join("configs", "desk.cfg"))
logs = {}
for activation in ("xielu", "xiprelu", "relu2", "swiglu"):
    print(f"[Task] Train {activation}")
    config = dataclasses.replace(desk, activation=activation)
    logs[activation] = trainer.train(config, out_dir=os.path.join("runs", activation))

for activation, log in logs.items():
    print(f"{activation}\tsmoothed loss {log.smoothed_loss()[-1]:.4f}")
    if log.n_layers:
        last = log.rows[-1]
        for layer, (alpha_p, alpha_n) in enumerate(zip(last.alpha_p, last.alpha_n)):
            print(f"\tlayer {layer}\talpha_p={alpha_p:.4f}\talpha_n={alpha_n:.4f}")
